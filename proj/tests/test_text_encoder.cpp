#include "despos/text_encoder.hpp"
#include "fixtures.hpp"
#include "gradcheck.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <set>

using namespace despos;
using namespace despos::testing;

namespace {

const Vocabulary& vocab() {
  static const Vocabulary v = Vocabulary::from_palette(default_palette());
  return v;
}

void scramble(const ParamList& ps, std::uint64_t seed) {
  for (Parameter* p : ps) p->value = random_mat(p->value.rows(), p->value.cols(), ++seed, 0.4);
}

}  // namespace

TEST(Tokenize, GrammarSentence) {
  const TokenSeq t = tokenize({"The pose is west of a black garage."}, vocab());
  ASSERT_EQ(t.ids.size(), 9u);
  EXPECT_EQ(t.sentence_ends, (std::vector<Eigen::Index>{9}));
  EXPECT_EQ(t.ids[0], vocab().id("the"));
  EXPECT_EQ(t.ids[3], vocab().id("west"));
  EXPECT_EQ(t.ids[8], vocab().id("."));
  for (int id : t.ids) {
    EXPECT_NE(id, Vocabulary::kUnknown);
    EXPECT_LT(id, vocab().size());
  }
  EXPECT_EQ(tokenize({"The pose is west of a black garage."}, vocab()).ids, t.ids);
}

TEST(Tokenize, UnknownWordsAndBoundaries) {
  const TokenSeq t = tokenize({"The pose is near a zebra.", "", "The pose is on-top of a red car."}, vocab());
  EXPECT_EQ(t.ids[3], Vocabulary::kUnknown);
  EXPECT_EQ(t.ids[5], Vocabulary::kUnknown);
  ASSERT_EQ(t.sentence_ends.size(), 2u);
  EXPECT_EQ(t.sentence_ends[0], 7);
  EXPECT_EQ(t.sentence_ends[1], 16);
  EXPECT_EQ(t.ids[7 + 3], vocab().id("on-top"));
}

TEST(Vocabulary, FromPaletteCoversEveryGrammarSentence) {
  for (const std::string& s : enumerate_sentences(default_palette())) {
    for (int id : tokenize({s}, vocab()).ids) ASSERT_NE(id, Vocabulary::kUnknown) << s;
  }
  const auto all = enumerate_sentences(default_palette());
  EXPECT_EQ(std::set<std::string>(all.begin(), all.end()).size(), all.size());
}

TEST(Teacher, DeterministicUnitNorm) {
  RandomTransformerTeacher a(vocab(), 64, 7), b(vocab(), 64, 7), c(vocab(), 64, 8);
  const std::string s = "The pose is west of a black garage.";
  EXPECT_EQ(a.embed(s), b.embed(s));
  EXPECT_NEAR(a.embed(s).norm(), 1.0, 1e-6);
  EXPECT_NE(a.embed(s), c.embed(s));
  EXPECT_NE(a.embed(s), a.embed("The pose is east of a black garage."));
}

TEST(DistillLoss, ClosedForms) {
  RowVec u(3), v(3), w(3);
  u << 3, 4, 0;
  v << 0, 0, 2;
  w << -3, -4, 0;
  EXPECT_EQ(distill_loss(u, u), 0.0);
  EXPECT_EQ(distill_loss(u, v), 1.0);
  EXPECT_EQ(distill_loss(u, w), 2.0);
  Graph g;
  EXPECT_EQ(distill_loss(g.constant(u), g.constant(u)).scalar(), 0.0);
  EXPECT_EQ(distill_loss(g.constant(u), g.constant(v)).scalar(), 1.0);
  EXPECT_EQ(distill_loss(g.constant(u), g.constant(w)).scalar(), 2.0);
  EXPECT_THROW(distill_loss(u, RowVec::Zero(3)), std::domain_error);
}

TEST(DistillLoss, SymmetricAndScaleInvariant) {
  for (int k = 0; k < 20; ++k) {
    const RowVec a = random_mat(1, 16, 10 + k), b = random_mat(1, 16, 50 + k);
    const double base = distill_loss(a, b);
    EXPECT_NEAR(distill_loss(b, a), base, 1e-15);
    EXPECT_NEAR(distill_loss(RowVec(2.5 * a), RowVec(0.01 * b)), base, 1e-12);
  }
}

TEST(SteModel, BackboneShapesAndSeeds) {
  SteModel m(tiny_text(), vocab(), 3), n(tiny_text(), vocab(), 4);
  const TokenSeq t = tokenize({"The pose is west of a black garage.", "The pose is north of a red car."}, vocab());
  const Mat f = m.backbone_encode(t);
  EXPECT_EQ(f.rows(), static_cast<Eigen::Index>(t.ids.size()));
  EXPECT_EQ(f.cols(), tiny_text().width);
  EXPECT_FALSE(f.isApprox(n.backbone_encode(t)));
  EXPECT_TRUE(m.embedding.frozen);
  EXPECT_FALSE(m.prior_mlp.first.weight.frozen);
}

TEST(SteModel, BackboneEncodesSentencesIndependently) {
  SteModel m(tiny_text(), vocab(), 3);
  const std::string a = "The pose is west of a black garage.", b = "The pose is north of a red car.";
  const Mat joint = m.backbone_encode(tokenize({a, b}, vocab()));
  const Mat first = m.backbone_encode(tokenize({a}, vocab()));
  EXPECT_LT((joint.topRows(first.rows()) - first).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(PriorHead, UnitNormAndSingleToken) {
  SteModel m(tiny_text(), vocab(), 5);
  const Mat f = random_mat(6, tiny_text().width, 1);
  Graph g;
  EXPECT_NEAR(m.prior_head(g, g.constant(f)).value().norm(), 1.0, 1e-6);

  // With one token the max is that token's projected vector.
  Graph g1;
  Var x = g1.constant(f.topRows(1));
  Var y = x;
  for (const TransformerLayer& l : m.prior_layers) y = l(g1, y);
  Mat proj = m.prior_mlp(g1, y).value();
  proj /= proj.norm();
  Graph g2;
  EXPECT_LT((m.prior_head(g2, g2.constant(f.topRows(1))).value() - proj).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(AlignmentHead, UnitNormWidthAndOrderSensitivity) {
  SteModel m(TextEncoderConfig{}, vocab(), 6);
  SentenceCache cache(m);
  const std::vector<std::string> hints{"The pose is west of a black garage.", "The pose is north of a red car.",
                                       "The pose is east of a green tree."};
  const QueryFeatures q = cache.query(hints);
  Graph g;
  const Mat d = m.alignment_head(g, g.constant(q.tokens), q.sentence_ends, g.constant(q.priors)).value();
  EXPECT_EQ(d.cols(), 256);
  EXPECT_NEAR(d.norm(), 1.0, 1e-6);
  const QueryFeatures r = cache.query({hints[2], hints[0], hints[1]});
  Graph g2;
  const Mat e = m.alignment_head(g2, g2.constant(r.tokens), r.sentence_ends, g2.constant(r.priors)).value();
  EXPECT_GT((d - e).cwiseAbs().maxCoeff(), 1e-6);
}

class TextHeadGradient : public ::testing::TestWithParam<int> {};

TEST_P(TextHeadGradient, PriorHeadMatchesFiniteDifferences) {
  const int seed = GetParam();
  SteModel m(tiny_text(), vocab(), static_cast<std::uint64_t>(seed));
  ParamList ps;
  m.collect_prior(ps);
  scramble(ps, 100 + seed);
  const Mat f = random_mat(5, tiny_text().width, 200 + seed);
  const Mat teacher = random_mat(1, tiny_text().prior_dim, 300 + seed);
  const auto r = check_gradients(
      ps, [&](Graph& g) { return distill_loss(m.prior_head(g, g.constant(f)), g.constant(teacher)); });
  EXPECT_GT(r.checked, 100);
  EXPECT_LT(r.worst, 1e-4) << r.where;
}

TEST_P(TextHeadGradient, AlignmentHeadMatchesFiniteDifferences) {
  const int seed = GetParam();
  SteModel m(tiny_text(), vocab(), static_cast<std::uint64_t>(seed));
  ParamList ps;
  m.collect_alignment(ps);
  scramble(ps, 400 + seed);
  const Mat f = random_mat(7, tiny_text().width, 500 + seed);
  const Mat priors = random_mat(2, tiny_text().prior_dim, 600 + seed);
  const Mat target = random_mat(1, tiny_text().out_dim, 700 + seed);
  const auto r = check_gradients(ps, [&](Graph& g) {
    return sum(mul(m.alignment_head(g, g.constant(f), {3, 7}, g.constant(priors)), g.constant(target)));
  });
  EXPECT_GT(r.checked, 100);
  EXPECT_LT(r.worst, 1e-4) << r.where;
}

INSTANTIATE_TEST_SUITE_P(Seeds, TextHeadGradient, ::testing::Values(1, 2, 3));
