#include "despos/training.hpp"

#include "despos/errors.hpp"
#include "despos/parallel.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace despos {

namespace {

// Samples are reduced in fixed-size chunks, summed in chunk order, so results
// do not depend on the number of worker threads.
constexpr std::size_t kChunk = 8;

void emit(const Logger& log, const std::string& msg) {
  if (log) log(msg);
}

std::string fmt(double v) {
  std::ostringstream ss;
  ss.precision(6);
  ss << v;
  return ss.str();
}

const Submap& submap_by_id(const World& w, int id) {
  if (id >= 0 && static_cast<std::size_t>(id) < w.submaps.size() && w.submaps[id].id == id) return w.submaps[id];
  for (const Submap& s : w.submaps) {
    if (s.id == id) return s;
  }
  throw DataError("unknown submap id " + std::to_string(id));
}

std::vector<std::size_t> shuffled(std::size_t n, std::uint64_t seed) {
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  return order;
}

std::uint64_t epoch_seed(const TrainConfig& c, int epoch) {
  return c.seed * 1000003ULL + static_cast<std::uint64_t>(epoch) * 7919ULL + static_cast<std::uint64_t>(c.phase);
}

// Runs `sample(i, graph_sum)` for every member of a batch and returns the
// chunk-ordered gradient sum.
GradientSum batch_gradients(const ParamList& trainable, std::size_t count,
                            const std::function<void(std::size_t, GradientSum&)>& sample) {
  const std::size_t chunks = (count + kChunk - 1) / kChunk;
  std::vector<GradientSum> partial(chunks, GradientSum(trainable));
  parallel_for(chunks, [&](std::size_t c) {
    for (std::size_t i = c * kChunk; i < std::min(count, (c + 1) * kChunk); ++i) sample(i, partial[c]);
  });
  GradientSum total(trainable);
  for (const GradientSum& p : partial) total.add(p);
  return total;
}

ParamList collect_with(const std::function<void(ParamList&)>& f) {
  ParamList out;
  f(out);
  return out;
}

// Byte image of every frozen parameter; compared after the phase.
struct FrozenGuard {
  ConstParamList frozen;
  std::string before;

  explicit FrozenGuard(const Model& m) {
    for (const Parameter* p : m.params()) {
      if (p->frozen) frozen.push_back(p);
    }
    before = parameter_bytes(frozen);
  }
  void verify(const std::string& phase) const {
    if (parameter_bytes(frozen) != before) {
      throw std::logic_error(phase + ": a frozen parameter changed during training");
    }
  }
};

void finish_phase(Checkpoint& ckpt, const TrainConfig& config, Phase phase, std::vector<double> history) {
  ckpt.config = config;
  ckpt.epoch = config.epochs;
  ckpt.loss_history = std::move(history);
  ckpt.phases.erase(std::remove(ckpt.phases.begin(), ckpt.phases.end(), std::string(to_string(phase))),
                    ckpt.phases.end());
  ckpt.phases.emplace_back(to_string(phase));
  ckpt.flags.clear();
  if (!non_increasing(ckpt.loss_history, 1e-3)) {
    ckpt.flags.push_back(std::string(to_string(phase)) + ": loss history not monotone non-increasing (tol 1e-3)");
  }
}

}  // namespace

double contrastive_loss(const Mat& pc, const Mat& text, double tau) {
  Graph g;
  return contrastive_loss(g.constant(pc), g.constant(text), tau).scalar();
}

Var contrastive_loss(Var pc, Var text, double tau) {
  if (!(tau > 0.0)) throw std::invalid_argument("contrastive_loss: temperature must be > 0");
  if (pc.rows() != text.rows() || pc.cols() != text.cols() || pc.rows() < 1) {
    throw std::invalid_argument("contrastive_loss: batches must be non-empty and of equal shape");
  }
  const double b = static_cast<double>(pc.rows());
  Var logits = scale(matmul_nt(pc, text), 1.0 / tau);
  Var pc_to_text = trace(log_softmax_rows(logits));
  Var text_to_pc = trace(log_softmax_rows(transpose(logits)));
  return scale(add(pc_to_text, text_to_pc), -0.5 / b);
}

GradientSum::GradientSum(const ParamList& params) : params_(params) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    slot_[params_[i]] = i;
    grads_.push_back(Mat::Zero(params_[i]->value.rows(), params_[i]->value.cols()));
  }
}

void GradientSum::add(const Graph& g, double weight) {
  g.visit_gradients([&](const Parameter* p, const Mat* grad) {
    if (!grad) return;
    auto it = slot_.find(p);
    if (it != slot_.end()) grads_[it->second] += weight * *grad;
  });
}

void GradientSum::add(const GradientSum& other) {
  for (std::size_t i = 0; i < grads_.size(); ++i) grads_[i] += other.grads_[i];
}

void GradientSum::clear() {
  for (Mat& m : grads_) m.setZero();
}

Optimizer::Optimizer(const TrainConfig& c, ParamList params)
    : adam_(c.optimizer == "adam"), lr_(c.learning_rate), momentum_(c.momentum), params_(std::move(params)) {
  for (const Parameter* p : params_) {
    m_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
    if (adam_) v_.push_back(Mat::Zero(p->value.rows(), p->value.cols()));
  }
}

void Optimizer::step(const std::vector<Mat>& grads) {
  if (grads.size() != params_.size()) throw std::invalid_argument("Optimizer::step: gradient count mismatch");
  ++step_count_;
  constexpr double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(step_count_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(step_count_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    Parameter& p = *params_[i];
    if (p.frozen) throw std::logic_error("Optimizer::step: parameter " + p.name + " is frozen");
    if (adam_) {
      m_[i] = b1 * m_[i] + (1.0 - b1) * grads[i];
      v_[i] = b2 * v_[i] + (1.0 - b2) * grads[i].cwiseProduct(grads[i]);
      p.value.array() -= lr_ * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + eps);
    } else {
      m_[i] = momentum_ * m_[i] + grads[i];
      p.value -= lr_ * m_[i];
    }
    round_to_float(p.value);
  }
}

Var encode_query(Graph& g, const SteModel& text, const QueryFeatures& q) {
  return text.alignment_head(g, g.constant(q.tokens), q.sentence_ends, g.constant(q.priors));
}

std::vector<std::vector<std::size_t>> distinct_key_batches(const std::vector<std::size_t>& order,
                                                           const std::vector<int>& keys, std::size_t batch_size) {
  std::vector<std::vector<std::size_t>> batches;
  std::vector<std::size_t> pending = order;
  while (!pending.empty()) {
    std::vector<std::size_t> batch;
    std::vector<std::size_t> rest;
    std::vector<int> used;
    for (std::size_t idx : pending) {
      const int key = keys[idx];
      if (batch.size() < batch_size && std::find(used.begin(), used.end(), key) == used.end()) {
        batch.push_back(idx);
        used.push_back(key);
      } else {
        rest.push_back(idx);
      }
    }
    batches.push_back(std::move(batch));
    pending = std::move(rest);
  }
  return batches;
}

bool non_increasing(const std::vector<double>& values, double tol) {
  for (std::size_t i = 1; i < values.size(); ++i) {
    if (values[i] > values[i - 1] + tol) return false;
  }
  return true;
}

Checkpoint train_ste_stage1(const TrainConfig& config, const std::vector<std::string>& sentences,
                            const TeacherEmbedder& teacher, Checkpoint ckpt, const Logger& log) {
  if (sentences.empty()) throw DataError("train_ste_stage1: no sentences");
  Model& model = ckpt.model;
  ParamList all = model.params();
  set_frozen(all, true);
  ParamList trainable = collect_with([&](ParamList& out) { model.text.collect_prior(out); });
  set_frozen(trainable, false);
  FrozenGuard guard(model);

  std::vector<Mat> features;
  std::vector<Eigen::RowVectorXd> targets;
  for (const std::string& s : sentences) {
    features.push_back(model.text.backbone_encode(tokenize({s}, model.vocab)));
    targets.push_back(teacher.embed(s));
  }
  if (targets.front().size() != model.config.text.prior_dim) {
    throw DataError("teacher dimension " + std::to_string(targets.front().size()) + " != prior_dim " +
                    std::to_string(model.config.text.prior_dim));
  }

  auto mean_loss = [&] {
    std::vector<double> losses(sentences.size());
    parallel_for(sentences.size(), [&](std::size_t i) {
      Graph g;
      losses[i] = distill_loss(model.text.prior_head(g, g.constant(features[i])).value(), targets[i]);
    });
    return std::accumulate(losses.begin(), losses.end(), 0.0) / static_cast<double>(losses.size());
  };

  const std::size_t batch = std::min<std::size_t>(config.batch_size, sentences.size());
  if (batch < static_cast<std::size_t>(config.batch_size)) {
    emit(log, "warning: batch_size clamped to " + std::to_string(batch));
  }
  Optimizer opt(config, trainable);
  std::vector<double> history;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = shuffled(sentences.size(), epoch_seed(config, epoch));
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t count = std::min(batch, order.size() - start);
      GradientSum grads = batch_gradients(trainable, count, [&](std::size_t i, GradientSum& out) {
        const std::size_t s = order[start + i];
        Graph g;
        Var student = model.text.prior_head(g, g.constant(features[s]));
        g.backward(distill_loss(student, g.constant(targets[s])));
        out.add(g, 1.0 / static_cast<double>(count));
      });
      opt.step(grads.grads());
    }
    history.push_back(mean_loss());
    emit(log, "ste1 epoch " + std::to_string(epoch + 1) + " loss " + fmt(history.back()));
  }
  set_frozen(trainable, true);
  guard.verify("ste1");
  finish_phase(ckpt, config, Phase::Ste1, history);
  ckpt.metrics = {{"mean_cosine", 1.0 - history.back()}, {"sentences", static_cast<double>(sentences.size())}};
  return ckpt;
}

Checkpoint train_coarse(const TrainConfig& config, const Dataset& data, Checkpoint ckpt, const Logger& log) {
  if (!ckpt.has_phase(Phase::Ste1)) throw DataError("train_coarse: checkpoint has no stage-1 text encoder");
  Model& model = ckpt.model;
  if (config.model.pc != model.config.pc) {
    model.config.pc = config.model.pc;
    model.pc = PcEncoder(config.model.pc, model.seed * 4 + 1);
  }
  ParamList all = model.params();
  set_frozen(all, true);
  ParamList trainable = collect_with([&](ParamList& out) {
    model.pc.collect(out);
    model.text.collect_alignment(out);
  });
  set_frozen(trainable, false);
  FrozenGuard guard(model);

  const std::vector<TextQuery> queries = select_split(data.queries, "train");
  if (queries.empty()) throw DataError("train_coarse: dataset has no queries");
  std::vector<int> positives;
  for (const TextQuery& q : queries) positives.push_back(q.positive_submap_id);
  std::size_t distinct = positives.size();
  {
    std::vector<int> sorted = positives;
    std::sort(sorted.begin(), sorted.end());
    distinct = static_cast<std::size_t>(std::unique(sorted.begin(), sorted.end()) - sorted.begin());
  }
  std::size_t batch = static_cast<std::size_t>(config.batch_size);
  if (batch > queries.size()) {
    batch = queries.size();
    emit(log, "warning: batch_size clamped to " + std::to_string(batch) + " (dataset size)");
  }
  if (batch > distinct) {
    batch = distinct;
    emit(log, "warning: batch_size clamped to " + std::to_string(batch) + " (distinct positive submaps)");
  }

  SentenceCache cache(model.text);
  Optimizer opt(config, trainable);
  std::vector<double> history;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto batches = distinct_key_batches(shuffled(queries.size(), epoch_seed(config, epoch)), positives, batch);
    double epoch_loss = 0.0;
    std::size_t counted = 0;
    for (const auto& members : batches) {
      const std::size_t b = members.size();
      if (b < 2) continue;  // a single pair carries no contrastive signal
      std::vector<QueryFeatures> feats;
      for (std::size_t idx : members) feats.push_back(cache.query(queries[idx].hints));

      std::vector<std::unique_ptr<Graph>> graphs(b);
      std::vector<Var> pc_out(b), text_out(b);
      parallel_for(b, [&](std::size_t i) {
        graphs[i] = std::make_unique<Graph>();
        Graph& g = *graphs[i];
        pc_out[i] = model.pc.encode_submap(g, submap_by_id(data.world, queries[members[i]].positive_submap_id));
        text_out[i] = encode_query(g, model.text, feats[i]);
      });
      Mat pcm(b, pc_out[0].cols()), txm(b, text_out[0].cols());
      for (std::size_t i = 0; i < b; ++i) {
        pcm.row(i) = pc_out[i].value();
        txm.row(i) = text_out[i].value();
      }
      Graph lg;
      Var pn = lg.input(pcm), tn = lg.input(txm);
      Var loss = contrastive_loss(pn, tn, config.temperature);
      lg.backward(loss);
      const Mat gp = lg.grad(pn), gt = lg.grad(tn);

      GradientSum grads = batch_gradients(trainable, b, [&](std::size_t i, GradientSum& out) {
        Graph& g = *graphs[i];
        Var seed = add(sum(mul(pc_out[i], g.constant(gp.row(i)))), sum(mul(text_out[i], g.constant(gt.row(i)))));
        g.backward(seed);
        out.add(g);
        graphs[i].reset();
      });
      opt.step(grads.grads());
      epoch_loss += loss.scalar();
      ++counted;
    }
    history.push_back(counted ? epoch_loss / static_cast<double>(counted) : 0.0);
    emit(log, "coarse epoch " + std::to_string(epoch + 1) + " loss " + fmt(history.back()));
  }
  set_frozen(trainable, true);
  guard.verify("coarse");
  finish_phase(ckpt, config, Phase::Coarse, history);
  ckpt.metrics = {{"batch_size", static_cast<double>(batch)}, {"train_pairs", static_cast<double>(queries.size())}};
  return ckpt;
}

Checkpoint train_fine(const TrainConfig& config, const Dataset& data, Checkpoint ckpt, const Logger& log) {
  if (!ckpt.has_phase(Phase::Coarse)) throw DataError("train_fine: checkpoint has no coarse stage");
  Model& model = ckpt.model;
  if (config.model.fine != model.config.fine) {
    model.config.fine = config.model.fine;
    model.fine = FineLocalizer(config.model.fine, model.config.text, model.config.pc, model.seed * 4 + 3);
  }
  ParamList all = model.params();
  set_frozen(all, true);
  ParamList trainable = collect_with([&](ParamList& out) { model.fine.collect(out); });
  set_frozen(trainable, false);
  FrozenGuard guard(model);

  std::vector<TextQuery> queries;
  for (const TextQuery& q : select_split(data.queries, "train")) {
    if (!submap_by_id(data.world, q.positive_submap_id).instances.empty()) queries.push_back(q);
  }
  if (queries.empty()) throw DataError("train_fine: no queries with a non-empty positive submap");

  std::vector<SubmapSequence> sequences(data.world.submaps.size());
  parallel_for(sequences.size(), [&](std::size_t i) {
    if (!data.world.submaps[i].instances.empty()) sequences[i] = submap_sequence(model.pc, data.world.submaps[i]);
  });
  auto sequence_of = [&](int id) -> const SubmapSequence& {
    const Submap& s = submap_by_id(data.world, id);
    return sequences[static_cast<std::size_t>(&s - data.world.submaps.data())];
  };

  double baseline = 0.0;
  for (const TextQuery& q : queries) {
    baseline += fine_loss(submap_by_id(data.world, q.positive_submap_id).center, q.pose_gt);
  }
  baseline /= static_cast<double>(queries.size());

  std::size_t batch = static_cast<std::size_t>(config.batch_size);
  if (batch > queries.size()) {
    batch = queries.size();
    emit(log, "warning: batch_size clamped to " + std::to_string(batch));
  }
  SentenceCache cache(model.text);
  Optimizer opt(config, trainable);
  std::vector<double> history;
  for (int epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = shuffled(queries.size(), epoch_seed(config, epoch));
    double epoch_error = 0.0;
    for (std::size_t start = 0; start < order.size(); start += batch) {
      const std::size_t count = std::min(batch, order.size() - start);
      std::vector<QueryFeatures> feats;
      for (std::size_t i = 0; i < count; ++i) feats.push_back(cache.query(queries[order[start + i]].hints));
      std::vector<double> errors(count);
      GradientSum grads = batch_gradients(trainable, count, [&](std::size_t i, GradientSum& out) {
        const TextQuery& q = queries[order[start + i]];
        const Submap& sub = submap_by_id(data.world, q.positive_submap_id);
        const SubmapSequence& seq = sequence_of(sub.id);
        Graph g;
        Var t = model.fine.text_sequence(g, feats[i]);
        Var n = model.fine.pc_sequence(g, g.constant(seq.hidden), seq.relative_xy);
        Var pred = model.fine.predict_offset(g, model.fine.cra_fuse(g, t, n));
        Mat gt(1, 2);
        gt << q.pose_gt.x - sub.center.x, q.pose_gt.y - sub.center.y;
        Var loss = fine_loss(pred, g.constant(gt));
        errors[i] = loss.scalar();
        g.backward(loss);
        out.add(g, 1.0 / static_cast<double>(count));
      });
      opt.step(grads.grads());
      for (double e : errors) epoch_error += e;
    }
    history.push_back(epoch_error / static_cast<double>(queries.size()));
    emit(log, "fine epoch " + std::to_string(epoch + 1) + " error " + fmt(history.back()) + " m (center baseline " +
                  fmt(baseline) + " m)");
  }
  set_frozen(trainable, true);
  guard.verify("fine");
  finish_phase(ckpt, config, Phase::Fine, history);
  ckpt.metrics = {{"final_train_error", history.back()}, {"center_baseline_error", baseline}};
  return ckpt;
}

}  // namespace despos
