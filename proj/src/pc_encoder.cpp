#include "despos/pc_encoder.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numeric>
#include <random>
#include <string>
#include <tuple>

namespace despos {

namespace {

constexpr std::array<int, 3> kConvWidths{1, 3, 5};

Parameter make_param(const std::string& name, Mat value) {
  Parameter p;
  p.name = name;
  p.value = std::move(value);
  return p;
}

// Column means summed in sorted order, so they do not depend on point order.
RowVec order_free_mean(const Eigen::MatrixX3d& m) {
  RowVec out(m.cols());
  std::vector<double> col(static_cast<std::size_t>(m.rows()));
  for (Eigen::Index c = 0; c < m.cols(); ++c) {
    for (Eigen::Index r = 0; r < m.rows(); ++r) col[static_cast<std::size_t>(r)] = m(r, c);
    std::sort(col.begin(), col.end());
    double total = 0.0;
    for (double v : col) total += v;
    out(c) = total / static_cast<double>(m.rows());
  }
  return out;
}

}  // namespace

std::vector<int> order_instances(const Submap& submap) {
  if (submap.instances.empty()) throw DataError("empty submap has no instance order");
  std::vector<int> order(submap.instances.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    const auto& ca = submap.instances[static_cast<std::size_t>(a)].centroid;
    const auto& cb = submap.instances[static_cast<std::size_t>(b)].centroid;
    if (ca.x() != cb.x()) return ca.x() < cb.x();
    if (ca.y() != cb.y()) return ca.y() < cb.y();
    return ca.z() < cb.z();
  });
  return order;
}

std::vector<Eigen::Index> strided_indices(Eigen::Index length, int stride) {
  std::vector<Eigen::Index> out;
  for (Eigen::Index t = 0; t < length; t += std::max(stride, 1)) out.push_back(t);
  return out;
}

InstanceInputs instance_inputs(const Submap& submap) {
  InstanceInputs in;
  in.order = order_instances(submap);
  const auto n = static_cast<Eigen::Index>(in.order.size());
  in.relative_centroids.resize(n, 3);
  in.mean_colors.resize(n, 3);
  in.log_density.resize(n, 1);
  const double half = submap.side / 2.0;
  for (Eigen::Index r = 0; r < n; ++r) {
    const PointInstance& inst = submap.instances[static_cast<std::size_t>(in.order[static_cast<std::size_t>(r)])];
    in.relative_centroids.row(r) << (inst.centroid.x() - submap.center.x) / half,
        (inst.centroid.y() - submap.center.y) / half, inst.centroid.z() / kWorldHeight;
    in.mean_colors.row(r) = order_free_mean(inst.colors);
    in.log_density(r, 0) = 0.25 * std::log(inst.density);
  }
  return in;
}

PcEncoder::PcEncoder(const PcEncoderConfig& c, std::uint64_t seed) : config_(c) {
  std::mt19937_64 rng(seed);
  point_mlp = Mlp("pc.point_mlp", 3, c.point_hidden, c.point_out, rng, true);
  aggregator = Linear("pc.aggregator", c.point_out, c.aggregate, rng);
  color_mlp = Mlp("pc.color_mlp", 3, c.color_dim, c.color_dim, rng, true);
  position_mlp = Mlp("pc.position_mlp", 3, c.position_dim, c.position_dim, rng, true);
  density_mlp = Mlp("pc.density_mlp", 1, c.density_dim, c.density_dim, rng, true);
  fusion = Linear("pc.fusion", c.aggregate + c.color_dim + c.position_dim + c.density_dim, c.d_model, rng);
  for (std::size_t s = 0; s < kConvWidths.size(); ++s) {
    const std::string tag = "pc.mfam.k" + std::to_string(kConvWidths[s]);
    for (int j = 0; j < kConvWidths[s]; ++j) {
      // Each tap is a d_model x d_model slice of one kernel with fan-in w * d_model.
      Mat w = glorot_uniform(c.d_model, c.d_model, rng) / std::sqrt(static_cast<double>(kConvWidths[s]));
      round_to_float(w);
      conv_kernels[s].push_back(make_param(tag + ".tap" + std::to_string(j), std::move(w)));
    }
    conv_bias[s] = make_param(tag + ".bias", Mat::Zero(1, c.d_model));
    attn_query[s] = make_param(tag + ".attn.q", glorot_uniform(c.d_model, c.d_k, rng));
    attn_key[s] = make_param(tag + ".attn.k", glorot_uniform(c.d_model, c.d_k, rng));
    attn_value[s] = make_param(tag + ".attn.v", glorot_uniform(c.d_model, c.d_model, rng));
  }
  for (auto [w, tag] : {std::pair{&lstm_forward, "fwd"}, std::pair{&lstm_backward, "bwd"}}) {
    w->weight = make_param(std::string("pc.lstm.") + tag + ".weight",
                           glorot_uniform(c.d_h + c.d_model, 4 * c.d_h, rng));
    Mat bias = Mat::Zero(1, 4 * c.d_h);
    bias.leftCols(c.d_h).setOnes();  // forget gate starts open
    w->bias = make_param(std::string("pc.lstm.") + tag + ".bias", bias);
  }
  projection = Linear("pc.projection", 2 * c.d_h, c.out_dim, rng);
  Mat null = glorot_uniform(1, c.out_dim, rng);
  null_vector = make_param("pc.null_descriptor", null);
}

Var PcEncoder::encode_instances(Graph& g, const Submap& submap) const {
  const InstanceInputs in = instance_inputs(submap);
  const auto n = static_cast<Eigen::Index>(in.order.size());

  Eigen::Index total = 0;
  for (int idx : in.order) total += submap.instances[static_cast<std::size_t>(idx)].points.rows();
  Mat pts(total, 3);
  std::vector<Eigen::Index> starts;
  starts.reserve(static_cast<std::size_t>(n));
  Eigen::Index r = 0;
  for (int idx : in.order) {
    const PointInstance& inst = submap.instances[static_cast<std::size_t>(idx)];
    starts.push_back(r);
    // Lexicographic point order: GEMM rounding can depend on a row's position.
    std::vector<Eigen::Index> perm(static_cast<std::size_t>(inst.points.rows()));
    std::iota(perm.begin(), perm.end(), Eigen::Index{0});
    std::sort(perm.begin(), perm.end(), [&](Eigen::Index a, Eigen::Index b) {
      const Eigen::MatrixX3d& m = inst.points;
      return std::tie(m(a, 0), m(a, 1), m(a, 2)) < std::tie(m(b, 0), m(b, 1), m(b, 2));
    });
    for (Eigen::Index p : perm) pts.row(r++) = inst.points.row(p) - inst.centroid.transpose();
  }
  Var h = point_mlp(g, g.constant(std::move(pts)));
  std::vector<Var> pooled;
  pooled.reserve(static_cast<std::size_t>(n));
  for (Eigen::Index i = 0; i < n; ++i) {
    Eigen::Index count = (i + 1 < n ? starts[static_cast<std::size_t>(i + 1)] : total) - starts[static_cast<std::size_t>(i)];
    pooled.push_back(max_rows(slice_rows(h, starts[static_cast<std::size_t>(i)], count)));
  }
  Var shape = relu(aggregator(g, concat_rows(pooled)));
  Var color = color_mlp(g, g.constant(in.mean_colors));
  Var position = position_mlp(g, g.constant(in.relative_centroids));
  Var density = density_mlp(g, g.constant(in.log_density));
  return relu(fusion(g, concat_cols({shape, color, position, density})));
}

Var PcEncoder::mfam(Graph& g, Var seq, MfamTrace* trace) const {
  const double scale_k = 1.0 / std::sqrt(static_cast<double>(config_.d_k));
  std::array<Var, 3> scales;
  for (std::size_t s = 0; s < kConvWidths.size(); ++s) {
    const int width = kConvWidths[s];
    const int center = (width - 1) / 2;
    Var conv;
    for (int j = 0; j < width; ++j) {
      Var tap = matmul(shift_rows(seq, center - j), g.param(conv_kernels[s][static_cast<std::size_t>(j)]));
      conv = j == 0 ? tap : add(conv, tap);
    }
    Var x = add(relu(add_row(conv, g.param(conv_bias[s]))), seq);
    Var q = matmul(x, g.param(attn_query[s]));
    Var k = matmul(x, g.param(attn_key[s]));
    Var v = matmul(x, g.param(attn_value[s]));
    Var weights = softmax_rows(scale(matmul_nt(q, k), scale_k));
    if (trace) trace->self_attention[s] = weights.value();
    scales[s] = matmul(weights, v);
  }
  Var fine = softmax_rows(scale(matmul_nt(scales[1], scales[0]), scale_k));
  Var wide = softmax_rows(scale(matmul_nt(scales[1], scales[2]), scale_k));
  Var product = mul(fine, wide);
  if (trace) {
    trace->fine_map = fine.value();
    trace->wide_map = wide.value();
    trace->product_map = product.value();
  }
  return matmul(product, scales[1]);
}

namespace {

// One fused tape node for the recurrence of a direction: the per-step
// products are tiny, so running them through the generic ops is dominated by
// allocation and packing overhead.
Var lstm_recurrence(Graph& g, Var projected, Var w_h, bool reverse, LstmTrace* trace) {
  const Eigen::Index steps = projected.rows();
  const Eigen::Index d_h = w_h.rows();
  const Mat& p = projected.value();
  const Mat& wh = w_h.value();
  struct Cache {
    Mat h_prev, c_prev, gates, tanh_c;  // gates: f, i, candidate, o
  };
  auto cache = std::make_shared<Cache>();
  cache->h_prev = Mat::Zero(steps, d_h);
  cache->c_prev = Mat::Zero(steps, d_h);
  cache->gates = Mat::Zero(steps, 4 * d_h);
  cache->tanh_c = Mat::Zero(steps, d_h);
  Mat out(steps, d_h);
  RowVec h = RowVec::Zero(d_h), c = RowVec::Zero(d_h);
  for (Eigen::Index s = 0; s < steps; ++s) {
    const Eigen::Index t = reverse ? steps - 1 - s : s;
    RowVec z = p.row(t);
    z.noalias() += h * wh;
    auto sig = [](const auto& x) { return (1.0 / (1.0 + (-x.array()).exp())).matrix(); };
    const RowVec f = sig(z.segment(0, d_h));
    const RowVec i = sig(z.segment(d_h, d_h));
    const RowVec cand = z.segment(2 * d_h, d_h).array().tanh().matrix();
    const RowVec o = sig(z.segment(3 * d_h, d_h));
    cache->h_prev.row(t) = h;
    cache->c_prev.row(t) = c;
    c = (f.array() * c.array() + i.array() * cand.array()).matrix();
    const RowVec tc = c.array().tanh().matrix();
    h = (o.array() * tc.array()).matrix();
    cache->gates.row(t) << f, i, cand, o;
    cache->tanh_c.row(t) = tc;
    out.row(t) = h;
    if (trace) {
      trace->forget.push_back(f);
      trace->input.push_back(i);
      trace->candidate.push_back(cand);
      trace->output.push_back(o);
      trace->cell.push_back(c);
      trace->hidden.push_back(h);
    }
  }
  const int ip = projected.id, iw = w_h.id;
  const bool ng = g.needs_grad(ip) || g.needs_grad(iw);
  return {&g, g.push(std::move(out), ng, [ip, iw, reverse, cache](Graph& g, int self) {
            const Mat& dout = g.node(self).grad;
            const Mat& wh = g.value(iw);
            const Eigen::Index steps = dout.rows(), d_h = dout.cols();
            Mat dz_all(steps, 4 * d_h);
            RowVec dh_next = RowVec::Zero(d_h), dc_next = RowVec::Zero(d_h);
            for (Eigen::Index s = steps - 1; s >= 0; --s) {
              const Eigen::Index t = reverse ? steps - 1 - s : s;
              const auto gates = cache->gates.row(t);
              const auto f = gates.segment(0, d_h).array();
              const auto i = gates.segment(d_h, d_h).array();
              const auto cand = gates.segment(2 * d_h, d_h).array();
              const auto o = gates.segment(3 * d_h, d_h).array();
              const auto tc = cache->tanh_c.row(t).array();
              const RowVec dh = dout.row(t) + dh_next;
              const RowVec dc = (dc_next.array() + dh.array() * o * (1.0 - tc * tc)).matrix();
              auto dz = dz_all.row(t);
              dz.segment(0, d_h) = (dc.array() * cache->c_prev.row(t).array() * f * (1.0 - f)).matrix();
              dz.segment(d_h, d_h) = (dc.array() * cand * i * (1.0 - i)).matrix();
              dz.segment(2 * d_h, d_h) = (dc.array() * i * (1.0 - cand * cand)).matrix();
              dz.segment(3 * d_h, d_h) = (dh.array() * tc * o * (1.0 - o)).matrix();
              dc_next = (dc.array() * f).matrix();
              dh_next.noalias() = dz * wh.transpose();
            }
            if (g.needs_grad(ip)) g.accumulate(ip, dz_all);
            if (g.needs_grad(iw)) g.accumulate(iw, cache->h_prev.transpose() * dz_all);
          })};
}

}  // namespace

Var lstm_direction(Graph& g, Var seq, const LstmWeights& w, bool reverse, LstmTrace* trace) {
  const Eigen::Index d_h = w.bias.value.cols() / 4;
  const Eigen::Index d_in = w.weight.value.rows() - d_h;
  if (seq.cols() != d_in) throw std::invalid_argument("lstm_direction: input width mismatch");
  Var weight = g.param(w.weight);
  Var w_h = slice_rows(weight, 0, d_h);
  Var w_x = slice_rows(weight, d_h, d_in);
  Var projected = add_row(matmul(seq, w_x), g.param(w.bias));
  return lstm_recurrence(g, projected, w_h, reverse, trace);
}

Var PcEncoder::bilstm(Graph& g, Var seq, LstmTrace* fwd, LstmTrace* bwd) const {
  Var forward = lstm_direction(g, seq, lstm_forward, false, fwd);
  Var backward = lstm_direction(g, seq, lstm_backward, true, bwd);
  return concat_cols({forward, backward});
}

Var PcEncoder::pool_global(Graph& g, Var hidden) const {
  if (hidden.rows() < 1) throw std::invalid_argument("pool_global: empty sequence");
  Var selected = gather_rows(hidden, strided_indices(hidden.rows(), config_.stride));
  return l2_normalize(projection(g, mean_rows(selected)));
}

Var PcEncoder::null_descriptor(Graph& g) const { return l2_normalize(g.param(null_vector)); }

Var PcEncoder::encode_sequence(Graph& g, const Submap& submap) const {
  return bilstm(g, mfam(g, encode_instances(g, submap)));
}

Var PcEncoder::encode_submap(Graph& g, const Submap& submap) const {
  if (submap.instances.empty()) return null_descriptor(g);
  return pool_global(g, encode_sequence(g, submap));
}

Eigen::RowVectorXd PcEncoder::descriptor(const Submap& submap) const {
  Graph g;
  return encode_submap(g, submap).value().row(0);
}

void PcEncoder::collect(ParamList& out) {
  point_mlp.collect(out);
  aggregator.collect(out);
  color_mlp.collect(out);
  position_mlp.collect(out);
  density_mlp.collect(out);
  fusion.collect(out);
  for (std::size_t s = 0; s < kConvWidths.size(); ++s) {
    for (Parameter& p : conv_kernels[s]) out.push_back(&p);
    out.push_back(&conv_bias[s]);
    out.push_back(&attn_query[s]);
    out.push_back(&attn_key[s]);
    out.push_back(&attn_value[s]);
  }
  for (LstmWeights* w : {&lstm_forward, &lstm_backward}) {
    out.push_back(&w->weight);
    out.push_back(&w->bias);
  }
  projection.collect(out);
  out.push_back(&null_vector);
}

ConstParamList PcEncoder::params() const {
  ParamList list;
  const_cast<PcEncoder*>(this)->collect(list);
  return {list.begin(), list.end()};
}

}  // namespace despos
