#pragma once

// Central finite differences against reverse-mode gradients.

#include "despos/autodiff.hpp"
#include "despos/nn.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>

namespace despos::testing {

struct GradCheck {
  double worst = 0.0;
  std::string where;
  int checked = 0;
};

/// |a - n| / max(|a|, |n|); pairs whose absolute difference is below `floor`
/// count as exact (both sides are numerically zero).
inline double relative_error(double analytic, double numeric, double floor = 1e-9) {
  const double diff = std::abs(analytic - numeric);
  if (diff < floor) return 0.0;
  return diff / std::max(std::abs(analytic), std::abs(numeric));
}

/// Perturbs every `stride`-th entry of each parameter by +-step.
inline GradCheck check_gradients(const ParamList& params, const std::function<Var(Graph&)>& loss, double step = 1e-5,
                                 int stride = 1) {
  Graph g;
  Var l = loss(g);
  g.backward(l);
  GradCheck out;
  for (const auto& [cp, grad] : g.gradients()) {
    Parameter* p = nullptr;
    for (Parameter* q : params) {
      if (q == cp) p = q;
    }
    if (!p) continue;
    for (Eigen::Index k = 0; k < p->value.size(); k += stride) {
      const double orig = p->value(k);
      p->value(k) = orig + step;
      Graph gp;
      const double up = loss(gp).scalar();
      p->value(k) = orig - step;
      Graph gm;
      const double down = loss(gm).scalar();
      p->value(k) = orig;
      const double err = relative_error(grad(k), (up - down) / (2.0 * step));
      ++out.checked;
      if (err > out.worst) {
        out.worst = err;
        out.where = p->name + "[" + std::to_string(k) + "]";
      }
    }
  }
  return out;
}

}  // namespace despos::testing
