#pragma once

// Central finite-difference verification of reverse-mode gradients.

#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "trap/autodiff.hpp"
#include "trap/common.hpp"

namespace trap {

struct GradCheckReport {
  double max_rel_err = 0;
  std::string worst_param;
  int probes = 0;

  bool ok(double tol) const { return probes > 0 && max_rel_err <= tol; }
};

/// Compare analytic gradients against central differences at randomly probed
/// parameter entries. `build` must construct the scalar loss from scratch on
/// the given graph (all randomness inside it must be frozen by the caller).
inline GradCheckReport check_gradients(const std::vector<ad::Param*>& params,
                                       const std::function<ad::Var(ad::Graph&)>& build,
                                       std::mt19937_64& rng, int probes_per_param,
                                       double fd_step = 1e-5) {
  auto eval = [&]() {
    ad::Graph g;
    return g.scalar(build(g));
  };

  for (ad::Param* p : params) p->zero_grad();
  {
    ad::Graph g;
    ad::Var loss = build(g);
    g.backward(loss);
  }

  GradCheckReport rep;
  for (ad::Param* p : params) {
    if (p->value.size() == 0) throw dim_error("check_gradients: empty param");
    std::uniform_int_distribution<Eigen::Index> ri(0, p->value.rows() - 1);
    std::uniform_int_distribution<Eigen::Index> ci(0, p->value.cols() - 1);
    for (int k = 0; k < probes_per_param; ++k) {
      Eigen::Index i = ri(rng), j = ci(rng);
      double orig = p->value(i, j);
      double h = fd_step * std::max(1.0, std::abs(orig));
      p->value(i, j) = orig + h;
      double fp = eval();
      p->value(i, j) = orig - h;
      double fm = eval();
      p->value(i, j) = orig;
      double numeric = (fp - fm) / (2 * h);
      double analytic = p->grad(i, j);
      double rel = std::abs(analytic - numeric) /
                   std::max({1.0, std::abs(analytic), std::abs(numeric)});
      ++rep.probes;
      if (rel > rep.max_rel_err) {
        rep.max_rel_err = rel;
        rep.worst_param = p->name;
      }
    }
  }
  return rep;
}

}  // namespace trap
