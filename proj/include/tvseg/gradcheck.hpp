// Central finite-difference verification of reverse-mode gradients.
#pragma once

#include <functional>
#include <span>
#include <string>
#include <vector>

#include "tvseg/tensor.hpp"

namespace tvseg {

struct GradCheckReport {
  double max_rel_err = 0.0;
  bool pass = false;
  double h_rel = 0.0;
  std::vector<std::pair<std::string, double>> per_param;  // name -> max relative error
};

/// Builds the scalar objective from the current parameter values, binding
/// every parameter it uses through the supplied Bindings.
using LossBuilder = std::function<Tensor(Graph&, Bindings&)>;

/// Compares analytic gradients of `build` against central differences with
/// step h = h_rel * max(1, |p|) per coordinate. Tensors larger than
/// `max_coords` are checked on a deterministic random subset of coordinates.
/// Relative error: |a - n| / max(1e-8, |a| + |n|).
inline GradCheckReport finite_diff_check(const LossBuilder& build, std::span<Param* const> params,
                                         double h_rel = 1e-5, double tol = 1e-4,
                                         int max_coords = 64, std::uint64_t seed = 0x5eed) {
  GradCheckReport rep;
  rep.h_rel = h_rel;

  {
    Graph g;
    Bindings bind;
    Tensor loss = build(g, bind);
    g.backward(loss);
    bind.write_grads();
  }
  auto value_at = [&build]() {
    Graph g;
    Bindings bind;
    Tensor loss = build(g, bind);
    return loss.scalar();
  };

  Rng rng(seed);
  for (Param* p : params) {
    const std::int64_t n = p->size();
    std::vector<std::int64_t> coords;
    if (n <= max_coords) {
      coords.resize(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    } else {
      std::vector<std::int64_t> all(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
      for (int i = 0; i < max_coords; ++i) {
        const int j = i + rng.uniform_int(static_cast<int>(n - i));
        std::swap(all[static_cast<std::size_t>(i)], all[static_cast<std::size_t>(j)]);
      }
      coords.assign(all.begin(), all.begin() + max_coords);
    }
    double worst = 0.0;
    for (std::int64_t ci : coords) {
      const double orig = p->value[static_cast<std::size_t>(ci)];
      const double h = h_rel * std::max(1.0, std::abs(orig));
      p->value[static_cast<std::size_t>(ci)] = orig + h;
      const double fp = value_at();
      p->value[static_cast<std::size_t>(ci)] = orig - h;
      const double fm = value_at();
      p->value[static_cast<std::size_t>(ci)] = orig;
      const double numeric = (fp - fm) / (2.0 * h);
      const double analytic = p->grad[static_cast<std::size_t>(ci)];
      const double rel = std::abs(analytic - numeric) / std::max(1e-8, std::abs(analytic) + std::abs(numeric));
      worst = std::max(worst, rel);
    }
    rep.per_param.emplace_back(p->name, worst);
    rep.max_rel_err = std::max(rep.max_rel_err, worst);
  }
  rep.pass = rep.max_rel_err <= tol;
  return rep;
}

}  // namespace tvseg
