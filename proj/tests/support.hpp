#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "dmaf/autograd.hpp"

namespace testing {

using dmaf::ag::Var;

inline std::vector<double> randn(std::mt19937_64& rng, std::size_t n, double sd = 1.0) {
  std::normal_distribution<double> d(0.0, sd);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng);
  return v;
}

inline Var random_param(std::mt19937_64& rng, dmaf::ag::Shape shape, double sd = 1.0) {
  return dmaf::ag::parameter(shape, randn(rng, dmaf::ag::numel(shape), sd));
}

struct GradCheck {
  double max_rel = 0.0;
  double max_abs = 0.0;
};

// Compares reverse-mode gradients of a scalar graph with central differences.
// At most `per_param` entries per parameter are probed (randomly chosen).
inline GradCheck grad_check(const std::function<Var()>& build, const std::vector<Var>& params, std::mt19937_64& rng,
                            std::size_t per_param = 24, double h = 1e-6, double floor = 1e-7) {
  for (const auto& p : params) p->zero_grad();
  dmaf::ag::backward(build());
  std::vector<std::vector<double>> analytic;
  for (const auto& p : params) analytic.push_back(p->grad.empty() ? std::vector<double>(p->size(), 0.0) : p->grad);
  GradCheck r;
  for (std::size_t k = 0; k < params.size(); ++k) {
    auto& p = *params[k];
    std::vector<std::size_t> idx(p.size());
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    std::shuffle(idx.begin(), idx.end(), rng);
    idx.resize(std::min(per_param, idx.size()));
    for (auto i : idx) {
      const double orig = p.value[i];
      p.value[i] = orig + h;
      const double up = build()->item();
      p.value[i] = orig - h;
      const double down = build()->item();
      p.value[i] = orig;
      const double num = (up - down) / (2 * h);
      const double a = analytic[k][i];
      const double abs_err = std::abs(a - num);
      r.max_abs = std::max(r.max_abs, abs_err);
      r.max_rel = std::max(r.max_rel, abs_err / std::max({std::abs(a), std::abs(num), floor}));
    }
  }
  return r;
}

// Weighted sum with fixed random coefficients turns any tensor into a scalar.
inline Var probe(const Var& x, std::uint64_t seed = 99) {
  std::mt19937_64 rng(seed);
  return dmaf::ag::sum(dmaf::ag::mul(x, dmaf::ag::constant(x->shape, randn(rng, x->size()))));
}

}  // namespace testing
