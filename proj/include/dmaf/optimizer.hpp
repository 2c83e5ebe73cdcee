#pragma once

#include <vector>

#include "dmaf/autograd.hpp"

namespace dmaf::optim {

struct AdamWConfig {
  double lr = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 1e-4;
};

// Decoupled weight decay Adam. Parameters without an accumulated gradient
// this step are left untouched.
class AdamW {
 public:
  AdamW(std::vector<ag::Var> params, AdamWConfig cfg);

  void step();
  void zero_grad();

  const AdamWConfig& config() const { return cfg_; }
  std::vector<std::vector<double>>& first_moment() { return m_; }
  std::vector<std::vector<double>>& second_moment() { return v_; }
  std::vector<long>& step_counts() { return t_; }
  const std::vector<std::vector<double>>& first_moment() const { return m_; }
  const std::vector<std::vector<double>>& second_moment() const { return v_; }
  const std::vector<long>& step_counts() const { return t_; }

 private:
  std::vector<ag::Var> params_;
  AdamWConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::vector<long> t_;
};

}  // namespace dmaf::optim
