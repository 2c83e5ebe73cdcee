#pragma once

// Dynamic training monitoring: EMA tracking of per-modality distillation gaps,
// counteractive loss weights and clipped, direction-aware scaling of the
// modality-specific encoder gradients.

#include <map>
#include <optional>
#include <vector>

#include "dmaf/autograd.hpp"

namespace dmaf::dtm {

inline constexpr double kGammaMin = 0.1;
inline constexpr double kGammaMax = 10.0;
inline constexpr double kDampFactor = 0.7;
inline constexpr double kConflictThreshold = -0.5;
inline constexpr double kDecayScale = 0.9;

struct ModalityGap {
  bool initialized = false;
  double ema_gr = 0.0, ema_gp = 0.0;
  double last_gr = 0.0, last_gp = 0.0;  // previous raw observations
  bool operator==(const ModalityGap&) const = default;
};

struct GapState {
  std::vector<ModalityGap> modalities;
  bool means_initialized = false;
  double mean_gr = 0.0, mean_gp = 0.0;  // slow EMAs behind alpha2
  std::vector<std::optional<std::vector<double>>> prev_grad;
  long step = 0;
  double eps = 1e-8;
  double mean_decay = 0.99;

  static GapState create(int n_modalities, double eps = 1e-8);
  bool operator==(const GapState&) const = default;
};

double sigmoid(double x);

// 0.9 * (1 - sigmoid((prev_gr + eps) / (prev_gp + eps)))
double adaptive_decay(double prev_gr, double prev_gp, double eps);

struct GapObservation {
  double gr = 0.0;
  double gp = 0.0;
};

// Observations are only supplied for modalities present this step.
void update_gaps(GapState& state, const std::map<int, GapObservation>& observed);

double alpha2(const GapState& state);
double total_gap(const GapState& state, int m);

std::map<int, double> counteractive_weights(const std::map<int, double>& g_total, double eps = 1e-8);
std::map<int, double> uniform_weights(const std::vector<int>& present);

ag::Var reweight_sep_loss(const std::map<int, ag::Var>& sep_losses, const std::map<int, double>& weights);

struct ModalityDecision {
  double weight = 0.0;
  double gamma = 1.0;
  std::optional<double> sim;
  bool damped = false;
  double multiplier = 1.0;  // applied to the gradient
};

using RebalanceDecision = std::map<int, ModalityDecision>;

double gamma_for(double weight);
double cosine(const std::vector<double>& a, const std::vector<double>& b);

// Scales each present modality's flattened encoder gradient in place and
// records the unscaled gradient as the next step's reference direction.
RebalanceDecision scale_gradients(GapState& state, std::map<int, std::vector<double>>& grads,
                                  const std::map<int, double>& weights);

}  // namespace dmaf::dtm
