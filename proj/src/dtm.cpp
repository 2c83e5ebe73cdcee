#include "dmaf/dtm.hpp"

#include <algorithm>
#include <cmath>

#include "dmaf/error.hpp"

namespace dmaf::dtm {

GapState GapState::create(int n_modalities, double eps) {
  require(n_modalities >= 1, ErrorCode::kInvalidArgument, "gap state: n_modalities must be >= 1");
  GapState s;
  s.modalities.resize(n_modalities);
  s.prev_grad.resize(n_modalities);
  s.eps = eps;
  return s;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

double adaptive_decay(double prev_gr, double prev_gp, double eps) {
  const double ratio = (prev_gr + eps) / (prev_gp + eps);
  return kDecayScale * (1.0 - sigmoid(ratio));
}

void update_gaps(GapState& state, const std::map<int, GapObservation>& observed) {
  const int m_count = static_cast<int>(state.modalities.size());
  for (const auto& [m, o] : observed) {
    require(m >= 0 && m < m_count, ErrorCode::kInvalidArgument, "update_gaps: modality index out of range");
    require(std::isfinite(o.gr) && std::isfinite(o.gp) && o.gr >= 0.0 && o.gp >= 0.0, ErrorCode::kNumeric,
            "update_gaps: modality " + std::to_string(m) + " has a negative or non-finite gap");
  }
  if (observed.empty()) {
    ++state.step;
    return;
  }
  double sum_r = 0.0, sum_p = 0.0;
  for (const auto& [m, o] : observed) {
    auto& g = state.modalities[m];
    if (!g.initialized) {
      g.ema_gr = o.gr;
      g.ema_gp = o.gp;
      g.initialized = true;
    } else {
      const double a = adaptive_decay(g.last_gr, g.last_gp, state.eps);
      g.ema_gr = a * g.ema_gr + (1.0 - a) * o.gr;
      g.ema_gp = a * g.ema_gp + (1.0 - a) * o.gp;
    }
    g.last_gr = o.gr;
    g.last_gp = o.gp;
    sum_r += o.gr;
    sum_p += o.gp;
  }
  const double xr = sum_r / static_cast<double>(observed.size());
  const double xp = sum_p / static_cast<double>(observed.size());
  if (!state.means_initialized) {
    state.mean_gr = xr;
    state.mean_gp = xp;
    state.means_initialized = true;
  } else {
    state.mean_gr = state.mean_decay * state.mean_gr + (1.0 - state.mean_decay) * xr;
    state.mean_gp = state.mean_decay * state.mean_gp + (1.0 - state.mean_decay) * xp;
  }
  ++state.step;
}

double alpha2(const GapState& state) {
  return (state.mean_gr + state.eps) / (state.mean_gr + state.mean_gp + 2.0 * state.eps);
}

double total_gap(const GapState& state, int m) {
  const auto& g = state.modalities.at(m);
  const double a = alpha2(state);
  return a * g.ema_gr + (1.0 - a) * g.ema_gp;
}

std::map<int, double> counteractive_weights(const std::map<int, double>& g_total, double eps) {
  require(!g_total.empty(), ErrorCode::kInvalidArgument, "counteractive_weights: no present modality");
  std::map<int, double> inv;
  double z = 0.0;
  for (const auto& [m, g] : g_total) {
    require(std::isfinite(g) && g >= 0.0, ErrorCode::kNumeric, "counteractive_weights: invalid gap");
    z += (inv[m] = 1.0 / (g + eps));
  }
  for (auto& [m, v] : inv) v /= z;
  return inv;
}

std::map<int, double> uniform_weights(const std::vector<int>& present) {
  require(!present.empty(), ErrorCode::kInvalidArgument, "uniform_weights: no present modality");
  std::map<int, double> w;
  for (int m : present) w[m] = 1.0 / static_cast<double>(present.size());
  return w;
}

ag::Var reweight_sep_loss(const std::map<int, ag::Var>& sep_losses, const std::map<int, double>& weights) {
  std::vector<ag::Var> terms;
  for (const auto& [m, l] : sep_losses) {
    auto it = weights.find(m);
    require(it != weights.end(), ErrorCode::kInternal,
            "reweight_sep_loss: modality " + std::to_string(m) + " present but has no weight");
    terms.push_back(ag::scale(l, it->second));
  }
  if (terms.empty()) return ag::scalar(0.0);
  return ag::add_n(terms);
}

double gamma_for(double weight) {
  require(weight > 0.0, ErrorCode::kNumeric, "gamma_for: weight must be positive");
  return std::clamp(1.0 / weight, kGammaMin, kGammaMax);
}

double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  require(a.size() == b.size(), ErrorCode::kShapeMismatch, "cosine: length mismatch");
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) return 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

RebalanceDecision scale_gradients(GapState& state, std::map<int, std::vector<double>>& grads,
                                  const std::map<int, double>& weights) {
  RebalanceDecision out;
  for (auto& [m, g] : grads) {
    require(m >= 0 && m < static_cast<int>(state.prev_grad.size()), ErrorCode::kInvalidArgument,
            "scale_gradients: modality index out of range");
    for (double v : g)
      require(!std::isnan(v), ErrorCode::kNumeric, "scale_gradients: NaN in encoder " + std::to_string(m) + " gradient");
    auto it = weights.find(m);
    require(it != weights.end(), ErrorCode::kInternal, "scale_gradients: no weight for modality " + std::to_string(m));
    ModalityDecision d;
    d.weight = it->second;
    d.gamma = gamma_for(d.weight);
    auto& prev = state.prev_grad[m];
    if (prev) d.sim = cosine(g, *prev);
    d.damped = d.sim && *d.sim < kConflictThreshold;
    d.multiplier = d.damped ? kDampFactor * d.gamma : d.gamma;
    prev = g;
    for (double& v : g) v *= d.multiplier;
    out[m] = d;
  }
  return out;
}

}  // namespace dmaf::dtm
