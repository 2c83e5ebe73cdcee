#pragma once

// Relation distillation (covariance consistency + masked attention alignment)
// and class-prototype distillation between uni-modal and fused bottleneck
// features.

#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "dmaf/autograd.hpp"
#include "dmaf/model.hpp"

namespace dmaf::distill {

using ag::Var;

inline constexpr double kCosineNormFloor = 1e-8;

// Channel covariance of a [C, H, W] map with pixels as observations: [C, C].
Var covariance(const Var& feature);

// Mean squared error between P(vec(uni_cov)) and vec(fused_cov); P is [C*C, C*C].
Var cov_loss(const Var& uni_cov, const Var& fused_cov, const Var& projector);

struct AttentionAlignment {
  Var attended;  // A^m, [HW, C] tokens
  Var loss;      // mean squared (A^m - f) over token entries
  std::vector<double> probs;
};

// Query from uni-modal tokens, key/value from fused tokens.
AttentionAlignment masked_attention_align(const model::MultiHeadAttention& mha, const Var& uni_feature,
                                          const Var& fused_feature, const std::vector<bool>& key_mask);

// Key mask over the fused bottleneck tokens for a sample's presence row. The
// fused tokens mix every present modality, so no key is masked while at least
// one modality is present.
std::vector<bool> fused_key_mask(const std::vector<bool>& presence, int n_tokens);

// (1/|present|) sum_m alpha1 L_cov^m + (1 - alpha1) L_attn^m
Var relation_loss(const std::map<int, Var>& cov_losses, const std::map<int, Var>& attn_losses, const Var& alpha1);

// Majority-vote pooling of a label map by integer factors; ties go to the larger class.
std::vector<std::uint8_t> pool_label_mode(std::span<const std::uint8_t> label, int height, int width, int out_h,
                                          int out_w, int n_classes);

// p_c = indicator * sum_{x in class c} feat(x) / (|class c| + eps); returns [n_classes, C].
Var prototypes(const Var& feature, std::span<const std::uint8_t> label, int n_classes, double eps, bool indicator = true);
std::vector<int> class_counts(std::span<const std::uint8_t> label, int n_classes);

struct PrototypeAlignment {
  Var loss;                     // sum over valid classes of (1 - cos/tau)
  std::vector<double> terms;    // per class; NaN where skipped
  int n_valid = 0;
  double gap() const;           // mean over valid classes
};

// Classes where either prototype norm is below the floor are skipped.
PrototypeAlignment prototype_alignment(const Var& fused_protos, const Var& uni_protos, double tau);

// (1/|present|) sum_m sum_c (1 - cos/tau_m)
Var prototype_loss(const std::map<int, PrototypeAlignment>& per_modality);

// Learnable pieces owned by the distillation stage.
struct DistillHead {
  Var projector;  // [C*C, C*C], identity-initialised
  Var alpha_raw;  // alpha1 = sigmoid(alpha_raw)
  model::MultiHeadAttention maa;

  DistillHead() = default;
  DistillHead(model::ParamSet& ps, model::Initializer& init, const model::NetConfig& cfg, double alpha1_init);
  Var alpha1() const { return ag::sigmoid(alpha_raw); }
};

struct DistillConfig {
  double proto_eps = 1e-5;
  std::vector<double> tau;  // per modality, >= 1
  bool stop_teacher_grad = true;
};

struct DistillResult {
  Var rel;    // L_rel
  Var proto;  // L_proto
  std::map<int, double> cov, attn, gap_rel, gap_proto;
  double alpha1 = 0.0;
};

// Runs both distillations on the bottleneck for every present modality.
DistillResult distill(const DistillHead& head, const std::vector<Var>& uni_bottleneck, const Var& fused_bottleneck,
                      std::span<const std::uint8_t> label, int label_h, int label_w, const std::vector<bool>& presence,
                      int n_classes, const DistillConfig& cfg);

}  // namespace dmaf::distill
