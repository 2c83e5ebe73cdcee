#pragma once

// Segmentation losses (soft Dice + weighted cross-entropy), the deep-supervised
// fusion loss, the uni-modal separation losses and the overall objective.

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <vector>

#include "dmaf/autograd.hpp"

namespace dmaf::objective {

using ag::Var;

inline constexpr double kDiceSmooth = 1e-5;

// Inverse class frequency clip(P / (C * count_c), 0.1, 10); absent classes get 10.
std::vector<double> inverse_frequency_weights(std::span<const std::uint8_t> label, int n_classes);

struct DiceCeParts {
  double dice = 0.0;
  double ce = 0.0;
};

// Soft Dice loss averaged over foreground classes, from class probabilities [C, P].
double soft_dice_loss(std::span<const double> probs, std::span<const std::uint8_t> label, int n_classes);

// logits [C, H, W]; returns the scalar dice + weighted CE node.
Var dice_ce_loss(const Var& logits, std::span<const std::uint8_t> label, const std::vector<double>& class_weights,
                 DiceCeParts* parts = nullptr);

// lambda_l = 1 / 2^l for l = 1..L
std::vector<double> deep_supervision_weights(int n_levels);

// Every tap is bilinearly upsampled to the label resolution before the loss.
Var fuse_loss(const std::vector<Var>& fused_logits, std::span<const std::uint8_t> label, int height, int width,
              const std::vector<double>& class_weights);

// One term per present modality, keyed by modality index.
std::map<int, Var> sep_losses(const std::map<int, Var>& uni_logits, std::span<const std::uint8_t> label,
                              const std::vector<double>& class_weights);

struct Lambdas {
  double fuse = 2.0, sep = 1.0, rel = 0.5, proto = 0.5;
};

struct LossBreakdown {
  double fuse = 0, sep = 0, rel = 0, proto = 0, total = 0;
  std::map<int, double> sep_per_modality;  // unweighted
  Lambdas lambdas;
};

// lambda_1 L_fuse + lambda_2 L_sep + lambda_3 L_rel + lambda_4 L_proto
Var total_loss(const Var& fuse, const Var& sep, const Var& rel, const Var& proto, const Lambdas& lambdas,
               LossBreakdown* breakdown = nullptr);

}  // namespace dmaf::objective
