#include "dmaf/objective.hpp"

#include <algorithm>
#include <cmath>

#include "dmaf/error.hpp"

namespace dmaf::objective {

std::vector<double> inverse_frequency_weights(std::span<const std::uint8_t> label, int n_classes) {
  std::vector<double> counts(n_classes, 0.0);
  for (auto v : label) {
    require(v < n_classes, ErrorCode::kInvalidArgument, "class weights: label value out of range");
    counts[v] += 1.0;
  }
  std::vector<double> w(n_classes, 10.0);
  const double total = static_cast<double>(label.size());
  for (int c = 0; c < n_classes; ++c)
    if (counts[c] > 0) w[c] = std::clamp(total / (n_classes * counts[c]), 0.1, 10.0);
  return w;
}

double soft_dice_loss(std::span<const double> probs, std::span<const std::uint8_t> label, int n_classes) {
  const std::size_t px = label.size();
  require(probs.size() == px * n_classes, ErrorCode::kShapeMismatch, "soft_dice_loss: probability map size");
  double loss = 0.0;
  for (int c = 1; c < n_classes; ++c) {
    double inter = 0.0, sum_p = 0.0, sum_y = 0.0;
    for (std::size_t i = 0; i < px; ++i) {
      const double p = probs[c * px + i];
      const double y = label[i] == c ? 1.0 : 0.0;
      inter += p * y;
      sum_p += p;
      sum_y += y;
    }
    loss += 1.0 - (2.0 * inter + kDiceSmooth) / (sum_p + sum_y + kDiceSmooth);
  }
  return loss / (n_classes - 1);
}

Var dice_ce_loss(const Var& logits, std::span<const std::uint8_t> label, const std::vector<double>& class_weights,
                 DiceCeParts* parts) {
  require(logits->shape.size() == 3, ErrorCode::kShapeMismatch, "dice_ce_loss: logits must be [C,H,W]");
  const int n_classes = logits->dim(0);
  const std::size_t px = static_cast<std::size_t>(logits->dim(1)) * logits->dim(2);
  require(n_classes >= 2, ErrorCode::kShapeMismatch, "dice_ce_loss: need at least two classes");
  require(label.size() == px, ErrorCode::kShapeMismatch, "dice_ce_loss: label size does not match logits");
  require(static_cast<int>(class_weights.size()) == n_classes, ErrorCode::kShapeMismatch,
          "dice_ce_loss: class weight count");
  for (auto v : label) require(v < n_classes, ErrorCode::kInvalidArgument, "dice_ce_loss: label value out of range");

  // Softmax over classes per pixel.
  auto probs = std::make_shared<std::vector<double>>(logits->size());
  for (std::size_t i = 0; i < px; ++i) {
    double mx = logits->value[i];
    for (int c = 1; c < n_classes; ++c) mx = std::max(mx, logits->value[c * px + i]);
    double z = 0.0;
    for (int c = 0; c < n_classes; ++c) z += ((*probs)[c * px + i] = std::exp(logits->value[c * px + i] - mx));
    for (int c = 0; c < n_classes; ++c) (*probs)[c * px + i] /= z;
  }

  double wsum = 0.0, ce = 0.0;
  for (std::size_t i = 0; i < px; ++i) {
    const int y = label[i];
    const double w = class_weights[y];
    wsum += w;
    ce -= w * std::log(std::max((*probs)[y * px + i], 1e-300));
  }
  ce /= wsum;

  std::vector<double> inter(n_classes, 0.0), denom(n_classes, 0.0);
  for (int c = 1; c < n_classes; ++c)
    for (std::size_t i = 0; i < px; ++i) {
      const double p = (*probs)[c * px + i];
      const double y = label[i] == c ? 1.0 : 0.0;
      inter[c] += p * y;
      denom[c] += p + y;
    }
  double dice = 0.0;
  for (int c = 1; c < n_classes; ++c) dice += 1.0 - (2.0 * inter[c] + kDiceSmooth) / (denom[c] + kDiceSmooth);
  dice /= (n_classes - 1);
  if (parts) *parts = {dice, ce};

  auto out = ag::make_op({1}, {dice + ce}, {logits});
  if (out->requires_grad) {
    std::vector<std::uint8_t> lab(label.begin(), label.end());
    out->backward_fn = [logits, probs, lab = std::move(lab), class_weights, inter, denom, wsum, n_classes,
                        px](ag::Node& n) {
      auto* g = ag::grad_of(logits);
      if (!g) return;
      const double g0 = n.grad[0];
      const double dice_scale = 1.0 / (n_classes - 1);
      std::vector<double> dp(n_classes);
      for (std::size_t i = 0; i < px; ++i) {
        const int y = lab[i];
        // Dice term: d/dp of -(2I + d)/(S + d).
        dp[0] = 0.0;
        for (int c = 1; c < n_classes; ++c) {
          const double s = denom[c] + kDiceSmooth;
          const double yc = y == c ? 1.0 : 0.0;
          dp[c] = -dice_scale * (2.0 * yc / s - (2.0 * inter[c] + kDiceSmooth) / (s * s));
        }
        double dot = 0.0;
        for (int c = 0; c < n_classes; ++c) dot += dp[c] * (*probs)[c * px + i];
        const double wy = class_weights[y] / wsum;
        for (int c = 0; c < n_classes; ++c) {
          const double p = (*probs)[c * px + i];
          const double d_dice = p * (dp[c] - dot);
          const double d_ce = wy * (p - (c == y ? 1.0 : 0.0));
          (*g)[c * px + i] += g0 * (d_dice + d_ce);
        }
      }
    };
  }
  return out;
}

std::vector<double> deep_supervision_weights(int n_levels) {
  std::vector<double> w(n_levels);
  for (int l = 0; l < n_levels; ++l) w[l] = 1.0 / static_cast<double>(2 << l);
  return w;
}

Var fuse_loss(const std::vector<Var>& fused_logits, std::span<const std::uint8_t> label, int height, int width,
              const std::vector<double>& class_weights) {
  require(!fused_logits.empty(), ErrorCode::kInvalidArgument, "fuse_loss: no decoder taps");
  const auto lambdas = deep_supervision_weights(static_cast<int>(fused_logits.size()));
  std::vector<Var> terms;
  for (std::size_t l = 0; l < fused_logits.size(); ++l) {
    auto up = ag::resize_bilinear(fused_logits[l], height, width);
    terms.push_back(ag::scale(dice_ce_loss(up, label, class_weights), lambdas[l]));
  }
  return ag::add_n(terms);
}

std::map<int, Var> sep_losses(const std::map<int, Var>& uni_logits, std::span<const std::uint8_t> label,
                              const std::vector<double>& class_weights) {
  std::map<int, Var> out;
  for (const auto& [m, z] : uni_logits) out[m] = dice_ce_loss(z, label, class_weights);
  return out;
}

Var total_loss(const Var& fuse, const Var& sep, const Var& rel, const Var& proto, const Lambdas& lambdas,
               LossBreakdown* breakdown) {
  std::vector<Var> terms{ag::scale(fuse, lambdas.fuse), ag::scale(sep, lambdas.sep)};
  if (lambdas.rel != 0.0) terms.push_back(ag::scale(rel, lambdas.rel));
  if (lambdas.proto != 0.0) terms.push_back(ag::scale(proto, lambdas.proto));
  auto total = ag::add_n(terms);
  if (breakdown) {
    breakdown->fuse = fuse->item();
    breakdown->sep = sep->item();
    breakdown->rel = rel->item();
    breakdown->proto = proto->item();
    breakdown->total = total->item();
    breakdown->lambdas = lambdas;
  }
  return total;
}

}  // namespace dmaf::objective
