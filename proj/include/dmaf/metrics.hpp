#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <vector>

namespace dmaf::metrics {

// Binary masks are row-major H x W with nonzero meaning foreground.
struct MaskView {
  std::span<const std::uint8_t> data;
  int height = 0;
  int width = 0;
};

// 2|P n G| / (|P| + |G|); both empty counts as perfect agreement.
double dsc(MaskView pred, MaskView gt);

// Pixels of the mask with a 4-neighbour outside the mask (image border counts as outside).
std::vector<std::uint8_t> boundary(MaskView mask);

// Exact undirected Hausdorff distance between mask boundaries (pixel units).
// `percentile` < 100 gives the HDp variant over pooled directed distances.
// nullopt when exactly one mask is empty; 0 when both are.
std::optional<double> hausdorff(MaskView pred, MaskView gt, double percentile = 100.0);

// Nested-region masks: region c is {label >= c}, c = 1..C-1.
std::vector<std::uint8_t> region_mask(std::span<const std::uint8_t> label, int region);

struct ClassScores {
  std::vector<double> dsc;                // per foreground region
  std::vector<std::optional<double>> hd;  // per foreground region
  double macro_dsc() const;
};

ClassScores score_labels(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, int height, int width,
                         int n_classes, double hd_percentile = 100.0);

// Squared Euclidean distance transform to the nonzero pixels of `sites` (exact, separable).
std::vector<double> squared_distance_transform(std::span<const std::uint8_t> sites, int height, int width);

}  // namespace dmaf::metrics
