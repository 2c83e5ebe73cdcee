#include "dmaf/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dmaf/error.hpp"

namespace dmaf::metrics {

namespace {

void check_pair(MaskView a, MaskView b) {
  require(a.height == b.height && a.width == b.width, ErrorCode::kShapeMismatch, "metrics: mask shapes differ");
  require(a.data.size() == static_cast<std::size_t>(a.height) * a.width &&
              b.data.size() == static_cast<std::size_t>(b.height) * b.width,
          ErrorCode::kShapeMismatch, "metrics: mask buffer size");
}

// Felzenszwalb-Huttenlocher lower envelope of parabolas.
void edt_1d(const double* f, double* d, int n, std::vector<int>& v, std::vector<double>& z) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  int k = 0;
  v[0] = 0;
  z[0] = -kInf;
  z[1] = kInf;
  for (int q = 1; q < n; ++q) {
    if (f[q] == kInf) continue;
    if (f[v[k]] == kInf) {
      v[k] = q;
      continue;
    }
    double s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k]);
    while (k > 0 && s <= z[k]) {
      --k;
      s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - v[k];
    d[q] = f[v[k]] == kInf ? kInf : dq * dq + f[v[k]];
  }
}

double percentile_of(std::vector<double> v, double pct) {
  if (pct >= 100.0) return *std::max_element(v.begin(), v.end());
  std::sort(v.begin(), v.end());
  const double pos = pct / 100.0 * (v.size() - 1);
  const std::size_t lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, v.size() - 1);
  return v[lo] + (pos - lo) * (v[hi] - v[lo]);
}

}  // namespace

double dsc(MaskView pred, MaskView gt) {
  check_pair(pred, gt);
  std::size_t inter = 0, sp = 0, sg = 0;
  for (std::size_t i = 0; i < pred.data.size(); ++i) {
    const bool p = pred.data[i] != 0, g = gt.data[i] != 0;
    inter += p && g;
    sp += p;
    sg += g;
  }
  if (sp + sg == 0) return 1.0;
  return 2.0 * static_cast<double>(inter) / static_cast<double>(sp + sg);
}

std::vector<std::uint8_t> boundary(MaskView mask) {
  const int h = mask.height, w = mask.width;
  std::vector<std::uint8_t> b(mask.data.size(), 0);
  auto in = [&](int y, int x) { return y >= 0 && y < h && x >= 0 && x < w && mask.data[y * w + x] != 0; };
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x)
      if (in(y, x) && (!in(y - 1, x) || !in(y + 1, x) || !in(y, x - 1) || !in(y, x + 1))) b[y * w + x] = 1;
  return b;
}

std::vector<double> squared_distance_transform(std::span<const std::uint8_t> sites, int height, int width) {
  constexpr double kInf = std::numeric_limits<double>::infinity();
  std::vector<double> d(sites.size());
  for (std::size_t i = 0; i < sites.size(); ++i) d[i] = sites[i] ? 0.0 : kInf;
  const int n = std::max(height, width);
  std::vector<double> f(n), out(n), z(n + 1);
  std::vector<int> v(n);
  for (int x = 0; x < width; ++x) {
    for (int y = 0; y < height; ++y) f[y] = d[y * width + x];
    edt_1d(f.data(), out.data(), height, v, z);
    for (int y = 0; y < height; ++y) d[y * width + x] = out[y];
  }
  for (int y = 0; y < height; ++y) {
    edt_1d(d.data() + static_cast<std::size_t>(y) * width, out.data(), width, v, z);
    std::copy(out.begin(), out.begin() + width, d.begin() + static_cast<std::ptrdiff_t>(y) * width);
  }
  return d;
}

std::optional<double> hausdorff(MaskView pred, MaskView gt, double percentile) {
  check_pair(pred, gt);
  require(percentile > 0.0 && percentile <= 100.0, ErrorCode::kInvalidArgument, "hausdorff: percentile in (0,100]");
  const auto bp = boundary(pred), bg = boundary(gt);
  const bool ep = std::none_of(bp.begin(), bp.end(), [](auto v) { return v != 0; });
  const bool eg = std::none_of(bg.begin(), bg.end(), [](auto v) { return v != 0; });
  if (ep && eg) return 0.0;
  if (ep || eg) return std::nullopt;
  const auto dt_g = squared_distance_transform(bg, gt.height, gt.width);
  const auto dt_p = squared_distance_transform(bp, pred.height, pred.width);
  std::vector<double> p_to_g, g_to_p;
  for (std::size_t i = 0; i < bp.size(); ++i) {
    if (bp[i]) p_to_g.push_back(std::sqrt(dt_g[i]));
    if (bg[i]) g_to_p.push_back(std::sqrt(dt_p[i]));
  }
  return std::max(percentile_of(std::move(p_to_g), percentile), percentile_of(std::move(g_to_p), percentile));
}

std::vector<std::uint8_t> region_mask(std::span<const std::uint8_t> label, int region) {
  std::vector<std::uint8_t> m(label.size());
  for (std::size_t i = 0; i < label.size(); ++i) m[i] = label[i] >= region ? 1 : 0;
  return m;
}

double ClassScores::macro_dsc() const {
  if (dsc.empty()) return 0.0;
  double s = 0.0;
  for (double d : dsc) s += d;
  return s / static_cast<double>(dsc.size());
}

ClassScores score_labels(std::span<const std::uint8_t> pred, std::span<const std::uint8_t> gt, int height, int width,
                         int n_classes, double hd_percentile) {
  require(pred.size() == gt.size(), ErrorCode::kShapeMismatch, "score_labels: label sizes differ");
  ClassScores s;
  for (int c = 1; c < n_classes; ++c) {
    const auto pm = region_mask(pred, c), gm = region_mask(gt, c);
    MaskView pv{pm, height, width}, gv{gm, height, width};
    s.dsc.push_back(dsc(pv, gv));
    s.hd.push_back(hausdorff(pv, gv, hd_percentile));
  }
  return s;
}

}  // namespace dmaf::metrics
