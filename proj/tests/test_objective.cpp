#include <cmath>

#include "doctest.h"
#include "dmaf/error.hpp"
#include "dmaf/objective.hpp"
#include "support.hpp"

using namespace dmaf;
using namespace dmaf::objective;

namespace {

// Direct evaluation of soft Dice (foreground mean) + weighted CE from logits.
double dice_ce_oracle(const std::vector<double>& logits, const std::vector<std::uint8_t>& label, int c,
                      const std::vector<double>& w) {
  const std::size_t px = label.size();
  std::vector<double> p(logits.size());
  for (std::size_t i = 0; i < px; ++i) {
    double z = 0;
    for (int k = 0; k < c; ++k) z += std::exp(logits[k * px + i]);
    for (int k = 0; k < c; ++k) p[k * px + i] = std::exp(logits[k * px + i]) / z;
  }
  double num = 0, den = 0;
  for (std::size_t i = 0; i < px; ++i) {
    num -= w[label[i]] * std::log(p[label[i] * px + i]);
    den += w[label[i]];
  }
  double dice = 0;
  for (int k = 1; k < c; ++k) {
    double inter = 0, s = 0;
    for (std::size_t i = 0; i < px; ++i) {
      inter += p[k * px + i] * (label[i] == k);
      s += p[k * px + i] + (label[i] == k);
    }
    dice += 1 - (2 * inter + 1e-5) / (s + 1e-5);
  }
  return dice / (c - 1) + num / den;
}

}  // namespace

TEST_CASE("uniform logits on balanced binary labels give ln 2 cross-entropy") {
  auto logits = ag::constant({2, 2, 2}, std::vector<double>(8, 0.3));
  const std::vector<std::uint8_t> label = {0, 1, 1, 0};
  DiceCeParts parts;
  dice_ce_loss(logits, label, {1.0, 1.0}, &parts);
  CHECK(parts.ce == doctest::Approx(std::log(2.0)).epsilon(1e-12));
  CHECK(parts.dice >= 0.0);
}

TEST_CASE("confident correct logits drive the loss to zero") {
  const std::vector<std::uint8_t> label = {0, 1, 2, 1, 0, 2};
  double prev = 1e9;
  for (double conf : {1.0, 5.0, 20.0, 40.0}) {
    std::vector<double> v(18, 0.0);
    for (int i = 0; i < 6; ++i) v[label[i] * 6 + i] = conf;
    const double l = dice_ce_loss(ag::constant({3, 2, 3}, v), label, {1, 1, 1})->item();
    CHECK(l < prev);
    prev = l;
  }
  CHECK(prev < 1e-6);
}

TEST_CASE("hard prediction inside ground truth: dice 2/3") {
  // Prediction covers 4 of the 8 ground-truth pixels.
  std::vector<std::uint8_t> gt(16, 0), pred(16, 0);
  for (int i = 0; i < 8; ++i) gt[i] = 1;
  for (int i = 0; i < 4; ++i) pred[i] = 1;
  std::vector<double> probs(32);
  for (int i = 0; i < 16; ++i) {
    probs[16 + i] = pred[i];
    probs[i] = 1.0 - pred[i];
  }
  const double loss = soft_dice_loss(probs, gt, 2);
  CHECK(1.0 - loss == doctest::Approx(2.0 * 4 / 12).epsilon(1e-5));
  CHECK(loss == doctest::Approx(1.0 / 3.0).epsilon(1e-5));
}

TEST_CASE("dice + weighted CE matches a direct oracle and finite differences") {
  std::mt19937_64 rng(3);
  const int c = 3;
  std::vector<std::uint8_t> label(20);
  for (auto& v : label) v = static_cast<std::uint8_t>(rng() % c);
  const auto w = inverse_frequency_weights(label, c);
  auto z = testing::random_param(rng, {c, 4, 5});
  CHECK(dice_ce_loss(z, label, w)->item() == doctest::Approx(dice_ce_oracle(z->value, label, c, w)).epsilon(1e-12));
  auto r = testing::grad_check([&] { return dice_ce_loss(z, label, w); }, {z}, rng, 60);
  CHECK(r.max_rel < 1e-6);
  std::vector<std::uint8_t> bad = label;
  bad[0] = 7;
  CHECK_THROWS_AS(dice_ce_loss(z, bad, w), Error);
}

TEST_CASE("inverse frequency weights are clipped and absent classes get the cap") {
  std::vector<std::uint8_t> label(100, 0);
  label[0] = 1;
  const auto w = inverse_frequency_weights(label, 3);
  CHECK(w[0] == doctest::Approx(100.0 / (3 * 99)));
  CHECK(w[1] == 10.0);  // 100/3 clipped
  CHECK(w[2] == 10.0);  // absent
  const auto lo = inverse_frequency_weights(std::vector<std::uint8_t>(100, 1), 40);
  CHECK(lo[1] == 0.1);
}

TEST_CASE("deep supervision weights halve per level") {
  const auto w = deep_supervision_weights(3);
  REQUIRE(w.size() == 3);
  CHECK(w[0] == 0.5);
  CHECK(w[1] == 0.25);
  CHECK(w[2] == 0.125);
}

TEST_CASE("fuse loss is the weighted sum of per-tap losses at full resolution") {
  std::mt19937_64 rng(5);
  std::vector<std::uint8_t> label(64);
  for (auto& v : label) v = static_cast<std::uint8_t>(rng() % 3);
  const auto w = inverse_frequency_weights(label, 3);
  std::vector<ag::Var> taps = {testing::random_param(rng, {3, 8, 8}), testing::random_param(rng, {3, 4, 4}),
                               testing::random_param(rng, {3, 2, 2})};
  double expect = 0;
  const double lam[] = {0.5, 0.25, 0.125};
  for (int l = 0; l < 3; ++l) expect += lam[l] * dice_ce_loss(ag::resize_bilinear(taps[l], 8, 8), label, w)->item();
  CHECK(fuse_loss(taps, label, 8, 8, w)->item() == doctest::Approx(expect).epsilon(1e-13));
  auto r = testing::grad_check([&] { return fuse_loss(taps, label, 8, 8, w); }, taps, rng);
  CHECK(r.max_rel < 1e-6);

  // Identical per-level losses v: the geometric sum gives v (2^L - 1) / 2^L.
  std::vector<double> same(3 * 64);
  for (auto& v : same) v = std::normal_distribution<double>()(rng);
  const double v = dice_ce_loss(ag::constant({3, 8, 8}, same), label, w)->item();
  std::vector<ag::Var> equal = {ag::constant({3, 8, 8}, same), ag::constant({3, 8, 8}, same),
                                ag::constant({3, 8, 8}, same)};
  CHECK(fuse_loss(equal, label, 8, 8, w)->item() == doctest::Approx(v * 7.0 / 8.0).epsilon(1e-13));
}

TEST_CASE("sep losses cover exactly the present modalities") {
  std::mt19937_64 rng(6);
  std::vector<std::uint8_t> label(16);
  for (auto& v : label) v = static_cast<std::uint8_t>(rng() % 3);
  const std::vector<double> w = {1, 2, 3};
  std::map<int, ag::Var> uni = {{0, testing::random_param(rng, {3, 4, 4})}, {2, testing::random_param(rng, {3, 4, 4})}};
  auto s = sep_losses(uni, label, w);
  REQUIRE(s.size() == 2);
  CHECK(s.count(1) == 0);
  for (const auto& [m, l] : s)
    CHECK(l->item() == doctest::Approx(dice_ce_oracle(uni.at(m)->value, label, 3, w)).epsilon(1e-12));
}

TEST_CASE("total objective uses the default weights") {
  auto one = ag::scalar(1.0);
  LossBreakdown b;
  CHECK(total_loss(one, one, one, one, Lambdas{}, &b)->item() == 4.0);
  CHECK(b.total == 4.0);
  Lambdas no_distill;
  no_distill.rel = no_distill.proto = 0.0;
  CHECK(total_loss(ag::scalar(1.5), ag::scalar(0.5), one, one, no_distill)->item() == 3.5);
  auto zero = ag::scalar(0.0);
  CHECK(total_loss(zero, zero, zero, zero, Lambdas{})->item() == 0.0);
}
