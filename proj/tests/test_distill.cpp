#include <cmath>

#include "doctest.h"
#include "dmaf/distill.hpp"
#include "dmaf/error.hpp"
#include "support.hpp"

using namespace dmaf;
using namespace dmaf::distill;

namespace {

std::vector<double> cov_oracle(const std::vector<double>& x, int c, int n) {
  std::vector<double> out(c * c, 0.0);
  for (int a = 0; a < c; ++a)
    for (int b = 0; b < c; ++b) {
      double ma = 0, mb = 0;
      for (int i = 0; i < n; ++i) {
        ma += x[a * n + i];
        mb += x[b * n + i];
      }
      ma /= n;
      mb /= n;
      double s = 0;
      for (int i = 0; i < n; ++i) s += (x[a * n + i] - ma) * (x[b * n + i] - mb);
      out[a * c + b] = s / n;
    }
  return out;
}

std::vector<std::uint8_t> random_labels(std::mt19937_64& rng, std::size_t n, int k) {
  std::uniform_int_distribution<int> d(0, k - 1);
  std::vector<std::uint8_t> v(n);
  for (auto& x : v) x = static_cast<std::uint8_t>(d(rng));
  return v;
}

}  // namespace

TEST_CASE("covariance matches a two-pass brute force") {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    const int c = 1 + trial % 5, h = 2 + trial % 3, w = 1 + trial % 4;
    auto x = testing::randn(rng, c * h * w, 2.0);
    for (auto& v : x) v += 3.0;
    const auto got = covariance(ag::constant({c, h, w}, x))->value;
    const auto want = cov_oracle(x, c, h * w);
    for (std::size_t i = 0; i < want.size(); ++i) CHECK(got[i] == doctest::Approx(want[i]).epsilon(1e-12));
  }
}

TEST_CASE("covariance small cases") {
  // constant channel next to an alternating one
  const auto cov = covariance(ag::constant({2, 2, 2}, {3, 3, 3, 3, 0, 1, 0, 1}))->value;
  CHECK(cov[0] == 0.0);
  CHECK(cov[1] == 0.0);
  CHECK(cov[2] == 0.0);
  CHECK(cov[3] == doctest::Approx(0.25));

  const auto flat = covariance(ag::constant({3, 4, 4}, std::vector<double>(48, -1.7)));
  for (double v : flat->value) CHECK(std::abs(v) < 1e-15);
}

TEST_CASE("covariance is symmetric, positive semidefinite and quadratic in scale") {
  std::mt19937_64 rng(8);
  for (int trial = 0; trial < 20; ++trial) {
    const int c = 3;
    auto x = testing::randn(rng, c * 25);
    const auto cov = covariance(ag::constant({c, 5, 5}, x))->value;
    for (int a = 0; a < c; ++a)
      for (int b = 0; b < c; ++b) CHECK(cov[a * c + b] == cov[b * c + a]);
    for (int k = 0; k < 10; ++k) {
      const auto z = testing::randn(rng, c);
      double q = 0;
      for (int a = 0; a < c; ++a)
        for (int b = 0; b < c; ++b) q += z[a] * cov[a * c + b] * z[b];
      CHECK(q >= -1e-12);
    }
    const double s = 1.0 + trial * 0.3;
    for (auto& v : x) v *= s;
    const auto scaled = covariance(ag::constant({c, 5, 5}, x))->value;
    for (int i = 0; i < c * c; ++i) CHECK(scaled[i] == doctest::Approx(s * s * cov[i]).epsilon(1e-10));
  }
}

TEST_CASE("covariance loss with an identity projector") {
  const auto eye = [](int n) {
    std::vector<double> e(n * n, 0.0);
    for (int i = 0; i < n; ++i) e[i * n + i] = 1.0;
    return ag::constant({n, n}, e);
  };
  std::mt19937_64 rng(5);
  auto a = testing::randn(rng, 9);
  CHECK(cov_loss(ag::constant({3, 3}, a), ag::constant({3, 3}, a), eye(9))->item() == 0.0);
  auto b = a;
  for (auto& v : b) v += 1.0;
  CHECK(cov_loss(ag::constant({3, 3}, a), ag::constant({3, 3}, b), eye(9))->item() == doctest::Approx(1.0));
  CHECK_THROWS_AS(cov_loss(ag::constant({3, 3}, a), ag::constant({3, 3}, b), eye(4)), Error);
}

TEST_CASE("attention over a single fused token returns its projected value") {
  model::ParamSet ps;
  model::Initializer init(2);
  const auto mha = model::MultiHeadAttention::make(ps, init, "a", 4, 2);
  std::mt19937_64 rng(1);
  const auto u = testing::randn(rng, 4), f = testing::randn(rng, 4);
  auto r = masked_attention_align(mha, ag::constant({4, 1, 1}, u), ag::constant({4, 1, 1}, f), {true});
  auto ft = ag::constant({1, 4}, f);
  const auto expected = mha.o(mha.v(ft))->value;
  for (int i = 0; i < 4; ++i) CHECK(r.attended->value[i] == doctest::Approx(expected[i]).epsilon(1e-12));
  double mse = 0;
  for (int i = 0; i < 4; ++i) mse += (expected[i] - f[i]) * (expected[i] - f[i]) / 4;
  CHECK(r.loss->item() == doctest::Approx(mse).epsilon(1e-12));
}

TEST_CASE("masked keys get zero attention weight") {
  model::ParamSet ps;
  model::Initializer init(4);
  const auto mha = model::MultiHeadAttention::make(ps, init, "a", 4, 2);
  std::mt19937_64 rng(6);
  const auto u = ag::constant({4, 2, 2}, testing::randn(rng, 16));
  const auto f = ag::constant({4, 2, 2}, testing::randn(rng, 16));
  const std::vector<bool> mask = {true, false, true, false};
  auto r = masked_attention_align(mha, u, f, mask);
  REQUIRE(r.probs.size() == 2u * 4 * 4);
  for (std::size_t i = 0; i < r.probs.size(); ++i) {
    if (!mask[i % 4]) CHECK(r.probs[i] == 0.0);
  }
  CHECK_THROWS_AS(fused_key_mask({false, false}, 4), Error);
  CHECK(fused_key_mask({false, true}, 3) == std::vector<bool>{true, true, true});
}

TEST_CASE("relation loss mixes the two terms by alpha1 and averages over modalities") {
  auto a1 = ag::scalar(0.6);
  std::map<int, Var> cov = {{0, ag::scalar(1.0)}}, attn = {{0, ag::scalar(2.0)}};
  CHECK(relation_loss(cov, attn, a1)->item() == doctest::Approx(1.4));
  cov[2] = ag::scalar(1.0);
  attn[2] = ag::scalar(2.0);
  CHECK(relation_loss(cov, attn, a1)->item() == doctest::Approx(1.4));
  cov[1] = ag::scalar(0.0);
  attn[1] = ag::scalar(0.0);
  CHECK(relation_loss(cov, attn, a1)->item() == doctest::Approx(2.8 / 3));
  CHECK_THROWS_AS(relation_loss({}, {}, a1), Error);
}

TEST_CASE("prototypes are eps-damped class means") {
  // 1 channel, 2x3 map: class 1 covers four pixels with value v
  const double v = 2.5;
  const std::vector<std::uint8_t> label = {1, 1, 0, 1, 1, 0};
  auto f = ag::constant({1, 2, 3}, {v, v, -1, v, v, -3});
  const auto p = prototypes(f, label, 3, 1e-5)->value;
  CHECK(p[1] == doctest::Approx(v * 4 / (4 + 1e-5)).epsilon(1e-14));
  CHECK(p[0] == doctest::Approx(-4 / (2 + 1e-5)).epsilon(1e-14));
  CHECK(p[2] == 0.0);  // empty class
  const auto off = prototypes(f, label, 3, 1e-5, false);
  for (double x : off->value) CHECK(x == 0.0);
}

TEST_CASE("prototype cosine terms") {
  auto a = ag::constant({1, 3}, {1, 2, 3});
  CHECK(prototype_alignment(a, a, 1.0).loss->item() == doctest::Approx(0.0).epsilon(1e-15));
  CHECK(prototype_alignment(a, a, 2.0).loss->item() == doctest::Approx(0.5));
  auto o = ag::constant({1, 3}, {3, 0, -1});
  CHECK(prototype_alignment(a, o, 1.0).loss->item() == doctest::Approx(1.0));
  auto opp = ag::constant({1, 3}, {-2, -4, -6});
  CHECK(prototype_alignment(a, opp, 1.0).loss->item() == doctest::Approx(2.0));

  // skipped classes count neither in the loss nor in the gap
  auto two = ag::constant({2, 3}, {1, 2, 3, 0, 0, 0});
  auto other = ag::constant({2, 3}, {3, 0, -1, 1, 1, 1});
  auto r = prototype_alignment(two, other, 1.0);
  CHECK(r.n_valid == 1);
  CHECK(std::isnan(r.terms[1]));
  CHECK(r.gap() == doctest::Approx(1.0));

  // floating-point parallel vectors never produce a negative term
  std::mt19937_64 rng(9);
  for (int i = 0; i < 200; ++i) {
    auto x = testing::randn(rng, 16);
    auto p = ag::constant({1, 16}, x);
    CHECK(prototype_alignment(p, p, 1.0).terms[0] >= 0.0);
  }
}

TEST_CASE("prototype alignment is invariant to rescaling either prototype") {
  std::mt19937_64 rng(12);
  for (int i = 0; i < 30; ++i) {
    auto x = testing::randn(rng, 12), y = testing::randn(rng, 12);
    const double base = prototype_alignment(ag::constant({3, 4}, x), ag::constant({3, 4}, y), 1.5).loss->item();
    const double s = 0.01 + i * 0.7;
    for (auto& v : y) v *= s;
    CHECK(prototype_alignment(ag::constant({3, 4}, x), ag::constant({3, 4}, y), 1.5).loss->item() ==
          doctest::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("mode pooling takes the majority and breaks ties toward the larger class") {
  const std::vector<std::uint8_t> label = {
      0, 0, 1, 2,  //
      0, 1, 2, 1,  //
      2, 2, 0, 0,  //
      1, 1, 1, 1,  //
  };
  const auto p = pool_label_mode(label, 4, 4, 2, 2, 3);
  CHECK(p == std::vector<std::uint8_t>{0, 2, 2, 1});
  CHECK_THROWS_AS(pool_label_mode(label, 4, 4, 3, 3, 3), Error);
}

TEST_CASE("relation and prototype losses have correct gradients") {
  std::mt19937_64 rng(21);
  model::NetConfig cfg;
  cfg.n_levels = 2;
  cfg.base_channels = 4;
  cfg.height = cfg.width = 16;
  cfg.maa_heads = 2;
  model::ParamSet ps;
  model::Initializer init(7);
  DistillHead head(ps, init, cfg, 0.6);
  const int c = cfg.channels(1);
  const std::vector<bool> presence = {true, false, true};
  std::vector<Var> uni;
  for (int m = 0; m < 3; ++m) uni.push_back(testing::random_param(rng, {c, 4, 4}));
  auto fused = testing::random_param(rng, {c, 4, 4});
  const auto label = random_labels(rng, 16 * 16, 3);
  DistillConfig dc;
  dc.tau = {1.0, 1.0, 1.5};
  dc.stop_teacher_grad = false;
  std::vector<Var> params = {uni[0], uni[2], fused, head.projector, head.alpha_raw};
  for (auto& p : ps.with_prefix("distill.maa")) params.push_back(p);

  auto rel = testing::grad_check(
      [&] { return distill::distill(head, uni, fused, label, 16, 16, presence, 3, dc).rel; }, params, rng);
  CHECK(rel.max_rel < 1e-4);
  auto proto = testing::grad_check(
      [&] { return distill::distill(head, uni, fused, label, 16, 16, presence, 3, dc).proto; }, {uni[0], uni[2], fused}, rng);
  CHECK(proto.max_rel < 1e-4);
}

TEST_CASE("absent modalities do not influence distillation") {
  std::mt19937_64 rng(31);
  model::NetConfig cfg;
  cfg.n_levels = 2;
  cfg.base_channels = 4;
  cfg.height = cfg.width = 16;
  model::ParamSet ps;
  model::Initializer init(3);
  DistillHead head(ps, init, cfg, 0.6);
  const int c = cfg.channels(1);
  std::vector<Var> uni;
  for (int m = 0; m < 3; ++m) uni.push_back(testing::random_param(rng, {c, 4, 4}));
  auto fused = testing::random_param(rng, {c, 4, 4});
  const auto label = random_labels(rng, 256, 3);
  DistillConfig dc;
  dc.tau = {1.0, 1.0, 1.0};
  const std::vector<bool> presence = {true, false, true};
  auto a = distill::distill(head, uni, fused, label, 16, 16, presence, 3, dc);
  uni[1] = testing::random_param(rng, {c, 4, 4}, 50.0);
  auto b = distill::distill(head, uni, fused, label, 16, 16, presence, 3, dc);
  CHECK(a.rel->item() == b.rel->item());
  CHECK(a.proto->item() == b.proto->item());
  CHECK(a.gap_rel.count(1) == 0);
  CHECK(a.gap_proto == b.gap_proto);

  ag::backward(ag::add(b.rel, b.proto));
  CHECK(uni[1]->grad.empty());
  CHECK(fused->grad.empty());  // teacher is detached by default
}
