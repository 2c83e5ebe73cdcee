#include "dmaf/model.hpp"

#include <algorithm>
#include <cmath>

#include "dmaf/error.hpp"

namespace dmaf::model {

namespace {
constexpr double kLeakySlope = 0.01;
}

void validate(const NetConfig& cfg) {
  require(cfg.n_modalities >= 1, ErrorCode::kConfig, "net: n_modalities must be >= 1");
  require(cfg.n_classes >= 2, ErrorCode::kConfig, "net: n_classes must be >= 2");
  require(cfg.n_levels >= 2, ErrorCode::kConfig, "net: n_levels must be >= 2");
  require(cfg.base_channels >= 1, ErrorCode::kConfig, "net: base_channels must be >= 1");
  const int scale = 1 << (cfg.n_levels - 1);
  require(cfg.height % scale == 0 && cfg.width % scale == 0, ErrorCode::kConfig,
          "net: image size must be divisible by 2^(n_levels-1)");
  const int hmin = cfg.level_height(cfg.n_levels - 1), wmin = cfg.level_width(cfg.n_levels - 1);
  const auto& d = cfg.dmaf;
  require(d.token_h >= 1 && d.token_w >= 1 && d.token_h <= hmin && d.token_w <= wmin, ErrorCode::kConfig,
          "net: token grid " + std::to_string(d.token_h) + "x" + std::to_string(d.token_w) +
              " exceeds the smallest feature map " + std::to_string(hmin) + "x" + std::to_string(wmin));
  for (int l = 0; l < cfg.n_levels; ++l)
    require(cfg.level_height(l) % d.token_h == 0 && cfg.level_width(l) % d.token_w == 0, ErrorCode::kConfig,
            "net: token grid must divide every level's feature map");
  require(d.n_layers >= 1 && d.n_heads >= 1, ErrorCode::kConfig, "net: dmaf layers/heads must be >= 1");
  for (int l = 0; l < cfg.n_levels; ++l)
    require(cfg.channels(l) % d.n_heads == 0, ErrorCode::kConfig, "net: channels not divisible by dmaf heads");
  require(cfg.maa_heads >= 1 && cfg.channels(cfg.n_levels - 1) % cfg.maa_heads == 0, ErrorCode::kConfig,
          "net: bottleneck channels not divisible by maa heads");
}

Var ParamSet::add(const std::string& name, ag::Shape shape, std::vector<double> init) {
  for (const auto& [n, _] : items_) require(n != name, ErrorCode::kInternal, "duplicate parameter " + name);
  auto p = ag::parameter(std::move(shape), std::move(init));
  items_.emplace_back(name, p);
  return p;
}

std::vector<Var> ParamSet::with_prefix(const std::string& prefix) const {
  std::vector<Var> out;
  for (const auto& [n, p] : items_)
    if (n.rfind(prefix, 0) == 0) out.push_back(p);
  return out;
}

Var ParamSet::get(const std::string& name) const {
  for (const auto& [n, p] : items_)
    if (n == name) return p;
  fail(ErrorCode::kInvalidArgument, "no parameter named " + name);
}

std::vector<double> Initializer::uniform(std::size_t n, double bound) {
  std::uniform_real_distribution<double> d(-bound, bound);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng_);
  return v;
}

std::vector<double> Initializer::normal(std::size_t n, double stddev) {
  std::normal_distribution<double> d(0.0, stddev);
  std::vector<double> v(n);
  for (auto& x : v) x = d(rng_);
  return v;
}

Conv Conv::make(ParamSet& ps, Initializer& init, const std::string& name, int in, int out, int k, int stride,
                int pad) {
  const double fan_in = static_cast<double>(in) * k * k;
  const double bound = std::sqrt(6.0 / ((1.0 + kLeakySlope * kLeakySlope) * fan_in));
  Conv c;
  c.weight = ps.add(name + ".weight", {out, in, k, k}, init.uniform(static_cast<std::size_t>(out) * in * k * k, bound));
  c.bias = ps.add(name + ".bias", {out}, Initializer::constant(out, 0.0));
  c.stride = stride;
  c.pad = pad;
  return c;
}

ConvBlock ConvBlock::make(ParamSet& ps, Initializer& init, const std::string& name, int in, int out, int stride) {
  ConvBlock b;
  b.conv = Conv::make(ps, init, name + ".conv", in, out, 3, stride, 1);
  b.gamma = ps.add(name + ".norm.gamma", {out}, Initializer::constant(out, 1.0));
  b.beta = ps.add(name + ".norm.beta", {out}, Initializer::constant(out, 0.0));
  return b;
}

Var ConvBlock::operator()(const Var& x) const {
  return ag::leaky_relu(ag::instance_norm(conv(x), gamma, beta), kLeakySlope);
}

Linear Linear::make(ParamSet& ps, Initializer& init, const std::string& name, int in, int out) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in));
  Linear l;
  l.weight = ps.add(name + ".weight", {out, in}, init.uniform(static_cast<std::size_t>(out) * in, bound));
  l.bias = ps.add(name + ".bias", {out}, init.uniform(out, bound));
  return l;
}

LayerNorm LayerNorm::make(ParamSet& ps, const std::string& name, int dim) {
  return {ps.add(name + ".gamma", {dim}, Initializer::constant(dim, 1.0)),
          ps.add(name + ".beta", {dim}, Initializer::constant(dim, 0.0))};
}

MultiHeadAttention MultiHeadAttention::make(ParamSet& ps, Initializer& init, const std::string& name, int dim,
                                            int heads) {
  MultiHeadAttention a;
  a.q = Linear::make(ps, init, name + ".q", dim, dim);
  a.k = Linear::make(ps, init, name + ".k", dim, dim);
  a.v = Linear::make(ps, init, name + ".v", dim, dim);
  a.o = Linear::make(ps, init, name + ".o", dim, dim);
  a.heads = heads;
  return a;
}

Var MultiHeadAttention::operator()(const Var& query, const Var& keyvalue, const std::vector<bool>& key_mask,
                                   std::vector<double>* probs_out) const {
  return o(ag::attention(q(query), k(keyvalue), v(keyvalue), heads, key_mask, probs_out));
}

TransformerLayer TransformerLayer::make(ParamSet& ps, Initializer& init, const std::string& name, int dim, int heads) {
  TransformerLayer t;
  t.ln1 = LayerNorm::make(ps, name + ".ln1", dim);
  t.mha = MultiHeadAttention::make(ps, init, name + ".mha", dim, heads);
  t.ln2 = LayerNorm::make(ps, name + ".ln2", dim);
  t.ffn1 = Linear::make(ps, init, name + ".ffn1", dim, 2 * dim);
  t.ffn2 = Linear::make(ps, init, name + ".ffn2", 2 * dim, dim);
  return t;
}

Var TransformerLayer::operator()(const Var& tokens, const std::vector<bool>& key_mask,
                                 std::vector<double>* probs_out) const {
  auto normed = ln1(tokens);
  auto mid = ag::add(mha(normed, normed, key_mask, probs_out), tokens);
  return ag::add(ffn2(ag::gelu(ffn1(ln2(mid)))), mid);
}

DmafBlock::DmafBlock(ParamSet& ps, Initializer& init, const std::string& name, const NetConfig& cfg, int level)
    : token_h_(cfg.dmaf.token_h), token_w_(cfg.dmaf.token_w), n_modalities_(cfg.n_modalities) {
  const int c = cfg.channels(level);
  const int fy = cfg.level_height(level) / token_h_;
  const int fx = cfg.level_width(level) / token_w_;
  require(fy == fx, ErrorCode::kConfig, "net: token grid must downsample both axes by the same factor");
  down_ = Conv::make(ps, init, name + ".down", c, c, fy, fy, 0);
  const int n_tok = n_modalities_ * token_h_ * token_w_;
  pos_ = ps.add(name + ".pos", {n_tok, c}, init.normal(static_cast<std::size_t>(n_tok) * c, 0.02));
  for (int k = 0; k < cfg.dmaf.n_layers; ++k)
    layers_.push_back(TransformerLayer::make(ps, init, name + ".layer" + std::to_string(k), c, cfg.dmaf.n_heads));
  ln_out_ = LayerNorm::make(ps, name + ".ln_out", c);
  head_ = Linear::make(ps, init, name + ".head", c, 1);
}

FusionOutput DmafBlock::operator()(const std::vector<Var>& features, const std::vector<bool>& presence) const {
  require(static_cast<int>(features.size()) == n_modalities_ && presence.size() == features.size(),
          ErrorCode::kShapeMismatch, "dmaf: expected one feature map per modality");
  require(std::find(presence.begin(), presence.end(), true) != presence.end(), ErrorCode::kInvalidArgument,
          "dmaf: every modality is absent");
  const auto& shape = features[0]->shape;
  for (const auto& f : features)
    require(f->shape == shape, ErrorCode::kShapeMismatch, "dmaf: modality feature shapes differ");
  const int h = shape[1], w = shape[2];
  const int s = token_h_ * token_w_;

  // Absent modalities are replaced by constant zeros, cutting every dependency on them.
  std::vector<Var> masked;
  std::vector<Var> tokens;
  std::vector<bool> key_mask;
  for (int m = 0; m < n_modalities_; ++m) {
    masked.push_back(presence[m] ? features[m] : ag::zeros(shape));
    tokens.push_back(ag::map_to_tokens(down_(masked.back())));
    key_mask.insert(key_mask.end(), s, presence[m]);
  }
  auto t = ag::add(ag::concat_rows(tokens), pos_);
  for (std::size_t k = 0; k < layers_.size(); ++k) t = layers_[k](t, key_mask, k == 0 ? &last_attention : nullptr);
  auto logits = head_(ln_out_(t));  // [M*S, 1]
  std::vector<Var> maps;
  for (int m = 0; m < n_modalities_; ++m) {
    auto grid = ag::tokens_to_map(ag::slice_rows(logits, m * s, s), token_h_, token_w_);
    maps.push_back(ag::resize_bilinear(grid, h, w));
  }
  auto weights = ag::masked_softmax_stack(maps, presence);
  return {ag::weighted_fusion(masked, weights), weights};
}

FusionOutput mean_fusion(const std::vector<Var>& features, const std::vector<bool>& presence) {
  require(!features.empty() && features.size() == presence.size(), ErrorCode::kShapeMismatch,
          "mean_fusion: features/presence length");
  const int n_present = static_cast<int>(std::count(presence.begin(), presence.end(), true));
  require(n_present > 0, ErrorCode::kInvalidArgument, "mean_fusion: every modality is absent");
  const auto& shape = features[0]->shape;
  const std::size_t hw = static_cast<std::size_t>(shape[1]) * shape[2];
  const int m_count = static_cast<int>(features.size());
  std::vector<double> w(m_count * hw, 0.0);
  std::vector<Var> masked;
  for (int m = 0; m < m_count; ++m) {
    masked.push_back(presence[m] ? features[m] : ag::zeros(shape));
    if (presence[m]) std::fill(w.begin() + m * hw, w.begin() + (m + 1) * hw, 1.0 / n_present);
  }
  auto weights = ag::constant({m_count, shape[1], shape[2]}, std::move(w));
  return {ag::weighted_fusion(masked, weights), weights};
}

Encoder::Encoder(ParamSet& ps, Initializer& init, const std::string& name, const NetConfig& cfg) {
  for (int l = 0; l < cfg.n_levels; ++l) {
    const std::string p = name + ".l" + std::to_string(l);
    const int in = l == 0 ? 1 : cfg.channels(l - 1);
    const int out = cfg.channels(l);
    levels_.emplace_back(ConvBlock::make(ps, init, p + ".a", in, out, l == 0 ? 1 : 2),
                         ConvBlock::make(ps, init, p + ".b", out, out, 1));
  }
}

std::vector<Var> Encoder::operator()(const Var& image) const {
  std::vector<Var> out;
  Var x = image;
  for (const auto& [a, b] : levels_) {
    x = b(a(x));
    out.push_back(x);
  }
  return out;
}

Decoder::Decoder(ParamSet& ps, Initializer& init, const std::string& name, const NetConfig& cfg) {
  for (int l = 0; l + 1 < cfg.n_levels; ++l) {
    const std::string p = name + ".l" + std::to_string(l);
    up_.push_back(ConvBlock::make(ps, init, p + ".up", cfg.channels(l + 1), cfg.channels(l), 1));
    merge_.push_back(ConvBlock::make(ps, init, p + ".merge", 2 * cfg.channels(l), cfg.channels(l), 1));
  }
  for (int l = 0; l < cfg.n_levels; ++l)
    heads_.push_back(Conv::make(ps, init, name + ".head" + std::to_string(l), cfg.channels(l), cfg.n_classes, 1, 1, 0));
}

std::vector<Var> Decoder::operator()(const std::vector<Var>& pyramid, bool all_taps) const {
  const int levels = static_cast<int>(heads_.size());
  require(static_cast<int>(pyramid.size()) == levels, ErrorCode::kShapeMismatch, "decoder: pyramid depth");
  std::vector<Var> taps(levels);
  Var d = pyramid[levels - 1];
  if (all_taps) taps[levels - 1] = heads_[levels - 1](d);
  for (int l = levels - 2; l >= 0; --l) {
    auto u = up_[l](ag::upsample_nearest2x(d));
    d = merge_[l](ag::concat_channels({u, pyramid[l]}));
    if (all_taps || l == 0) taps[l] = heads_[l](d);
  }
  if (!all_taps) taps.resize(1);
  return taps;
}

DmafNet::DmafNet(const NetConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  validate(cfg_);
  Initializer init(seed);
  for (int m = 0; m < cfg_.n_modalities; ++m)
    encoders_.emplace_back(params_, init, "enc" + std::to_string(m), cfg_);
  for (int l = 0; l < cfg_.n_levels; ++l) dmaf_.emplace_back(params_, init, "dmaf" + std::to_string(l), cfg_, l);
  fused_decoder_ = Decoder(params_, init, "dec_fused", cfg_);
  shared_decoder_ = Decoder(params_, init, "dec_shared", cfg_);
}

std::vector<Var> DmafNet::encoder_params(int m) const { return params_.with_prefix("enc" + std::to_string(m) + "."); }

std::vector<Var> DmafNet::encode(int m, const Var& image) const {
  require(m >= 0 && m < cfg_.n_modalities, ErrorCode::kInvalidArgument, "encode: modality index");
  require(image->shape == ag::Shape({1, cfg_.height, cfg_.width}), ErrorCode::kShapeMismatch,
          "encode: image " + ag::shape_str(image->shape) + " does not match config " + std::to_string(cfg_.height) +
              "x" + std::to_string(cfg_.width));
  return encoders_[m](image);
}

FusionOutput DmafNet::fuse(int level, const std::vector<Var>& features, const std::vector<bool>& presence,
                           bool use_dmaf) const {
  return use_dmaf ? dmaf_.at(level)(features, presence) : mean_fusion(features, presence);
}

std::vector<Var> DmafNet::decode_fused(const std::vector<Var>& fused) const { return fused_decoder_(fused, true); }

std::map<int, Var> DmafNet::decode_uni(const std::vector<std::vector<Var>>& uni,
                                       const std::vector<bool>& presence) const {
  std::map<int, Var> out;
  for (int m = 0; m < cfg_.n_modalities; ++m)
    if (presence.at(m)) out[m] = shared_decoder_(uni.at(m), false)[0];
  return out;
}

ForwardOutput DmafNet::forward(const std::vector<std::vector<double>>& images, const std::vector<bool>& presence,
                               const ForwardOptions& opts) const {
  require(static_cast<int>(images.size()) == cfg_.n_modalities && static_cast<int>(presence.size()) == cfg_.n_modalities,
          ErrorCode::kShapeMismatch, "forward: modality count does not match config");
  ForwardOutput out;
  for (int m = 0; m < cfg_.n_modalities; ++m) {
    if (presence[m]) {
      out.uni.push_back(encode(m, ag::constant({1, cfg_.height, cfg_.width}, images[m])));
      continue;
    }
    // Absent modalities never reach the fusion, so their encoders are skipped.
    std::vector<Var> blank;
    for (int l = 0; l < cfg_.n_levels; ++l)
      blank.push_back(ag::zeros({cfg_.channels(l), cfg_.level_height(l), cfg_.level_width(l)}));
    out.uni.push_back(std::move(blank));
  }
  for (int l = 0; l < cfg_.n_levels; ++l) {
    std::vector<Var> feats;
    for (int m = 0; m < cfg_.n_modalities; ++m) feats.push_back(out.uni[m][l]);
    auto f = fuse(l, feats, presence, opts.use_dmaf);
    out.fused.push_back(f.fused);
    out.fusion_weights.push_back(f.weights);
  }
  out.fused_logits = decode_fused(out.fused);
  if (opts.uni_decoder) out.uni_logits = decode_uni(out.uni, presence);
  return out;
}

}  // namespace dmaf::model
