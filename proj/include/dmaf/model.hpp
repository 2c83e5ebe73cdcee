#pragma once

// DMAF-Net: per-modality convolutional encoders, a dynamic modality-aware
// fusion block at every encoder level, a fusion decoder with deep-supervision
// taps and a shared uni-modal decoder.

#include <cstdint>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "dmaf/autograd.hpp"

namespace dmaf::model {

using ag::Var;

struct DmafConfig {
  int token_h = 8;  // S_d grid per modality
  int token_w = 8;
  int n_layers = 2;  // K
  int n_heads = 2;   // head width is channels / n_heads
  bool operator==(const DmafConfig&) const = default;
};

struct NetConfig {
  int n_modalities = 3;
  int n_classes = 3;
  int n_levels = 3;
  int base_channels = 8;
  int height = 64;
  int width = 64;
  DmafConfig dmaf;
  int maa_heads = 2;  // relation-distillation attention

  int channels(int level) const { return base_channels << level; }  // level is 0-based
  int level_height(int level) const { return height >> level; }
  int level_width(int level) const { return width >> level; }
  bool operator==(const NetConfig&) const = default;
};

void validate(const NetConfig& cfg);

// Named parameter registry; iteration order is construction order.
class ParamSet {
 public:
  Var add(const std::string& name, ag::Shape shape, std::vector<double> init);
  const std::vector<std::pair<std::string, Var>>& items() const { return items_; }
  std::vector<Var> with_prefix(const std::string& prefix) const;
  Var get(const std::string& name) const;

 private:
  std::vector<std::pair<std::string, Var>> items_;
};

class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}
  std::vector<double> uniform(std::size_t n, double bound);
  std::vector<double> normal(std::size_t n, double stddev);
  static std::vector<double> constant(std::size_t n, double v) { return std::vector<double>(n, v); }

 private:
  std::mt19937_64 rng_;
};

struct Conv {
  Var weight, bias;
  int stride = 1, pad = 0;
  static Conv make(ParamSet& ps, Initializer& init, const std::string& name, int in, int out, int k, int stride,
                   int pad);
  Var operator()(const Var& x) const { return ag::conv2d(x, weight, bias, stride, pad); }
};

// conv + instance norm + leaky ReLU
struct ConvBlock {
  Conv conv;
  Var gamma, beta;
  static ConvBlock make(ParamSet& ps, Initializer& init, const std::string& name, int in, int out, int stride);
  Var operator()(const Var& x) const;
};

struct Linear {
  Var weight, bias;
  static Linear make(ParamSet& ps, Initializer& init, const std::string& name, int in, int out);
  Var operator()(const Var& x) const { return ag::linear(x, weight, bias); }
};

struct LayerNorm {
  Var gamma, beta;
  static LayerNorm make(ParamSet& ps, const std::string& name, int dim);
  Var operator()(const Var& x) const { return ag::layer_norm_rows(x, gamma, beta); }
};

struct MultiHeadAttention {
  Linear q, k, v, o;
  int heads = 1;
  static MultiHeadAttention make(ParamSet& ps, Initializer& init, const std::string& name, int dim, int heads);
  Var operator()(const Var& query, const Var& keyvalue, const std::vector<bool>& key_mask,
                 std::vector<double>* probs_out = nullptr) const;
};

// Pre-norm masked attention + feed-forward, both residual.
struct TransformerLayer {
  LayerNorm ln1, ln2;
  MultiHeadAttention mha;
  Linear ffn1, ffn2;
  static TransformerLayer make(ParamSet& ps, Initializer& init, const std::string& name, int dim, int heads);
  Var operator()(const Var& tokens, const std::vector<bool>& key_mask, std::vector<double>* probs_out = nullptr) const;
};

struct FusionOutput {
  Var fused;    // [C, H, W]
  Var weights;  // [M, H, W]
};

class DmafBlock {
 public:
  DmafBlock() = default;
  DmafBlock(ParamSet& ps, Initializer& init, const std::string& name, const NetConfig& cfg, int level);

  // features: M maps [C, H, W]; presence selects contributing modalities.
  FusionOutput operator()(const std::vector<Var>& features, const std::vector<bool>& presence) const;

  const TransformerLayer& layer(int k) const { return layers_.at(k); }
  int n_tokens_per_modality() const { return token_h_ * token_w_; }

  // Attention weights of the first layer from the most recent call (for inspection).
  mutable std::vector<double> last_attention;

 private:
  Conv down_;
  Var pos_;
  std::vector<TransformerLayer> layers_;
  LayerNorm ln_out_;
  Linear head_;
  int token_h_ = 0, token_w_ = 0, n_modalities_ = 0;
};

// Masked mean over present modalities (the fusion used when DMAF is ablated).
FusionOutput mean_fusion(const std::vector<Var>& features, const std::vector<bool>& presence);

class Encoder {
 public:
  Encoder() = default;
  Encoder(ParamSet& ps, Initializer& init, const std::string& name, const NetConfig& cfg);
  std::vector<Var> operator()(const Var& image) const;  // per level, 0 = full resolution

 private:
  std::vector<std::pair<ConvBlock, ConvBlock>> levels_;
};

class Decoder {
 public:
  Decoder() = default;
  Decoder(ParamSet& ps, Initializer& init, const std::string& name, const NetConfig& cfg);
  // Logits per level (0 = full resolution). With all_taps=false only level 0 is produced.
  std::vector<Var> operator()(const std::vector<Var>& pyramid, bool all_taps) const;

 private:
  std::vector<ConvBlock> up_, merge_;
  std::vector<Conv> heads_;
};

struct ForwardOutput {
  std::vector<std::vector<Var>> uni;  // [modality][level]
  std::vector<Var> fused;             // per level
  std::vector<Var> fusion_weights;    // per level [M, H, W]
  std::vector<Var> fused_logits;      // per level
  std::map<int, Var> uni_logits;      // present modality -> full-resolution logits
};

struct ForwardOptions {
  bool use_dmaf = true;
  bool uni_decoder = true;
};

class DmafNet {
 public:
  DmafNet(const NetConfig& cfg, std::uint64_t seed);

  const NetConfig& config() const { return cfg_; }
  ParamSet& params() { return params_; }
  const ParamSet& params() const { return params_; }
  std::vector<Var> encoder_params(int m) const;

  // images: M planes of H*W (zero-filled where absent).
  std::vector<Var> encode(int m, const Var& image) const;
  FusionOutput fuse(int level, const std::vector<Var>& features, const std::vector<bool>& presence,
                    bool use_dmaf = true) const;
  std::vector<Var> decode_fused(const std::vector<Var>& fused) const;
  std::map<int, Var> decode_uni(const std::vector<std::vector<Var>>& uni, const std::vector<bool>& presence) const;
  ForwardOutput forward(const std::vector<std::vector<double>>& images, const std::vector<bool>& presence,
                        const ForwardOptions& opts = {}) const;

  const DmafBlock& dmaf_block(int level) const { return dmaf_.at(level); }

 private:
  NetConfig cfg_;
  ParamSet params_;
  std::vector<Encoder> encoders_;
  std::vector<DmafBlock> dmaf_;
  Decoder fused_decoder_;
  Decoder shared_decoder_;
};

}  // namespace dmaf::model
