#include "dmaf/distill.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

#include "dmaf/error.hpp"

namespace dmaf::distill {

Var covariance(const Var& feature) {
  require(feature->shape.size() == 3, ErrorCode::kShapeMismatch, "covariance: expected [C,H,W]");
  const int c = feature->dim(0);
  const std::size_t n = static_cast<std::size_t>(feature->dim(1)) * feature->dim(2);
  require(n >= 1, ErrorCode::kShapeMismatch, "covariance: empty spatial extent");
  auto centered = std::make_shared<std::vector<double>>(feature->size());
  for (int ch = 0; ch < c; ++ch) {
    const double* src = feature->value.data() + ch * n;
    double mu = 0.0;
    for (std::size_t i = 0; i < n; ++i) mu += src[i];
    mu /= static_cast<double>(n);
    for (std::size_t i = 0; i < n; ++i) (*centered)[ch * n + i] = src[i] - mu;
  }
  std::vector<double> cov(static_cast<std::size_t>(c) * c);
  for (int a = 0; a < c; ++a)
    for (int b = a; b < c; ++b) {
      const double* xa = centered->data() + a * n;
      const double* xb = centered->data() + b * n;
      double s = 0.0;
      for (std::size_t i = 0; i < n; ++i) s += xa[i] * xb[i];
      cov[a * c + b] = cov[b * c + a] = s / static_cast<double>(n);
    }
  auto out = ag::make_op({c, c}, std::move(cov), {feature});
  if (out->requires_grad)
    out->backward_fn = [feature, centered, c, n](ag::Node& node) {
      auto* g = ag::grad_of(feature);
      // dX = (1/N) (G + G^T) Xc; centering drops out because Xc rows sum to zero.
      for (int a = 0; a < c; ++a)
        for (int b = 0; b < c; ++b) {
          const double gs = (node.grad[a * c + b] + node.grad[b * c + a]) / static_cast<double>(n);
          if (gs == 0.0) continue;
          const double* xb = centered->data() + b * n;
          double* ga = g->data() + a * n;
          for (std::size_t i = 0; i < n; ++i) ga[i] += gs * xb[i];
        }
    };
  return out;
}

Var cov_loss(const Var& uni_cov, const Var& fused_cov, const Var& projector) {
  require(uni_cov->shape == fused_cov->shape, ErrorCode::kShapeMismatch, "cov_loss: covariance shapes differ");
  const int cc = static_cast<int>(uni_cov->size());
  require(projector->shape == ag::Shape({cc, cc}), ErrorCode::kShapeMismatch, "cov_loss: projector shape");
  auto projected = ag::linear(ag::reshape(uni_cov, {1, cc}), projector, nullptr);
  return ag::mse(projected, ag::reshape(fused_cov, {1, cc}));
}

AttentionAlignment masked_attention_align(const model::MultiHeadAttention& mha, const Var& uni_feature,
                                          const Var& fused_feature, const std::vector<bool>& key_mask) {
  require(uni_feature->shape == fused_feature->shape, ErrorCode::kShapeMismatch,
          "attention alignment: uni and fused bottleneck shapes differ");
  auto q = ag::map_to_tokens(uni_feature);
  auto kv = ag::map_to_tokens(fused_feature);
  AttentionAlignment r;
  r.attended = mha(q, kv, key_mask, &r.probs);
  r.loss = ag::mse(r.attended, kv);
  return r;
}

std::vector<bool> fused_key_mask(const std::vector<bool>& presence, int n_tokens) {
  const bool any = std::find(presence.begin(), presence.end(), true) != presence.end();
  require(any, ErrorCode::kInvalidArgument, "fused_key_mask: every modality is absent");
  return std::vector<bool>(n_tokens, true);
}

Var relation_loss(const std::map<int, Var>& cov_losses, const std::map<int, Var>& attn_losses, const Var& alpha1) {
  require(!cov_losses.empty(), ErrorCode::kInvalidArgument, "relation_loss: no present modality");
  require(cov_losses.size() == attn_losses.size(), ErrorCode::kInternal, "relation_loss: term maps differ");
  auto one_minus = ag::add(ag::scale(alpha1, -1.0), ag::scalar(1.0));
  std::vector<Var> terms;
  for (const auto& [m, lc] : cov_losses) {
    auto it = attn_losses.find(m);
    require(it != attn_losses.end(), ErrorCode::kInternal, "relation_loss: missing attention term");
    terms.push_back(ag::add(ag::scale_by(lc, alpha1), ag::scale_by(it->second, one_minus)));
  }
  return ag::scale(ag::add_n(terms), 1.0 / static_cast<double>(terms.size()));
}

std::vector<std::uint8_t> pool_label_mode(std::span<const std::uint8_t> label, int height, int width, int out_h,
                                          int out_w, int n_classes) {
  require(label.size() == static_cast<std::size_t>(height) * width, ErrorCode::kShapeMismatch, "pool_label_mode: size");
  require(out_h > 0 && out_w > 0 && height % out_h == 0 && width % out_w == 0, ErrorCode::kShapeMismatch,
          "pool_label_mode: output must divide input");
  const int fy = height / out_h, fx = width / out_w;
  std::vector<std::uint8_t> out(static_cast<std::size_t>(out_h) * out_w);
  std::vector<int> votes(n_classes);
  for (int y = 0; y < out_h; ++y)
    for (int x = 0; x < out_w; ++x) {
      std::fill(votes.begin(), votes.end(), 0);
      for (int dy = 0; dy < fy; ++dy)
        for (int dx = 0; dx < fx; ++dx) ++votes.at(label[(y * fy + dy) * width + x * fx + dx]);
      int best = 0;
      for (int c = 1; c < n_classes; ++c)
        if (votes[c] >= votes[best]) best = c;
      out[y * out_w + x] = static_cast<std::uint8_t>(best);
    }
  return out;
}

std::vector<int> class_counts(std::span<const std::uint8_t> label, int n_classes) {
  std::vector<int> counts(n_classes, 0);
  for (auto v : label) {
    require(v < n_classes, ErrorCode::kInvalidArgument, "class_counts: label out of range");
    ++counts[v];
  }
  return counts;
}

Var prototypes(const Var& feature, std::span<const std::uint8_t> label, int n_classes, double eps, bool indicator) {
  require(feature->shape.size() == 3, ErrorCode::kShapeMismatch, "prototypes: expected [C,H,W]");
  const int c = feature->dim(0);
  const std::size_t n = static_cast<std::size_t>(feature->dim(1)) * feature->dim(2);
  require(label.size() == n, ErrorCode::kShapeMismatch, "prototypes: label must be at feature resolution");
  const auto counts = class_counts(label, n_classes);
  const double ind = indicator ? 1.0 : 0.0;
  std::vector<double> p(static_cast<std::size_t>(n_classes) * c, 0.0);
  for (int ch = 0; ch < c; ++ch) {
    const double* src = feature->value.data() + ch * n;
    for (std::size_t i = 0; i < n; ++i) p[label[i] * c + ch] += src[i];
  }
  for (int k = 0; k < n_classes; ++k)
    for (int ch = 0; ch < c; ++ch) p[k * c + ch] = ind * p[k * c + ch] / (counts[k] + eps);
  auto out = ag::make_op({n_classes, c}, std::move(p), {feature});
  if (out->requires_grad) {
    std::vector<std::uint8_t> lab(label.begin(), label.end());
    out->backward_fn = [feature, lab = std::move(lab), counts, eps, ind, c, n](ag::Node& node) {
      auto* g = ag::grad_of(feature);
      for (int ch = 0; ch < c; ++ch)
        for (std::size_t i = 0; i < n; ++i) {
          const int k = lab[i];
          (*g)[ch * n + i] += ind * node.grad[k * c + ch] / (counts[k] + eps);
        }
    };
  }
  return out;
}

double PrototypeAlignment::gap() const {
  if (n_valid == 0) return 0.0;
  double s = 0.0;
  for (double t : terms)
    if (!std::isnan(t)) s += t;
  return s / n_valid;
}

PrototypeAlignment prototype_alignment(const Var& fused_protos, const Var& uni_protos, double tau) {
  require(fused_protos->shape == uni_protos->shape && fused_protos->shape.size() == 2, ErrorCode::kShapeMismatch,
          "prototype_alignment: prototype sets differ in shape");
  require(tau > 0.0, ErrorCode::kInvalidArgument, "prototype_alignment: tau must be positive");
  const int k_count = fused_protos->dim(0), c = fused_protos->dim(1);
  PrototypeAlignment r;
  r.terms.assign(k_count, std::numeric_limits<double>::quiet_NaN());
  struct ClassGeom {
    bool valid;
    double na, nb, cos;
  };
  auto geom = std::make_shared<std::vector<ClassGeom>>(k_count);
  double loss = 0.0;
  for (int k = 0; k < k_count; ++k) {
    const double* a = fused_protos->value.data() + k * c;
    const double* b = uni_protos->value.data() + k * c;
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (int i = 0; i < c; ++i) {
      dot += a[i] * b[i];
      na += a[i] * a[i];
      nb += b[i] * b[i];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    ClassGeom gk{na >= kCosineNormFloor && nb >= kCosineNormFloor, na, nb, 0.0};
    if (gk.valid) {
      gk.cos = std::clamp(dot / (na * nb), -1.0, 1.0);
      r.terms[k] = 1.0 - gk.cos / tau;
      loss += r.terms[k];
      ++r.n_valid;
    }
    (*geom)[k] = gk;
  }
  r.loss = ag::make_op({1}, {loss}, {fused_protos, uni_protos});
  if (r.loss->requires_grad)
    r.loss->backward_fn = [fused_protos, uni_protos, geom, tau, k_count, c](ag::Node& node) {
      auto* ga = ag::grad_of(fused_protos);
      auto* gb = ag::grad_of(uni_protos);
      const double g0 = -node.grad[0] / tau;
      for (int k = 0; k < k_count; ++k) {
        const auto& gk = (*geom)[k];
        if (!gk.valid) continue;
        const double* a = fused_protos->value.data() + k * c;
        const double* b = uni_protos->value.data() + k * c;
        for (int i = 0; i < c; ++i) {
          // d cos / d a = b/(|a||b|) - cos a/|a|^2, symmetric in b.
          if (ga) (*ga)[k * c + i] += g0 * (b[i] / (gk.na * gk.nb) - gk.cos * a[i] / (gk.na * gk.na));
          if (gb) (*gb)[k * c + i] += g0 * (a[i] / (gk.na * gk.nb) - gk.cos * b[i] / (gk.nb * gk.nb));
        }
      }
    };
  return r;
}

Var prototype_loss(const std::map<int, PrototypeAlignment>& per_modality) {
  require(!per_modality.empty(), ErrorCode::kInvalidArgument, "prototype_loss: no present modality");
  std::vector<Var> terms;
  for (const auto& [m, a] : per_modality) terms.push_back(a.loss);
  return ag::scale(ag::add_n(terms), 1.0 / static_cast<double>(terms.size()));
}

DistillHead::DistillHead(model::ParamSet& ps, model::Initializer& init, const model::NetConfig& cfg,
                         double alpha1_init) {
  require(alpha1_init > 0.0 && alpha1_init < 1.0, ErrorCode::kConfig, "alpha1 init must lie in (0,1)");
  const int c = cfg.channels(cfg.n_levels - 1);
  const int cc = c * c;
  std::vector<double> eye(static_cast<std::size_t>(cc) * cc, 0.0);
  for (int i = 0; i < cc; ++i) eye[static_cast<std::size_t>(i) * cc + i] = 1.0;
  projector = ps.add("distill.projector", {cc, cc}, std::move(eye));
  alpha_raw = ps.add("distill.alpha_raw", {1}, {std::log(alpha1_init / (1.0 - alpha1_init))});
  maa = model::MultiHeadAttention::make(ps, init, "distill.maa", c, cfg.maa_heads);
}

DistillResult distill(const DistillHead& head, const std::vector<Var>& uni_bottleneck, const Var& fused_bottleneck,
                      std::span<const std::uint8_t> label, int label_h, int label_w, const std::vector<bool>& presence,
                      int n_classes, const DistillConfig& cfg) {
  require(uni_bottleneck.size() == presence.size(), ErrorCode::kShapeMismatch, "distill: modality count");
  require(cfg.tau.size() == presence.size(), ErrorCode::kConfig, "distill: one tau per modality required");
  const Var teacher = cfg.stop_teacher_grad ? ag::detach(fused_bottleneck) : fused_bottleneck;
  const int fh = teacher->dim(1), fw = teacher->dim(2);
  const auto small_label = pool_label_mode(label, label_h, label_w, fh, fw, n_classes);

  DistillResult r;
  auto alpha1 = head.alpha1();
  r.alpha1 = alpha1->item();
  const auto fused_cov = covariance(teacher);
  const auto fused_protos = prototypes(teacher, small_label, n_classes, cfg.proto_eps);
  const auto key_mask = fused_key_mask(presence, fh * fw);
  std::map<int, Var> cov_terms, attn_terms;
  std::map<int, PrototypeAlignment> proto_terms;
  for (std::size_t m = 0; m < presence.size(); ++m) {
    if (!presence[m]) continue;
    const int mi = static_cast<int>(m);
    const Var& e = uni_bottleneck[m];
    cov_terms[mi] = cov_loss(covariance(e), fused_cov, head.projector);
    attn_terms[mi] = masked_attention_align(head.maa, e, teacher, key_mask).loss;
    auto uni_protos = prototypes(e, small_label, n_classes, cfg.proto_eps, true);
    proto_terms[mi] = prototype_alignment(fused_protos, uni_protos, cfg.tau[m]);
    r.cov[mi] = cov_terms[mi]->item();
    r.attn[mi] = attn_terms[mi]->item();
    r.gap_rel[mi] = r.alpha1 * r.cov[mi] + (1.0 - r.alpha1) * r.attn[mi];
    r.gap_proto[mi] = proto_terms[mi].gap();
  }
  r.rel = relation_loss(cov_terms, attn_terms, alpha1);
  r.proto = prototype_loss(proto_terms);
  return r;
}

}  // namespace dmaf::distill
