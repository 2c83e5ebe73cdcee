#include "dmaf/autograd.hpp"

#include <Eigen/Dense>

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "dmaf/error.hpp"

namespace dmaf::ag {

namespace {

using MatR = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMapR = Eigen::Map<const MatR>;

// Eigen's vectorized kernels peel loops by pointer alignment, so products over
// raw std::vector storage can differ in the last bit between runs. Operands and
// results go through Eigen-owned (aligned) matrices to keep results reproducible.
MatR load(const std::vector<double>& v, int rows, int cols) { return CMapR(v.data(), rows, cols); }

void store(std::vector<double>& dst, const MatR& m) { std::copy(m.data(), m.data() + m.size(), dst.begin()); }

void accumulate(std::vector<double>& dst, const MatR& m) {
  const double* src = m.data();
  for (Eigen::Index i = 0; i < m.size(); ++i) dst[i] += src[i];
}

// Adds m into columns [c0, c0 + m.cols()) of a row-major [rows, width] buffer.
void accumulate_cols(std::vector<double>& dst, int width, int c0, const MatR& m) {
  for (Eigen::Index r = 0; r < m.rows(); ++r)
    for (Eigen::Index c = 0; c < m.cols(); ++c) dst[r * width + c0 + c] += m(r, c);
}

bool any_grad(const std::vector<Var>& xs) {
  return std::any_of(xs.begin(), xs.end(), [](const Var& v) { return v && v->requires_grad; });
}

Var make(Shape shape, std::vector<double> value, std::vector<Var> parents) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->requires_grad = any_grad(parents);
  if (n->requires_grad) n->parents = std::move(parents);
  return n;
}

void check_same(const Var& a, const Var& b, const char* op) {
  if (a->shape != b->shape)
    fail(ErrorCode::kShapeMismatch,
         std::string(op) + ": shape " + shape_str(a->shape) + " vs " + shape_str(b->shape));
}

void check_rank(const Var& x, std::size_t rank, const char* op) {
  if (x->shape.size() != rank)
    fail(ErrorCode::kShapeMismatch,
         std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_str(x->shape));
}

// Accumulate into a parent only when it participates in differentiation.
inline std::vector<double>* gbuf(const Var& p) {
  return p && p->requires_grad ? &p->grad_buffer() : nullptr;
}

struct AxisInterp {
  std::vector<int> i0, i1;
  std::vector<double> w1;
};

AxisInterp make_axis(int in, int out) {
  AxisInterp a;
  a.i0.resize(out);
  a.i1.resize(out);
  a.w1.resize(out);
  const double ratio = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * ratio - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    int lo = static_cast<int>(std::floor(src));
    int hi = std::min(lo + 1, in - 1);
    a.i0[o] = lo;
    a.i1[o] = hi;
    a.w1[o] = src - lo;
  }
  return a;
}

}  // namespace

Var make_op(Shape shape, std::vector<double> value, std::vector<Var> parents) {
  return make(std::move(shape), std::move(value), std::move(parents));
}

std::vector<double>* grad_of(const Var& x) { return gbuf(x); }

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (int d : shape) n *= static_cast<std::size_t>(d);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

double Node::item() const {
  require(value.size() == 1, ErrorCode::kShapeMismatch, "item() on non-scalar " + shape_str(shape));
  return value[0];
}

std::vector<double>& Node::grad_buffer() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  return grad;
}

Var constant(Shape shape, std::vector<double> values) {
  require(numel(shape) == values.size(), ErrorCode::kShapeMismatch,
          "constant: " + shape_str(shape) + " does not hold " + std::to_string(values.size()));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  return n;
}

Var zeros(Shape shape) {
  auto sz = numel(shape);
  return constant(std::move(shape), std::vector<double>(sz, 0.0));
}

Var scalar(double v) { return constant({1}, {v}); }

Var parameter(Shape shape, std::vector<double> values) {
  auto n = constant(std::move(shape), std::move(values));
  n->requires_grad = true;
  return n;
}

Var detach(const Var& x) { return constant(x->shape, x->value); }

void backward(const Var& root, double seed) {
  require(root->size() == 1, ErrorCode::kShapeMismatch, "backward: root must be scalar");
  if (!root->requires_grad) return;

  // Iterative post-order DFS gives a topological order.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack;
  stack.emplace_back(root.get(), 0);
  seen.insert(root.get());
  while (!stack.empty()) {
    auto& [node, idx] = stack.back();
    if (idx < node->parents.size()) {
      Node* p = node->parents[idx++].get();
      if (p->requires_grad && !p->parents.empty() && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root->grad_buffer()[0] += seed;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
  // Interior gradients are only needed during the sweep.
  for (Node* n : order) n->grad.clear();
}

// --- elementwise -----------------------------------------------------------

Var add(const Var& a, const Var& b) {
  check_same(a, b, "add");
  std::vector<double> v(a->size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a->value[i] + b->value[i];
  auto out = make(a->shape, std::move(v), {a, b});
  if (out->requires_grad)
    out->backward_fn = [a, b](Node& n) {
      for (const auto& p : {a, b})
        if (auto* g = gbuf(p))
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
    };
  return out;
}

Var sub(const Var& a, const Var& b) { return add(a, scale(b, -1.0)); }

Var mul(const Var& a, const Var& b) {
  check_same(a, b, "mul");
  std::vector<double> v(a->size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a->value[i] * b->value[i];
  auto out = make(a->shape, std::move(v), {a, b});
  if (out->requires_grad)
    out->backward_fn = [a, b](Node& n) {
      if (auto* g = gbuf(a))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * b->value[i];
      if (auto* g = gbuf(b))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * a->value[i];
    };
  return out;
}

Var scale(const Var& a, double s) {
  std::vector<double> v(a->size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a->value[i] * s;
  auto out = make(a->shape, std::move(v), {a});
  if (out->requires_grad)
    out->backward_fn = [a, s](Node& n) {
      auto& g = a->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * s;
    };
  return out;
}

Var scale_by(const Var& a, const Var& s) {
  require(s->size() == 1, ErrorCode::kShapeMismatch, "scale_by: factor must hold one element");
  const double f = s->value[0];
  std::vector<double> v(a->size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = a->value[i] * f;
  auto out = make(a->shape, std::move(v), {a, s});
  if (out->requires_grad)
    out->backward_fn = [a, s](Node& n) {
      if (auto* g = gbuf(a))
        for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i] * s->value[0];
      if (auto* g = gbuf(s)) {
        double acc = 0.0;
        for (std::size_t i = 0; i < n.grad.size(); ++i) acc += n.grad[i] * a->value[i];
        (*g)[0] += acc;
      }
    };
  return out;
}

Var add_n(const std::vector<Var>& xs) {
  require(!xs.empty(), ErrorCode::kInvalidArgument, "add_n: empty input");
  std::vector<double> v(xs[0]->size(), 0.0);
  for (const auto& x : xs) {
    check_same(xs[0], x, "add_n");
    for (std::size_t i = 0; i < v.size(); ++i) v[i] += x->value[i];
  }
  auto out = make(xs[0]->shape, std::move(v), xs);
  if (out->requires_grad)
    out->backward_fn = [xs](Node& n) {
      for (const auto& x : xs)
        if (auto* g = gbuf(x))
          for (std::size_t i = 0; i < g->size(); ++i) (*g)[i] += n.grad[i];
    };
  return out;
}

Var leaky_relu(const Var& x, double slope) {
  std::vector<double> v(x->size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x->value[i] > 0 ? x->value[i] : slope * x->value[i];
  auto out = make(x->shape, std::move(v), {x});
  if (out->requires_grad)
    out->backward_fn = [x, slope](Node& n) {
      auto& g = x->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i] * (x->value[i] > 0 ? 1.0 : slope);
    };
  return out;
}

Var gelu(const Var& x) {
  static const double kInvSqrt2 = 1.0 / std::sqrt(2.0);
  static const double kInvSqrt2Pi = 1.0 / std::sqrt(2.0 * M_PI);
  std::vector<double> v(x->size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    double z = x->value[i];
    v[i] = 0.5 * z * (1.0 + std::erf(z * kInvSqrt2));
  }
  auto out = make(x->shape, std::move(v), {x});
  if (out->requires_grad)
    out->backward_fn = [x](Node& n) {
      auto& g = x->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        double z = x->value[i];
        double cdf = 0.5 * (1.0 + std::erf(z * kInvSqrt2));
        double pdf = kInvSqrt2Pi * std::exp(-0.5 * z * z);
        g[i] += n.grad[i] * (cdf + z * pdf);
      }
    };
  return out;
}

Var sigmoid(const Var& x) {
  std::vector<double> v(x->size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = 1.0 / (1.0 + std::exp(-x->value[i]));
  auto out = make(x->shape, std::move(v), {x});
  if (out->requires_grad)
    out->backward_fn = [x](Node& n) {
      auto& g = x->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) {
        double s = n.value[i];
        g[i] += n.grad[i] * s * (1.0 - s);
      }
    };
  return out;
}

Var reshape(const Var& x, Shape shape) {
  require(numel(shape) == x->size(), ErrorCode::kShapeMismatch,
          "reshape: " + shape_str(x->shape) + " -> " + shape_str(shape));
  auto out = make(std::move(shape), x->value, {x});
  if (out->requires_grad)
    out->backward_fn = [x](Node& n) {
      auto& g = x->grad_buffer();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += n.grad[i];
    };
  return out;
}

// --- reductions --------------------------------------------------------------

Var sum(const Var& x) {
  double s = std::accumulate(x->value.begin(), x->value.end(), 0.0);
  auto out = make({1}, {s}, {x});
  if (out->requires_grad)
    out->backward_fn = [x](Node& n) {
      auto& g = x->grad_buffer();
      for (double& gi : g) gi += n.grad[0];
    };
  return out;
}

Var mean(const Var& x) { return scale(sum(x), 1.0 / static_cast<double>(x->size())); }

Var mse(const Var& a, const Var& b) {
  check_same(a, b, "mse");
  const double inv = 1.0 / static_cast<double>(a->size());
  double s = 0.0;
  for (std::size_t i = 0; i < a->size(); ++i) {
    double d = a->value[i] - b->value[i];
    s += d * d;
  }
  auto out = make({1}, {s * inv}, {a, b});
  if (out->requires_grad)
    out->backward_fn = [a, b, inv](Node& n) {
      const double g0 = n.grad[0] * 2.0 * inv;
      auto* ga = gbuf(a);
      auto* gb = gbuf(b);
      for (std::size_t i = 0; i < a->size(); ++i) {
        double d = a->value[i] - b->value[i];
        if (ga) (*ga)[i] += g0 * d;
        if (gb) (*gb)[i] -= g0 * d;
      }
    };
  return out;
}

// --- spatial -------------------------------------------------------------------

Var conv2d(const Var& x, const Var& weight, const Var& bias, int stride, int pad) {
  check_rank(x, 3, "conv2d");
  check_rank(weight, 4, "conv2d weight");
  const int cin = x->dim(0), h = x->dim(1), w = x->dim(2);
  const int cout = weight->dim(0), k = weight->dim(2);
  require(weight->dim(1) == cin && weight->dim(3) == k, ErrorCode::kShapeMismatch,
          "conv2d: weight " + shape_str(weight->shape) + " vs input " + shape_str(x->shape));
  require(!bias || static_cast<int>(bias->size()) == cout, ErrorCode::kShapeMismatch, "conv2d: bias size");
  const int ho = (h + 2 * pad - k) / stride + 1;
  const int wo = (w + 2 * pad - k) / stride + 1;
  require(ho > 0 && wo > 0, ErrorCode::kShapeMismatch, "conv2d: empty output for " + shape_str(x->shape));
  const int rows = cin * k * k;
  const int cols_n = ho * wo;

  auto cols = std::make_shared<std::vector<double>>(static_cast<std::size_t>(rows) * cols_n, 0.0);
  for (int c = 0; c < cin; ++c)
    for (int ky = 0; ky < k; ++ky)
      for (int kx = 0; kx < k; ++kx) {
        double* dst = cols->data() + static_cast<std::size_t>((c * k + ky) * k + kx) * cols_n;
        for (int oy = 0; oy < ho; ++oy) {
          int iy = oy * stride - pad + ky;
          if (iy < 0 || iy >= h) continue;
          const double* src = x->value.data() + (static_cast<std::size_t>(c) * h + iy) * w;
          for (int ox = 0; ox < wo; ++ox) {
            int ix = ox * stride - pad + kx;
            if (ix >= 0 && ix < w) dst[oy * wo + ox] = src[ix];
          }
        }
      }

  std::vector<double> out_v(static_cast<std::size_t>(cout) * cols_n);
  {
    MatR om = load(weight->value, cout, rows) * load(*cols, rows, cols_n);
    store(out_v, om);
    if (bias)
      for (int o = 0; o < cout; ++o)
        for (int i = 0; i < cols_n; ++i) out_v[static_cast<std::size_t>(o) * cols_n + i] += bias->value[o];
  }
  std::vector<Var> parents{x, weight};
  if (bias) parents.push_back(bias);
  auto out = make({cout, ho, wo}, std::move(out_v), std::move(parents));
  if (out->requires_grad)
    out->backward_fn = [x, weight, bias, cols, cin, h, w, k, stride, pad, ho, wo, rows, cols_n,
                        cout](Node& n) {
      const MatR gout = load(n.grad, cout, cols_n);
      if (auto* gw = gbuf(weight)) accumulate(*gw, gout * load(*cols, rows, cols_n).transpose());
      if (auto* gb = gbuf(bias))
        for (int o = 0; o < cout; ++o) {
          double s = 0.0;
          for (int i = 0; i < cols_n; ++i) s += n.grad[static_cast<std::size_t>(o) * cols_n + i];
          (*gb)[o] += s;
        }
      if (auto* gx = gbuf(x)) {
        MatR gcols = load(weight->value, cout, rows).transpose() * gout;
        for (int c = 0; c < cin; ++c)
          for (int ky = 0; ky < k; ++ky)
            for (int kx = 0; kx < k; ++kx) {
              const double* src = gcols.data() + static_cast<std::size_t>((c * k + ky) * k + kx) * cols_n;
              for (int oy = 0; oy < ho; ++oy) {
                int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= h) continue;
                double* dst = gx->data() + (static_cast<std::size_t>(c) * h + iy) * w;
                for (int ox = 0; ox < wo; ++ox) {
                  int ix = ox * stride - pad + kx;
                  if (ix >= 0 && ix < w) dst[ix] += src[oy * wo + ox];
                }
              }
            }
      }
    };
  return out;
}

Var instance_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  check_rank(x, 3, "instance_norm");
  const int c = x->dim(0);
  const std::size_t hw = static_cast<std::size_t>(x->dim(1)) * x->dim(2);
  require(static_cast<int>(gamma->size()) == c && static_cast<int>(beta->size()) == c,
          ErrorCode::kShapeMismatch, "instance_norm: affine size");
  auto xhat = std::make_shared<std::vector<double>>(x->size());
  auto inv_std = std::make_shared<std::vector<double>>(c);
  std::vector<double> v(x->size());
  for (int ch = 0; ch < c; ++ch) {
    const double* src = x->value.data() + ch * hw;
    double mu = 0.0;
    for (std::size_t i = 0; i < hw; ++i) mu += src[i];
    mu /= static_cast<double>(hw);
    double var = 0.0;
    for (std::size_t i = 0; i < hw; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= static_cast<double>(hw);
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[ch] = is;
    for (std::size_t i = 0; i < hw; ++i) {
      double xh = (src[i] - mu) * is;
      (*xhat)[ch * hw + i] = xh;
      v[ch * hw + i] = gamma->value[ch] * xh + beta->value[ch];
    }
  }
  auto out = make(x->shape, std::move(v), {x, gamma, beta});
  if (out->requires_grad)
    out->backward_fn = [x, gamma, beta, xhat, inv_std, c, hw](Node& n) {
      auto* gx = gbuf(x);
      auto* gg = gbuf(gamma);
      auto* gbeta = gbuf(beta);
      const double inv_n = 1.0 / static_cast<double>(hw);
      for (int ch = 0; ch < c; ++ch) {
        const double* dy = n.grad.data() + ch * hw;
        const double* xh = xhat->data() + ch * hw;
        double sum_dy = 0.0, sum_dy_xh = 0.0;
        for (std::size_t i = 0; i < hw; ++i) {
          sum_dy += dy[i];
          sum_dy_xh += dy[i] * xh[i];
        }
        if (gg) (*gg)[ch] += sum_dy_xh;
        if (gbeta) (*gbeta)[ch] += sum_dy;
        if (gx) {
          const double gm = gamma->value[ch];
          const double is = (*inv_std)[ch];
          double* dx = gx->data() + ch * hw;
          for (std::size_t i = 0; i < hw; ++i)
            dx[i] += gm * is * (dy[i] - inv_n * sum_dy - xh[i] * inv_n * sum_dy_xh);
        }
      }
    };
  return out;
}

Var upsample_nearest2x(const Var& x) {
  check_rank(x, 3, "upsample_nearest2x");
  const int c = x->dim(0), h = x->dim(1), w = x->dim(2);
  const int H = 2 * h, W = 2 * w;
  std::vector<double> v(static_cast<std::size_t>(c) * H * W);
  for (int ch = 0; ch < c; ++ch)
    for (int y = 0; y < H; ++y)
      for (int xx = 0; xx < W; ++xx)
        v[(static_cast<std::size_t>(ch) * H + y) * W + xx] =
            x->value[(static_cast<std::size_t>(ch) * h + y / 2) * w + xx / 2];
  auto out = make({c, H, W}, std::move(v), {x});
  if (out->requires_grad)
    out->backward_fn = [x, c, h, w, H, W](Node& n) {
      auto& g = x->grad_buffer();
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < H; ++y)
          for (int xx = 0; xx < W; ++xx)
            g[(static_cast<std::size_t>(ch) * h + y / 2) * w + xx / 2] +=
                n.grad[(static_cast<std::size_t>(ch) * H + y) * W + xx];
    };
  return out;
}

Var resize_bilinear(const Var& x, int out_h, int out_w) {
  check_rank(x, 3, "resize_bilinear");
  const int c = x->dim(0), h = x->dim(1), w = x->dim(2);
  if (h == out_h && w == out_w) return x;
  auto ay = std::make_shared<AxisInterp>(make_axis(h, out_h));
  auto ax = std::make_shared<AxisInterp>(make_axis(w, out_w));
  std::vector<double> v(static_cast<std::size_t>(c) * out_h * out_w);
  for (int ch = 0; ch < c; ++ch) {
    const double* src = x->value.data() + static_cast<std::size_t>(ch) * h * w;
    double* dst = v.data() + static_cast<std::size_t>(ch) * out_h * out_w;
    for (int y = 0; y < out_h; ++y) {
      const double wy = ay->w1[y];
      const double* r0 = src + ay->i0[y] * w;
      const double* r1 = src + ay->i1[y] * w;
      for (int xx = 0; xx < out_w; ++xx) {
        const double wx = ax->w1[xx];
        const int x0 = ax->i0[xx], x1 = ax->i1[xx];
        dst[y * out_w + xx] = (1 - wy) * ((1 - wx) * r0[x0] + wx * r0[x1]) + wy * ((1 - wx) * r1[x0] + wx * r1[x1]);
      }
    }
  }
  auto out = make({c, out_h, out_w}, std::move(v), {x});
  if (out->requires_grad)
    out->backward_fn = [x, ay, ax, c, h, w, out_h, out_w](Node& n) {
      auto& g = x->grad_buffer();
      for (int ch = 0; ch < c; ++ch) {
        double* dst = g.data() + static_cast<std::size_t>(ch) * h * w;
        const double* src = n.grad.data() + static_cast<std::size_t>(ch) * out_h * out_w;
        for (int y = 0; y < out_h; ++y) {
          const double wy = ay->w1[y];
          double* r0 = dst + ay->i0[y] * w;
          double* r1 = dst + ay->i1[y] * w;
          for (int xx = 0; xx < out_w; ++xx) {
            const double gv = src[y * out_w + xx];
            const double wx = ax->w1[xx];
            const int x0 = ax->i0[xx], x1 = ax->i1[xx];
            r0[x0] += gv * (1 - wy) * (1 - wx);
            r0[x1] += gv * (1 - wy) * wx;
            r1[x0] += gv * wy * (1 - wx);
            r1[x1] += gv * wy * wx;
          }
        }
      }
    };
  return out;
}

Var concat_channels(const std::vector<Var>& xs) {
  require(!xs.empty(), ErrorCode::kInvalidArgument, "concat_channels: empty input");
  const int h = xs[0]->dim(1), w = xs[0]->dim(2);
  int c = 0;
  std::vector<double> v;
  for (const auto& x : xs) {
    check_rank(x, 3, "concat_channels");
    require(x->dim(1) == h && x->dim(2) == w, ErrorCode::kShapeMismatch, "concat_channels: spatial size");
    c += x->dim(0);
    v.insert(v.end(), x->value.begin(), x->value.end());
  }
  auto out = make({c, h, w}, std::move(v), xs);
  if (out->requires_grad)
    out->backward_fn = [xs](Node& n) {
      std::size_t off = 0;
      for (const auto& x : xs) {
        if (auto* g = gbuf(x))
          for (std::size_t i = 0; i < x->size(); ++i) (*g)[i] += n.grad[off + i];
        off += x->size();
      }
    };
  return out;
}

// --- tokens ------------------------------------------------------------------------

Var map_to_tokens(const Var& x) {
  check_rank(x, 3, "map_to_tokens");
  const int c = x->dim(0), hw = x->dim(1) * x->dim(2);
  std::vector<double> v(x->size());
  for (int ch = 0; ch < c; ++ch)
    for (int p = 0; p < hw; ++p) v[static_cast<std::size_t>(p) * c + ch] = x->value[static_cast<std::size_t>(ch) * hw + p];
  auto out = make({hw, c}, std::move(v), {x});
  if (out->requires_grad)
    out->backward_fn = [x, c, hw](Node& n) {
      auto& g = x->grad_buffer();
      for (int ch = 0; ch < c; ++ch)
        for (int p = 0; p < hw; ++p) g[static_cast<std::size_t>(ch) * hw + p] += n.grad[static_cast<std::size_t>(p) * c + ch];
    };
  return out;
}

Var tokens_to_map(const Var& t, int h, int w) {
  check_rank(t, 2, "tokens_to_map");
  require(t->dim(0) == h * w, ErrorCode::kShapeMismatch, "tokens_to_map: token count vs grid");
  const int c = t->dim(1), hw = h * w;
  std::vector<double> v(t->size());
  for (int p = 0; p < hw; ++p)
    for (int ch = 0; ch < c; ++ch) v[static_cast<std::size_t>(ch) * hw + p] = t->value[static_cast<std::size_t>(p) * c + ch];
  auto out = make({c, h, w}, std::move(v), {t});
  if (out->requires_grad)
    out->backward_fn = [t, c, hw](Node& n) {
      auto& g = t->grad_buffer();
      for (int p = 0; p < hw; ++p)
        for (int ch = 0; ch < c; ++ch) g[static_cast<std::size_t>(p) * c + ch] += n.grad[static_cast<std::size_t>(ch) * hw + p];
    };
  return out;
}

Var concat_rows(const std::vector<Var>& xs) {
  require(!xs.empty(), ErrorCode::kInvalidArgument, "concat_rows: empty input");
  const int d = xs[0]->dim(1);
  int rows = 0;
  std::vector<double> v;
  for (const auto& x : xs) {
    check_rank(x, 2, "concat_rows");
    require(x->dim(1) == d, ErrorCode::kShapeMismatch, "concat_rows: width");
    rows += x->dim(0);
    v.insert(v.end(), x->value.begin(), x->value.end());
  }
  auto out = make({rows, d}, std::move(v), xs);
  if (out->requires_grad)
    out->backward_fn = [xs](Node& n) {
      std::size_t off = 0;
      for (const auto& x : xs) {
        if (auto* g = gbuf(x))
          for (std::size_t i = 0; i < x->size(); ++i) (*g)[i] += n.grad[off + i];
        off += x->size();
      }
    };
  return out;
}

Var slice_rows(const Var& x, int begin, int count) {
  check_rank(x, 2, "slice_rows");
  require(begin >= 0 && count > 0 && begin + count <= x->dim(0), ErrorCode::kShapeMismatch, "slice_rows: range");
  const int d = x->dim(1);
  std::vector<double> v(x->value.begin() + static_cast<std::ptrdiff_t>(begin) * d,
                        x->value.begin() + static_cast<std::ptrdiff_t>(begin + count) * d);
  auto out = make({count, d}, std::move(v), {x});
  if (out->requires_grad)
    out->backward_fn = [x, begin, d](Node& n) {
      auto& g = x->grad_buffer();
      const std::size_t off = static_cast<std::size_t>(begin) * d;
      for (std::size_t i = 0; i < n.grad.size(); ++i) g[off + i] += n.grad[i];
    };
  return out;
}

Var linear(const Var& x, const Var& weight, const Var& bias) {
  check_rank(x, 2, "linear");
  check_rank(weight, 2, "linear weight");
  const int nrows = x->dim(0), din = x->dim(1), dout = weight->dim(0);
  require(weight->dim(1) == din, ErrorCode::kShapeMismatch,
          "linear: weight " + shape_str(weight->shape) + " vs input " + shape_str(x->shape));
  std::vector<double> v(static_cast<std::size_t>(nrows) * dout);
  {
    store(v, load(x->value, nrows, din) * load(weight->value, dout, din).transpose());
    if (bias)
      for (int r = 0; r < nrows; ++r)
        for (int o = 0; o < dout; ++o) v[static_cast<std::size_t>(r) * dout + o] += bias->value[o];
  }
  std::vector<Var> parents{x, weight};
  if (bias) parents.push_back(bias);
  auto out = make({nrows, dout}, std::move(v), std::move(parents));
  if (out->requires_grad)
    out->backward_fn = [x, weight, bias, nrows, din, dout](Node& n) {
      const MatR gout = load(n.grad, nrows, dout);
      if (auto* gx = gbuf(x)) accumulate(*gx, gout * load(weight->value, dout, din));
      if (auto* gw = gbuf(weight)) accumulate(*gw, gout.transpose() * load(x->value, nrows, din));
      if (auto* gb = gbuf(bias))
        for (int o = 0; o < dout; ++o) {
          double s = 0.0;
          for (int r = 0; r < nrows; ++r) s += n.grad[static_cast<std::size_t>(r) * dout + o];
          (*gb)[o] += s;
        }
    };
  return out;
}

Var layer_norm_rows(const Var& x, const Var& gamma, const Var& beta, double eps) {
  check_rank(x, 2, "layer_norm_rows");
  const int nrows = x->dim(0), d = x->dim(1);
  require(static_cast<int>(gamma->size()) == d && static_cast<int>(beta->size()) == d, ErrorCode::kShapeMismatch,
          "layer_norm_rows: affine size");
  auto xhat = std::make_shared<std::vector<double>>(x->size());
  auto inv_std = std::make_shared<std::vector<double>>(nrows);
  std::vector<double> v(x->size());
  for (int r = 0; r < nrows; ++r) {
    const double* src = x->value.data() + static_cast<std::size_t>(r) * d;
    double mu = 0.0;
    for (int i = 0; i < d; ++i) mu += src[i];
    mu /= d;
    double var = 0.0;
    for (int i = 0; i < d; ++i) var += (src[i] - mu) * (src[i] - mu);
    var /= d;
    const double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (int i = 0; i < d; ++i) {
      double xh = (src[i] - mu) * is;
      (*xhat)[static_cast<std::size_t>(r) * d + i] = xh;
      v[static_cast<std::size_t>(r) * d + i] = gamma->value[i] * xh + beta->value[i];
    }
  }
  auto out = make(x->shape, std::move(v), {x, gamma, beta});
  if (out->requires_grad)
    out->backward_fn = [x, gamma, beta, xhat, inv_std, nrows, d](Node& n) {
      auto* gx = gbuf(x);
      auto* gg = gbuf(gamma);
      auto* gbeta = gbuf(beta);
      std::vector<double> dxh(d);
      for (int r = 0; r < nrows; ++r) {
        const double* dy = n.grad.data() + static_cast<std::size_t>(r) * d;
        const double* xh = xhat->data() + static_cast<std::size_t>(r) * d;
        double s1 = 0.0, s2 = 0.0;
        for (int i = 0; i < d; ++i) {
          if (gg) (*gg)[i] += dy[i] * xh[i];
          if (gbeta) (*gbeta)[i] += dy[i];
          dxh[i] = dy[i] * gamma->value[i];
          s1 += dxh[i];
          s2 += dxh[i] * xh[i];
        }
        if (gx) {
          double* dx = gx->data() + static_cast<std::size_t>(r) * d;
          const double is = (*inv_std)[r];
          for (int i = 0; i < d; ++i) dx[i] += is * (dxh[i] - s1 / d - xh[i] * s2 / d);
        }
      }
    };
  return out;
}

Var attention(const Var& q, const Var& k, const Var& v, int heads, const std::vector<bool>& key_mask,
              std::vector<double>* probs_out) {
  check_rank(q, 2, "attention q");
  check_rank(k, 2, "attention k");
  check_rank(v, 2, "attention v");
  const int nq = q->dim(0), nk = k->dim(0), d = q->dim(1);
  require(k->dim(1) == d && v->dim(1) == d && v->dim(0) == nk, ErrorCode::kShapeMismatch, "attention: q/k/v widths");
  require(heads > 0 && d % heads == 0, ErrorCode::kConfig, "attention: width not divisible by heads");
  require(static_cast<int>(key_mask.size()) == nk, ErrorCode::kShapeMismatch, "attention: key mask length");
  require(std::any_of(key_mask.begin(), key_mask.end(), [](bool b) { return b; }), ErrorCode::kInvalidArgument,
          "attention: every key is masked");
  const int dh = d / heads;
  const double inv_sqrt = 1.0 / std::sqrt(static_cast<double>(dh));
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();

  auto probs = std::make_shared<std::vector<MatR>>(heads);
  std::vector<double> out_v(static_cast<std::size_t>(nq) * d);
  const MatR qm = load(q->value, nq, d), km = load(k->value, nk, d), vm = load(v->value, nk, d);
  MatR om(nq, d);
  for (int hd = 0; hd < heads; ++hd) {
    MatR s = MatR(qm.middleCols(hd * dh, dh)) * MatR(km.middleCols(hd * dh, dh)).transpose() * inv_sqrt;
    for (int j = 0; j < nk; ++j)
      if (!key_mask[j]) s.col(j).setConstant(kNegInf);
    for (int i = 0; i < nq; ++i) {
      double mx = s.row(i).maxCoeff();
      double z = 0.0;
      for (int j = 0; j < nk; ++j) {
        double e = std::exp(s(i, j) - mx);
        s(i, j) = e;
        z += e;
      }
      s.row(i) /= z;
    }
    om.middleCols(hd * dh, dh) = s * MatR(vm.middleCols(hd * dh, dh));
    (*probs)[hd] = std::move(s);
  }
  store(out_v, om);
  if (probs_out) {
    probs_out->clear();
    for (const auto& p : *probs) probs_out->insert(probs_out->end(), p.data(), p.data() + p.size());
  }
  auto out = make({nq, d}, std::move(out_v), {q, k, v});
  if (out->requires_grad)
    out->backward_fn = [q, k, v, probs, heads, nq, nk, d, dh, inv_sqrt](Node& n) {
      const MatR gout = load(n.grad, nq, d);
      const MatR qm = load(q->value, nq, d), km = load(k->value, nk, d), vm = load(v->value, nk, d);
      auto* gq = gbuf(q);
      auto* gk = gbuf(k);
      auto* gv = gbuf(v);
      for (int hd = 0; hd < heads; ++hd) {
        const MatR& p = (*probs)[hd];
        const MatR go = gout.middleCols(hd * dh, dh);
        if (gv) accumulate_cols(*gv, d, hd * dh, p.transpose() * go);
        if (!gq && !gk) continue;
        MatR dp = go * MatR(vm.middleCols(hd * dh, dh)).transpose();
        Eigen::VectorXd rs = (dp.array() * p.array()).rowwise().sum();
        MatR ds = (p.array() * (dp.colwise() - rs).array()).matrix() * inv_sqrt;
        if (gq) accumulate_cols(*gq, d, hd * dh, ds * MatR(km.middleCols(hd * dh, dh)));
        if (gk) accumulate_cols(*gk, d, hd * dh, ds.transpose() * MatR(qm.middleCols(hd * dh, dh)));
      }
    };
  return out;
}

// --- modality fusion -----------------------------------------------------------

Var masked_softmax_stack(const std::vector<Var>& logits, const std::vector<bool>& active) {
  const int m_count = static_cast<int>(logits.size());
  require(m_count > 0 && static_cast<int>(active.size()) == m_count, ErrorCode::kShapeMismatch,
          "masked_softmax_stack: logits/active length");
  require(std::any_of(active.begin(), active.end(), [](bool b) { return b; }), ErrorCode::kInvalidArgument,
          "masked_softmax_stack: no active modality");
  const int h = logits[0]->dim(1), w = logits[0]->dim(2);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  for (const auto& l : logits)
    require(l->shape == Shape({1, h, w}), ErrorCode::kShapeMismatch, "masked_softmax_stack: map shape");
  std::vector<double> v(m_count * hw, 0.0);
  for (std::size_t p = 0; p < hw; ++p) {
    double mx = -std::numeric_limits<double>::infinity();
    for (int m = 0; m < m_count; ++m)
      if (active[m]) mx = std::max(mx, logits[m]->value[p]);
    double z = 0.0;
    for (int m = 0; m < m_count; ++m)
      if (active[m]) z += (v[m * hw + p] = std::exp(logits[m]->value[p] - mx));
    for (int m = 0; m < m_count; ++m)
      if (active[m]) v[m * hw + p] /= z;
  }
  std::vector<Var> parents;
  for (int m = 0; m < m_count; ++m)
    if (active[m]) parents.push_back(logits[m]);
  auto out = make({m_count, h, w}, std::move(v), std::move(parents));
  if (out->requires_grad)
    out->backward_fn = [logits, active, m_count, hw](Node& n) {
      for (std::size_t p = 0; p < hw; ++p) {
        double dot = 0.0;
        for (int m = 0; m < m_count; ++m)
          if (active[m]) dot += n.grad[m * hw + p] * n.value[m * hw + p];
        for (int m = 0; m < m_count; ++m) {
          if (!active[m]) continue;
          if (auto* g = gbuf(logits[m])) (*g)[p] += n.value[m * hw + p] * (n.grad[m * hw + p] - dot);
        }
      }
    };
  return out;
}

Var weighted_fusion(const std::vector<Var>& feats, const Var& weights) {
  const int m_count = static_cast<int>(feats.size());
  check_rank(weights, 3, "weighted_fusion weights");
  require(weights->dim(0) == m_count, ErrorCode::kShapeMismatch, "weighted_fusion: modality count");
  const int c = feats[0]->dim(0), h = feats[0]->dim(1), w = feats[0]->dim(2);
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  require(weights->dim(1) == h && weights->dim(2) == w, ErrorCode::kShapeMismatch, "weighted_fusion: spatial size");
  std::vector<double> v(static_cast<std::size_t>(c) * hw, 0.0);
  for (int m = 0; m < m_count; ++m) {
    require(feats[m]->shape == feats[0]->shape, ErrorCode::kShapeMismatch, "weighted_fusion: feature shapes");
    const double* a = weights->value.data() + m * hw;
    for (int ch = 0; ch < c; ++ch) {
      const double* e = feats[m]->value.data() + ch * hw;
      double* o = v.data() + ch * hw;
      for (std::size_t p = 0; p < hw; ++p) o[p] += e[p] * a[p];
    }
  }
  std::vector<Var> parents(feats);
  parents.push_back(weights);
  auto out = make({c, h, w}, std::move(v), std::move(parents));
  if (out->requires_grad)
    out->backward_fn = [feats, weights, m_count, c, hw](Node& n) {
      auto* ga = gbuf(weights);
      for (int m = 0; m < m_count; ++m) {
        auto* ge = gbuf(feats[m]);
        const double* a = weights->value.data() + m * hw;
        for (int ch = 0; ch < c; ++ch) {
          const double* e = feats[m]->value.data() + ch * hw;
          const double* g = n.grad.data() + ch * hw;
          for (std::size_t p = 0; p < hw; ++p) {
            if (ge) (*ge)[ch * hw + p] += g[p] * a[p];
            if (ga) (*ga)[m * hw + p] += g[p] * e[p];
          }
        }
      }
    };
  return out;
}

}  // namespace dmaf::ag
