#include "autospace/tape.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace autospace {

namespace {

using ImplPtr = std::shared_ptr<TensorImpl>;

std::vector<double>& grad_buffer(TensorImpl& t) {
  if (t.grad.empty()) t.grad.assign(t.data.size(), 0.0);
  return t.grad;
}

[[noreturn]] void shape_fail(PrimitiveKind kind, const std::string& detail) {
  throw ShapeError(std::string(primitive_name(kind)) + ": " + detail);
}

void require_rank(PrimitiveKind kind, const Tensor& t, int rank, const char* what) {
  if (t.shape().rank() != rank) {
    shape_fail(kind, std::string(what) + " must have rank " + std::to_string(rank) + ", got " +
                         t.shape().str());
  }
}

void round_to_float(std::vector<double>& v) {
  for (double& x : v) x = static_cast<double>(static_cast<float>(x));
}

bool all_finite(const std::vector<double>& v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

struct ConvGeometry {
  int n, c, h, w;    // input
  int o, k;          // filters, kernel
  int ho, wo;        // output
  int stride, pad, groups;
  int cg, og;        // channels per group
  int rows() const { return cg * k * k; }
  int cols() const { return ho * wo; }
  bool direct() const { return k == 1 && stride == 1 && pad == 0; }
};

ConvGeometry conv_geometry(const Tensor& x, const Tensor& w, const Conv2dAttrs& a) {
  constexpr auto kind = PrimitiveKind::kConv2d;
  require_rank(kind, x, 4, "input");
  require_rank(kind, w, 4, "weight");
  ConvGeometry g{};
  g.n = x.shape()[0];
  g.c = x.shape()[1];
  g.h = x.shape()[2];
  g.w = x.shape()[3];
  g.o = w.shape()[0];
  g.k = w.shape()[2];
  g.stride = a.stride;
  g.pad = a.padding;
  g.groups = a.groups;
  if (w.shape()[3] != g.k) shape_fail(kind, "kernel must be square, got " + w.shape().str());
  if (a.groups < 1 || a.stride < 1 || a.padding < 0) shape_fail(kind, "bad stride/padding/groups");
  if (g.c % a.groups != 0 || g.o % a.groups != 0) {
    shape_fail(kind, "groups=" + std::to_string(a.groups) + " does not divide input " + x.shape().str() +
                         " / weight " + w.shape().str());
  }
  g.cg = g.c / a.groups;
  g.og = g.o / a.groups;
  if (w.shape()[1] != g.cg) {
    shape_fail(kind, "weight " + w.shape().str() + " incompatible with input " + x.shape().str());
  }
  g.ho = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.wo = (g.w + 2 * g.pad - g.k) / g.stride + 1;
  if (g.h + 2 * g.pad < g.k || g.w + 2 * g.pad < g.k || g.ho <= 0 || g.wo <= 0) {
    shape_fail(kind, "kernel larger than padded input " + x.shape().str());
  }
  return g;
}

// Unfolds the input channels of one group into a (cg*k*k) x (ho*wo) matrix.
void im2col(const ConvGeometry& g, const double* x, double* cols) {
  const int plane = g.ho * g.wo;
  for (int c = 0; c < g.cg; ++c) {
    const double* xc = x + static_cast<std::size_t>(c) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        double* row = cols + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * plane;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          double* out = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(out, out + g.wo, 0.0);
            continue;
          }
          const double* xr = xc + iy * g.w;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            out[ox] = (ix >= 0 && ix < g.w) ? xr[ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_add(const ConvGeometry& g, const double* cols, double* gx) {
  const int plane = g.ho * g.wo;
  for (int c = 0; c < g.cg; ++c) {
    double* gc = gx + static_cast<std::size_t>(c) * g.h * g.w;
    for (int ky = 0; ky < g.k; ++ky) {
      for (int kx = 0; kx < g.k; ++kx) {
        const double* row = cols + static_cast<std::size_t>((c * g.k + ky) * g.k + kx) * plane;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.stride - g.pad + ky;
          if (iy < 0 || iy >= g.h) continue;
          double* gr = gc + iy * g.w;
          const double* in = row + oy * g.wo;
          for (int ox = 0; ox < g.wo; ++ox) {
            const int ix = ox * g.stride - g.pad + kx;
            if (ix >= 0 && ix < g.w) gr[ix] += in[ox];
          }
        }
      }
    }
  }
}

}  // namespace

std::string_view primitive_name(PrimitiveKind kind) {
  switch (kind) {
    case PrimitiveKind::kConv2d: return "conv2d";
    case PrimitiveKind::kBatchNorm2d: return "batchnorm2d";
    case PrimitiveKind::kRelu: return "relu";
    case PrimitiveKind::kAdd: return "add";
    case PrimitiveKind::kMul: return "mul";
    case PrimitiveKind::kGlobalAvgPool: return "global_avg_pool";
    case PrimitiveKind::kAvgPool2d: return "avg_pool2d";
    case PrimitiveKind::kLinear: return "linear";
    case PrimitiveKind::kSoftmaxCrossEntropy: return "softmax_cross_entropy";
    case PrimitiveKind::kScale: return "scale";
    case PrimitiveKind::kZeroLike: return "zero_like";
    case PrimitiveKind::kSum: return "sum";
  }
  return "unknown";
}

bool Tape::tracking(std::initializer_list<const Tensor*> inputs) const {
  return std::any_of(inputs.begin(), inputs.end(), [](const Tensor* t) { return t->requires_grad(); });
}

Tensor Tape::finish(PrimitiveKind kind, Tensor out) {
  if (precision_ == Precision::kFloat32) round_to_float(out.impl_->data);
  if (!all_finite(out.impl_->data)) {
    throw NumericDivergence(std::string("numeric divergence in ") + std::string(primitive_name(kind)) +
                            " forward");
  }
  return out;
}

void Tape::record(PrimitiveKind kind, std::initializer_list<const Tensor*> inputs, const Tensor& out,
                  std::function<void()> backward) {
  Node node{kind, {}, out.impl_, std::move(backward)};
  for (const Tensor* t : inputs) node.inputs.push_back(t->impl_);
  out.impl_->requires_grad = true;
  nodes_.push_back(std::move(node));
}

void Tape::seal_gradients(const Node& node) const {
  for (const auto& in : node.inputs) {
    if (!in->requires_grad || in->grad.empty()) continue;
    if (precision_ == Precision::kFloat32) round_to_float(in->grad);
    if (!all_finite(in->grad)) {
      throw NumericDivergence(std::string("numeric divergence in ") + std::string(primitive_name(node.kind)) +
                              " backward");
    }
  }
}

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.numel() != 1) {
    throw ShapeError("backward: loss must be a scalar, got " + (loss.defined() ? loss.shape().str() : "undefined"));
  }
  auto it = std::find_if(nodes_.begin(), nodes_.end(), [&](const Node& n) { return n.output == loss.impl_; });
  if (it == nodes_.end()) throw std::invalid_argument("backward: loss was not produced on this tape");
  grad_buffer(*loss.impl_)[0] += 1.0;
  for (auto node = nodes_.rbegin(); node != nodes_.rend(); ++node) {
    if (node->output->grad.empty()) continue;
    node->backward();
    seal_gradients(*node);
  }
}

Tensor Tape::apply(PrimitiveKind kind, std::span<const Tensor> in, const PrimitiveAttrs& attrs) {
  auto need = [&](std::size_t n) {
    if (in.size() != n) {
      shape_fail(kind, "expected " + std::to_string(n) + " operands, got " + std::to_string(in.size()));
    }
  };
  auto attr = [&]<typename A>(A fallback) {
    if (const auto* a = std::get_if<A>(&attrs)) return *a;
    if (!std::holds_alternative<std::monostate>(attrs)) shape_fail(kind, "attribute type mismatch");
    return fallback;
  };
  switch (kind) {
    case PrimitiveKind::kConv2d: need(2); return conv2d(in[0], in[1], attr(Conv2dAttrs{}));
    case PrimitiveKind::kBatchNorm2d:
      need(5);
      return batchnorm2d(in[0], in[1], in[2], in[3], in[4], attr(BatchNormAttrs{}));
    case PrimitiveKind::kRelu: need(1); return relu(in[0]);
    case PrimitiveKind::kAdd: need(2); return add(in[0], in[1]);
    case PrimitiveKind::kMul: need(2); return mul(in[0], in[1]);
    case PrimitiveKind::kGlobalAvgPool: need(1); return global_avg_pool(in[0]);
    case PrimitiveKind::kAvgPool2d: need(1); return avg_pool2d(in[0], attr(PoolAttrs{}));
    case PrimitiveKind::kLinear: need(3); return linear(in[0], in[1], in[2]);
    case PrimitiveKind::kSoftmaxCrossEntropy: {
      need(1);
      const auto* ce = std::get_if<CrossEntropyAttrs>(&attrs);
      if (!ce) shape_fail(kind, "labels required");
      return softmax_cross_entropy(in[0], ce->labels);
    }
    case PrimitiveKind::kScale: need(2); return scale(in[0], in[1]);
    case PrimitiveKind::kZeroLike: need(1); return zero_like(in[0]);
    case PrimitiveKind::kSum: need(1); return sum(in[0]);
  }
  shape_fail(kind, "unsupported primitive");
}

Tensor Tape::conv2d(const Tensor& x, const Tensor& w, const Conv2dAttrs& attrs) {
  const ConvGeometry g = conv_geometry(x, w, attrs);
  Tensor out = Tensor::zeros(Shape{g.n, g.o, g.ho, g.wo});
  const int rows = g.rows();
  const int cols = g.cols();
  std::vector<double> buffer(g.direct() ? 0 : static_cast<std::size_t>(rows) * cols);
  const double* xd = x.data().data();
  const double* wd = w.data().data();
  double* od = out.data().data();
  const std::size_t x_image = static_cast<std::size_t>(g.c) * g.h * g.w;
  const std::size_t x_group = static_cast<std::size_t>(g.cg) * g.h * g.w;
  const std::size_t o_image = static_cast<std::size_t>(g.o) * cols;

  for (int n = 0; n < g.n; ++n) {
    for (int gi = 0; gi < g.groups; ++gi) {
      const double* xs = xd + n * x_image + gi * x_group;
      const double* mat = xs;
      if (!g.direct()) {
        im2col(g, xs, buffer.data());
        mat = buffer.data();
      }
      for (int o = 0; o < g.og; ++o) {
        const int oc = gi * g.og + o;
        double* orow = od + n * o_image + static_cast<std::size_t>(oc) * cols;
        const double* wrow = wd + static_cast<std::size_t>(oc) * rows;
        for (int r = 0; r < rows; ++r) {
          const double wv = wrow[r];
          const double* crow = mat + static_cast<std::size_t>(r) * cols;
          for (int j = 0; j < cols; ++j) orow[j] += wv * crow[j];
        }
      }
    }
  }
  macs_ += static_cast<std::uint64_t>(g.n) * g.o * rows * cols;
  finish(PrimitiveKind::kConv2d, out);

  if (tracking({&x, &w})) {
    ImplPtr xi = x.impl_, wi = w.impl_, oi = out.impl_;
    record(PrimitiveKind::kConv2d, {&x, &w}, out, [g, xi, wi, oi, x_image, x_group, o_image] {
      const int rows = g.rows();
      const int cols = g.cols();
      std::vector<double> buffer(g.direct() ? 0 : static_cast<std::size_t>(rows) * cols);
      std::vector<double> gcols(static_cast<std::size_t>(rows) * cols);
      const double* go = oi->grad.data();
      const double* wd = wi->data.data();
      double* gw = wi->requires_grad ? grad_buffer(*wi).data() : nullptr;
      double* gx = xi->requires_grad ? grad_buffer(*xi).data() : nullptr;
      for (int n = 0; n < g.n; ++n) {
        for (int gi = 0; gi < g.groups; ++gi) {
          const double* xs = xi->data.data() + n * x_image + gi * x_group;
          const double* mat = xs;
          if (gw && !g.direct()) {
            im2col(g, xs, buffer.data());
            mat = buffer.data();
          }
          if (gx) std::fill(gcols.begin(), gcols.end(), 0.0);
          for (int o = 0; o < g.og; ++o) {
            const int oc = gi * g.og + o;
            const double* grow = go + n * o_image + static_cast<std::size_t>(oc) * cols;
            const double* wrow = wd + static_cast<std::size_t>(oc) * rows;
            for (int r = 0; r < rows; ++r) {
              if (gw) {
                const double* crow = mat + static_cast<std::size_t>(r) * cols;
                double acc = 0.0;
                for (int j = 0; j < cols; ++j) acc += grow[j] * crow[j];
                gw[static_cast<std::size_t>(oc) * rows + r] += acc;
              }
              if (gx) {
                const double wv = wrow[r];
                double* gc = gcols.data() + static_cast<std::size_t>(r) * cols;
                for (int j = 0; j < cols; ++j) gc[j] += wv * grow[j];
              }
            }
          }
          if (gx) {
            double* gxs = gx + n * x_image + gi * x_group;
            if (g.direct()) {
              for (std::size_t i = 0; i < gcols.size(); ++i) gxs[i] += gcols[i];
            } else {
              col2im_add(g, gcols.data(), gxs);
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor Tape::batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta, Tensor running_mean,
                         Tensor running_var, const BatchNormAttrs& attrs) {
  constexpr auto kind = PrimitiveKind::kBatchNorm2d;
  require_rank(kind, x, 4, "input");
  const int n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  for (const Tensor* p : std::initializer_list<const Tensor*>{&gamma, &beta, &running_mean, &running_var}) {
    if (p->numel() != static_cast<std::size_t>(c)) {
      shape_fail(kind, "per-channel parameter " + p->shape().str() + " for input " + x.shape().str());
    }
  }
  const std::size_t count = static_cast<std::size_t>(n) * hw;
  if (attrs.training && count == 0) shape_fail(kind, "empty batch");

  std::vector<double> mean(c), inv_std(c);
  const double* xd = x.data().data();
  auto at = [hw, c](int ni, int ci) { return (static_cast<std::size_t>(ni) * c + ci) * hw; };
  if (attrs.training) {
    for (int ci = 0; ci < c; ++ci) {
      double s = 0.0;
      for (int ni = 0; ni < n; ++ni) {
        const double* p = xd + at(ni, ci);
        for (int j = 0; j < hw; ++j) s += p[j];
      }
      const double m = s / static_cast<double>(count);
      double v = 0.0;
      for (int ni = 0; ni < n; ++ni) {
        const double* p = xd + at(ni, ci);
        for (int j = 0; j < hw; ++j) v += (p[j] - m) * (p[j] - m);
      }
      v /= static_cast<double>(count);
      mean[ci] = m;
      inv_std[ci] = 1.0 / std::sqrt(v + attrs.eps);
      if (attrs.update_running) {
        const double unbiased = count > 1 ? v * static_cast<double>(count) / static_cast<double>(count - 1) : v;
        auto rm = running_mean.data();
        auto rv = running_var.data();
        rm[ci] = (1.0 - attrs.momentum) * rm[ci] + attrs.momentum * m;
        rv[ci] = (1.0 - attrs.momentum) * rv[ci] + attrs.momentum * unbiased;
        if (precision_ == Precision::kFloat32) {
          rm[ci] = static_cast<float>(rm[ci]);
          rv[ci] = static_cast<float>(rv[ci]);
        }
      }
    }
  } else {
    for (int ci = 0; ci < c; ++ci) {
      mean[ci] = running_mean.data()[ci];
      inv_std[ci] = 1.0 / std::sqrt(running_var.data()[ci] + attrs.eps);
    }
  }

  Tensor out = Tensor::zeros(x.shape());
  double* od = out.data().data();
  const double* gd = gamma.data().data();
  const double* bd = beta.data().data();
  for (int ni = 0; ni < n; ++ni) {
    for (int ci = 0; ci < c; ++ci) {
      const double* p = xd + at(ni, ci);
      double* q = od + at(ni, ci);
      const double a = gd[ci] * inv_std[ci];
      const double b = bd[ci] - mean[ci] * a;
      for (int j = 0; j < hw; ++j) q[j] = a * p[j] + b;
    }
  }
  finish(kind, out);

  if (tracking({&x, &gamma, &beta})) {
    ImplPtr xi = x.impl_, gi = gamma.impl_, bi = beta.impl_, oi = out.impl_;
    const bool training = attrs.training;
    record(kind, {&x, &gamma, &beta}, out, [=, mean = std::move(mean), inv_std = std::move(inv_std)] {
      const double* go = oi->grad.data();
      const double* xd = xi->data.data();
      double* gx = xi->requires_grad ? grad_buffer(*xi).data() : nullptr;
      double* gg = gi->requires_grad ? grad_buffer(*gi).data() : nullptr;
      double* gb = bi->requires_grad ? grad_buffer(*bi).data() : nullptr;
      const double m_count = static_cast<double>(count);
      for (int ci = 0; ci < c; ++ci) {
        double sum_dy = 0.0, sum_dy_xhat = 0.0;
        for (int ni = 0; ni < n; ++ni) {
          const double* p = xd + at(ni, ci);
          const double* d = go + at(ni, ci);
          for (int j = 0; j < hw; ++j) {
            sum_dy += d[j];
            sum_dy_xhat += d[j] * (p[j] - mean[ci]) * inv_std[ci];
          }
        }
        if (gg) gg[ci] += sum_dy_xhat;
        if (gb) gb[ci] += sum_dy;
        if (!gx) continue;
        const double gscale = gi->data[ci] * inv_std[ci];
        for (int ni = 0; ni < n; ++ni) {
          const double* p = xd + at(ni, ci);
          const double* d = go + at(ni, ci);
          double* q = gx + at(ni, ci);
          for (int j = 0; j < hw; ++j) {
            if (training) {
              const double xhat = (p[j] - mean[ci]) * inv_std[ci];
              q[j] += gscale * (d[j] - sum_dy / m_count - xhat * sum_dy_xhat / m_count);
            } else {
              q[j] += gscale * d[j];
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor Tape::relu(const Tensor& x) {
  Tensor out = x.clone();
  out.set_requires_grad(false);
  out.clear_grad();
  for (double& v : out.data()) v = v > 0.0 ? v : 0.0;
  finish(PrimitiveKind::kRelu, out);
  if (tracking({&x})) {
    ImplPtr xi = x.impl_, oi = out.impl_;
    record(PrimitiveKind::kRelu, {&x}, out, [xi, oi] {
      auto& gx = grad_buffer(*xi);
      for (std::size_t i = 0; i < gx.size(); ++i) {
        if (xi->data[i] > 0.0) gx[i] += oi->grad[i];
      }
    });
  }
  return out;
}

Tensor Tape::add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail(PrimitiveKind::kAdd, a.shape().str() + " vs " + b.shape().str());
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.data();
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] + bd[i];
  finish(PrimitiveKind::kAdd, out);
  if (tracking({&a, &b})) {
    ImplPtr ai = a.impl_, bi = b.impl_, oi = out.impl_;
    record(PrimitiveKind::kAdd, {&a, &b}, out, [ai, bi, oi] {
      for (const ImplPtr& t : {ai, bi}) {
        if (!t->requires_grad) continue;
        auto& g = grad_buffer(*t);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i];
      }
    });
  }
  return out;
}

Tensor Tape::mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail(PrimitiveKind::kMul, a.shape().str() + " vs " + b.shape().str());
  Tensor out = Tensor::zeros(a.shape());
  auto o = out.data();
  auto ad = a.data();
  auto bd = b.data();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = ad[i] * bd[i];
  finish(PrimitiveKind::kMul, out);
  if (tracking({&a, &b})) {
    ImplPtr ai = a.impl_, bi = b.impl_, oi = out.impl_;
    record(PrimitiveKind::kMul, {&a, &b}, out, [ai, bi, oi] {
      if (ai->requires_grad) {
        auto& g = grad_buffer(*ai);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] * bi->data[i];
      }
      if (bi->requires_grad) {
        auto& g = grad_buffer(*bi);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += oi->grad[i] * ai->data[i];
      }
    });
  }
  return out;
}

Tensor Tape::global_avg_pool(const Tensor& x) {
  constexpr auto kind = PrimitiveKind::kGlobalAvgPool;
  require_rank(kind, x, 4, "input");
  const int n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
  if (hw == 0) shape_fail(kind, "empty spatial extent");
  Tensor out = Tensor::zeros(Shape{n, c});
  auto xd = x.data();
  auto od = out.data();
  for (int i = 0; i < n * c; ++i) {
    double s = 0.0;
    for (int j = 0; j < hw; ++j) s += xd[static_cast<std::size_t>(i) * hw + j];
    od[i] = s / hw;
  }
  finish(kind, out);
  if (tracking({&x})) {
    ImplPtr xi = x.impl_, oi = out.impl_;
    record(kind, {&x}, out, [xi, oi, n, c, hw] {
      auto& g = grad_buffer(*xi);
      for (int i = 0; i < n * c; ++i) {
        const double d = oi->grad[i] / hw;
        for (int j = 0; j < hw; ++j) g[static_cast<std::size_t>(i) * hw + j] += d;
      }
    });
  }
  return out;
}

Tensor Tape::avg_pool2d(const Tensor& x, const PoolAttrs& attrs) {
  constexpr auto kind = PrimitiveKind::kAvgPool2d;
  require_rank(kind, x, 4, "input");
  const int k = attrs.kernel;
  const int n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
  if (k < 1 || h < k || w < k) shape_fail(kind, "window " + std::to_string(k) + " exceeds input " + x.shape().str());
  const int ho = h / k, wo = w / k;
  Tensor out = Tensor::zeros(Shape{n, c, ho, wo});
  auto xd = x.data();
  auto od = out.data();
  const double inv = 1.0 / (k * k);
  for (int p = 0; p < n * c; ++p) {
    const double* src = xd.data() + static_cast<std::size_t>(p) * h * w;
    double* dst = od.data() + static_cast<std::size_t>(p) * ho * wo;
    for (int oy = 0; oy < ho; ++oy) {
      for (int ox = 0; ox < wo; ++ox) {
        double s = 0.0;
        for (int dy = 0; dy < k; ++dy) {
          for (int dx = 0; dx < k; ++dx) s += src[(oy * k + dy) * w + ox * k + dx];
        }
        dst[oy * wo + ox] = s * inv;
      }
    }
  }
  finish(kind, out);
  if (tracking({&x})) {
    ImplPtr xi = x.impl_, oi = out.impl_;
    record(kind, {&x}, out, [xi, oi, n, c, h, w, ho, wo, k, inv] {
      auto& g = grad_buffer(*xi);
      for (int p = 0; p < n * c; ++p) {
        double* dst = g.data() + static_cast<std::size_t>(p) * h * w;
        const double* src = oi->grad.data() + static_cast<std::size_t>(p) * ho * wo;
        for (int oy = 0; oy < ho; ++oy) {
          for (int ox = 0; ox < wo; ++ox) {
            const double d = src[oy * wo + ox] * inv;
            for (int dy = 0; dy < k; ++dy) {
              for (int dx = 0; dx < k; ++dx) dst[(oy * k + dy) * w + ox * k + dx] += d;
            }
          }
        }
      }
    });
  }
  return out;
}

Tensor Tape::linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  constexpr auto kind = PrimitiveKind::kLinear;
  require_rank(kind, x, 2, "input");
  require_rank(kind, w, 2, "weight");
  const int n = x.shape()[0], f = x.shape()[1], o = w.shape()[0];
  if (w.shape()[1] != f || b.numel() != static_cast<std::size_t>(o)) {
    shape_fail(kind, "input " + x.shape().str() + ", weight " + w.shape().str() + ", bias " + b.shape().str());
  }
  Tensor out = Tensor::zeros(Shape{n, o});
  auto xd = x.data();
  auto wd = w.data();
  auto bd = b.data();
  auto od = out.data();
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < o; ++j) {
      double s = bd[j];
      for (int q = 0; q < f; ++q) s += xd[i * f + q] * wd[j * f + q];
      od[i * o + j] = s;
    }
  }
  macs_ += static_cast<std::uint64_t>(n) * o * f;
  finish(kind, out);
  if (tracking({&x, &w, &b})) {
    ImplPtr xi = x.impl_, wi = w.impl_, bi = b.impl_, oi = out.impl_;
    record(kind, {&x, &w, &b}, out, [xi, wi, bi, oi, n, f, o] {
      const double* go = oi->grad.data();
      if (xi->requires_grad) {
        auto& g = grad_buffer(*xi);
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < o; ++j) {
            const double d = go[i * o + j];
            for (int q = 0; q < f; ++q) g[i * f + q] += d * wi->data[j * f + q];
          }
        }
      }
      if (wi->requires_grad) {
        auto& g = grad_buffer(*wi);
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < o; ++j) {
            const double d = go[i * o + j];
            for (int q = 0; q < f; ++q) g[j * f + q] += d * xi->data[i * f + q];
          }
        }
      }
      if (bi->requires_grad) {
        auto& g = grad_buffer(*bi);
        for (int i = 0; i < n; ++i) {
          for (int j = 0; j < o; ++j) g[j] += go[i * o + j];
        }
      }
    });
  }
  return out;
}

Tensor Tape::softmax_cross_entropy(const Tensor& logits, std::span<const int> labels) {
  constexpr auto kind = PrimitiveKind::kSoftmaxCrossEntropy;
  require_rank(kind, logits, 2, "logits");
  const int n = logits.shape()[0], k = logits.shape()[1];
  if (labels.size() != static_cast<std::size_t>(n) || n == 0) {
    shape_fail(kind, std::to_string(labels.size()) + " labels for logits " + logits.shape().str());
  }
  std::vector<double> probs(static_cast<std::size_t>(n) * k);
  auto ld = logits.data();
  double loss = 0.0;
  for (int i = 0; i < n; ++i) {
    const int y = labels[i];
    if (y < 0 || y >= k) shape_fail(kind, "label " + std::to_string(y) + " outside [0," + std::to_string(k) + ")");
    const double* row = ld.data() + static_cast<std::size_t>(i) * k;
    const double mx = *std::max_element(row, row + k);
    double z = 0.0;
    for (int j = 0; j < k; ++j) z += std::exp(row[j] - mx);
    const double log_z = std::log(z) + mx;
    for (int j = 0; j < k; ++j) probs[static_cast<std::size_t>(i) * k + j] = std::exp(row[j] - log_z);
    loss += log_z - row[y];
  }
  Tensor out = Tensor::scalar(loss / n);
  finish(kind, out);
  if (tracking({&logits})) {
    ImplPtr li = logits.impl_, oi = out.impl_;
    std::vector<int> ys(labels.begin(), labels.end());
    record(kind, {&logits}, out, [li, oi, n, k, ys = std::move(ys), probs = std::move(probs)] {
      auto& g = grad_buffer(*li);
      const double d = oi->grad[0] / n;
      for (int i = 0; i < n; ++i) {
        for (int j = 0; j < k; ++j) {
          const std::size_t idx = static_cast<std::size_t>(i) * k + j;
          g[idx] += d * (probs[idx] - (j == ys[i] ? 1.0 : 0.0));
        }
      }
    });
  }
  return out;
}

Tensor Tape::scale(const Tensor& x, const Tensor& s) {
  if (s.numel() != 1) shape_fail(PrimitiveKind::kScale, "scale factor must have one element, got " + s.shape().str());
  const double f = s.item();
  Tensor out = Tensor::zeros(x.shape());
  auto xd = x.data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = f * xd[i];
  finish(PrimitiveKind::kScale, out);
  if (tracking({&x, &s})) {
    ImplPtr xi = x.impl_, si = s.impl_, oi = out.impl_;
    record(PrimitiveKind::kScale, {&x, &s}, out, [xi, si, oi] {
      const double f = si->data[0];
      if (xi->requires_grad) {
        auto& g = grad_buffer(*xi);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += f * oi->grad[i];
      }
      if (si->requires_grad) {
        double acc = 0.0;
        for (std::size_t i = 0; i < oi->grad.size(); ++i) acc += oi->grad[i] * xi->data[i];
        grad_buffer(*si)[0] += acc;
      }
    });
  }
  return out;
}

Tensor Tape::zero_like(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  if (tracking({&x})) {
    // Contributes exactly zero, but makes sure x ends up with a gradient buffer.
    ImplPtr xi = x.impl_;
    record(PrimitiveKind::kZeroLike, {&x}, out, [xi] { grad_buffer(*xi); });
  }
  return out;
}

Tensor Tape::sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = Tensor::scalar(s);
  finish(PrimitiveKind::kSum, out);
  if (tracking({&x})) {
    ImplPtr xi = x.impl_, oi = out.impl_;
    record(PrimitiveKind::kSum, {&x}, out, [xi, oi] {
      auto& g = grad_buffer(*xi);
      for (double& v : g) v += oi->grad[0];
    });
  }
  return out;
}

}  // namespace autospace
