#include "hydramix/tensor.hpp"

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <unordered_set>

namespace hydramix {

namespace {

// OpenBLAS (statically linked) reads OPENBLAS_CORETYPE and
// OPENBLAS_NUM_THREADS during its own init. Some virtualized CPUs report a
// cpuid OpenBLAS does not recognize and it falls back to generic SSE2
// kernels; steer it to the AVX-512 path when the hardware actually supports
// it. Its internal threading is pinned to one thread unless the caller set
// it explicitly: results stay deterministic, and parallelism belongs to the
// workers (HMX_THREADS) that run independent graphs instead. Runs before
// OpenBLAS initializes because we link it statically.
__attribute__((constructor(200))) void select_blas_core() {
  if (!std::getenv("OPENBLAS_CORETYPE") && __builtin_cpu_supports("avx512f")) {
    setenv("OPENBLAS_CORETYPE", "SKYLAKEX", 1);
  }
  if (!std::getenv("OPENBLAS_NUM_THREADS")) {
    setenv("OPENBLAS_NUM_THREADS", "1", 1);
  }
}

void gemm(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, const float* a,
          const float* b, float* c) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, int(m), int(n), int(k), 1.0f, a,
              int(trans_a ? m : k), b, int(trans_b ? k : n), 0.0f, c, int(n));
}

// C += op(A)·op(B)
void gemm_acc(bool trans_a, bool trans_b, int64_t m, int64_t n, int64_t k, const float* a,
              const float* b, float* c) {
  cblas_sgemm(CblasRowMajor, trans_a ? CblasTrans : CblasNoTrans,
              trans_b ? CblasTrans : CblasNoTrans, int(m), int(n), int(k), 1.0f, a,
              int(trans_a ? m : k), b, int(trans_b ? k : n), 1.0f, c, int(n));
}

thread_local bool t_grad_mode = true;

using detail::TensorImpl;
using Impl = std::shared_ptr<TensorImpl>;

Impl make_impl(Shape shape, std::vector<float> data) {
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return impl;
}

bool track(const std::initializer_list<const Tensor*>& inputs) {
  if (!t_grad_mode) return false;
  for (const Tensor* t : inputs) {
    if (t->requires_grad()) return true;
  }
  return false;
}

// Builds the result node, wiring parents and the backward closure only when
// some input participates in the graph.
Tensor make_result(Shape shape, std::vector<float> data,
                   std::initializer_list<const Tensor*> inputs,
                   std::function<void(TensorImpl&)> backward_fn) {
  Impl impl = make_impl(std::move(shape), std::move(data));
  if (track(inputs)) {
    impl->requires_grad = true;
    for (const Tensor* t : inputs) impl->parents.push_back(t->impl());
    impl->backward_fn = std::move(backward_fn);
  }
  return Tensor(std::move(impl));
}

void require_rank(const Tensor& t, int rank, const char* op) {
  if (t.rank() != rank) {
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(rank) +
                     ", got shape " + shape_str(t.shape()));
  }
}

struct ConvDims {
  int64_t n, h, w, c, kh, kw, f;
  int64_t oh, ow;
  int64_t pad_top, pad_left;
};

ConvDims conv_dims(const Shape& xs, const Shape& ks, int stride, Padding padding) {
  ConvDims d{};
  d.n = xs[0], d.h = xs[1], d.w = xs[2], d.c = xs[3];
  d.kh = ks[0], d.kw = ks[1], d.f = ks[3];
  if (ks[2] != d.c) {
    throw ShapeError("conv2d: kernel channels " + shape_str(ks) + " do not match input " +
                     shape_str(xs));
  }
  if (padding == Padding::kSame) {
    d.oh = (d.h + stride - 1) / stride;
    d.ow = (d.w + stride - 1) / stride;
    int64_t pad_h = std::max<int64_t>((d.oh - 1) * stride + d.kh - d.h, 0);
    int64_t pad_w = std::max<int64_t>((d.ow - 1) * stride + d.kw - d.w, 0);
    d.pad_top = pad_h / 2;
    d.pad_left = pad_w / 2;
    if (d.kh > d.h + pad_h || d.kw > d.w + pad_w) {
      throw ShapeError("conv2d: kernel " + shape_str(ks) + " larger than padded input " +
                       shape_str(xs));
    }
  } else {
    if (d.kh > d.h || d.kw > d.w) {
      throw ShapeError("conv2d: kernel " + shape_str(ks) + " larger than input " +
                       shape_str(xs));
    }
    d.oh = (d.h - d.kh) / stride + 1;
    d.ow = (d.w - d.kw) / stride + 1;
    d.pad_top = 0;
    d.pad_left = 0;
  }
  return d;
}

// Scratch for im2col matrices; reused across calls on the same thread. Only
// ever grows, so warm steps pay no allocation; callers read exactly the
// extents they asked for.
thread_local std::vector<float> t_cols;

void ensure_scratch(std::vector<float>& cols, int64_t need) {
  if (int64_t(cols.size()) < need) cols.resize(size_t(need));
}

void im2col(const float* x, const ConvDims& d, int stride, std::vector<float>& cols) {
  int64_t k = d.kh * d.kw * d.c;
  ensure_scratch(cols, d.n * d.oh * d.ow * k);
  // Every slot is either copied from the input or zeroed here explicitly;
  // interior rows are pure copies, so no full-buffer clear is needed.
  for (int64_t img = 0; img < d.n; ++img) {
    float* base = cols.data() + img * d.oh * d.ow * k;
    for (int64_t oy = 0; oy < d.oh; ++oy) {
      for (int64_t ox = 0; ox < d.ow; ++ox) {
        float* row = base + (oy * d.ow + ox) * k;
        for (int64_t ky = 0; ky < d.kh; ++ky) {
          int64_t iy = oy * stride + ky - d.pad_top;
          float* dst_row = row + ky * d.kw * d.c;
          if (iy < 0 || iy >= d.h) {
            std::fill(dst_row, dst_row + d.kw * d.c, 0.0f);
            continue;
          }
          int64_t ix0 = ox * stride - d.pad_left;
          int64_t kx_lo = std::max<int64_t>(0, -ix0);
          int64_t kx_hi = std::min<int64_t>(d.kw, d.w - ix0);
          if (kx_lo >= kx_hi) {
            std::fill(dst_row, dst_row + d.kw * d.c, 0.0f);
            continue;
          }
          std::fill(dst_row, dst_row + kx_lo * d.c, 0.0f);
          const float* src = x + ((img * d.h + iy) * d.w + (ix0 + kx_lo)) * d.c;
          std::copy(src, src + (kx_hi - kx_lo) * d.c, dst_row + kx_lo * d.c);
          std::fill(dst_row + kx_hi * d.c, dst_row + d.kw * d.c, 0.0f);
        }
      }
    }
  }
}

void col2im_add(const float* cols, const ConvDims& d, int stride, float* dx) {
  int64_t k = d.kh * d.kw * d.c;
  for (int64_t img = 0; img < d.n; ++img) {
    const float* base = cols + img * d.oh * d.ow * k;
    for (int64_t oy = 0; oy < d.oh; ++oy) {
      for (int64_t ox = 0; ox < d.ow; ++ox) {
        const float* row = base + (oy * d.ow + ox) * k;
        for (int64_t ky = 0; ky < d.kh; ++ky) {
          int64_t iy = oy * stride + ky - d.pad_top;
          if (iy < 0 || iy >= d.h) continue;
          int64_t ix0 = ox * stride - d.pad_left;
          int64_t kx_lo = std::max<int64_t>(0, -ix0);
          int64_t kx_hi = std::min<int64_t>(d.kw, d.w - ix0);
          if (kx_lo >= kx_hi) continue;
          const float* src = row + (ky * d.kw + kx_lo) * d.c;
          float* dst = dx + ((img * d.h + iy) * d.w + (ix0 + kx_lo)) * d.c;
          for (int64_t t = 0; t < (kx_hi - kx_lo) * d.c; ++t) dst[t] += src[t];
        }
      }
    }
  }
}

}  // namespace

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int64_t e : s) {
    if (e < 0) throw ShapeError("negative extent in shape " + shape_str(s));
    n *= e;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

namespace detail {

void TensorImpl::accumulate_grad(const float* g, int64_t n) {
  auto& buf = grad_buffer();
  for (int64_t i = 0; i < n; ++i) buf[size_t(i)] += g[i];
}

std::vector<float>& TensorImpl::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0f);
  return grad;
}

}  // namespace detail

Tensor Tensor::zeros(Shape shape) { return full(std::move(shape), 0.0f); }

Tensor Tensor::full(Shape shape, float value) {
  int64_t n = shape_numel(shape);
  return Tensor(make_impl(std::move(shape), std::vector<float>(size_t(n), value)));
}

Tensor Tensor::from_data(Shape shape, std::vector<float> data) {
  if (shape_numel(shape) != int64_t(data.size())) {
    throw ShapeError("from_data: shape " + shape_str(shape) + " wants " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  }
  return Tensor(make_impl(std::move(shape), std::move(data)));
}

Tensor Tensor::scalar(float value) { return Tensor(make_impl({}, {value})); }

detail::TensorImpl& Tensor::node() const {
  if (!impl_) throw ArgumentError("operation on undefined tensor");
  return *impl_;
}

const Shape& Tensor::shape() const { return node().shape; }
int64_t Tensor::numel() const { return node().numel(); }
int Tensor::rank() const { return int(node().shape.size()); }

int64_t Tensor::dim(int i) const {
  const Shape& s = node().shape;
  if (i < 0 || size_t(i) >= s.size())
    throw ShapeError("dim index " + std::to_string(i) + " out of range for " + shape_str(s));
  return s[size_t(i)];
}

std::span<const float> Tensor::values() const { return node().data; }

float Tensor::value() const {
  if (numel() != 1) throw ShapeError("value(): tensor has " + std::to_string(numel()) + " elements");
  return node().data[0];
}

std::span<const float> Tensor::grad() const { return node().grad; }
std::span<float> Tensor::mutable_values() { return node().data; }
std::span<float> Tensor::mutable_grad() { return node().grad_buffer(); }

bool Tensor::requires_grad() const { return node().requires_grad; }

Tensor& Tensor::set_requires_grad(bool v) {
  node().requires_grad = v;
  return *this;
}

void Tensor::zero_grad() { node().grad.clear(); }

NoGradGuard::NoGradGuard() : prev_(t_grad_mode) { t_grad_mode = false; }
NoGradGuard::~NoGradGuard() { t_grad_mode = prev_; }

bool grad_mode_enabled() { return t_grad_mode; }

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) {
    throw ShapeError("matmul: inner extents differ, " + shape_str(a.shape()) + " vs " +
                     shape_str(b.shape()));
  }
  std::vector<float> out(size_t(m * n));
  gemm(false, false, m, n, k, a.values().data(), b.values().data(), out.data());
  auto ai = a.impl();
  auto bi = b.impl();
  return make_result({m, n}, std::move(out), {&a, &b}, [ai, bi, m, n, k](TensorImpl& self) {
    const float* g = self.grad.data();
    if (ai->requires_grad) {
      // dA = dC·Bᵀ
      gemm_acc(false, true, m, k, n, g, bi->data.data(), ai->grad_buffer().data());
    }
    if (bi->requires_grad) {
      // dB = Aᵀ·dC
      gemm_acc(true, false, k, n, m, ai->data.data(), g, bi->grad_buffer().data());
    }
  });
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride, Padding padding) {
  require_rank(x, 4, "conv2d");
  require_rank(kernel, 4, "conv2d");
  if (stride < 1) throw ArgumentError("conv2d: stride must be >= 1");
  ConvDims d = conv_dims(x.shape(), kernel.shape(), stride, padding);
  int64_t m = d.n * d.oh * d.ow;
  int64_t k = d.kh * d.kw * d.c;
  im2col(x.values().data(), d, stride, t_cols);
  std::vector<float> out(size_t(m * d.f));
  gemm(false, false, m, d.f, k, t_cols.data(), kernel.values().data(), out.data());
  auto xi = x.impl();
  auto ki = kernel.impl();
  return make_result({d.n, d.oh, d.ow, d.f}, std::move(out), {&x, &kernel},
                     [xi, ki, d, stride, m, k](TensorImpl& self) {
                       const float* g = self.grad.data();
                       if (ki->requires_grad) {
                         im2col(xi->data.data(), d, stride, t_cols);
                         // dK = colsᵀ·dY
                         gemm_acc(true, false, k, d.f, m, t_cols.data(), g,
                                  ki->grad_buffer().data());
                       }
                       if (xi->requires_grad) {
                         // dcols = dY·Kᵀ (gemm writes all of it), then scatter back
                         ensure_scratch(t_cols, m * k);
                         gemm(false, true, m, k, d.f, g, ki->data.data(), t_cols.data());
                         col2im_add(t_cols.data(), d, stride, xi->grad_buffer().data());
                       }
                     });
}

Tensor relu(const Tensor& x) {
  std::vector<float> out(x.values().begin(), x.values().end());
  for (float& v : out) v = v > 0.0f ? v : 0.0f;
  auto xi = x.impl();
  return make_result(x.shape(), std::move(out), {&x}, [xi](TensorImpl& self) {
    if (!xi->requires_grad) return;
    auto& gx = xi->grad_buffer();
    for (size_t i = 0; i < gx.size(); ++i) {
      gx[i] += xi->data[i] > 0.0f ? self.grad[i] : 0.0f;
    }
  });
}

Tensor sigmoid(const Tensor& x) {
  auto xv = x.values();
  std::vector<float> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = float(1.0 / (1.0 + std::exp(-double(xv[i]))));
  auto xi = x.impl();
  return make_result(x.shape(), std::move(out), {&x}, [xi](TensorImpl& self) {
    if (!xi->requires_grad) return;
    auto& gx = xi->grad_buffer();
    for (size_t i = 0; i < gx.size(); ++i) {
      float y = self.data[i];
      gx[i] += self.grad[i] * y * (1.0f - y);
    }
  });
}

Tensor softmax(const Tensor& x) {
  require_rank(x, 2, "softmax");
  int64_t n = x.dim(0), c = x.dim(1);
  auto xv = x.values();
  std::vector<float> out(size_t(n * c));
  for (int64_t i = 0; i < n; ++i) {
    const float* row = xv.data() + i * c;
    float* orow = out.data() + i * c;
    float mx = row[0];
    for (int64_t j = 1; j < c; ++j) mx = std::max(mx, row[j]);
    double denom = 0.0;
    for (int64_t j = 0; j < c; ++j) {
      double e = std::exp(double(row[j]) - double(mx));
      orow[j] = float(e);
      denom += e;
    }
    for (int64_t j = 0; j < c; ++j) orow[j] = float(double(orow[j]) / denom);
  }
  auto xi = x.impl();
  return make_result(x.shape(), std::move(out), {&x}, [xi, n, c](TensorImpl& self) {
    if (!xi->requires_grad) return;
    auto& gx = xi->grad_buffer();
    for (int64_t i = 0; i < n; ++i) {
      const float* y = self.data.data() + i * c;
      const float* g = self.grad.data() + i * c;
      double dot = 0.0;
      for (int64_t j = 0; j < c; ++j) dot += double(g[j]) * double(y[j]);
      for (int64_t j = 0; j < c; ++j) gx[size_t(i * c + j)] += y[j] * (g[j] - float(dot));
    }
  });
}

Tensor log(const Tensor& x) {
  auto xv = x.values();
  std::vector<float> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) {
    if (!(xv[i] > 0.0f)) {
      throw NumericError("log: non-positive input " + std::to_string(xv[i]) + " at index " +
                         std::to_string(i));
    }
    out[i] = std::log(xv[i]);
  }
  auto xi = x.impl();
  return make_result(x.shape(), std::move(out), {&x}, [xi](TensorImpl& self) {
    if (!xi->requires_grad) return;
    auto& gx = xi->grad_buffer();
    for (size_t i = 0; i < gx.size(); ++i) gx[i] += self.grad[i] / xi->data[i];
  });
}

Tensor log_clamped(const Tensor& x, float floor_value) {
  if (!(floor_value > 0.0f)) throw ArgumentError("log_clamped: floor must be positive");
  auto xv = x.values();
  std::vector<float> out(xv.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = std::log(std::max(xv[i], floor_value));
  auto xi = x.impl();
  return make_result(x.shape(), std::move(out), {&x}, [xi, floor_value](TensorImpl& self) {
    if (!xi->requires_grad) return;
    auto& gx = xi->grad_buffer();
    for (size_t i = 0; i < gx.size(); ++i) {
      if (xi->data[i] > floor_value) gx[i] += self.grad[i] / xi->data[i];
    }
  });
}

Tensor global_avg_pool(const Tensor& x) {
  require_rank(x, 4, "global_avg_pool");
  int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  int64_t hw = h * w;
  auto xv = x.values();
  std::vector<float> out(size_t(n * c), 0.0f);
  for (int64_t img = 0; img < n; ++img) {
    std::vector<double> acc(size_t(c), 0.0);
    const float* base = xv.data() + img * hw * c;
    for (int64_t p = 0; p < hw; ++p) {
      for (int64_t ch = 0; ch < c; ++ch) acc[size_t(ch)] += base[p * c + ch];
    }
    for (int64_t ch = 0; ch < c; ++ch) out[size_t(img * c + ch)] = float(acc[size_t(ch)] / double(hw));
  }
  auto xi = x.impl();
  return make_result({n, c}, std::move(out), {&x}, [xi, n, hw, c](TensorImpl& self) {
    if (!xi->requires_grad) return;
    auto& gx = xi->grad_buffer();
    for (int64_t img = 0; img < n; ++img) {
      const float* g = self.grad.data() + img * c;
      float* dst = gx.data() + img * hw * c;
      for (int64_t p = 0; p < hw; ++p) {
        for (int64_t ch = 0; ch < c; ++ch) dst[p * c + ch] += g[ch] / float(hw);
      }
    }
  });
}

Tensor max_pool2d(const Tensor& x, int window, int stride) {
  require_rank(x, 4, "max_pool2d");
  if (window < 1 || stride < 1) throw ArgumentError("max_pool2d: window and stride must be >= 1");
  int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (window > h || window > w) {
    throw ShapeError("max_pool2d: window " + std::to_string(window) + " larger than input " +
                     shape_str(x.shape()));
  }
  int64_t oh = (h - window) / stride + 1;
  int64_t ow = (w - window) / stride + 1;
  auto xv = x.values();
  std::vector<float> out(size_t(n * oh * ow * c));
  auto argmax = std::make_shared<std::vector<int64_t>>(out.size());
  for (int64_t img = 0; img < n; ++img) {
    for (int64_t oy = 0; oy < oh; ++oy) {
      for (int64_t ox = 0; ox < ow; ++ox) {
        for (int64_t ch = 0; ch < c; ++ch) {
          float best = -std::numeric_limits<float>::infinity();
          int64_t best_idx = -1;
          for (int64_t ky = 0; ky < window; ++ky) {
            for (int64_t kx = 0; kx < window; ++kx) {
              int64_t idx = ((img * h + oy * stride + ky) * w + ox * stride + kx) * c + ch;
              if (xv[size_t(idx)] > best) {
                best = xv[size_t(idx)];
                best_idx = idx;
              }
            }
          }
          int64_t oidx = ((img * oh + oy) * ow + ox) * c + ch;
          out[size_t(oidx)] = best;
          (*argmax)[size_t(oidx)] = best_idx;
        }
      }
    }
  }
  auto xi = x.impl();
  return make_result({n, oh, ow, c}, std::move(out), {&x}, [xi, argmax](TensorImpl& self) {
    if (!xi->requires_grad) return;
    auto& gx = xi->grad_buffer();
    for (size_t i = 0; i < argmax->size(); ++i) gx[size_t((*argmax)[i])] += self.grad[i];
  });
}

Tensor flatten(const Tensor& x) {
  if (x.rank() < 1) throw ShapeError("flatten: rank-0 tensor");
  int64_t n = x.dim(0);
  return reshape(x, {n, x.numel() / std::max<int64_t>(n, 1)});
}

Tensor reshape(const Tensor& x, Shape target) {
  if (shape_numel(target) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(target));
  }
  std::vector<float> out(x.values().begin(), x.values().end());
  auto xi = x.impl();
  return make_result(std::move(target), std::move(out), {&x}, [xi](TensorImpl& self) {
    if (!xi->requires_grad) return;
    xi->accumulate_grad(self.grad.data(), self.numel());
  });
}

Tensor add(const Tensor& a, const Tensor& b) {
  auto av = a.values();
  auto bv = b.values();
  bool broadcast = false;
  if (a.shape() != b.shape()) {
    // rank-1 b broadcast along rows of a
    if (b.rank() == 1 && a.rank() >= 1 && a.shape().back() == b.dim(0)) {
      broadcast = true;
    } else {
      throw ShapeError("add: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                       " are incompatible");
    }
  }
  std::vector<float> out(av.size());
  if (broadcast) {
    int64_t c = b.dim(0);
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i % size_t(c)];
  } else {
    for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] + bv[i];
  }
  auto ai = a.impl();
  auto bi = b.impl();
  return make_result(a.shape(), std::move(out), {&a, &b}, [ai, bi, broadcast](TensorImpl& self) {
    if (ai->requires_grad) ai->accumulate_grad(self.grad.data(), self.numel());
    if (bi->requires_grad) {
      if (broadcast) {
        int64_t c = bi->numel();
        int64_t rows = self.numel() / c;
        auto& gb = bi->grad_buffer();
        for (int64_t j = 0; j < c; ++j) {
          double acc = 0.0;
          for (int64_t r = 0; r < rows; ++r) acc += self.grad[size_t(r * c + j)];
          gb[size_t(j)] += float(acc);
        }
      } else {
        bi->accumulate_grad(self.grad.data(), self.numel());
      }
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("sub: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " differ");
  }
  auto av = a.values();
  auto bv = b.values();
  std::vector<float> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] - bv[i];
  auto ai = a.impl();
  auto bi = b.impl();
  return make_result(a.shape(), std::move(out), {&a, &b}, [ai, bi](TensorImpl& self) {
    if (ai->requires_grad) ai->accumulate_grad(self.grad.data(), self.numel());
    if (bi->requires_grad) {
      auto& gb = bi->grad_buffer();
      for (size_t i = 0; i < gb.size(); ++i) gb[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw ShapeError("mul: shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                     " differ");
  }
  auto av = a.values();
  auto bv = b.values();
  std::vector<float> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * bv[i];
  auto ai = a.impl();
  auto bi = b.impl();
  return make_result(a.shape(), std::move(out), {&a, &b}, [ai, bi](TensorImpl& self) {
    if (ai->requires_grad) {
      auto& ga = ai->grad_buffer();
      for (size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * bi->data[i];
    }
    if (bi->requires_grad) {
      auto& gb = bi->grad_buffer();
      for (size_t i = 0; i < gb.size(); ++i) gb[i] += self.grad[i] * ai->data[i];
    }
  });
}

Tensor scale(const Tensor& a, float c) {
  auto av = a.values();
  std::vector<float> out(av.size());
  for (size_t i = 0; i < out.size(); ++i) out[i] = av[i] * c;
  auto ai = a.impl();
  return make_result(a.shape(), std::move(out), {&a}, [ai, c](TensorImpl& self) {
    if (!ai->requires_grad) return;
    auto& ga = ai->grad_buffer();
    for (size_t i = 0; i < ga.size(); ++i) ga[i] += self.grad[i] * c;
  });
}

Tensor sum(const Tensor& x) {
  auto xv = x.values();
  double acc = 0.0;
  for (float v : xv) acc += v;
  auto xi = x.impl();
  return make_result({}, {float(acc)}, {&x}, [xi](TensorImpl& self) {
    if (!xi->requires_grad) return;
    float g = self.grad[0];
    auto& gx = xi->grad_buffer();
    for (float& v : gx) v += g;
  });
}

Tensor mean(const Tensor& x) {
  if (x.numel() == 0) throw ArgumentError("mean of empty tensor");
  auto xv = x.values();
  double acc = 0.0;
  for (float v : xv) acc += v;
  int64_t n = x.numel();
  auto xi = x.impl();
  return make_result({}, {float(acc / double(n))}, {&x}, [xi, n](TensorImpl& self) {
    if (!xi->requires_grad) return;
    float g = self.grad[0] / float(n);
    auto& gx = xi->grad_buffer();
    for (float& v : gx) v += g;
  });
}

Tensor slice_rows(const Tensor& x, int64_t row_begin, int64_t row_end) {
  if (x.rank() < 1) throw ShapeError("slice_rows: rank-0 tensor");
  int64_t rows = x.dim(0);
  if (row_begin < 0 || row_end > rows || row_begin > row_end) {
    throw ArgumentError("slice_rows: range [" + std::to_string(row_begin) + "," +
                        std::to_string(row_end) + ") invalid for " + std::to_string(rows) +
                        " rows");
  }
  int64_t row_size = rows > 0 ? x.numel() / rows : 0;
  Shape out_shape = x.shape();
  out_shape[0] = row_end - row_begin;
  auto xv = x.values();
  std::vector<float> out(xv.begin() + row_begin * row_size, xv.begin() + row_end * row_size);
  auto xi = x.impl();
  return make_result(std::move(out_shape), std::move(out), {&x},
                     [xi, row_begin, row_size](TensorImpl& self) {
                       if (!xi->requires_grad) return;
                       auto& gx = xi->grad_buffer();
                       for (int64_t i = 0; i < self.numel(); ++i) {
                         gx[size_t(row_begin * row_size + i)] += self.grad[size_t(i)];
                       }
                     });
}

Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta, BatchNormState& state,
                 bool training) {
  require_rank(x, 4, "batchnorm");
  int64_t n = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
  if (gamma.numel() != c || beta.numel() != c || int64_t(state.running_mean.size()) != c) {
    throw ShapeError("batchnorm: parameter extents do not match " + std::to_string(c) +
                     " channels");
  }
  int64_t count = n * h * w;
  if (count == 0) throw ArgumentError("batchnorm: empty input");
  auto xv = x.values();
  auto gv = gamma.values();
  auto bv = beta.values();

  std::vector<float> mean_c(size_t(c), 0.0f);
  std::vector<float> inv_std_c(size_t(c), 0.0f);
  if (training) {
    std::vector<double> m(size_t(c), 0.0), v(size_t(c), 0.0);
    for (int64_t p = 0; p < count; ++p) {
      const float* row = xv.data() + p * c;
      for (int64_t ch = 0; ch < c; ++ch) m[size_t(ch)] += row[ch];
    }
    for (int64_t ch = 0; ch < c; ++ch) m[size_t(ch)] /= double(count);
    for (int64_t p = 0; p < count; ++p) {
      const float* row = xv.data() + p * c;
      for (int64_t ch = 0; ch < c; ++ch) {
        double d = double(row[ch]) - m[size_t(ch)];
        v[size_t(ch)] += d * d;
      }
    }
    for (int64_t ch = 0; ch < c; ++ch) {
      double var = v[size_t(ch)] / double(count);
      mean_c[size_t(ch)] = float(m[size_t(ch)]);
      inv_std_c[size_t(ch)] = float(1.0 / std::sqrt(var + double(state.eps)));
      state.running_mean[size_t(ch)] =
          state.momentum * state.running_mean[size_t(ch)] + (1.0f - state.momentum) * float(m[size_t(ch)]);
      state.running_var[size_t(ch)] =
          state.momentum * state.running_var[size_t(ch)] + (1.0f - state.momentum) * float(var);
    }
  } else {
    for (int64_t ch = 0; ch < c; ++ch) {
      mean_c[size_t(ch)] = state.running_mean[size_t(ch)];
      inv_std_c[size_t(ch)] =
          float(1.0 / std::sqrt(double(state.running_var[size_t(ch)]) + double(state.eps)));
    }
  }

  // xhat is only needed by the backward pass; skip it when this call will
  // not be recorded (eval forwards under NoGradGuard).
  bool tracked = grad_mode_enabled() &&
                 (x.requires_grad() || gamma.requires_grad() || beta.requires_grad());
  auto xhat = std::make_shared<std::vector<float>>(tracked ? size_t(count * c) : size_t(0));
  std::vector<float> out(size_t(count * c));
  for (int64_t p = 0; p < count; ++p) {
    const float* xrow = xv.data() + p * c;
    float* orow = out.data() + p * c;
    if (tracked) {
      float* hrow = xhat->data() + p * c;
      for (int64_t ch = 0; ch < c; ++ch) {
        float xh = (xrow[ch] - mean_c[size_t(ch)]) * inv_std_c[size_t(ch)];
        hrow[ch] = xh;
        orow[ch] = gv[size_t(ch)] * xh + bv[size_t(ch)];
      }
    } else {
      for (int64_t ch = 0; ch < c; ++ch) {
        float xh = (xrow[ch] - mean_c[size_t(ch)]) * inv_std_c[size_t(ch)];
        orow[ch] = gv[size_t(ch)] * xh + bv[size_t(ch)];
      }
    }
  }

  auto xi = x.impl();
  auto gi = gamma.impl();
  auto bi = beta.impl();
  auto inv_std = std::make_shared<std::vector<float>>(std::move(inv_std_c));
  return make_result(
      x.shape(), std::move(out), {&x, &gamma, &beta},
      [xi, gi, bi, xhat, inv_std, count, c, training](TensorImpl& self) {
        const float* g = self.grad.data();
        std::vector<double> sum_g(size_t(c), 0.0), sum_gx(size_t(c), 0.0);
        for (int64_t p = 0; p < count; ++p) {
          const float* grow = g + p * c;
          const float* hrow = xhat->data() + p * c;
          for (int64_t ch = 0; ch < c; ++ch) {
            sum_g[size_t(ch)] += grow[ch];
            sum_gx[size_t(ch)] += double(grow[ch]) * double(hrow[ch]);
          }
        }
        if (gi->requires_grad) {
          auto& gg = gi->grad_buffer();
          for (int64_t ch = 0; ch < c; ++ch) gg[size_t(ch)] += float(sum_gx[size_t(ch)]);
        }
        if (bi->requires_grad) {
          auto& gb = bi->grad_buffer();
          for (int64_t ch = 0; ch < c; ++ch) gb[size_t(ch)] += float(sum_g[size_t(ch)]);
        }
        if (xi->requires_grad) {
          auto& gx = xi->grad_buffer();
          std::vector<float> scale(size_t(c), 0.0f);
          for (int64_t ch = 0; ch < c; ++ch) {
            scale[size_t(ch)] = gi->data[size_t(ch)] * (*inv_std)[size_t(ch)];
          }
          if (training) {
            std::vector<float> mean_g(size_t(c), 0.0f), mean_gx(size_t(c), 0.0f);
            for (int64_t ch = 0; ch < c; ++ch) {
              mean_g[size_t(ch)] = float(sum_g[size_t(ch)] / double(count));
              mean_gx[size_t(ch)] = float(sum_gx[size_t(ch)] / double(count));
            }
            for (int64_t p = 0; p < count; ++p) {
              const float* grow = g + p * c;
              const float* hrow = xhat->data() + p * c;
              float* gxrow = gx.data() + p * c;
              for (int64_t ch = 0; ch < c; ++ch) {
                float t = grow[ch] - mean_g[size_t(ch)] - hrow[ch] * mean_gx[size_t(ch)];
                gxrow[ch] += scale[size_t(ch)] * t;
              }
            }
          } else {
            for (int64_t p = 0; p < count; ++p) {
              const float* grow = g + p * c;
              float* gxrow = gx.data() + p * c;
              for (int64_t ch = 0; ch < c; ++ch) gxrow[ch] += grow[ch] * scale[size_t(ch)];
            }
          }
        }
      });
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ArgumentError("backward on undefined tensor");
  if (loss.numel() != 1) {
    throw ArgumentError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  auto root = loss.impl();
  if (root->backward_run) {
    throw ArgumentError("backward already called on this graph; rebuild the graph first");
  }
  root->backward_run = true;

  // Iterative post-order DFS over parents.
  std::vector<TensorImpl*> order;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, size_t>> stack;
  stack.emplace_back(root.get(), 0);
  visited.insert(root.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorImpl* p = node->parents[next++].get();
      if (!visited.count(p) && p->backward_fn) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  root->grad_buffer()[0] = 1.0f;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    TensorImpl* node = *it;
    if (node->backward_fn && !node->grad.empty()) node->backward_fn(*node);
  }
}

void check_finite(const Tensor& t, const std::string& what) {
  auto v = t.values();
  for (size_t i = 0; i < v.size(); ++i) {
    if (!std::isfinite(v[i])) {
      throw NumericError(what + ": non-finite value at index " + std::to_string(i));
    }
  }
}

}  // namespace hydramix
