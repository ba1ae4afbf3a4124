#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "hydramix/errors.hpp"

namespace hydramix {

using Shape = std::vector<int64_t>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

enum class Padding { kSame, kValid };

namespace detail {

struct TensorImpl {
  Shape shape;
  std::vector<float> data;
  bool requires_grad = false;
  std::vector<float> grad;  // empty until first accumulation

  // Reverse-mode graph: parents plus a closure that routes this node's grad
  // into them. Leaves have neither.
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;
  bool backward_run = false;

  int64_t numel() const { return int64_t(data.size()); }
  void accumulate_grad(const float* g, int64_t n);
  std::vector<float>& grad_buffer();
};

}  // namespace detail

// Dense n-dimensional float32 array with optional gradient. Value semantics:
// copies share the underlying node. Data is immutable after creation except
// through mutable_values(), which optimizers use on leaf parameters.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape);
  static Tensor full(Shape shape, float value);
  static Tensor from_data(Shape shape, std::vector<float> data);
  static Tensor scalar(float value);  // rank-0

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const;
  int64_t numel() const;
  int rank() const;
  int64_t dim(int i) const;

  std::span<const float> values() const;
  float value() const;  // single-element convenience
  std::span<const float> grad() const;
  std::span<float> mutable_values();
  std::span<float> mutable_grad();

  bool requires_grad() const;
  Tensor& set_requires_grad(bool v);
  void zero_grad();

  std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}

 private:
  detail::TensorImpl& node() const;

  std::shared_ptr<detail::TensorImpl> impl_;
};

// While alive on a thread, ops on that thread record no graph. Used for
// evaluation-mode forwards.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

bool grad_mode_enabled();

// Per-channel batch normalization state: running statistics are buffers, not
// trainable parameters.
struct BatchNormState {
  std::vector<float> running_mean;
  std::vector<float> running_var;
  float momentum = 0.9f;
  float eps = 1e-5f;

  explicit BatchNormState(int64_t channels = 0)
      : running_mean(size_t(channels), 0.0f), running_var(size_t(channels), 1.0f) {}
};

// --- Operations (each differentiable unless noted) ---

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
// NHWC cross-correlation, kernel [kh,kw,c,f].
Tensor conv2d(const Tensor& x, const Tensor& kernel, int stride, Padding padding);
Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor softmax(const Tensor& x);  // rank-2, rowwise
Tensor log(const Tensor& x);      // domain error on non-positive input
Tensor log_clamped(const Tensor& x, float floor_value);
Tensor global_avg_pool(const Tensor& x);  // [n,h,w,c] -> [n,c]
Tensor max_pool2d(const Tensor& x, int window, int stride);  // valid padding
Tensor flatten(const Tensor& x);  // [n,...] -> [n, prod(rest)]
Tensor reshape(const Tensor& x, Shape target);
Tensor add(const Tensor& a, const Tensor& b);  // same shape, or rank-1 b broadcast over rows
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise, same shape
Tensor scale(const Tensor& a, float c);
Tensor mean(const Tensor& x);  // -> rank-0, 64-bit accumulation
Tensor sum(const Tensor& x);   // -> rank-0, 64-bit accumulation
Tensor slice_rows(const Tensor& x, int64_t row_begin, int64_t row_end);
Tensor batchnorm(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                 BatchNormState& state, bool training);

// Populates grads of every requires_grad leaf reachable from `loss`.
// `loss` must be a single-element tensor; running it twice on the same
// graph is an error.
void backward(const Tensor& loss);

// Throws NumericError if any element is NaN or infinite.
void check_finite(const Tensor& t, const std::string& what);

}  // namespace hydramix
