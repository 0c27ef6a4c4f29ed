#pragma once

// Dense row-major tensor with a small reverse-mode autograd engine.
//
// BasicTensor<T> is a shared handle onto a graph node. Copying a tensor
// copies the handle, not the buffer. Every operation in this header records
// a backward closure when gradient recording is enabled and at least one
// input requires a gradient; otherwise the result is a detached leaf.
//
// The library is instantiated for float (training, inference, checkpoints)
// and double (finite-difference verification of the same code paths).
// Reductions accumulate in double for both instantiations.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace mfnet {

using Shape = std::vector<int>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

enum class Activation { kIdentity, kSiLU, kSigmoid, kReLU };

const char* activation_name(Activation kind);

namespace detail {

template <class T>
struct Node {
  Shape shape;
  std::vector<T> data;
  std::vector<T> grad;  // empty until first written
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;  // empty for leaves

  std::span<T> grad_span() {
    if (grad.empty()) grad.assign(data.size(), T(0));
    return grad;
  }
};

}  // namespace detail

// Gradient recording is a per-thread switch.
bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

template <class T>
class BasicTensor {
 public:
  using value_type = T;

  BasicTensor() = default;

  // Takes ownership of `data`. Rejects non-finite values and extents that do
  // not match the shape.
  BasicTensor(Shape shape, std::vector<T> data, bool requires_grad = false);

  static BasicTensor zeros(Shape shape, bool requires_grad = false);
  static BasicTensor full(Shape shape, T value, bool requires_grad = false);
  static BasicTensor scalar(T value, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const;
  int rank() const { return static_cast<int>(shape().size()); }
  int dim(int axis) const;
  std::size_t numel() const;

  std::span<const T> data() const;
  std::span<T> mutable_data();
  T item() const;
  T at(std::initializer_list<int> index) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool has_grad() const;
  std::span<const T> grad() const;  // empty span when no gradient yet
  std::span<T> mutable_grad();      // allocates zeros on first use
  void zero_grad();

  // Reverse-mode sweep from a scalar. Leaf gradients accumulate across calls;
  // intermediate gradients are recomputed from scratch on every call.
  void backward() const;

  // A new leaf sharing nothing with the graph.
  BasicTensor detach() const;

  // Same values widened or narrowed to another element type, as a leaf.
  template <class U>
  BasicTensor<U> cast(bool requires_grad = false) const {
    std::vector<U> out(numel());
    auto src = data();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = static_cast<U>(src[i]);
    return BasicTensor<U>(shape(), std::move(out), requires_grad);
  }

  const std::shared_ptr<detail::Node<T>>& node() const { return node_; }
  static BasicTensor from_node(std::shared_ptr<detail::Node<T>> node);

 private:
  std::shared_ptr<detail::Node<T>> node_;
};

using Tensor = BasicTensor<float>;
using Tensor64 = BasicTensor<double>;

// Builds an operation result. `backward` receives the output node (whose
// grad is populated) and must accumulate into parents that require grad.
// Parents and the closure are only retained when recording is active.
template <class T>
BasicTensor<T> make_op_result(Shape shape, std::vector<T> data,
                              const std::vector<BasicTensor<T>>& inputs,
                              std::function<void(detail::Node<T>&)> backward);

// ---------------------------------------------------------------------------
// Forward operations
// ---------------------------------------------------------------------------

// x[b,cin,h,w] * weight[cout,cin/groups,k,k] (+ bias[cout]) -> [b,cout,ho,wo].
// `bias` may be an undefined tensor.
template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, int stride, int padding,
                      int groups = 1);

// x[b,cin] . weight[cout,cin]^T (+ bias[cout]).
template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias);

// Windowed maximum; padded positions behave as -inf.
template <class T>
BasicTensor<T> maxpool2d(const BasicTensor<T>& x, int kernel, int stride,
                         int padding);

template <class T>
BasicTensor<T> global_avgpool(const BasicTensor<T>& x);

template <class T>
BasicTensor<T> upsample_nearest2x(const BasicTensor<T>& x);

template <class T>
BasicTensor<T> concat_channels(const std::vector<BasicTensor<T>>& xs);

// Elements at rows row_offset, row_offset+2, ... and cols col_offset, ...
template <class T>
BasicTensor<T> stride2_slice(const BasicTensor<T>& x, int row_offset,
                             int col_offset);

template <class T>
BasicTensor<T> activation(Activation kind, const BasicTensor<T>& x);

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b);

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b);

// x[b,c,h,w] scaled per channel by scale[b,c] (or [b,c,1,1]).
template <class T>
BasicTensor<T> scale_channels(const BasicTensor<T>& x,
                              const BasicTensor<T>& scale);

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x);

// Weighted sum, sum_i x_i * w_i, with constant weights.
template <class T>
BasicTensor<T> dot_const(const BasicTensor<T>& x, std::span<const T> weights);

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape);

// [b, A*K, h, w] -> [b, A, h, w, K]
template <class T>
BasicTensor<T> anchor_layout(const BasicTensor<T>& x, int anchors);

// Scalar helpers shared by ops, losses and decoding.
double sigmoid(double v);
double silu(double v);

}  // namespace mfnet
