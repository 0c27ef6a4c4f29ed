#include "mfnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "mfnet/error.hpp"

namespace mfnet {

namespace {

thread_local bool g_grad_enabled = true;

template <class T>
using NodePtr = std::shared_ptr<detail::Node<T>>;

template <class T>
void require_rank(const BasicTensor<T>& x, int rank, const char* op) {
  if (!x.defined()) throw ContractError(std::string(op) + ": undefined tensor");
  if (x.rank() != rank) {
    throw DimensionError(std::string(op) + ": expected rank " +
                         std::to_string(rank) + ", got shape " +
                         shape_str(x.shape()));
  }
}

int pooled_extent(int in, int kernel, int stride, int padding) {
  return (in + 2 * padding - kernel) / stride + 1;
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (int e : shape) n *= static_cast<std::size_t>(e);
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ')';
  return os.str();
}

const char* activation_name(Activation kind) {
  switch (kind) {
    case Activation::kIdentity: return "identity";
    case Activation::kSiLU: return "silu";
    case Activation::kSigmoid: return "sigmoid";
    case Activation::kReLU: return "relu";
  }
  return "?";
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

double sigmoid(double v) {
  if (v >= 0) return 1.0 / (1.0 + std::exp(-v));
  const double e = std::exp(v);
  return e / (1.0 + e);
}

double silu(double v) { return v * sigmoid(v); }

// ===========================================================================
// BasicTensor
// ===========================================================================

template <class T>
BasicTensor<T>::BasicTensor(Shape shape, std::vector<T> data, bool requires_grad) {
  for (int e : shape) {
    if (e <= 0) throw DimensionError("tensor extents must be positive: " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw DimensionError("tensor shape " + shape_str(shape) + " holds " +
                         std::to_string(shape_numel(shape)) + " values, got " +
                         std::to_string(data.size()));
  }
  for (T v : data) {
    if (!std::isfinite(v)) throw ValidationError("tensor data must be finite");
  }
  node_ = std::make_shared<detail::Node<T>>();
  node_->shape = std::move(shape);
  node_->data = std::move(data);
  node_->requires_grad = requires_grad;
}

template <class T>
BasicTensor<T> BasicTensor<T>::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), T(0), requires_grad);
}

template <class T>
BasicTensor<T> BasicTensor<T>::full(Shape shape, T value, bool requires_grad) {
  const std::size_t n = shape_numel(shape);
  return BasicTensor(std::move(shape), std::vector<T>(n, value), requires_grad);
}

template <class T>
BasicTensor<T> BasicTensor<T>::scalar(T value, bool requires_grad) {
  return BasicTensor(Shape{1}, std::vector<T>{value}, requires_grad);
}

template <class T>
BasicTensor<T> BasicTensor<T>::from_node(std::shared_ptr<detail::Node<T>> node) {
  BasicTensor t;
  t.node_ = std::move(node);
  return t;
}

template <class T>
const Shape& BasicTensor<T>::shape() const {
  if (!node_) throw ContractError("shape() on undefined tensor");
  return node_->shape;
}

template <class T>
int BasicTensor<T>::dim(int axis) const {
  const Shape& s = shape();
  if (axis < 0) axis += static_cast<int>(s.size());
  if (axis < 0 || axis >= static_cast<int>(s.size())) {
    throw DimensionError("axis out of range for shape " + shape_str(s));
  }
  return s[static_cast<std::size_t>(axis)];
}

template <class T>
std::size_t BasicTensor<T>::numel() const {
  return node_ ? node_->data.size() : 0;
}

template <class T>
std::span<const T> BasicTensor<T>::data() const {
  if (!node_) return {};
  return node_->data;
}

template <class T>
std::span<T> BasicTensor<T>::mutable_data() {
  if (!node_) return {};
  return node_->data;
}

template <class T>
T BasicTensor<T>::item() const {
  if (numel() != 1) throw ContractError("item() requires a single-element tensor");
  return node_->data[0];
}

template <class T>
T BasicTensor<T>::at(std::initializer_list<int> index) const {
  const Shape& s = shape();
  if (index.size() != s.size()) throw DimensionError("index rank mismatch");
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (int i : index) {
    if (i < 0 || i >= s[axis]) throw DimensionError("index out of range");
    flat = flat * static_cast<std::size_t>(s[axis]) + static_cast<std::size_t>(i);
    ++axis;
  }
  return node_->data[flat];
}

template <class T>
bool BasicTensor<T>::requires_grad() const {
  return node_ && node_->requires_grad;
}

template <class T>
void BasicTensor<T>::set_requires_grad(bool value) {
  if (!node_) throw ContractError("set_requires_grad on undefined tensor");
  node_->requires_grad = value;
}

template <class T>
bool BasicTensor<T>::has_grad() const {
  return node_ && !node_->grad.empty();
}

template <class T>
std::span<const T> BasicTensor<T>::grad() const {
  if (!node_) return {};
  return node_->grad;
}

template <class T>
std::span<T> BasicTensor<T>::mutable_grad() {
  if (!node_) throw ContractError("mutable_grad on undefined tensor");
  return node_->grad_span();
}

template <class T>
void BasicTensor<T>::zero_grad() {
  if (node_) node_->grad.clear();
}

template <class T>
BasicTensor<T> BasicTensor<T>::detach() const {
  return BasicTensor(shape(), node_->data, false);
}

template <class T>
void BasicTensor<T>::backward() const {
  if (!node_) throw ContractError("backward on undefined tensor");
  if (node_->data.size() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(node_->shape));
  }

  // Iterative post-order DFS gives a topological order (parents first).
  std::vector<detail::Node<T>*> order;
  std::unordered_set<detail::Node<T>*> visited;
  std::vector<std::pair<detail::Node<T>*, std::size_t>> stack;
  stack.emplace_back(node_.get(), 0);
  visited.insert(node_.get());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      detail::Node<T>* p = n->parents[next++].get();
      if (visited.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }

  for (detail::Node<T>* n : order) {
    if (n->backward_fn) n->grad.assign(n->data.size(), T(0));
  }
  if (node_->backward_fn) {
    node_->grad[0] = T(1);
  } else {
    node_->grad_span()[0] += T(1);
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node<T>* n = *it;
    if (n->backward_fn && !n->grad.empty()) n->backward_fn(*n);
  }
}

template <class T>
BasicTensor<T> make_op_result(Shape shape, std::vector<T> data,
                              const std::vector<BasicTensor<T>>& inputs,
                              std::function<void(detail::Node<T>&)> backward) {
  auto node = std::make_shared<detail::Node<T>>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    for (const auto& in : inputs) node->parents.push_back(in.node());
    node->backward_fn = std::move(backward);
  }
  return BasicTensor<T>::from_node(std::move(node));
}

// ===========================================================================
// conv2d
// ===========================================================================

template <class T>
BasicTensor<T> conv2d(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias, int stride, int padding, int groups) {
  require_rank(x, 4, "conv2d");
  require_rank(weight, 4, "conv2d weight");
  const int b = x.dim(0), cin = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int cout = weight.dim(0), cin_g = weight.dim(1), kh = weight.dim(2), kw = weight.dim(3);
  if (groups < 1 || cin % groups != 0 || cout % groups != 0) {
    throw DimensionError("conv2d: channels " + std::to_string(cin) + "->" +
                         std::to_string(cout) + " not divisible by groups " +
                         std::to_string(groups));
  }
  if (cin_g != cin / groups) {
    throw DimensionError("conv2d: weight " + shape_str(weight.shape()) +
                         " does not match input " + shape_str(x.shape()));
  }
  if (kh != kw) throw DimensionError("conv2d: only square kernels are supported");
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw DimensionError("conv2d: bias shape " + shape_str(bias.shape()));
  }
  if (stride < 1 || padding < 0) throw GeometryError("conv2d: invalid stride/padding");
  const int k = kh;
  const int ho = h + 2 * padding - k < 0 ? 0 : pooled_extent(h, k, stride, padding);
  const int wo = w + 2 * padding - k < 0 ? 0 : pooled_extent(w, k, stride, padding);
  if (ho < 1 || wo < 1) {
    throw GeometryError("conv2d: output extent < 1 for input " + shape_str(x.shape()) +
                        " kernel " + std::to_string(k));
  }

  const int cout_g = cout / groups;
  const std::size_t in_plane = static_cast<std::size_t>(h) * w;
  const std::size_t out_plane = static_cast<std::size_t>(ho) * wo;
  std::vector<T> out(static_cast<std::size_t>(b) * cout * out_plane);
  std::vector<double> acc(out_plane);
  auto xd = x.data();
  auto wd = weight.data();
  auto bd = bias.defined() ? bias.data() : std::span<const T>{};

  // Valid ox range for a kernel column offset: 0 <= ox*s - p + kx < w.
  auto ox_range = [&](int kx, int& lo, int& hi) {
    const int off = kx - padding;
    lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
    hi = (w - 1 - off) < 0 ? 0 : std::min(wo, (w - 1 - off) / stride + 1);
  };

  for (int bi = 0; bi < b; ++bi) {
    for (int oc = 0; oc < cout; ++oc) {
      const int g = oc / cout_g;
      std::fill(acc.begin(), acc.end(), bd.empty() ? 0.0 : static_cast<double>(bd[oc]));
      for (int icg = 0; icg < cin_g; ++icg) {
        const int ic = g * cin_g + icg;
        const T* plane = xd.data() + (static_cast<std::size_t>(bi) * cin + ic) * in_plane;
        const T* wk = wd.data() + (static_cast<std::size_t>(oc) * cin_g + icg) * k * k;
        for (int ky = 0; ky < k; ++ky) {
          for (int kx = 0; kx < k; ++kx) {
            const double wv = wk[ky * k + kx];
            int lo, hi;
            ox_range(kx, lo, hi);
            for (int oy = 0; oy < ho; ++oy) {
              const int iy = oy * stride - padding + ky;
              if (iy < 0 || iy >= h) continue;
              const T* row = plane + static_cast<std::size_t>(iy) * w;
              const int off = kx - padding;
              double* arow = acc.data() + static_cast<std::size_t>(oy) * wo;
              for (int ox = lo; ox < hi; ++ox) arow[ox] += wv * row[ox * stride + off];
            }
          }
        }
      }
      T* dst = out.data() + (static_cast<std::size_t>(bi) * cout + oc) * out_plane;
      for (std::size_t i = 0; i < out_plane; ++i) dst[i] = static_cast<T>(acc[i]);
    }
  }

  std::vector<BasicTensor<T>> inputs{x, weight};
  if (bias.defined()) inputs.push_back(bias);
  const bool has_bias = bias.defined();
  return make_op_result<T>(
      Shape{b, cout, ho, wo}, std::move(out), inputs,
      [=](detail::Node<T>& node) {
        auto& xn = *node.parents[0];
        auto& wn = *node.parents[1];
        const T* gout = node.grad.data();
        const T* xv = xn.data.data();
        const T* wv = wn.data.data();
        if (has_bias && node.parents[2]->requires_grad) {
          auto gb = node.parents[2]->grad_span();
          for (int oc = 0; oc < cout; ++oc) {
            double s = 0;
            for (int bi = 0; bi < b; ++bi) {
              const T* g = gout + (static_cast<std::size_t>(bi) * cout + oc) * out_plane;
              for (std::size_t i = 0; i < out_plane; ++i) s += g[i];
            }
            gb[oc] += static_cast<T>(s);
          }
        }
        if (wn.requires_grad) {
          auto gw = wn.grad_span();
          for (int oc = 0; oc < cout; ++oc) {
            const int g = oc / cout_g;
            for (int icg = 0; icg < cin_g; ++icg) {
              const int ic = g * cin_g + icg;
              for (int ky = 0; ky < k; ++ky) {
                for (int kx = 0; kx < k; ++kx) {
                  int lo, hi;
                  const int off = kx - padding;
                  lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
                  hi = (w - 1 - off) < 0 ? 0 : std::min(wo, (w - 1 - off) / stride + 1);
                  double s = 0;
                  for (int bi = 0; bi < b; ++bi) {
                    const T* plane = xv + (static_cast<std::size_t>(bi) * cin + ic) * in_plane;
                    const T* gp = gout + (static_cast<std::size_t>(bi) * cout + oc) * out_plane;
                    for (int oy = 0; oy < ho; ++oy) {
                      const int iy = oy * stride - padding + ky;
                      if (iy < 0 || iy >= h) continue;
                      const T* row = plane + static_cast<std::size_t>(iy) * w;
                      const T* grow = gp + static_cast<std::size_t>(oy) * wo;
                      for (int ox = lo; ox < hi; ++ox) {
                        s += static_cast<double>(grow[ox]) * row[ox * stride + off];
                      }
                    }
                  }
                  gw[((static_cast<std::size_t>(oc) * cin_g + icg) * k + ky) * k + kx] +=
                      static_cast<T>(s);
                }
              }
            }
          }
        }
        if (xn.requires_grad) {
          std::vector<double> gin(xn.data.size(), 0.0);
          for (int bi = 0; bi < b; ++bi) {
            for (int oc = 0; oc < cout; ++oc) {
              const int g = oc / cout_g;
              const T* gp = gout + (static_cast<std::size_t>(bi) * cout + oc) * out_plane;
              for (int icg = 0; icg < cin_g; ++icg) {
                const int ic = g * cin_g + icg;
                double* plane = gin.data() + (static_cast<std::size_t>(bi) * cin + ic) * in_plane;
                const T* wk = wv + (static_cast<std::size_t>(oc) * cin_g + icg) * k * k;
                for (int ky = 0; ky < k; ++ky) {
                  for (int kx = 0; kx < k; ++kx) {
                    const double wgt = wk[ky * k + kx];
                    const int off = kx - padding;
                    const int lo = off >= 0 ? 0 : (-off + stride - 1) / stride;
                    const int hi = (w - 1 - off) < 0 ? 0 : std::min(wo, (w - 1 - off) / stride + 1);
                    for (int oy = 0; oy < ho; ++oy) {
                      const int iy = oy * stride - padding + ky;
                      if (iy < 0 || iy >= h) continue;
                      double* row = plane + static_cast<std::size_t>(iy) * w;
                      const T* grow = gp + static_cast<std::size_t>(oy) * wo;
                      for (int ox = lo; ox < hi; ++ox) row[ox * stride + off] += wgt * grow[ox];
                    }
                  }
                }
              }
            }
          }
          auto gx = xn.grad_span();
          for (std::size_t i = 0; i < gin.size(); ++i) gx[i] += static_cast<T>(gin[i]);
        }
      });
}

// ===========================================================================
// linear
// ===========================================================================

template <class T>
BasicTensor<T> linear(const BasicTensor<T>& x, const BasicTensor<T>& weight,
                      const BasicTensor<T>& bias) {
  require_rank(x, 2, "linear");
  require_rank(weight, 2, "linear weight");
  const int b = x.dim(0), cin = x.dim(1), cout = weight.dim(0);
  if (weight.dim(1) != cin) {
    throw DimensionError("linear: input " + shape_str(x.shape()) + " vs weight " +
                         shape_str(weight.shape()));
  }
  if (bias.defined() && (bias.rank() != 1 || bias.dim(0) != cout)) {
    throw DimensionError("linear: bias shape " + shape_str(bias.shape()));
  }
  auto xd = x.data();
  auto wd = weight.data();
  std::vector<T> out(static_cast<std::size_t>(b) * cout);
  for (int bi = 0; bi < b; ++bi) {
    for (int o = 0; o < cout; ++o) {
      double s = bias.defined() ? static_cast<double>(bias.data()[o]) : 0.0;
      for (int i = 0; i < cin; ++i) {
        s += static_cast<double>(xd[static_cast<std::size_t>(bi) * cin + i]) *
             wd[static_cast<std::size_t>(o) * cin + i];
      }
      out[static_cast<std::size_t>(bi) * cout + o] = static_cast<T>(s);
    }
  }
  std::vector<BasicTensor<T>> inputs{x, weight};
  const bool has_bias = bias.defined();
  if (has_bias) inputs.push_back(bias);
  return make_op_result<T>(Shape{b, cout}, std::move(out), inputs, [=](detail::Node<T>& node) {
    auto& xn = *node.parents[0];
    auto& wn = *node.parents[1];
    const T* g = node.grad.data();
    if (xn.requires_grad) {
      auto gx = xn.grad_span();
      for (int bi = 0; bi < b; ++bi) {
        for (int i = 0; i < cin; ++i) {
          double s = 0;
          for (int o = 0; o < cout; ++o) {
            s += static_cast<double>(g[static_cast<std::size_t>(bi) * cout + o]) *
                 wn.data[static_cast<std::size_t>(o) * cin + i];
          }
          gx[static_cast<std::size_t>(bi) * cin + i] += static_cast<T>(s);
        }
      }
    }
    if (wn.requires_grad) {
      auto gw = wn.grad_span();
      for (int o = 0; o < cout; ++o) {
        for (int i = 0; i < cin; ++i) {
          double s = 0;
          for (int bi = 0; bi < b; ++bi) {
            s += static_cast<double>(g[static_cast<std::size_t>(bi) * cout + o]) *
                 xn.data[static_cast<std::size_t>(bi) * cin + i];
          }
          gw[static_cast<std::size_t>(o) * cin + i] += static_cast<T>(s);
        }
      }
    }
    if (has_bias && node.parents[2]->requires_grad) {
      auto gb = node.parents[2]->grad_span();
      for (int o = 0; o < cout; ++o) {
        double s = 0;
        for (int bi = 0; bi < b; ++bi) s += g[static_cast<std::size_t>(bi) * cout + o];
        gb[o] += static_cast<T>(s);
      }
    }
  });
}

// ===========================================================================
// pooling, resampling, layout
// ===========================================================================

template <class T>
BasicTensor<T> maxpool2d(const BasicTensor<T>& x, int kernel, int stride, int padding) {
  require_rank(x, 4, "maxpool2d");
  if (kernel < 1 || stride < 1 || padding < 0 || padding * 2 > kernel) {
    throw GeometryError("maxpool2d: invalid kernel/stride/padding");
  }
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int ho = h + 2 * padding - kernel < 0 ? 0 : pooled_extent(h, kernel, stride, padding);
  const int wo = w + 2 * padding - kernel < 0 ? 0 : pooled_extent(w, kernel, stride, padding);
  if (ho < 1 || wo < 1) throw GeometryError("maxpool2d: output extent < 1 for " + shape_str(x.shape()));
  auto xd = x.data();
  const std::size_t planes = static_cast<std::size_t>(b) * c;
  std::vector<T> out(planes * ho * wo);
  std::vector<std::size_t> argmax(out.size());
  for (std::size_t p = 0; p < planes; ++p) {
    const T* src = xd.data() + p * h * w;
    for (int oy = 0; oy < ho; ++oy) {
      const int y0 = std::max(0, oy * stride - padding);
      const int y1 = std::min(h, oy * stride - padding + kernel);
      for (int ox = 0; ox < wo; ++ox) {
        const int x0 = std::max(0, ox * stride - padding);
        const int x1 = std::min(w, ox * stride - padding + kernel);
        T best = -std::numeric_limits<T>::infinity();
        std::size_t best_i = 0;
        for (int yy = y0; yy < y1; ++yy) {
          for (int xx = x0; xx < x1; ++xx) {
            const std::size_t i = static_cast<std::size_t>(yy) * w + xx;
            if (src[i] > best) {
              best = src[i];
              best_i = i;
            }
          }
        }
        const std::size_t o = (p * ho + oy) * wo + ox;
        out[o] = best;
        argmax[o] = p * h * w + best_i;
      }
    }
  }
  return make_op_result<T>(Shape{b, c, ho, wo}, std::move(out), {x},
                           [argmax = std::move(argmax)](detail::Node<T>& node) {
                             auto& xn = *node.parents[0];
                             if (!xn.requires_grad) return;
                             auto gx = xn.grad_span();
                             for (std::size_t o = 0; o < argmax.size(); ++o) gx[argmax[o]] += node.grad[o];
                           });
}

template <class T>
BasicTensor<T> global_avgpool(const BasicTensor<T>& x) {
  require_rank(x, 4, "global_avgpool");
  const int b = x.dim(0), c = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  auto xd = x.data();
  std::vector<T> out(static_cast<std::size_t>(b) * c);
  for (std::size_t p = 0; p < out.size(); ++p) {
    double s = 0;
    for (std::size_t i = 0; i < plane; ++i) s += xd[p * plane + i];
    out[p] = static_cast<T>(s / static_cast<double>(plane));
  }
  return make_op_result<T>(Shape{b, c, 1, 1}, std::move(out), {x}, [plane](detail::Node<T>& node) {
    auto& xn = *node.parents[0];
    if (!xn.requires_grad) return;
    auto gx = xn.grad_span();
    const double inv = 1.0 / static_cast<double>(plane);
    for (std::size_t p = 0; p < node.grad.size(); ++p) {
      const T g = static_cast<T>(node.grad[p] * inv);
      for (std::size_t i = 0; i < plane; ++i) gx[p * plane + i] += g;
    }
  });
}

template <class T>
BasicTensor<T> upsample_nearest2x(const BasicTensor<T>& x) {
  require_rank(x, 4, "upsample_nearest2x");
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::size_t planes = static_cast<std::size_t>(b) * c;
  auto xd = x.data();
  std::vector<T> out(planes * 4 * h * w);
  for (std::size_t p = 0; p < planes; ++p) {
    for (int y = 0; y < 2 * h; ++y) {
      for (int xx = 0; xx < 2 * w; ++xx) {
        out[(p * 2 * h + y) * 2 * w + xx] = xd[(p * h + y / 2) * w + xx / 2];
      }
    }
  }
  return make_op_result<T>(Shape{b, c, 2 * h, 2 * w}, std::move(out), {x},
                           [planes, h, w](detail::Node<T>& node) {
                             auto& xn = *node.parents[0];
                             if (!xn.requires_grad) return;
                             auto gx = xn.grad_span();
                             for (std::size_t p = 0; p < planes; ++p) {
                               for (int y = 0; y < 2 * h; ++y) {
                                 for (int xx = 0; xx < 2 * w; ++xx) {
                                   gx[(p * h + y / 2) * w + xx / 2] +=
                                       node.grad[(p * 2 * h + y) * 2 * w + xx];
                                 }
                               }
                             }
                           });
}

template <class T>
BasicTensor<T> concat_channels(const std::vector<BasicTensor<T>>& xs) {
  if (xs.empty()) throw DimensionError("concat_channels: no inputs");
  for (const auto& t : xs) require_rank(t, 4, "concat_channels");
  const int b = xs[0].dim(0), h = xs[0].dim(2), w = xs[0].dim(3);
  int total = 0;
  std::vector<int> offsets;
  for (const auto& t : xs) {
    if (t.dim(0) != b || t.dim(2) != h || t.dim(3) != w) {
      throw DimensionError("concat_channels: " + shape_str(t.shape()) + " vs " +
                           shape_str(xs[0].shape()));
    }
    offsets.push_back(total);
    total += t.dim(1);
  }
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<T> out(static_cast<std::size_t>(b) * total * plane);
  for (std::size_t k = 0; k < xs.size(); ++k) {
    const int c = xs[k].dim(1);
    auto src = xs[k].data();
    for (int bi = 0; bi < b; ++bi) {
      std::copy_n(src.data() + static_cast<std::size_t>(bi) * c * plane, c * plane,
                  out.data() + (static_cast<std::size_t>(bi) * total + offsets[k]) * plane);
    }
  }
  return make_op_result<T>(Shape{b, total, h, w}, std::move(out), xs,
                           [=](detail::Node<T>& node) {
                             for (std::size_t k = 0; k < node.parents.size(); ++k) {
                               auto& pn = *node.parents[k];
                               if (!pn.requires_grad) continue;
                               const int c = pn.shape[1];
                               auto g = pn.grad_span();
                               for (int bi = 0; bi < b; ++bi) {
                                 const T* src = node.grad.data() +
                                                (static_cast<std::size_t>(bi) * total + offsets[k]) * plane;
                                 T* dst = g.data() + static_cast<std::size_t>(bi) * c * plane;
                                 for (std::size_t i = 0; i < c * plane; ++i) dst[i] += src[i];
                               }
                             }
                           });
}

template <class T>
BasicTensor<T> stride2_slice(const BasicTensor<T>& x, int row_offset, int col_offset) {
  require_rank(x, 4, "stride2_slice");
  if ((row_offset != 0 && row_offset != 1) || (col_offset != 0 && col_offset != 1)) {
    throw ContractError("stride2_slice: offsets must be 0 or 1");
  }
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (h < 2 || w < 2) throw GeometryError("stride2_slice: spatial extents must be >= 2, got " + shape_str(x.shape()));
  const int ho = (h - row_offset + 1) / 2;
  const int wo = (w - col_offset + 1) / 2;
  const std::size_t planes = static_cast<std::size_t>(b) * c;
  std::vector<std::size_t> src_index(planes * ho * wo);
  std::vector<T> out(src_index.size());
  auto xd = x.data();
  for (std::size_t p = 0; p < planes; ++p) {
    for (int y = 0; y < ho; ++y) {
      for (int xx = 0; xx < wo; ++xx) {
        const std::size_t s = (p * h + (2 * y + row_offset)) * w + (2 * xx + col_offset);
        const std::size_t o = (p * ho + y) * wo + xx;
        src_index[o] = s;
        out[o] = xd[s];
      }
    }
  }
  return make_op_result<T>(Shape{b, c, ho, wo}, std::move(out), {x},
                           [src_index = std::move(src_index)](detail::Node<T>& node) {
                             auto& xn = *node.parents[0];
                             if (!xn.requires_grad) return;
                             auto gx = xn.grad_span();
                             for (std::size_t o = 0; o < src_index.size(); ++o) gx[src_index[o]] += node.grad[o];
                           });
}

// ===========================================================================
// elementwise
// ===========================================================================

template <class T>
BasicTensor<T> activation(Activation kind, const BasicTensor<T>& x) {
  if (!x.defined()) throw ContractError("activation: undefined tensor");
  if (kind == Activation::kIdentity) return x;
  auto xd = x.data();
  std::vector<T> out(xd.size());
  for (std::size_t i = 0; i < xd.size(); ++i) {
    const double v = xd[i];
    switch (kind) {
      case Activation::kSiLU: out[i] = static_cast<T>(silu(v)); break;
      case Activation::kSigmoid: out[i] = static_cast<T>(sigmoid(v)); break;
      case Activation::kReLU: out[i] = v > 0 ? xd[i] : T(0); break;
      case Activation::kIdentity: break;
    }
  }
  return make_op_result<T>(x.shape(), std::move(out), {x}, [kind](detail::Node<T>& node) {
    auto& xn = *node.parents[0];
    if (!xn.requires_grad) return;
    auto gx = xn.grad_span();
    for (std::size_t i = 0; i < gx.size(); ++i) {
      const double v = xn.data[i];
      double d = 0;
      switch (kind) {
        case Activation::kSiLU: {
          const double s = sigmoid(v);
          d = s * (1.0 + v * (1.0 - s));
          break;
        }
        case Activation::kSigmoid: {
          const double s = sigmoid(v);
          d = s * (1.0 - s);
          break;
        }
        case Activation::kReLU: d = v > 0 ? 1.0 : 0.0; break;
        case Activation::kIdentity: d = 1.0; break;
      }
      gx[i] += static_cast<T>(d * node.grad[i]);
    }
  });
}

template <class T>
BasicTensor<T> add(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  auto ad = a.data();
  auto bd = b.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] + bd[i];
  return make_op_result<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& node) {
    for (auto& p : node.parents) {
      if (!p->requires_grad) continue;
      auto g = p->grad_span();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i];
    }
  });
}

template <class T>
BasicTensor<T> mul(const BasicTensor<T>& a, const BasicTensor<T>& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
  auto ad = a.data();
  auto bd = b.data();
  std::vector<T> out(ad.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = ad[i] * bd[i];
  return make_op_result<T>(a.shape(), std::move(out), {a, b}, [](detail::Node<T>& node) {
    auto& an = *node.parents[0];
    auto& bn = *node.parents[1];
    if (an.requires_grad) {
      auto g = an.grad_span();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i] * bn.data[i];
    }
    if (bn.requires_grad) {
      auto g = bn.grad_span();
      for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i] * an.data[i];
    }
  });
}

template <class T>
BasicTensor<T> scale_channels(const BasicTensor<T>& x, const BasicTensor<T>& scale) {
  require_rank(x, 4, "scale_channels");
  const int b = x.dim(0), c = x.dim(1);
  if (static_cast<int>(scale.numel()) != b * c || scale.dim(0) != b || scale.dim(1) != c) {
    throw DimensionError("scale_channels: scale " + shape_str(scale.shape()) + " for input " +
                         shape_str(x.shape()));
  }
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  auto xd = x.data();
  auto sd = scale.data();
  std::vector<T> out(xd.size());
  for (std::size_t p = 0; p < sd.size(); ++p) {
    for (std::size_t i = 0; i < plane; ++i) out[p * plane + i] = xd[p * plane + i] * sd[p];
  }
  return make_op_result<T>(x.shape(), std::move(out), {x, scale}, [plane](detail::Node<T>& node) {
    auto& xn = *node.parents[0];
    auto& sn = *node.parents[1];
    const std::size_t planes = sn.data.size();
    if (xn.requires_grad) {
      auto g = xn.grad_span();
      for (std::size_t p = 0; p < planes; ++p) {
        for (std::size_t i = 0; i < plane; ++i) g[p * plane + i] += node.grad[p * plane + i] * sn.data[p];
      }
    }
    if (sn.requires_grad) {
      auto g = sn.grad_span();
      for (std::size_t p = 0; p < planes; ++p) {
        double s = 0;
        for (std::size_t i = 0; i < plane; ++i) {
          s += static_cast<double>(node.grad[p * plane + i]) * xn.data[p * plane + i];
        }
        g[p] += static_cast<T>(s);
      }
    }
  });
}

template <class T>
BasicTensor<T> sum(const BasicTensor<T>& x) {
  double s = 0;
  for (T v : x.data()) s += v;
  return make_op_result<T>(Shape{1}, std::vector<T>{static_cast<T>(s)}, {x}, [](detail::Node<T>& node) {
    auto& xn = *node.parents[0];
    if (!xn.requires_grad) return;
    auto g = xn.grad_span();
    for (auto& v : g) v += node.grad[0];
  });
}

template <class T>
BasicTensor<T> dot_const(const BasicTensor<T>& x, std::span<const T> weights) {
  if (weights.size() != x.numel()) throw DimensionError("dot_const: weight count mismatch");
  double s = 0;
  auto xd = x.data();
  for (std::size_t i = 0; i < xd.size(); ++i) s += static_cast<double>(xd[i]) * weights[i];
  std::vector<T> w(weights.begin(), weights.end());
  return make_op_result<T>(Shape{1}, std::vector<T>{static_cast<T>(s)}, {x},
                           [w = std::move(w)](detail::Node<T>& node) {
                             auto& xn = *node.parents[0];
                             if (!xn.requires_grad) return;
                             auto g = xn.grad_span();
                             for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[0] * w[i];
                           });
}

template <class T>
BasicTensor<T> reshape(const BasicTensor<T>& x, Shape shape) {
  if (shape_numel(shape) != x.numel()) {
    throw DimensionError("reshape: " + shape_str(x.shape()) + " -> " + shape_str(shape));
  }
  std::vector<T> out(x.data().begin(), x.data().end());
  return make_op_result<T>(std::move(shape), std::move(out), {x}, [](detail::Node<T>& node) {
    auto& xn = *node.parents[0];
    if (!xn.requires_grad) return;
    auto g = xn.grad_span();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += node.grad[i];
  });
}

template <class T>
BasicTensor<T> anchor_layout(const BasicTensor<T>& x, int anchors) {
  require_rank(x, 4, "anchor_layout");
  const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (anchors < 1 || c % anchors != 0) {
    throw DimensionError("anchor_layout: " + std::to_string(c) + " channels not divisible by " +
                         std::to_string(anchors) + " anchors");
  }
  const int k = c / anchors;
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  // out[b][a][y][x][j] = in[b][a*k + j][y][x]
  std::vector<std::size_t> src_index(x.numel());
  std::vector<T> out(x.numel());
  auto xd = x.data();
  std::size_t o = 0;
  for (int bi = 0; bi < b; ++bi) {
    for (int a = 0; a < anchors; ++a) {
      for (std::size_t pos = 0; pos < plane; ++pos) {
        for (int j = 0; j < k; ++j) {
          const std::size_t s = (static_cast<std::size_t>(bi) * c + a * k + j) * plane + pos;
          src_index[o] = s;
          out[o++] = xd[s];
        }
      }
    }
  }
  return make_op_result<T>(Shape{b, anchors, h, w, k}, std::move(out), {x},
                           [src_index = std::move(src_index)](detail::Node<T>& node) {
                             auto& xn = *node.parents[0];
                             if (!xn.requires_grad) return;
                             auto g = xn.grad_span();
                             for (std::size_t i = 0; i < src_index.size(); ++i) g[src_index[i]] += node.grad[i];
                           });
}

// ===========================================================================
// explicit instantiations
// ===========================================================================

#define MFNET_INSTANTIATE_TENSOR(T)                                                           \
  template class BasicTensor<T>;                                                              \
  template BasicTensor<T> make_op_result<T>(Shape, std::vector<T>,                            \
                                            const std::vector<BasicTensor<T>>&,               \
                                            std::function<void(detail::Node<T>&)>);           \
  template BasicTensor<T> conv2d<T>(const BasicTensor<T>&, const BasicTensor<T>&,             \
                                    const BasicTensor<T>&, int, int, int);                    \
  template BasicTensor<T> linear<T>(const BasicTensor<T>&, const BasicTensor<T>&,             \
                                    const BasicTensor<T>&);                                   \
  template BasicTensor<T> maxpool2d<T>(const BasicTensor<T>&, int, int, int);                 \
  template BasicTensor<T> global_avgpool<T>(const BasicTensor<T>&);                           \
  template BasicTensor<T> upsample_nearest2x<T>(const BasicTensor<T>&);                       \
  template BasicTensor<T> concat_channels<T>(const std::vector<BasicTensor<T>>&);             \
  template BasicTensor<T> stride2_slice<T>(const BasicTensor<T>&, int, int);                  \
  template BasicTensor<T> activation<T>(Activation, const BasicTensor<T>&);                   \
  template BasicTensor<T> add<T>(const BasicTensor<T>&, const BasicTensor<T>&);               \
  template BasicTensor<T> mul<T>(const BasicTensor<T>&, const BasicTensor<T>&);               \
  template BasicTensor<T> scale_channels<T>(const BasicTensor<T>&, const BasicTensor<T>&);    \
  template BasicTensor<T> sum<T>(const BasicTensor<T>&);                                      \
  template BasicTensor<T> dot_const<T>(const BasicTensor<T>&, std::span<const T>);            \
  template BasicTensor<T> reshape<T>(const BasicTensor<T>&, Shape);                           \
  template BasicTensor<T> anchor_layout<T>(const BasicTensor<T>&, int);

MFNET_INSTANTIATE_TENSOR(float)
MFNET_INSTANTIATE_TENSOR(double)

#undef MFNET_INSTANTIATE_TENSOR

}  // namespace mfnet
