#include "mfnet/blocks.hpp"

#include <algorithm>
#include <cmath>

#include "mfnet/error.hpp"

namespace mfnet {

namespace {

template <class T>
void append(ParamRefs<T>& out, ParamRefs<T> more) {
  out.insert(out.end(), more.begin(), more.end());
}

}  // namespace

template <class T>
bool Param<T>::is_bias() const {
  constexpr std::string_view suffix = "bias";
  return name.size() >= suffix.size() &&
         std::string_view(name).substr(name.size() - suffix.size()) == suffix;
}

float Initializer::uniform(float lo, float hi) {
  // 24 random mantissa bits; independent of the standard library's
  // distribution implementations.
  const double u = static_cast<double>(rng_() >> 40) * (1.0 / 16777216.0);
  return static_cast<float>(lo + (hi - lo) * u);
}

std::vector<float> Initializer::uniform_fan_in(std::size_t count, int fan_in) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(std::max(1, fan_in)));
  std::vector<float> v(count);
  for (auto& x : v) x = uniform(-bound, bound);
  return v;
}

template <class T>
Param<T> make_param(std::string name, Shape shape, std::vector<float> values) {
  std::vector<T> data(values.begin(), values.end());
  return Param<T>{std::move(name), BasicTensor<T>(std::move(shape), std::move(data), true)};
}

int scaled_depth(int n_base, double depth_multiple) {
  return std::max(1, static_cast<int>(std::lround(n_base * depth_multiple)));
}

// ===========================================================================
// ConvBlock
// ===========================================================================

template <class T>
ConvBlock<T>::ConvBlock(const std::string& name, int c1_, int c2_, int k_, int s_, int p_,
                        int g_, Activation act_, Initializer& init)
    : c1(c1_), c2(c2_), k(k_), s(s_), p(p_ < 0 ? k_ / 2 : p_), g(g_), act(act_) {
  if (c1 < 1 || c2 < 1 || k < 1 || s < 1 || g < 1 || c1 % g || c2 % g) {
    throw ConfigError("conv block " + name + ": invalid channels/kernel/groups");
  }
  const int fan_in = (c1 / g) * k * k;
  const std::size_t wn = static_cast<std::size_t>(c2) * (c1 / g) * k * k;
  weight = make_param<T>(name + ".weight", Shape{c2, c1 / g, k, k}, init.uniform_fan_in(wn, fan_in));
  bias = make_param<T>(name + ".bias", Shape{c2}, init.uniform_fan_in(static_cast<std::size_t>(c2), fan_in));
}

template <class T>
BasicTensor<T> ConvBlock<T>::forward(const BasicTensor<T>& x) const {
  return activation(act, conv2d(x, weight.value, bias.value, s, p, g));
}

template <class T>
ParamRefs<T> ConvBlock<T>::params() {
  return {&weight, &bias};
}

template <class T>
double ConvBlock<T>::macs(int h, int w) const {
  return static_cast<double>(k) * k * (c1 / g) * c2 * out_extent(h) * out_extent(w);
}

// ===========================================================================
// Focus
// ===========================================================================

template <class T>
FocusBlock<T>::FocusBlock(const std::string& name, int c1_, int c2_, Initializer& init, int k,
                          int s, int p, int g, Activation act)
    : c1(c1_), c2(c2_), conv(name + ".conv", 4 * c1_, c2_, k, s, p, g, act, init) {}

template <class T>
BasicTensor<T> FocusBlock<T>::rearrange(const BasicTensor<T>& x) {
  if (x.rank() != 4) throw DimensionError("focus: expected (b,c,h,w), got " + shape_str(x.shape()));
  if (x.dim(2) % 2 || x.dim(3) % 2) {
    throw GeometryError("focus: spatial extents must be even, got " + shape_str(x.shape()));
  }
  return concat_channels<T>({stride2_slice(x, 0, 0), stride2_slice(x, 1, 0),
                             stride2_slice(x, 0, 1), stride2_slice(x, 1, 1)});
}

template <class T>
BasicTensor<T> FocusBlock<T>::forward(const BasicTensor<T>& x) const {
  if (x.rank() == 4 && x.dim(1) != c1) {
    throw DimensionError("focus: expected " + std::to_string(c1) + " channels, got " +
                         shape_str(x.shape()));
  }
  return conv.forward(rearrange(x));
}

// ===========================================================================
// Feature attention
// ===========================================================================

template <class T>
FABlock<T>::FABlock(const std::string& name, int c_, int ratio_, Initializer& init)
    : c(c_), ratio(ratio_), hidden(std::max(1, c_ / std::max(1, ratio_))) {
  if (c < 1 || ratio < 1) throw ConfigError("fa block " + name + ": invalid channels/ratio");
  l1_weight = make_param<T>(name + ".l1.weight", Shape{hidden, c},
                            init.uniform_fan_in(static_cast<std::size_t>(hidden) * c, c));
  l1_bias = make_param<T>(name + ".l1.bias", Shape{hidden}, init.uniform_fan_in(hidden, c));
  l2_weight = make_param<T>(name + ".l2.weight", Shape{c, hidden},
                            init.uniform_fan_in(static_cast<std::size_t>(c) * hidden, hidden));
  l2_bias = make_param<T>(name + ".l2.bias", Shape{c}, init.uniform_fan_in(c, hidden));
}

template <class T>
BasicTensor<T> FABlock<T>::attention(const BasicTensor<T>& x) const {
  if (x.rank() != 4 || x.dim(1) != c) {
    throw DimensionError("fa: expected " + std::to_string(c) + " channels, got " +
                         shape_str(x.shape()));
  }
  const int b = x.dim(0);
  auto y = reshape(global_avgpool(x), Shape{b, c});
  y = activation(Activation::kReLU, linear(y, l1_weight.value, l1_bias.value));
  return activation(Activation::kSigmoid, linear(y, l2_weight.value, l2_bias.value));
}

template <class T>
BasicTensor<T> FABlock<T>::forward(const BasicTensor<T>& x) const {
  return scale_channels(x, attention(x));
}

template <class T>
ParamRefs<T> FABlock<T>::params() {
  return {&l1_weight, &l1_bias, &l2_weight, &l2_bias};
}

template <class T>
std::size_t FABlock<T>::param_count() const {
  return static_cast<std::size_t>(c) * hidden + hidden + static_cast<std::size_t>(hidden) * c + c;
}

// ===========================================================================
// Bottleneck, CSP, C3
// ===========================================================================

template <class T>
Bottleneck<T>::Bottleneck(const std::string& name, int c1, int c2, bool shortcut, Initializer& init)
    : cv1(name + ".cv1", c1, c2, 1, 1, -1, 1, Activation::kSiLU, init),
      cv2(name + ".cv2", c2, c2, 3, 1, -1, 1, Activation::kSiLU, init),
      add(shortcut && c1 == c2) {}

template <class T>
BasicTensor<T> Bottleneck<T>::forward(const BasicTensor<T>& x) const {
  auto y = cv2.forward(cv1.forward(x));
  return add ? mfnet::add(x, y) : y;
}

template <class T>
ParamRefs<T> Bottleneck<T>::params() {
  ParamRefs<T> out = cv1.params();
  append(out, cv2.params());
  return out;
}

template <class T>
CSPBlock<T>::CSPBlock(const std::string& name, int c1_, int c2_, int n, bool shortcut, Initializer& init)
    : c1(c1_), c2(c2_), c_(std::max(1, c2_ / 2)),
      cv1(name + ".cv1", c1_, c_, 1, 1, -1, 1, Activation::kSiLU, init),
      cv2(name + ".cv2", c1_, c_, 1, 1, -1, 1, Activation::kIdentity, init),
      cv3(name + ".cv3", c_, c_, 1, 1, -1, 1, Activation::kIdentity, init),
      cv4(name + ".cv4", 2 * c_, c2_, 1, 1, -1, 1, Activation::kSiLU, init) {
  for (int i = 0; i < n; ++i) m.emplace_back(name + ".m." + std::to_string(i), c_, c_, shortcut, init);
}

template <class T>
BasicTensor<T> CSPBlock<T>::forward(const BasicTensor<T>& x) const {
  auto y = cv1.forward(x);
  for (const auto& b : m) y = b.forward(y);
  auto merged = concat_channels<T>({cv3.forward(y), cv2.forward(x)});
  return cv4.forward(activation(Activation::kSiLU, merged));
}

template <class T>
ParamRefs<T> CSPBlock<T>::params() {
  ParamRefs<T> out = cv1.params();
  append(out, cv2.params());
  append(out, cv3.params());
  append(out, cv4.params());
  for (auto& b : m) append(out, b.params());
  return out;
}

template <class T>
double CSPBlock<T>::macs(int h, int w) const {
  double total = cv1.macs(h, w) + cv2.macs(h, w) + cv3.macs(h, w) + cv4.macs(h, w);
  for (const auto& b : m) total += b.macs(h, w);
  return total;
}

template <class T>
C3Block<T>::C3Block(const std::string& name, int c1_, int c2_, int n, bool shortcut, Initializer& init)
    : c1(c1_), c2(c2_), c_(std::max(1, c2_ / 2)),
      cv1(name + ".cv1", c1_, c_, 1, 1, -1, 1, Activation::kSiLU, init),
      cv2(name + ".cv2", c1_, c_, 1, 1, -1, 1, Activation::kSiLU, init),
      cv3(name + ".cv3", 2 * c_, c2_, 1, 1, -1, 1, Activation::kSiLU, init) {
  for (int i = 0; i < n; ++i) m.emplace_back(name + ".m." + std::to_string(i), c_, c_, shortcut, init);
}

template <class T>
BasicTensor<T> C3Block<T>::forward(const BasicTensor<T>& x) const {
  auto y = cv1.forward(x);
  for (const auto& b : m) y = b.forward(y);
  return cv3.forward(concat_channels<T>({y, cv2.forward(x)}));
}

template <class T>
ParamRefs<T> C3Block<T>::params() {
  ParamRefs<T> out = cv1.params();
  append(out, cv2.params());
  append(out, cv3.params());
  for (auto& b : m) append(out, b.params());
  return out;
}

template <class T>
double C3Block<T>::macs(int h, int w) const {
  double total = cv1.macs(h, w) + cv2.macs(h, w) + cv3.macs(h, w);
  for (const auto& b : m) total += b.macs(h, w);
  return total;
}

// ===========================================================================
// SPP / SPPF
// ===========================================================================

template <class T>
SPPBlock<T>::SPPBlock(const std::string& name, int c1_, int c2_, Initializer& init)
    : c1(c1_), c2(c2_), c_(std::max(1, c1_ / 2)),
      cv1(name + ".cv1", c1_, c_, 1, 1, -1, 1, Activation::kSiLU, init),
      cv2(name + ".cv2", 4 * c_, c2_, 1, 1, -1, 1, Activation::kSiLU, init) {}

template <class T>
BasicTensor<T> SPPBlock<T>::pooled(const BasicTensor<T>& x) const {
  std::vector<BasicTensor<T>> parts{x};
  for (int k : kernels) parts.push_back(maxpool2d(x, k, 1, k / 2));
  return concat_channels(parts);
}

template <class T>
BasicTensor<T> SPPBlock<T>::forward(const BasicTensor<T>& x) const {
  return cv2.forward(pooled(cv1.forward(x)));
}

template <class T>
ParamRefs<T> SPPBlock<T>::params() {
  ParamRefs<T> out = cv1.params();
  append(out, cv2.params());
  return out;
}

template <class T>
SPPFBlock<T>::SPPFBlock(const std::string& name, int c1_, int c2_, Initializer& init)
    : c1(c1_), c2(c2_), c_(std::max(1, c1_ / 2)),
      cv1(name + ".cv1", c1_, c_, 1, 1, -1, 1, Activation::kSiLU, init),
      cv2(name + ".cv2", 4 * c_, c2_, 1, 1, -1, 1, Activation::kSiLU, init) {}

template <class T>
BasicTensor<T> SPPFBlock<T>::pooled(const BasicTensor<T>& x) const {
  auto p1 = maxpool2d(x, kernel, 1, kernel / 2);
  auto p2 = maxpool2d(p1, kernel, 1, kernel / 2);
  auto p3 = maxpool2d(p2, kernel, 1, kernel / 2);
  return concat_channels<T>({x, p1, p2, p3});
}

template <class T>
BasicTensor<T> SPPFBlock<T>::forward(const BasicTensor<T>& x) const {
  return cv2.forward(pooled(cv1.forward(x)));
}

template <class T>
ParamRefs<T> SPPFBlock<T>::params() {
  ParamRefs<T> out = cv1.params();
  append(out, cv2.params());
  return out;
}

// ===========================================================================
// DetectHead
// ===========================================================================

template <class T>
DetectHead<T>::DetectHead(const std::string& name, std::array<int, 3> in_channels, int nc,
                          int na, Initializer& init)
    : num_classes(nc), anchors(na) {
  if (nc < 1 || na < 1) throw ConfigError("detect head: need >= 1 class and anchor");
  for (int l = 0; l < 3; ++l) {
    convs[l] = ConvBlock<T>(name + ".m." + std::to_string(l), in_channels[l], na * (5 + nc), 1,
                            1, 0, 1, Activation::kIdentity, init);
  }
}

template <class T>
std::array<BasicTensor<T>, 3> DetectHead<T>::forward(
    const std::array<BasicTensor<T>, 3>& features) const {
  std::array<BasicTensor<T>, 3> out;
  for (int l = 0; l < 3; ++l) {
    if (features[l].rank() != 4 || features[l].dim(1) != convs[l].c1) {
      throw DimensionError("detect head level " + std::to_string(l) + ": expected " +
                           std::to_string(convs[l].c1) + " channels, got " +
                           shape_str(features[l].shape()));
    }
    out[l] = anchor_layout(convs[l].forward(features[l]), anchors);
  }
  return out;
}

template <class T>
ParamRefs<T> DetectHead<T>::params() {
  ParamRefs<T> out;
  for (auto& c : convs) append(out, c.params());
  return out;
}

#define MFNET_INSTANTIATE_BLOCKS(T)                                                 \
  template struct Param<T>;                                                         \
  template Param<T> make_param<T>(std::string, Shape, std::vector<float>);          \
  template struct ConvBlock<T>;                                                     \
  template struct FocusBlock<T>;                                                    \
  template struct FABlock<T>;                                                       \
  template struct Bottleneck<T>;                                                    \
  template struct CSPBlock<T>;                                                      \
  template struct C3Block<T>;                                                       \
  template struct SPPBlock<T>;                                                      \
  template struct SPPFBlock<T>;                                                     \
  template struct DetectHead<T>;

MFNET_INSTANTIATE_BLOCKS(float)
MFNET_INSTANTIATE_BLOCKS(double)

#undef MFNET_INSTANTIATE_BLOCKS

}  // namespace mfnet
