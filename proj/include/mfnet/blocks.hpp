#pragma once

// Building blocks of the MFNet / MFNet-FA detectors. Every block is plain
// data (named parameters plus hyperparameters) with a pure forward function.
// There is no batch normalization: convolution blocks are conv + bias + SiLU.

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "mfnet/tensor.hpp"

namespace mfnet {

template <class T>
struct Param {
  std::string name;
  BasicTensor<T> value;

  bool is_bias() const;
};

template <class T>
using ParamRefs = std::vector<Param<T>*>;

// Deterministic parameter initializer. Values are drawn as float so a float
// and a double network built from the same seed hold identical parameters.
class Initializer {
 public:
  explicit Initializer(std::uint64_t seed) : rng_(seed) {}

  // U(-1/sqrt(fan_in), 1/sqrt(fan_in))
  std::vector<float> uniform_fan_in(std::size_t count, int fan_in);
  float uniform(float lo, float hi);

 private:
  std::mt19937_64 rng_;
};

template <class T>
Param<T> make_param(std::string name, Shape shape, std::vector<float> values);

// conv2d + bias + activation. `padding < 0` selects k/2 ("same" for odd k).
template <class T>
struct ConvBlock {
  int c1 = 0, c2 = 0, k = 1, s = 1, p = 0, g = 1;
  Activation act = Activation::kSiLU;
  Param<T> weight;
  Param<T> bias;

  ConvBlock() = default;
  ConvBlock(const std::string& name, int c1, int c2, int k, int s, int p, int g,
            Activation act, Initializer& init);

  BasicTensor<T> forward(const BasicTensor<T>& x) const;
  ParamRefs<T> params();
  double macs(int h, int w) const;
  int out_extent(int in) const { return (in + 2 * p - k) / s + 1; }
};

// Space-to-depth rearrangement of four stride-2 slices followed by a conv.
template <class T>
struct FocusBlock {
  int c1 = 0, c2 = 0;
  ConvBlock<T> conv;

  FocusBlock() = default;
  FocusBlock(const std::string& name, int c1, int c2, Initializer& init, int k = 3,
             int s = 1, int p = -1, int g = 1, Activation act = Activation::kSiLU);

  // (b,c1,h,w) -> (b,4c1,h/2,w/2) in slice order (0,0), (1,0), (0,1), (1,1)
  // where each pair is (row offset, col offset).
  static BasicTensor<T> rearrange(const BasicTensor<T>& x);

  BasicTensor<T> forward(const BasicTensor<T>& x) const;
  ParamRefs<T> params() { return conv.params(); }
  double macs(int h, int w) const { return conv.macs(h / 2, w / 2); }
};

// Channel attention: avgpool -> linear -> ReLU -> linear -> sigmoid -> scale.
template <class T>
struct FABlock {
  int c = 0;
  int ratio = 16;
  int hidden = 1;  // max(1, c / ratio)
  Param<T> l1_weight, l1_bias, l2_weight, l2_bias;

  FABlock() = default;
  FABlock(const std::string& name, int c, int ratio, Initializer& init);

  // Per-channel attention weights, shape (b, c).
  BasicTensor<T> attention(const BasicTensor<T>& x) const;
  BasicTensor<T> forward(const BasicTensor<T>& x) const;
  ParamRefs<T> params();
  double macs() const { return static_cast<double>(c) * hidden * 2; }
  std::size_t param_count() const;
};

template <class T>
struct Bottleneck {
  ConvBlock<T> cv1, cv2;
  bool add = false;

  Bottleneck() = default;
  Bottleneck(const std::string& name, int c1, int c2, bool shortcut, Initializer& init);

  BasicTensor<T> forward(const BasicTensor<T>& x) const;
  ParamRefs<T> params();
  double macs(int h, int w) const { return cv1.macs(h, w) + cv2.macs(h, w); }
};

// Number of repeated bottlenecks for a base depth and depth multiple.
int scaled_depth(int n_base, double depth_multiple);

// BottleneckCSP: two paths (bottleneck stack, plain 1x1) merged by a 1x1 conv.
template <class T>
struct CSPBlock {
  int c1 = 0, c2 = 0, c_ = 0;
  ConvBlock<T> cv1, cv2, cv3, cv4;
  std::vector<Bottleneck<T>> m;

  CSPBlock() = default;
  CSPBlock(const std::string& name, int c1, int c2, int n, bool shortcut, Initializer& init);

  BasicTensor<T> forward(const BasicTensor<T>& x) const;
  ParamRefs<T> params();
  double macs(int h, int w) const;
};

// C3: CSP variant with three convolutions.
template <class T>
struct C3Block {
  int c1 = 0, c2 = 0, c_ = 0;
  ConvBlock<T> cv1, cv2, cv3;
  std::vector<Bottleneck<T>> m;

  C3Block() = default;
  C3Block(const std::string& name, int c1, int c2, int n, bool shortcut, Initializer& init);

  BasicTensor<T> forward(const BasicTensor<T>& x) const;
  ParamRefs<T> params();
  double macs(int h, int w) const;
};

// concat(x, mp5(x), mp9(x), mp13(x)) between two 1x1 convs.
template <class T>
struct SPPBlock {
  int c1 = 0, c2 = 0, c_ = 0;
  std::array<int, 3> kernels{5, 9, 13};
  ConvBlock<T> cv1, cv2;

  SPPBlock() = default;
  SPPBlock(const std::string& name, int c1, int c2, Initializer& init);

  // The pre-conv concatenation (4 * c_ channels), exposed for tests.
  BasicTensor<T> pooled(const BasicTensor<T>& x) const;
  BasicTensor<T> forward(const BasicTensor<T>& x) const;
  ParamRefs<T> params();
  double macs(int h, int w) const { return cv1.macs(h, w) + cv2.macs(h, w); }
};

// Same output as SPP via three chained 5x5 pools.
template <class T>
struct SPPFBlock {
  int c1 = 0, c2 = 0, c_ = 0;
  int kernel = 5;
  ConvBlock<T> cv1, cv2;

  SPPFBlock() = default;
  SPPFBlock(const std::string& name, int c1, int c2, Initializer& init);

  BasicTensor<T> pooled(const BasicTensor<T>& x) const;
  BasicTensor<T> forward(const BasicTensor<T>& x) const;
  ParamRefs<T> params();
  double macs(int h, int w) const { return cv1.macs(h, w) + cv2.macs(h, w); }
};

// Per-level 1x1 conv to anchors*(5+nc) channels, laid out as
// [b, anchors, h, w, 5+nc] = (t_x, t_y, t_w, t_h, obj, class logits...).
template <class T>
struct DetectHead {
  int num_classes = 0;
  int anchors = 0;
  std::array<ConvBlock<T>, 3> convs;

  DetectHead() = default;
  DetectHead(const std::string& name, std::array<int, 3> in_channels, int num_classes,
             int anchors, Initializer& init);

  int outputs_per_anchor() const { return 5 + num_classes; }

  std::array<BasicTensor<T>, 3> forward(const std::array<BasicTensor<T>, 3>& features) const;
  ParamRefs<T> params();
};

}  // namespace mfnet
