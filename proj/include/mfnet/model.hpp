#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "json.hpp"
#include "mfnet/blocks.hpp"

namespace mfnet {

enum class Family { kMFNet, kMFNetFA };
enum class SizePreset { kS, kM, kL, kToy };

std::string to_string(Family f);
std::string to_string(SizePreset s);
Family parse_family(const std::string& text);
SizePreset parse_size(const std::string& text);

struct AnchorSize {
  double w = 0;  // pixels
  double h = 0;
  bool operator==(const AnchorSize&) const = default;
};

struct ModelSpec {
  Family family = Family::kMFNet;
  SizePreset size = SizePreset::kS;
  int num_classes = 2;
  double depth_multiple = 0.33;
  double width_multiple = 0.50;
  // Five stage widths before the width multiple: focus, P2, P3, P4, P5.
  std::vector<int> base_channel_schedule;
  std::array<std::vector<AnchorSize>, 3> anchors;
  std::array<int, 3> strides{8, 16, 32};
  int img_size = 320;
  int fa_ratio = 16;

  // Throws ConfigError.
  void validate() const;
  int anchors_per_level() const { return static_cast<int>(anchors[0].size()); }
  int channels(int stage) const;
  bool operator==(const ModelSpec&) const = default;
};

// Preset for a family/size. `img_size <= 0` selects the preset default
// (320 for S/M/L, 64 for toy).
ModelSpec make_spec(Family family, SizePreset size, int num_classes = 2, int img_size = 0);

// Default anchor set rescaled from a 640-pixel reference to `img_size`.
std::array<std::vector<AnchorSize>, 3> default_anchors(int img_size);

nlohmann::json spec_to_json(const ModelSpec& spec);
ModelSpec spec_from_json(const nlohmann::json& j);

// Layer graph ---------------------------------------------------------------

struct UpsampleLayer {};
struct ConcatLayer {};

template <class T>
using LayerModule = std::variant<FocusBlock<T>, ConvBlock<T>, CSPBlock<T>, C3Block<T>,
                                 SPPBlock<T>, SPPFBlock<T>, UpsampleLayer, ConcatLayer,
                                 DetectHead<T>>;

template <class T>
struct Layer {
  std::string name;
  std::vector<int> from;  // -1 = previous layer
  LayerModule<T> module;
  std::optional<FABlock<T>> attention;  // applied to the module output
  int out_channels = 0;
  int stride = 1;  // cumulative downsampling of the output
};

// Instantiated layer list. Layer indices follow the reference topology:
// backbone 0-9, neck 10-23, detection taps at 17, 20 and 23, head at 24.
template <class T>
class Network {
 public:
  static constexpr std::array<int, 3> kTaps{17, 20, 23};

  explicit Network(ModelSpec spec, std::uint64_t seed = 0);
  Network(const Network&) = delete;
  Network& operator=(const Network&) = delete;
  Network(Network&&) noexcept = default;
  Network& operator=(Network&&) noexcept = default;

  const ModelSpec& spec() const { return spec_; }
  const std::vector<Layer<T>>& layers() const { return layers_; }
  std::vector<Layer<T>>& layers() { return layers_; }

  // images [b,3,s,s] with s == spec.img_size -> raw maps [b,B,s/8,s/8,5+nc], ...
  std::array<BasicTensor<T>, 3> forward(const BasicTensor<T>& images) const;

  ParamRefs<T> params();
  Param<T>* find_param(const std::string& name);
  int fa_block_count() const;
  DetectHead<T>& head();

  // Parameters stop requiring gradients; forward passes record nothing.
  void freeze();
  bool frozen() const { return frozen_; }

  // Element count of all layer outputs for one image (memory modelling).
  double activation_elements() const;

  // Same architecture and parameter values in another element type.
  template <class U>
  Network<U> cast() {
    Network<U> out(spec_, 0);
    for (Param<U>* p : out.params()) {
      Param<T>* src = find_param(p->name);
      auto d = p->value.mutable_data();
      auto s = src->value.data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<U>(s[i]);
    }
    return out;
  }

 private:
  ModelSpec spec_;
  std::vector<Layer<T>> layers_;
  bool frozen_ = false;
};

ModelSpec validated(ModelSpec spec);

template <class T>
std::size_t count_params(Network<T>& net);

// 2 * multiply-accumulates of one forward pass at spec.img_size, in GFLOPs.
template <class T>
double estimate_gflops(const Network<T>& net, const ModelSpec& spec);

// Checkpoints -----------------------------------------------------------------
//
// Layout: 8-byte magic "MFNETCK1", u64 little-endian header length, UTF-8
// JSON header {version, spec, tensors:[{name, shape, offset}]}, then the
// little-endian float32 blobs; offsets are relative to the blob section.

inline constexpr char kCheckpointMagic[9] = "MFNETCK1";
inline constexpr int kCheckpointVersion = 1;

std::vector<std::uint8_t> serialize_checkpoint(Network<float>& net);
Network<float> deserialize_checkpoint(const std::vector<std::uint8_t>& bytes);
void save_checkpoint(Network<float>& net, const std::filesystem::path& path);
Network<float> load_checkpoint(const std::filesystem::path& path);

}  // namespace mfnet
