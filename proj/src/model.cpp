#include "mfnet/model.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iterator>

#include "mfnet/error.hpp"

namespace mfnet {

using nlohmann::json;

namespace {

// Stage widths of the small preset before the width multiple; M and L scale
// this schedule by 1.6 and 2.2.
constexpr std::array<int, 5> kSmallSchedule{40, 80, 160, 320, 640};
constexpr std::array<int, 5> kToySchedule{8, 16, 32, 64, 128};
constexpr int kToyImgSize = 64;

std::vector<int> scaled_schedule(double factor) {
  std::vector<int> out;
  for (int c : kSmallSchedule) out.push_back(static_cast<int>(std::lround(c * factor)));
  return out;
}

// Toy anchors are sized against the synthetic objects (roughly 10-25% of the
// canvas) so every level can represent them in either decode mode.
std::array<std::vector<AnchorSize>, 3> toy_anchors(int img_size) {
  const double s = static_cast<double>(img_size) / kToyImgSize;
  return {std::vector<AnchorSize>{{24 * s, 24 * s}, {20 * s, 28 * s}, {28 * s, 20 * s}},
          std::vector<AnchorSize>{{32 * s, 32 * s}, {28 * s, 40 * s}, {40 * s, 28 * s}},
          std::vector<AnchorSize>{{48 * s, 48 * s}, {40 * s, 56 * s}, {56 * s, 40 * s}}};
}

}  // namespace

std::string to_string(Family f) { return f == Family::kMFNet ? "mfnet" : "mfnet-fa"; }

std::string to_string(SizePreset s) {
  switch (s) {
    case SizePreset::kS: return "s";
    case SizePreset::kM: return "m";
    case SizePreset::kL: return "l";
    case SizePreset::kToy: return "toy";
  }
  return "?";
}

Family parse_family(const std::string& text) {
  if (text == "mfnet") return Family::kMFNet;
  if (text == "mfnet-fa") return Family::kMFNetFA;
  throw ConfigError("unknown model family '" + text + "' (expected mfnet|mfnet-fa)");
}

SizePreset parse_size(const std::string& text) {
  if (text == "s") return SizePreset::kS;
  if (text == "m") return SizePreset::kM;
  if (text == "l") return SizePreset::kL;
  if (text == "toy") return SizePreset::kToy;
  throw ConfigError("unknown model size '" + text + "' (expected s|m|l|toy)");
}

std::array<std::vector<AnchorSize>, 3> default_anchors(int img_size) {
  const double s = static_cast<double>(img_size) / 640.0;
  return {std::vector<AnchorSize>{{10 * s, 13 * s}, {16 * s, 30 * s}, {33 * s, 23 * s}},
          std::vector<AnchorSize>{{30 * s, 61 * s}, {62 * s, 45 * s}, {59 * s, 119 * s}},
          std::vector<AnchorSize>{{116 * s, 90 * s}, {156 * s, 198 * s}, {373 * s, 326 * s}}};
}

ModelSpec make_spec(Family family, SizePreset size, int num_classes, int img_size) {
  ModelSpec spec;
  spec.family = family;
  spec.size = size;
  spec.num_classes = num_classes;
  switch (size) {
    case SizePreset::kS: spec.base_channel_schedule = scaled_schedule(1.0); break;
    case SizePreset::kM: spec.base_channel_schedule = scaled_schedule(1.6); break;
    case SizePreset::kL: spec.base_channel_schedule = scaled_schedule(2.2); break;
    case SizePreset::kToy:
      spec.base_channel_schedule.assign(kToySchedule.begin(), kToySchedule.end());
      break;
  }
  if (img_size <= 0) img_size = size == SizePreset::kToy ? kToyImgSize : 320;
  spec.img_size = img_size;
  spec.anchors = size == SizePreset::kToy ? toy_anchors(img_size) : default_anchors(img_size);
  spec.validate();
  return spec;
}

int ModelSpec::channels(int stage) const {
  return std::max(1, static_cast<int>(std::lround(
                         base_channel_schedule.at(static_cast<std::size_t>(stage)) * width_multiple)));
}

void ModelSpec::validate() const {
  if (num_classes < 1) throw ConfigError("num_classes must be >= 1");
  if (img_size < 32 || img_size % 32 != 0) {
    throw ConfigError("img_size must be a positive multiple of 32, got " + std::to_string(img_size));
  }
  if (!(depth_multiple > 0) || !(width_multiple > 0)) throw ConfigError("multiples must be > 0");
  if (base_channel_schedule.size() != 5) throw ConfigError("base_channel_schedule needs 5 entries");
  for (int c : base_channel_schedule) {
    if (c < 1) throw ConfigError("base channel widths must be >= 1");
  }
  const std::size_t b = anchors[0].size();
  if (b < 1) throw ConfigError("need >= 1 anchor per level");
  for (const auto& level : anchors) {
    if (level.size() != b) throw ConfigError("every level needs the same anchor count");
    for (const auto& a : level) {
      if (!(a.w > 0) || !(a.h > 0)) throw ConfigError("anchor sizes must be positive");
    }
  }
  if (!(strides[0] < strides[1] && strides[1] < strides[2])) {
    throw ConfigError("strides must be strictly increasing");
  }
  if (fa_ratio < 1) throw ConfigError("fa_ratio must be >= 1");
}

ModelSpec validated(ModelSpec spec) {
  spec.validate();
  return spec;
}

json spec_to_json(const ModelSpec& spec) {
  json anchors = json::array();
  for (const auto& level : spec.anchors) {
    json l = json::array();
    for (const auto& a : level) l.push_back({a.w, a.h});
    anchors.push_back(l);
  }
  return json{{"family", to_string(spec.family)},
              {"size", to_string(spec.size)},
              {"num_classes", spec.num_classes},
              {"depth_multiple", spec.depth_multiple},
              {"width_multiple", spec.width_multiple},
              {"base_channel_schedule", spec.base_channel_schedule},
              {"anchors", anchors},
              {"strides", spec.strides},
              {"img_size", spec.img_size},
              {"fa_ratio", spec.fa_ratio}};
}

ModelSpec spec_from_json(const json& j) {
  try {
    ModelSpec spec = make_spec(parse_family(j.at("family").get<std::string>()),
                               parse_size(j.at("size").get<std::string>()),
                               j.value("num_classes", 2), j.value("img_size", 0));
    spec.depth_multiple = j.value("depth_multiple", spec.depth_multiple);
    spec.width_multiple = j.value("width_multiple", spec.width_multiple);
    if (j.contains("base_channel_schedule")) {
      spec.base_channel_schedule = j["base_channel_schedule"].get<std::vector<int>>();
    }
    if (j.contains("anchors")) {
      const auto& a = j["anchors"];
      if (!a.is_array() || a.size() != 3) throw ConfigError("anchors must list 3 levels");
      for (std::size_t l = 0; l < 3; ++l) {
        spec.anchors[l].clear();
        for (const auto& wh : a[l]) spec.anchors[l].push_back({wh.at(0).get<double>(), wh.at(1).get<double>()});
      }
    }
    if (j.contains("strides")) spec.strides = j["strides"].get<std::array<int, 3>>();
    spec.fa_ratio = j.value("fa_ratio", spec.fa_ratio);
    spec.validate();
    return spec;
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed model spec: ") + e.what());
  }
}

// ===========================================================================
// Network
// ===========================================================================

template <class T>
Network<T>::Network(ModelSpec spec, std::uint64_t seed) : spec_(validated(std::move(spec))) {
  if (spec_.strides != std::array<int, 3>{8, 16, 32}) {
    throw ConfigError("the network topology produces strides (8,16,32)");
  }
  Initializer init(seed);
  const bool fa = spec_.family == Family::kMFNetFA;
  const int c0 = spec_.channels(0), c1 = spec_.channels(1), c2 = spec_.channels(2),
            c3 = spec_.channels(3), c4 = spec_.channels(4);
  const int n3 = scaled_depth(3, spec_.depth_multiple);
  const int n9 = scaled_depth(9, spec_.depth_multiple);

  auto name_of = [](int i) { return std::string(i < 10 ? "backbone." : "neck.") + std::to_string(i); };
  auto push = [&](LayerModule<T> module, std::vector<int> from, int out_c, int stride) {
    Layer<T> layer;
    layer.name = name_of(static_cast<int>(layers_.size()));
    layer.module = std::move(module);
    layer.from = std::move(from);
    layer.out_channels = out_c;
    layer.stride = stride;
    layers_.push_back(std::move(layer));
  };
  auto stage = [&](int c_in, int c_out, int n, bool shortcut) -> LayerModule<T> {
    const std::string name = name_of(static_cast<int>(layers_.size()));
    if (fa) return C3Block<T>(name + ".c3", c_in, c_out, n, shortcut, init);
    return CSPBlock<T>(name + ".csp", c_in, c_out, n, shortcut, init);
  };
  auto conv = [&](int c_in, int c_out, int k, int s) {
    return ConvBlock<T>(name_of(static_cast<int>(layers_.size())) + ".conv", c_in, c_out, k, s, -1,
                        1, Activation::kSiLU, init);
  };
  auto attend = [&](int c) {
    if (fa) {
      Layer<T>& last = layers_.back();
      last.attention = FABlock<T>(last.name + ".fa", c, spec_.fa_ratio, init);
    }
  };

  push(FocusBlock<T>(name_of(0) + ".focus", 3, c0, init), {-1}, c0, 2);  // 0
  push(conv(c0, c1, 3, 2), {-1}, c1, 4);                                // 1
  push(stage(c1, c1, n3, true), {-1}, c1, 4);                           // 2
  attend(c1);
  push(conv(c1, c2, 3, 2), {-1}, c2, 8);  // 3
  push(stage(c2, c2, n9, true), {-1}, c2, 8);  // 4
  attend(c2);
  push(conv(c2, c3, 3, 2), {-1}, c3, 16);  // 5
  push(stage(c3, c3, n9, true), {-1}, c3, 16);  // 6
  attend(c3);
  push(conv(c3, c4, 3, 2), {-1}, c4, 32);  // 7
  if (fa) {
    push(SPPFBlock<T>(name_of(8) + ".sppf", c4, c4, init), {-1}, c4, 32);  // 8
  } else {
    push(SPPBlock<T>(name_of(8) + ".spp", c4, c4, init), {-1}, c4, 32);
  }
  attend(c4);
  push(stage(c4, c4, n3, false), {-1}, c4, 32);  // 9
  attend(c4);
  push(conv(c4, c3, 1, 1), {-1}, c3, 32);            // 10
  push(UpsampleLayer{}, {-1}, c3, 16);               // 11
  push(ConcatLayer{}, {-1, 6}, 2 * c3, 16);          // 12
  push(stage(2 * c3, c3, n3, false), {-1}, c3, 16);  // 13
  push(conv(c3, c2, 1, 1), {-1}, c2, 16);            // 14
  push(UpsampleLayer{}, {-1}, c2, 8);                // 15
  push(ConcatLayer{}, {-1, 4}, 2 * c2, 8);           // 16
  push(stage(2 * c2, c2, n3, false), {-1}, c2, 8);   // 17  P3
  push(conv(c2, c2, 3, 2), {-1}, c2, 16);            // 18
  push(ConcatLayer{}, {-1, 14}, 2 * c2, 16);         // 19
  push(stage(2 * c2, c3, n3, false), {-1}, c3, 16);  // 20  P4
  push(conv(c3, c3, 3, 2), {-1}, c3, 32);            // 21
  push(ConcatLayer{}, {-1, 10}, 2 * c3, 32);         // 22
  push(stage(2 * c3, c4, n3, false), {-1}, c4, 32);  // 23  P5

  DetectHead<T> head("head.detect", {c2, c3, c4}, spec_.num_classes, spec_.anchors_per_level(), init);
  // Start from low objectness and near-uniform class scores.
  const int k = head.outputs_per_anchor();
  for (int l = 0; l < 3; ++l) {
    auto b = head.convs[l].bias.value.mutable_data();
    const double cells = std::pow(static_cast<double>(spec_.img_size) / spec_.strides[l], 2);
    for (int a = 0; a < head.anchors; ++a) {
      b[a * k + 4] = static_cast<T>(static_cast<float>(std::log(8.0 / cells)));
      for (int c = 0; c < spec_.num_classes; ++c) {
        b[a * k + 5 + c] = static_cast<T>(static_cast<float>(std::log(0.6 / (spec_.num_classes - 0.99))));
      }
    }
  }
  Layer<T> detect;
  detect.name = "head";
  detect.module = std::move(head);
  detect.from = {kTaps[0], kTaps[1], kTaps[2]};
  detect.out_channels = k * spec_.anchors_per_level();
  detect.stride = 8;
  layers_.push_back(std::move(detect));
}

template <class T>
std::array<BasicTensor<T>, 3> Network<T>::forward(const BasicTensor<T>& images) const {
  if (images.rank() != 4 || images.dim(1) != 3 || images.dim(2) != spec_.img_size ||
      images.dim(3) != spec_.img_size) {
    throw DimensionError("network expects [b,3," + std::to_string(spec_.img_size) + "," +
                         std::to_string(spec_.img_size) + "], got " + shape_str(images.shape()));
  }
  std::vector<BasicTensor<T>> outputs;
  outputs.reserve(layers_.size());
  std::array<BasicTensor<T>, 3> result;
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const Layer<T>& layer = layers_[i];
    auto input = [&](int from) -> const BasicTensor<T>& {
      return from < 0 ? (i == 0 ? images : outputs[i - 1]) : outputs[static_cast<std::size_t>(from)];
    };
    BasicTensor<T> y = std::visit(
        [&](const auto& m) -> BasicTensor<T> {
          using M = std::decay_t<decltype(m)>;
          if constexpr (std::is_same_v<M, UpsampleLayer>) {
            return upsample_nearest2x(input(layer.from[0]));
          } else if constexpr (std::is_same_v<M, ConcatLayer>) {
            std::vector<BasicTensor<T>> parts;
            for (int f : layer.from) parts.push_back(input(f));
            return concat_channels(parts);
          } else if constexpr (std::is_same_v<M, DetectHead<T>>) {
            result = m.forward({input(layer.from[0]), input(layer.from[1]), input(layer.from[2])});
            return result[0];
          } else {
            return m.forward(input(layer.from[0]));
          }
        },
        layer.module);
    if (layer.attention) y = layer.attention->forward(y);
    outputs.push_back(std::move(y));
  }
  return result;
}

template <class T>
ParamRefs<T> Network<T>::params() {
  ParamRefs<T> out;
  for (auto& layer : layers_) {
    std::visit(
        [&](auto& m) {
          using M = std::decay_t<decltype(m)>;
          if constexpr (!std::is_same_v<M, UpsampleLayer> && !std::is_same_v<M, ConcatLayer>) {
            auto p = m.params();
            out.insert(out.end(), p.begin(), p.end());
          }
        },
        layer.module);
    if (layer.attention) {
      auto p = layer.attention->params();
      out.insert(out.end(), p.begin(), p.end());
    }
  }
  return out;
}

template <class T>
Param<T>* Network<T>::find_param(const std::string& name) {
  for (Param<T>* p : params()) {
    if (p->name == name) return p;
  }
  return nullptr;
}

template <class T>
int Network<T>::fa_block_count() const {
  return static_cast<int>(std::count_if(layers_.begin(), layers_.end(),
                                        [](const Layer<T>& l) { return l.attention.has_value(); }));
}

template <class T>
DetectHead<T>& Network<T>::head() {
  return std::get<DetectHead<T>>(layers_.back().module);
}

template <class T>
void Network<T>::freeze() {
  for (Param<T>* p : params()) {
    p->value.set_requires_grad(false);
    p->value.zero_grad();
  }
  frozen_ = true;
}

template <class T>
double Network<T>::activation_elements() const {
  double total = 3.0 * spec_.img_size * spec_.img_size;
  for (const auto& layer : layers_) {
    const double side = static_cast<double>(spec_.img_size) / layer.stride;
    if (std::holds_alternative<DetectHead<T>>(layer.module)) {
      for (int l = 0; l < 3; ++l) {
        const double s = static_cast<double>(spec_.img_size) / spec_.strides[l];
        total += layer.out_channels * s * s;
      }
    } else {
      total += layer.out_channels * side * side * (layer.attention ? 2 : 1);
    }
  }
  return total;
}

template <class T>
std::size_t count_params(Network<T>& net) {
  std::size_t total = 0;
  for (const Param<T>* p : net.params()) total += p->value.numel();
  return total;
}

template <class T>
double estimate_gflops(const Network<T>& net, const ModelSpec& spec) {
  double macs = 0;
  for (const auto& layer : net.layers()) {
    const Layer<T>* src = nullptr;
    int in_side = spec.img_size;
    if (layer.from[0] >= 0) {
      src = &net.layers()[static_cast<std::size_t>(layer.from[0])];
    } else if (&layer != &net.layers().front()) {
      src = &layer - 1;
    }
    if (src) in_side = spec.img_size / src->stride;
    std::visit(
        [&](const auto& m) {
          using M = std::decay_t<decltype(m)>;
          if constexpr (std::is_same_v<M, DetectHead<T>>) {
            for (int l = 0; l < 3; ++l) {
              const int side = spec.img_size / spec.strides[l];
              macs += m.convs[l].macs(side, side);
            }
          } else if constexpr (!std::is_same_v<M, UpsampleLayer> && !std::is_same_v<M, ConcatLayer>) {
            macs += m.macs(in_side, in_side);
          }
        },
        layer.module);
    if (layer.attention) macs += layer.attention->macs();
  }
  return 2.0 * macs / 1e9;
}

// ===========================================================================
// Checkpoints
// ===========================================================================

namespace {

void put_u64_le(std::vector<std::uint8_t>& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint64_t get_u64_le(const std::uint8_t* p) {
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
  return v;
}

void put_f32_le(std::vector<std::uint8_t>& out, float f) {
  const auto bits = std::bit_cast<std::uint32_t>(f);
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(bits >> (8 * i)));
}

float get_f32_le(const std::uint8_t* p) {
  std::uint32_t bits = 0;
  for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
  return std::bit_cast<float>(bits);
}

}  // namespace

std::vector<std::uint8_t> serialize_checkpoint(Network<float>& net) {
  json tensors = json::array();
  std::uint64_t offset = 0;
  auto params = net.params();
  for (const Param<float>* p : params) {
    tensors.push_back({{"name", p->name}, {"shape", p->value.shape()}, {"offset", offset}});
    offset += 4 * p->value.numel();
  }
  const json header{{"version", kCheckpointVersion}, {"spec", spec_to_json(net.spec())}, {"tensors", tensors}};
  const std::string text = header.dump();

  std::vector<std::uint8_t> out(kCheckpointMagic, kCheckpointMagic + 8);
  put_u64_le(out, text.size());
  out.insert(out.end(), text.begin(), text.end());
  out.reserve(out.size() + offset);
  for (const Param<float>* p : params) {
    for (float v : p->value.data()) put_f32_le(out, v);
  }
  return out;
}

Network<float> deserialize_checkpoint(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kCheckpointMagic, 8) != 0) {
    throw LoadError("checkpoint: corrupt header (bad magic)");
  }
  const std::uint64_t header_len = get_u64_le(bytes.data() + 8);
  if (header_len > bytes.size() - 16) throw LoadError("checkpoint: corrupt file (truncated header)");
  json header;
  try {
    header = json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception& e) {
    throw LoadError(std::string("checkpoint: corrupt header: ") + e.what());
  }
  if (!header.is_object() || !header.contains("version") || !header.contains("spec") ||
      !header.contains("tensors")) {
    throw LoadError("checkpoint: corrupt header (missing fields)");
  }
  if (header["version"] != kCheckpointVersion) {
    throw LoadError("checkpoint: unsupported version " + header["version"].dump());
  }
  ModelSpec spec;
  try {
    spec = spec_from_json(header["spec"]);
  } catch (const ConfigError& e) {
    throw LoadError(std::string("checkpoint: ") + e.what());
  }
  Network<float> net(spec, 0);
  const std::size_t blob_start = 16 + header_len;
  const std::size_t blob_size = bytes.size() - blob_start;
  std::size_t loaded = 0;
  try {
    for (const auto& entry : header["tensors"]) {
      const auto name = entry.at("name").get<std::string>();
      const auto shape = entry.at("shape").get<Shape>();
      const auto offset = entry.at("offset").get<std::uint64_t>();
      Param<float>* p = net.find_param(name);
      if (!p) throw LoadError("checkpoint: unknown tensor '" + name + "'");
      if (p->value.shape() != shape) {
        throw LoadError("checkpoint: shape mismatch for '" + name + "': file " + shape_str(shape) +
                        " vs model " + shape_str(p->value.shape()));
      }
      const std::size_t n = p->value.numel();
      if (offset > blob_size || 4 * n > blob_size - offset) {
        throw LoadError("checkpoint: corrupt file (truncated tensor data for '" + name + "')");
      }
      auto dst = p->value.mutable_data();
      const std::uint8_t* src = bytes.data() + blob_start + offset;
      for (std::size_t i = 0; i < n; ++i) dst[i] = get_f32_le(src + 4 * i);
      ++loaded;
    }
  } catch (const json::exception& e) {
    throw LoadError(std::string("checkpoint: corrupt tensor table: ") + e.what());
  }
  if (loaded != net.params().size()) throw LoadError("checkpoint: tensor table incomplete");
  return net;
}

void save_checkpoint(Network<float>& net, const std::filesystem::path& path) {
  const auto bytes = serialize_checkpoint(net);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write checkpoint " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw LoadError("failed writing checkpoint " + path.string());
}

Network<float> load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot read checkpoint " + path.string());
  std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  try {
    return deserialize_checkpoint(bytes);
  } catch (const LoadError& e) {
    throw LoadError(path.string() + ": " + e.what());
  }
}

template class Network<float>;
template class Network<double>;
template std::size_t count_params<float>(Network<float>&);
template std::size_t count_params<double>(Network<double>&);
template double estimate_gflops<float>(const Network<float>&, const ModelSpec&);
template double estimate_gflops<double>(const Network<double>&, const ModelSpec&);

}  // namespace mfnet
