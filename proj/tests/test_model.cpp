#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "mfnet/error.hpp"
#include "oracles.hpp"
#include "mfnet/model.hpp"
#include "test_util.hpp"

namespace mfnet {
namespace {

using oracle::analytic_params;
using testing::random_tensor;
using testing::TempDir;
using testing::values;


TEST(Model, ThreeScalesAndHeadChannels) {
  for (auto fam : {Family::kMFNet, Family::kMFNetFA}) {
    const ModelSpec spec = make_spec(fam, SizePreset::kToy, 2);
    Network<float> net(spec, 1);
    EXPECT_EQ(spec.strides, (std::array<int, 3>{8, 16, 32}));
    EXPECT_EQ(net.layers().back().out_channels, 21);
    EXPECT_EQ(Network<float>::kTaps, (std::array<int, 3>{17, 20, 23}));
    for (int l = 0; l < 3; ++l) EXPECT_EQ(net.layers()[static_cast<std::size_t>(Network<float>::kTaps[l])].stride, spec.strides[l]);
    if (fam == Family::kMFNetFA) {
      EXPECT_GE(net.fa_block_count(), 1);
    } else {
      EXPECT_EQ(net.fa_block_count(), 0);
    }
  }
}

TEST(Model, ForwardGridSizes) {
  for (int s : {320, 416}) {
    const ModelSpec spec = make_spec(Family::kMFNet, SizePreset::kToy, 2, s);
    Network<float> net(spec, 2);
    const auto out = net.forward(Tensor::zeros({1, 3, s, s}));
    for (int l = 0; l < 3; ++l) EXPECT_EQ(out[l].shape(), (Shape{1, 3, s / spec.strides[l], s / spec.strides[l], 7}));
  }
  Network<float> net(make_spec(Family::kMFNet, SizePreset::kToy, 2, 64), 2);
  EXPECT_THROW(net.forward(Tensor::zeros({1, 3, 96, 96})), DimensionError);
}

TEST(Model, InvalidSpecIsConfigError) {
  EXPECT_THROW(make_spec(Family::kMFNet, SizePreset::kToy, 2, 100), ConfigError);
  ModelSpec s = make_spec(Family::kMFNet, SizePreset::kToy, 2);
  s.anchors[1].clear();
  EXPECT_THROW(Network<float>(s, 0), ConfigError);
  EXPECT_THROW(parse_family("yolo"), ConfigError);
  EXPECT_THROW(parse_size("xl"), ConfigError);
}

TEST(Model, BatchDecomposable) {
  const ModelSpec spec = make_spec(Family::kMFNetFA, SizePreset::kToy, 2);
  Network<float> net(spec, 3);
  std::mt19937_64 rng(4);
  Tensor x = random_tensor({1, 3, 64, 64}, rng, 0, 1), y = random_tensor({1, 3, 64, 64}, rng, 0, 1);
  std::vector<float> both = values(x);
  const auto yv = values(y);
  both.insert(both.end(), yv.begin(), yv.end());
  const auto joint = net.forward(Tensor({2, 3, 64, 64}, both));
  const auto a = net.forward(x), b = net.forward(y);
  for (int l = 0; l < 3; ++l) {
    auto expect = values(a[l]);
    const auto bv = values(b[l]);
    expect.insert(expect.end(), bv.begin(), bv.end());
    EXPECT_EQ(values(joint[l]), expect);
  }
}

TEST(Model, ParamCountMatchesAnalyticRecount) {
  for (auto fam : {Family::kMFNet, Family::kMFNetFA})
    for (auto size : {SizePreset::kToy, SizePreset::kS, SizePreset::kM, SizePreset::kL}) {
      const ModelSpec spec = make_spec(fam, size, 2);
      Network<float> net(spec, 0);
      EXPECT_EQ(count_params(net), analytic_params(spec)) << to_string(fam) << "/" << to_string(size);
    }
}

TEST(Model, PresetOrdering) {
  std::size_t prev = 0;
  for (auto size : {SizePreset::kToy, SizePreset::kS, SizePreset::kM, SizePreset::kL}) {
    Network<float> net(make_spec(Family::kMFNetFA, size, 2), 0);
    const std::size_t n = count_params(net);
    EXPECT_GT(n, prev);
    prev = n;
  }
}

TEST(Gflops, ClosedFormPieces) {
  Initializer init(0);
  ConvBlock<float> c("c", 1, 1, 1, 1, 0, 1, Activation::kSiLU, init);
  EXPECT_EQ(2 * c.macs(4, 4), 32.0);
  FABlock<float> fa("fa", 32, 16, init);
  // Two linears (32->2 and 2->32), 64 MACs each.
  EXPECT_EQ(fa.macs(), 128.0);
}

TEST(Gflops, QuadruplesWithDoubledImageSize) {
  const ModelSpec a = make_spec(Family::kMFNet, SizePreset::kToy, 2, 64);
  const ModelSpec b = make_spec(Family::kMFNet, SizePreset::kToy, 2, 128);
  Network<float> na(a, 0), nb(b, 0);
  EXPECT_NEAR(estimate_gflops(nb, b) / estimate_gflops(na, a), 4.0, 1e-9);
  const ModelSpec fa64 = make_spec(Family::kMFNetFA, SizePreset::kToy, 2, 64);
  const ModelSpec fa128 = make_spec(Family::kMFNetFA, SizePreset::kToy, 2, 128);
  Network<float> fa(fa64, 0), fb(fa128, 0);
  // FA linears do not scale with the image, so only approximately 4.
  EXPECT_NEAR(estimate_gflops(fb, fa128) / estimate_gflops(fa, fa64), 4.0, 5e-3);
}

TEST(Checkpoint, RoundTripIsBitIdentical) {
  TempDir dir("ckpt");
  for (auto fam : {Family::kMFNet, Family::kMFNetFA}) {
    const ModelSpec spec = make_spec(fam, SizePreset::kToy, 3);
    Network<float> net(spec, 5);
    const auto p1 = dir.path() / "a.ckpt", p2 = dir.path() / "b.ckpt";
    save_checkpoint(net, p1);
    Network<float> loaded = load_checkpoint(p1);
    EXPECT_EQ(loaded.spec(), spec);
    save_checkpoint(loaded, p2);
    std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
    const std::string b1((std::istreambuf_iterator<char>(f1)), {}), b2((std::istreambuf_iterator<char>(f2)), {});
    EXPECT_EQ(b1, b2);
    EXPECT_EQ(b1.substr(0, 8), "MFNETCK1");
    Tensor x = Tensor::full({1, 3, 64, 64}, 0.5f);
    const auto o1 = net.forward(x), o2 = loaded.forward(x);
    for (int l = 0; l < 3; ++l) EXPECT_EQ(values(o1[l]), values(o2[l]));
  }
}

TEST(Checkpoint, CorruptFilesAreLoadErrors) {
  Network<float> net(make_spec(Family::kMFNet, SizePreset::kToy, 2), 0);
  const auto bytes = serialize_checkpoint(net);
  auto truncated = bytes;
  truncated.resize(bytes.size() - 10);
  EXPECT_THROW(deserialize_checkpoint(truncated), LoadError);
  auto bad_magic = bytes;
  bad_magic[0] = 'X';
  EXPECT_THROW(deserialize_checkpoint(bad_magic), LoadError);
  EXPECT_THROW(deserialize_checkpoint({}), LoadError);
  EXPECT_THROW(load_checkpoint("/nonexistent/path.ckpt"), LoadError);

  // Version mismatch: rewrite the header's version field.
  std::string text(bytes.begin(), bytes.end());
  const auto pos = text.find("\"version\":1");
  ASSERT_NE(pos, std::string::npos);
  text[pos + 10] = '9';
  EXPECT_THROW(deserialize_checkpoint(std::vector<std::uint8_t>(text.begin(), text.end())), LoadError);
}

TEST(Model, SpecJsonRoundTrip) {
  const ModelSpec spec = make_spec(Family::kMFNetFA, SizePreset::kM, 4, 416);
  EXPECT_EQ(spec_from_json(spec_to_json(spec)), spec);
}

TEST(Model, CastPreservesOutputs) {
  Network<float> net(make_spec(Family::kMFNetFA, SizePreset::kToy, 2), 6);
  Network<double> d = net.cast<double>();
  Tensor x = Tensor::full({1, 3, 64, 64}, 0.25f);
  const auto a = net.forward(x);
  const auto b = d.forward(x.cast<double>());
  for (int l = 0; l < 3; ++l)
    for (std::size_t i = 0; i < a[l].numel(); ++i) EXPECT_NEAR(a[l].data()[i], b[l].data()[i], 1e-4);
}

// A bright pixel moved by 8 input pixels moves the strongest P3 response by
// one cell, away from the borders.
TEST(Model, StrideSanityOnP3) {
  const ModelSpec spec = make_spec(Family::kMFNetFA, SizePreset::kToy, 2, 128);
  Network<float> net(spec, 7);
  const auto base = net.forward(Tensor::zeros({1, 3, 128, 128}))[0];
  auto peak = [&](int py, int px) {
    Tensor img = Tensor::zeros({1, 3, 128, 128});
    auto d = img.mutable_data();
    for (int c = 0; c < 3; ++c) d[static_cast<std::size_t>((c * 128 + py) * 128 + px)] = 1.0f;
    const auto out = net.forward(img)[0];
    const int z = out.dim(2), k = out.dim(4);
    double best = -1;
    std::pair<int, int> at{0, 0};
    for (int gy = 0; gy < z; ++gy)
      for (int gx = 0; gx < z; ++gx) {
        double e = 0;
        for (int a = 0; a < 3; ++a)
          for (int f = 0; f < k; ++f) {
            const std::size_t i = ((static_cast<std::size_t>(a) * z + gy) * z + gx) * k + f;
            e += std::abs(out.data()[i] - base.data()[i]);
          }
        if (e > best) best = e, at = {gy, gx};
      }
    return at;
  };
  const auto p0 = peak(60, 52);
  const auto p1 = peak(60, 60);
  const auto p2 = peak(68, 60);
  EXPECT_EQ(p1.first, p0.first);
  EXPECT_EQ(p1.second, p0.second + 1);
  EXPECT_EQ(p2.first, p1.first + 1);
  EXPECT_EQ(p2.second, p1.second);
}

}  // namespace
}  // namespace mfnet
