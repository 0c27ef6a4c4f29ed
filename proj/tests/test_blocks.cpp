#include <gtest/gtest.h>

#include <algorithm>
#include <random>

#include "mfnet/blocks.hpp"
#include "mfnet/error.hpp"
#include "mfnet/gradcheck.hpp"
#include "test_util.hpp"

namespace mfnet {
namespace {

using testing::random_tensor;
using testing::values;

template <class T>
void set_all(const ParamRefs<T>& params, T v) {
  for (auto* p : params)
    for (auto& x : p->value.mutable_data()) x = v;
}

std::vector<float> sorted(std::vector<float> v) {
  std::sort(v.begin(), v.end());
  return v;
}

TEST(Focus, RearrangeShapeAndChannelOrder) {
  std::vector<float> v(16);
  for (int i = 0; i < 16; ++i) v[static_cast<std::size_t>(i)] = static_cast<float>(i);
  Tensor r = FocusBlock<float>::rearrange(Tensor({1, 1, 4, 4}, v));
  EXPECT_EQ(r.shape(), (Shape{1, 4, 2, 2}));
  EXPECT_EQ(values(r), (std::vector<float>{0, 2, 8, 10, 4, 6, 12, 14, 1, 3, 9, 11, 5, 7, 13, 15}));

  std::mt19937_64 rng(1);
  EXPECT_EQ(FocusBlock<float>::rearrange(random_tensor({3, 5, 8, 6}, rng)).shape(), (Shape{3, 20, 4, 3}));
  EXPECT_THROW(FocusBlock<float>::rearrange(Tensor::zeros({1, 1, 5, 4})), GeometryError);
}

TEST(Focus, IdentityConvIsLossless) {
  Initializer init(2);
  const int c1 = 3;
  FocusBlock<float> f("focus", c1, 4 * c1, init, 1, 1, 0, 1, Activation::kIdentity);
  set_all<float>(f.params(), 0.0f);
  auto w = f.conv.weight.value.mutable_data();
  for (int c = 0; c < 4 * c1; ++c) w[static_cast<std::size_t>(c * 4 * c1 + c)] = 1.0f;
  std::mt19937_64 rng(3);
  Tensor x = random_tensor({2, c1, 6, 8}, rng);
  EXPECT_EQ(sorted(values(f.forward(x))), sorted(values(x)));
}

TEST(FA, ZeroWeightsHalveTheInput) {
  Initializer init(4);
  FABlock<float> fa("fa", 32, 16, init);
  set_all<float>(fa.params(), 0.0f);
  std::mt19937_64 rng(5);
  Tensor x = random_tensor({2, 32, 3, 3}, rng);
  const auto y = values(fa.forward(x));
  const auto xv = values(x);
  for (std::size_t i = 0; i < xv.size(); ++i) EXPECT_EQ(y[i], 0.5f * xv[i]);
}

TEST(FA, ParameterCountAndHiddenClamp) {
  Initializer init(6);
  FABlock<float> fa("fa", 32, 16, init);
  EXPECT_EQ(fa.param_count(), 162u);
  std::size_t n = 0;
  for (auto* p : fa.params()) n += p->value.numel();
  EXPECT_EQ(n, 32u * 2 + 2 + 2 * 32 + 32);
  FABlock<float> narrow("fa", 8, 16, init);
  EXPECT_EQ(narrow.hidden, 1);
}

TEST(FA, AttentionInUnitIntervalAndPerChannelScaling) {
  Initializer init(7);
  FABlock<float> fa("fa", 16, 16, init);
  std::mt19937_64 rng(8);
  for (auto* p : fa.params())
    for (auto& v : p->value.mutable_data()) v = std::uniform_real_distribution<float>(-3, 3)(rng);
  Tensor x = random_tensor({2, 16, 4, 4}, rng, -5, 5);
  const Tensor att = fa.attention(x);
  for (float a : att.data()) {
    EXPECT_GT(a, 0.0f);
    EXPECT_LT(a, 1.0f);
  }
  Tensor y = fa.forward(x);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 16; ++c) {
      const double ratio = y.at({n, c, 0, 0}) / x.at({n, c, 0, 0});
      for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 4; ++j) EXPECT_NEAR(y.at({n, c, i, j}) / x.at({n, c, i, j}), ratio, 1e-5);
    }
  EXPECT_THROW(fa.forward(random_tensor({1, 8, 4, 4}, rng)), DimensionError);
}

TEST(ConvBlock, ParameterCount) {
  Initializer init(9);
  ConvBlock<float> c("conv", 4, 8, 3, 1, -1, 1, Activation::kSiLU, init);
  std::size_t n = 0;
  for (auto* p : c.params()) n += p->value.numel();
  EXPECT_EQ(n, 296u);
}

TEST(CSP, DepthAndShape) {
  EXPECT_EQ(scaled_depth(3, 0.33), 1);
  EXPECT_EQ(scaled_depth(9, 0.33), 3);
  EXPECT_EQ(scaled_depth(1, 0.1), 1);
  Initializer init(10);
  std::mt19937_64 rng(11);
  Tensor x = random_tensor({1, 8, 8, 8}, rng);
  CSPBlock<float> csp("csp", 8, 12, 1, true, init);
  C3Block<float> c3("c3", 8, 12, 2, false, init);
  EXPECT_EQ(csp.forward(x).shape(), (Shape{1, 12, 8, 8}));
  EXPECT_EQ(c3.forward(x).shape(), (Shape{1, 12, 8, 8}));
  EXPECT_EQ(c3.m.size(), 2u);
}

TEST(CSP, GradcheckOnEightCubed) {
  Initializer init(12);
  std::mt19937_64 rng(13);
  CSPBlock<double> csp("csp", 8, 8, 1, true, init);
  C3Block<double> c3("c3", 8, 8, 1, true, init);
  Tensor64 x = random_tensor<double>({1, 8, 8, 8}, rng, -1, 1, true);
  std::vector<double> proj(8 * 64);
  for (auto& v : proj) v = std::uniform_real_distribution<double>(-1, 1)(rng);
  std::vector<Tensor64*> wrt{&x};
  for (auto* p : csp.params()) wrt.push_back(&p->value), p->value.set_requires_grad(true);
  EXPECT_LE(numeric_gradcheck("csp", [&] { return dot_const<double>(csp.forward(x), proj); }, wrt).max_rel_err, 1e-3);
  wrt = {&x};
  for (auto* p : c3.params()) wrt.push_back(&p->value), p->value.set_requires_grad(true);
  EXPECT_LE(numeric_gradcheck("c3", [&] { return dot_const<double>(c3.forward(x), proj); }, wrt).max_rel_err, 1e-3);
}

TEST(SPP, ConstantInputPoolsToItself) {
  Initializer init(14);
  SPPBlock<float> spp("spp", 8, 8, init);
  SPPFBlock<float> sppf("sppf", 8, 8, init);
  // pooled() takes the cv1 output, which has c_ channels.
  EXPECT_EQ(spp.cv1.forward(Tensor::zeros({1, 8, 7, 7})).dim(1), spp.c_);
  const Tensor mid = Tensor::full({1, spp.c_, 7, 7}, 0.3f);
  for (const Tensor& pooled : {spp.pooled(mid), sppf.pooled(mid)}) {
    EXPECT_EQ(pooled.dim(1), 4 * spp.c_);
    for (float p : pooled.data()) EXPECT_EQ(p, 0.3f);
  }
}

TEST(SPP, SppfMatchesSppWithSharedConvs) {
  Initializer init(15);
  std::mt19937_64 rng(16);
  SPPBlock<float> spp("spp", 6, 8, init);
  SPPFBlock<float> sppf("sppf", 6, 8, init);
  sppf.cv1 = spp.cv1;
  sppf.cv2 = spp.cv2;
  for (int i = 0; i < 10; ++i) {
    Tensor x = random_tensor({1, 6, 3 + i, 20 - i}, rng);
    EXPECT_EQ(values(spp.pooled(x)), values(sppf.pooled(x)));
    EXPECT_EQ(values(spp.forward(x)), values(sppf.forward(x)));
  }
}

TEST(Detect, LayoutAndValuePreservation) {
  Initializer init(17);
  DetectHead<float> head("detect", {8, 16, 32}, 2, 3, init);
  EXPECT_EQ(head.outputs_per_anchor(), 7);
  std::mt19937_64 rng(18);
  std::array<Tensor, 3> xs{random_tensor({1, 8, 40, 40}, rng), random_tensor({1, 16, 20, 20}, rng),
                           random_tensor({1, 32, 10, 10}, rng)};
  const auto out = head.forward(xs);
  const int grids[3] = {40, 20, 10};
  for (int l = 0; l < 3; ++l) {
    EXPECT_EQ(out[l].shape(), (Shape{1, 3, grids[l], grids[l], 7}));
    EXPECT_EQ(sorted(values(out[l])), sorted(values(head.convs[l].forward(xs[l]))));
  }
  // Anchor a, cell (y,x), field k comes from conv channel a*7+k.
  const Tensor raw = head.convs[0].forward(xs[0]);
  EXPECT_EQ(out[0].at({0, 2, 5, 9, 4}), raw.at({0, 2 * 7 + 4, 5, 9}));
  EXPECT_THROW(head.forward({random_tensor({1, 9, 4, 4}, rng), xs[1], xs[2]}), DimensionError);
}

TEST(Gradcheck, EveryBlockTypePasses) {
  const auto results = run_block_gradchecks(3);
  ASSERT_EQ(results.size(), gradcheck_block_names().size());
  for (std::size_t i = 0; i < results.size(); ++i) {
    EXPECT_EQ(results[i].name, gradcheck_block_names()[i]);
    EXPECT_LE(results[i].max_rel_err, 1e-3) << results[i].name;
    EXPECT_GT(results[i].coords, 0);
  }
}

TEST(Gradcheck, InjectedFaultIsDetected) {
  GradcheckOptions opt;
  opt.inject_fault = true;
  for (const auto& r : run_block_gradchecks(3, opt)) EXPECT_FALSE(r.passed) << r.name;
}

}  // namespace
}  // namespace mfnet
