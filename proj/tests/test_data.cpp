#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>
#include <set>

#include "mfnet/data.hpp"
#include "mfnet/error.hpp"
#include "test_util.hpp"

namespace mfnet {
namespace {

using testing::random_tensor;
using testing::TempDir;
using testing::values;

namespace fs = std::filesystem;

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

TEST(Annotation, ParseExamples) {
  const Annotation a = parse_annotation_line("0 0.5 0.5 0.2 0.1");
  EXPECT_EQ(a, (Annotation{0, 0.5, 0.5, 0.2, 0.1}));
  EXPECT_NO_THROW(parse_annotation_line("1 0.9 0.9 0.3 0.3"));
  EXPECT_THROW(parse_annotation_line("0 1.5 0.5 0.2 0.1"), ParseError);
  EXPECT_THROW(parse_annotation_line("0 0.5 0.5 0.2"), ParseError);
  EXPECT_THROW(parse_annotation_line("0 0.5 x 0.2 0.1"), ParseError);
  EXPECT_THROW(parse_annotation_line("-1 0.5 0.5 0.2 0.1"), ParseError);
  EXPECT_THROW(parse_annotation_line("2 0.5 0.5 0.2 0.1", 1, "", 2), ParseError);
  try {
    parse_annotation_line("0 0.5", 7, "a.txt");
    FAIL();
  } catch (const ParseError& e) {
    EXPECT_NE(std::string(e.what()).find('7'), std::string::npos);
    EXPECT_NE(std::string(e.what()).find("a.txt"), std::string::npos);
  }
}

TEST(Annotation, FormatParseRoundTrip) {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < 500; ++i) {
    const Annotation a{static_cast<int>(rng() % 5), u(rng), u(rng), u(rng), u(rng)};
    EXPECT_EQ(parse_annotation_line(format_annotation_line(a)), a);
  }
}

TEST(Split, ExampleSizes) {
  const auto s = split_dataset(5105);
  EXPECT_EQ(s.train.size(), 4340u);
  EXPECT_EQ(s.val.size(), 510u);
  EXPECT_EQ(s.test.size(), 255u);
  const auto h = split_dataset(100);
  EXPECT_EQ(h.train.size(), 85u);
  EXPECT_EQ(h.val.size(), 10u);
  EXPECT_EQ(h.test.size(), 5u);
  const auto t = split_dataset(20);
  EXPECT_EQ(t.train.size(), 17u);
  EXPECT_EQ(t.val.size(), 2u);
  EXPECT_EQ(t.test.size(), 1u);
  EXPECT_THROW(split_dataset(2), ValidationError);
}

TEST(Split, ExhaustivePartitionContract) {
  std::vector<char> seen;
  for (std::size_t n = 3; n <= 10000; ++n) {
    SplitSpec spec;
    spec.seed = n;
    const auto s = split_dataset(n, spec);
    // Integer forms of ceil(0.85 n) and floor(0.10 n).
    ASSERT_EQ(s.train.size(), (85 * n + 99) / 100) << n;
    ASSERT_EQ(s.val.size(), n / 10) << n;
    ASSERT_EQ(s.test.size(), n - s.train.size() - s.val.size()) << n;
    seen.assign(n, 0);
    for (const auto* part : {&s.train, &s.val, &s.test})
      for (std::size_t i : *part) {
        ASSERT_LT(i, n);
        ASSERT_EQ(seen[i], 0) << n;
        seen[i] = 1;
      }
  }
}

TEST(Split, DeterministicPerSeed) {
  SplitSpec a, b;
  a.seed = b.seed = 11;
  const auto x = split_dataset(500, a), y = split_dataset(500, b);
  EXPECT_EQ(x.train, y.train);
  EXPECT_EQ(x.val, y.val);
  EXPECT_EQ(x.test, y.test);
  b.seed = 12;
  EXPECT_NE(split_dataset(500, b).train, x.train);
}

TEST(Contrast, Examples) {
  std::mt19937_64 rng(2);
  Tensor full = random_tensor({3, 4, 4}, rng, 0.1, 0.9);
  full.mutable_data()[0] = 0.0f;
  full.mutable_data()[5] = 1.0f;
  EXPECT_EQ(values(contrast_stretch(full)), values(full));

  Tensor mid = random_tensor({3, 5, 5}, rng, 0.3, 0.6);
  mid.mutable_data()[3] = 0.2f;
  mid.mutable_data()[8] = 0.7f;
  const auto out = values(contrast_stretch(mid));
  const auto in = values(mid);
  for (std::size_t i = 0; i < in.size(); ++i) EXPECT_NEAR(out[i], (in[i] - 0.2) / 0.5, 1e-6);

  const Tensor flat = Tensor::full({3, 2, 2}, 0.4f);
  EXPECT_EQ(values(contrast_stretch(flat)), values(flat));
}

TEST(Contrast, SpansUnitInterval) {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0, 1);
  for (int i = 0; i < 100; ++i) {
    double lo = u(rng), hi = u(rng);
    if (lo > hi) std::swap(lo, hi);
    if (hi - lo < 1e-3) continue;
    const auto v = values(contrast_stretch(random_tensor({3, 6, 6}, rng, lo, hi)));
    EXPECT_NEAR(*std::min_element(v.begin(), v.end()), 0.0f, 1e-6);
    EXPECT_NEAR(*std::max_element(v.begin(), v.end()), 1.0f, 1e-6);
  }
}

TEST(Resize, OwnSizeIsIdentity) {
  std::mt19937_64 rng(4);
  const Tensor x = random_tensor({3, 32, 32}, rng, 0, 1);
  const auto y = values(resize_square(x, 32));
  const auto xv = values(x);
  for (std::size_t i = 0; i < xv.size(); ++i) EXPECT_NEAR(y[i], xv[i], 1e-6);
}

TEST(Resize, CheckerboardBilinearRamp) {
  // Half-pixel centers: output index i samples source coordinate
  // (i + 0.5) / 2 - 0.5, clamped to [0, 1] -> {0, 0.25, 0.75, 1}.
  const Tensor board({1, 2, 2}, std::vector<float>{0, 1, 1, 0});
  const Tensor up = detail::resize_bilinear_any(board, 4, 4);
  const double pos[4] = {0, 0.25, 0.75, 1};
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 4; ++x) {
      const double a = pos[y], b = pos[x];
      EXPECT_NEAR(up.at({0, y, x}), a + b - 2 * a * b, 1e-6) << y << "," << x;
    }
}

TEST(Resize, MultipleOf32) {
  const Tensor x = Tensor::full({3, 10, 12}, 0.5f);
  EXPECT_EQ(resize_square(x, 416).shape(), (Shape{3, 416, 416}));
  EXPECT_THROW(resize_square(x, 300), ValidationError);
}

TEST(Synth, DeterministicAndOnCanvas) {
  const auto a = synth_dataset(20, 2, 64, 5), b = synth_dataset(20, 2, 64, 5);
  ASSERT_EQ(a.size(), 20u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(values(a[i].image), values(b[i].image));
    EXPECT_EQ(a[i].annotations, b[i].annotations);
    EXPECT_EQ(a[i].image.shape(), (Shape{3, 64, 64}));
    EXPECT_FALSE(a[i].annotations.empty());
    for (float v : values(a[i].image)) {
      EXPECT_GE(v, 0.0f);
      EXPECT_LE(v, 1.0f);
    }
    for (const auto& ann : a[i].annotations) {
      EXPECT_GE(ann.cx - ann.w / 2, -1e-9);
      EXPECT_LE(ann.cx + ann.w / 2, 1 + 1e-9);
      EXPECT_GE(ann.cy - ann.h / 2, -1e-9);
      EXPECT_LE(ann.cy + ann.h / 2, 1 + 1e-9);
      EXPECT_GT(ann.w, 0);
      EXPECT_GT(ann.h, 0);
      EXPECT_TRUE(ann.class_id == 0 || ann.class_id == 1);
    }
  }
  EXPECT_NE(values(synth_dataset(1, 2, 64, 6)[0].image), values(a[0].image));
}

TEST(Synth, ClassBalance) {
  std::size_t counts[2] = {0, 0};
  for (const auto& s : synth_dataset(1000, 2, 32, 7))
    for (const auto& a : s.annotations) ++counts[a.class_id];
  const double frac = static_cast<double>(counts[0]) / static_cast<double>(counts[0] + counts[1]);
  EXPECT_GE(frac, 0.45);
  EXPECT_LE(frac, 0.55);
}

TEST(Ppm, RoundTripIsBitExact) {
  TempDir dir("ppm");
  std::vector<float> v(3 * 5 * 7);
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = static_cast<float>((i * 37) % 256) / 255.0f;
  const Tensor img({3, 5, 7}, v);
  write_ppm(dir.path() / "a.ppm", img);
  const Tensor back = read_ppm(dir.path() / "a.ppm");
  EXPECT_EQ(back.shape(), img.shape());
  EXPECT_EQ(values(back), v);
  write_text(dir.path() / "bad.ppm", "P3\n1 1\n255\n0 0 0\n");
  EXPECT_THROW(read_ppm(dir.path() / "bad.ppm"), LoadError);
}

TEST(Load, EmptyDirectoryIsEmptyDataset) {
  TempDir dir("empty");
  fs::create_directories(dir.path() / "images");
  fs::create_directories(dir.path() / "labels");
  EXPECT_TRUE(load_dataset(dir.path() / "images", dir.path() / "labels").empty());
}

TEST(Load, MissingLabelAndStrictMode) {
  TempDir dir("load");
  const auto samples = synth_dataset(3, 2, 32, 8);
  save_dataset(dir.path(), samples);
  const auto img = dir.path() / "images", lab = dir.path() / "labels";

  const auto loaded = load_dataset(img, lab);
  ASSERT_EQ(loaded.size(), 3u);
  for (std::size_t i = 0; i < 3; ++i) {
    // PPM stores 8 bits per channel.
    const auto got = values(loaded[i].image), want = values(samples[i].image);
    ASSERT_EQ(got.size(), want.size());
    for (std::size_t k = 0; k < got.size(); ++k) ASSERT_NEAR(got[k], want[k], 0.5 / 255 + 1e-6);
    ASSERT_EQ(loaded[i].annotations.size(), samples[i].annotations.size());
    for (std::size_t k = 0; k < samples[i].annotations.size(); ++k) {
      const auto &x = loaded[i].annotations[k], &y = samples[i].annotations[k];
      EXPECT_EQ(x.class_id, y.class_id);
      EXPECT_NEAR(x.cx, y.cx, 1e-6);
      EXPECT_NEAR(x.w, y.w, 1e-6);
    }
  }

  const auto first_label = lab / (fs::path(loaded[0].source_path).stem().string() + ".txt");
  fs::remove(first_label);
  std::vector<std::string> warnings;
  const auto relaxed = load_dataset(img, lab, {}, &warnings);
  ASSERT_EQ(relaxed.size(), 3u);
  EXPECT_TRUE(relaxed[0].annotations.empty());
  EXPECT_EQ(warnings.size(), 1u);
  LoadOptions strict;
  strict.strict = true;
  EXPECT_THROW(load_dataset(img, lab, strict), LoadError);

  write_text(first_label, "0 0.5 0.5 0.2 0.1\n0 0.5\n");
  try {
    load_dataset(img, lab, strict);
    FAIL();
  } catch (const ParseError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find(first_label.filename().string()), std::string::npos) << msg;
    EXPECT_NE(msg.find('2'), std::string::npos) << msg;
  }
}

}  // namespace
}  // namespace mfnet
