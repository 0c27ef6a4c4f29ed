#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "mfnet/boxes.hpp"
#include "mfnet/tensor.hpp"

namespace mfnet {

// One YOLO-Darknet TXT record: "class cx cy w h", all coordinates normalized.
struct Annotation {
  int class_id = 0;
  double cx = 0, cy = 0, w = 0, h = 0;

  double area() const { return w * h; }
  bool operator==(const Annotation&) const = default;
};

struct Sample {
  Tensor image;  // [3,h,w], values in [0,1]
  std::vector<Annotation> annotations;
  std::string source_path;
};

struct SplitSpec {
  double train_frac = 0.85;
  double val_frac = 0.10;
  double test_frac = 0.05;
  std::uint64_t seed = 0;
};

struct SplitIndices {
  std::vector<std::size_t> train, val, test;
};

// Parses one annotation line; `line_no` and `source` only decorate errors.
// `num_classes <= 0` skips the class upper-bound check.
Annotation parse_annotation_line(const std::string& line, int line_no = 0,
                                 const std::string& source = "", int num_classes = 0);
std::string format_annotation_line(const Annotation& a);
std::vector<Annotation> parse_annotation_file(const std::filesystem::path& path, int num_classes = 0);
void write_annotation_file(const std::filesystem::path& path, const std::vector<Annotation>& anns);

// Seeded shuffle, then train = ceil(0.85 n), val = floor(0.10 n), test = rest.
SplitIndices split_dataset(std::size_t n, const SplitSpec& spec = {});

// Global min-max stretch to [0,1]; constant images are returned unchanged.
Tensor contrast_stretch(const Tensor& image);

// Bilinear square resize (half-pixel centers). `size` must be a multiple of 32.
Tensor resize_square(const Tensor& image, int size);

// Aspect-preserving resize onto a gray square canvas; annotations are mapped
// into the padded frame.
Tensor letterbox_square(const Tensor& image, int size, std::vector<Annotation>& annotations);

// Binary PPM (P6, maxval 255).
Tensor read_ppm(const std::filesystem::path& path);
void write_ppm(const std::filesystem::path& path, const Tensor& image);

// Procedural bird (class 0: chevrons / triangles) and drone (class 1: cross
// with rotor dots) scenes with exact labels. Classes beyond 1 reuse the two
// shapes with distinct tints.
std::vector<Sample> synth_dataset(std::size_t n, int num_classes, int img_size, std::uint64_t seed);

struct LoadOptions {
  bool strict = false;       // missing label file becomes an error
  int num_classes = 0;       // > 0 enables class-range validation
  int resize_to = 0;         // > 0 resizes every image
  bool contrast = false;     // apply contrast_stretch
  bool letterbox = false;    // resize via letterbox_square instead
};

// Pairs image_dir/*.ppm with label_dir/<stem>.txt, sorted by path.
std::vector<Sample> load_dataset(const std::filesystem::path& image_dir,
                                 const std::filesystem::path& label_dir,
                                 const LoadOptions& options = {},
                                 std::vector<std::string>* warnings = nullptr);

// Writes images/*.ppm and labels/*.txt under root.
void save_dataset(const std::filesystem::path& root, const std::vector<Sample>& samples);

// Stack samples [3,s,s] into a batch [b,3,s,s].
Tensor stack_images(const std::vector<const Sample*>& samples);

// Outline drawing used for annotated outputs; clipped to the image.
void draw_box(Tensor& image, const BoxXYXY& box, const std::array<float, 3>& rgb, int thickness = 1);

namespace detail {
// Bilinear resize with half-pixel centers and no size restriction.
Tensor resize_bilinear_any(const Tensor& image, int out_h, int out_w);
}  // namespace detail

}  // namespace mfnet
