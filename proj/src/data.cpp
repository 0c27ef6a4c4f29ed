#include "mfnet/data.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>

#include "mfnet/error.hpp"

namespace mfnet {

namespace fs = std::filesystem;

namespace {

class Rng {
 public:
  explicit Rng(std::uint64_t seed) : engine_(seed) {}
  double uniform() { return static_cast<double>(engine_() >> 11) * (1.0 / 9007199254740992.0); }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  int below(int n) { return static_cast<int>(uniform() * n); }
  std::mt19937_64& engine() { return engine_; }

 private:
  std::mt19937_64 engine_;
};

std::string location(const std::string& source, int line_no) {
  std::string where = source.empty() ? "annotation" : source;
  if (line_no > 0) where += ":" + std::to_string(line_no);
  return where;
}

double parse_number(const std::string& token, const std::string& where) {
  double v = 0;
  const char* first = token.data();
  const char* last = first + token.size();
  auto [ptr, ec] = std::from_chars(first, last, v);
  if (ec != std::errc() || ptr != last || !std::isfinite(v)) {
    throw ParseError(where + ": non-numeric field '" + token + "'");
  }
  return v;
}

Tensor resize_bilinear(const Tensor& image, int out_h, int out_w) {
  const int c = image.dim(0), h = image.dim(1), w = image.dim(2);
  auto src = image.data();
  std::vector<float> out(static_cast<std::size_t>(c) * out_h * out_w);
  const double sy = static_cast<double>(h) / out_h;
  const double sx = static_cast<double>(w) / out_w;
  for (int y = 0; y < out_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, static_cast<double>(h - 1));
    const int y0 = static_cast<int>(fy);
    const int y1 = std::min(y0 + 1, h - 1);
    const double wy = fy - y0;
    for (int x = 0; x < out_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, static_cast<double>(w - 1));
      const int x0 = static_cast<int>(fx);
      const int x1 = std::min(x0 + 1, w - 1);
      const double wx = fx - x0;
      for (int ch = 0; ch < c; ++ch) {
        const float* p = src.data() + static_cast<std::size_t>(ch) * h * w;
        const double top = p[y0 * w + x0] * (1 - wx) + p[y0 * w + x1] * wx;
        const double bot = p[y1 * w + x0] * (1 - wx) + p[y1 * w + x1] * wx;
        out[(static_cast<std::size_t>(ch) * out_h + y) * out_w + x] =
            static_cast<float>(top * (1 - wy) + bot * wy);
      }
    }
  }
  return Tensor(Shape{c, out_h, out_w}, std::move(out));
}

void require_image(const Tensor& image, const char* op) {
  if (!image.defined() || image.rank() != 3 || image.dim(0) != 3) {
    throw DimensionError(std::string(op) + ": expected [3,h,w] image");
  }
}

}  // namespace

namespace detail {
// Exposed for tests: resize without the multiple-of-32 restriction.
Tensor resize_bilinear_any(const Tensor& image, int out_h, int out_w) {
  return resize_bilinear(image, out_h, out_w);
}
}  // namespace detail

// ===========================================================================
// Annotations
// ===========================================================================

Annotation parse_annotation_line(const std::string& line, int line_no, const std::string& source,
                                 int num_classes) {
  const std::string where = location(source, line_no);
  std::istringstream is(line);
  std::vector<std::string> fields;
  for (std::string tok; is >> tok;) fields.push_back(tok);
  if (fields.size() != 5) {
    throw ParseError(where + ": expected 5 fields 'class cx cy w h', got " + std::to_string(fields.size()));
  }
  const double cls = parse_number(fields[0], where);
  if (cls < 0 || cls != std::floor(cls)) throw ParseError(where + ": class id must be a non-negative integer");
  Annotation a;
  a.class_id = static_cast<int>(cls);
  a.cx = parse_number(fields[1], where);
  a.cy = parse_number(fields[2], where);
  a.w = parse_number(fields[3], where);
  a.h = parse_number(fields[4], where);
  for (double v : {a.cx, a.cy, a.w, a.h}) {
    if (v < 0.0 || v > 1.0) throw ParseError(where + ": coordinate out of range [0,1]");
  }
  if (num_classes > 0 && a.class_id >= num_classes) {
    throw ParseError(where + ": class id " + std::to_string(a.class_id) + " >= " + std::to_string(num_classes));
  }
  return a;
}

std::string format_annotation_line(const Annotation& a) {
  std::ostringstream os;
  os.precision(17);
  os << a.class_id << ' ' << a.cx << ' ' << a.cy << ' ' << a.w << ' ' << a.h;
  return os.str();
}

std::vector<Annotation> parse_annotation_file(const fs::path& path, int num_classes) {
  std::ifstream in(path);
  if (!in) throw ParseError("cannot read label file " + path.string());
  std::vector<Annotation> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    out.push_back(parse_annotation_line(line, line_no, path.string(), num_classes));
  }
  return out;
}

void write_annotation_file(const fs::path& path, const std::vector<Annotation>& anns) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write label file " + path.string());
  for (const auto& a : anns) out << format_annotation_line(a) << '\n';
}

// ===========================================================================
// Splitting and preprocessing
// ===========================================================================

SplitIndices split_dataset(std::size_t n, const SplitSpec& spec) {
  if (n < 3) throw ValidationError("split_dataset needs at least 3 items");
  if (spec.train_frac < 0 || spec.val_frac < 0 || spec.test_frac < 0 ||
      std::abs(spec.train_frac + spec.val_frac + spec.test_frac - 1.0) > 1e-9) {
    throw ValidationError("split fractions must be non-negative and sum to 1");
  }
  // Round before ceil/floor so products like 0.85 * 100 = 85.00000000000001
  // do not spill into the next integer.
  auto snap = [](double v) { return std::round(v * 1e9) / 1e9; };
  std::size_t train = static_cast<std::size_t>(std::ceil(snap(spec.train_frac * static_cast<double>(n))));
  std::size_t val = static_cast<std::size_t>(std::floor(snap(spec.val_frac * static_cast<double>(n))));
  train = std::min(train, n);
  val = std::min(val, n - train);

  std::vector<std::size_t> idx(n);
  std::iota(idx.begin(), idx.end(), 0);
  Rng rng(spec.seed);
  for (std::size_t i = n - 1; i > 0; --i) {
    const auto j = static_cast<std::size_t>(rng.uniform() * static_cast<double>(i + 1));
    std::swap(idx[i], idx[std::min(j, i)]);
  }
  SplitIndices out;
  out.train.assign(idx.begin(), idx.begin() + static_cast<std::ptrdiff_t>(train));
  out.val.assign(idx.begin() + static_cast<std::ptrdiff_t>(train),
                 idx.begin() + static_cast<std::ptrdiff_t>(train + val));
  out.test.assign(idx.begin() + static_cast<std::ptrdiff_t>(train + val), idx.end());
  return out;
}

Tensor contrast_stretch(const Tensor& image) {
  auto d = image.data();
  if (d.empty()) return image;
  const auto [lo_it, hi_it] = std::minmax_element(d.begin(), d.end());
  const double lo = *lo_it, hi = *hi_it;
  if (hi - lo <= 0) return image.detach();
  std::vector<float> out(d.size());
  for (std::size_t i = 0; i < d.size(); ++i) out[i] = static_cast<float>((d[i] - lo) / (hi - lo));
  return Tensor(image.shape(), std::move(out));
}

Tensor resize_square(const Tensor& image, int size) {
  require_image(image, "resize_square");
  if (size < 32 || size % 32 != 0) {
    throw ValidationError("resize target must be a positive multiple of 32, got " + std::to_string(size));
  }
  if (image.dim(1) == size && image.dim(2) == size) return image.detach();
  return resize_bilinear(image, size, size);
}

Tensor letterbox_square(const Tensor& image, int size, std::vector<Annotation>& annotations) {
  require_image(image, "letterbox_square");
  if (size < 32 || size % 32 != 0) {
    throw ValidationError("letterbox target must be a positive multiple of 32, got " + std::to_string(size));
  }
  const int h = image.dim(1), w = image.dim(2);
  const double scale = std::min(static_cast<double>(size) / h, static_cast<double>(size) / w);
  const int nh = std::max(1, static_cast<int>(std::lround(h * scale)));
  const int nw = std::max(1, static_cast<int>(std::lround(w * scale)));
  const Tensor inner = resize_bilinear(image, nh, nw);
  const int top = (size - nh) / 2, left = (size - nw) / 2;
  std::vector<float> out(static_cast<std::size_t>(3) * size * size, 0.5f);
  auto src = inner.data();
  for (int c = 0; c < 3; ++c) {
    for (int y = 0; y < nh; ++y) {
      for (int x = 0; x < nw; ++x) {
        out[(static_cast<std::size_t>(c) * size + top + y) * size + left + x] =
            src[(static_cast<std::size_t>(c) * nh + y) * nw + x];
      }
    }
  }
  for (auto& a : annotations) {
    a.cx = (left + a.cx * nw) / size;
    a.cy = (top + a.cy * nh) / size;
    a.w = a.w * nw / size;
    a.h = a.h * nh / size;
  }
  return Tensor(Shape{3, size, size}, std::move(out));
}

// ===========================================================================
// PPM
// ===========================================================================

Tensor read_ppm(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw LoadError("cannot read image " + path.string());
  auto next_token = [&]() {
    std::string tok;
    char ch;
    while (in.get(ch)) {
      if (ch == '#') {
        std::string skip;
        std::getline(in, skip);
        continue;
      }
      if (std::isspace(static_cast<unsigned char>(ch))) {
        if (!tok.empty()) break;
        continue;
      }
      tok.push_back(ch);
    }
    return tok;
  };
  if (next_token() != "P6") throw LoadError(path.string() + ": not a binary PPM (P6)");
  int w = 0, h = 0, maxval = 0;
  try {
    w = std::stoi(next_token());
    h = std::stoi(next_token());
    maxval = std::stoi(next_token());
  } catch (const std::exception&) {
    throw LoadError(path.string() + ": malformed PPM header");
  }
  if (w < 1 || h < 1 || maxval != 255) throw LoadError(path.string() + ": unsupported PPM geometry or maxval");
  std::vector<unsigned char> raw(static_cast<std::size_t>(w) * h * 3);
  in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (in.gcount() != static_cast<std::streamsize>(raw.size())) throw LoadError(path.string() + ": truncated PPM data");
  std::vector<float> out(raw.size());
  const std::size_t plane = static_cast<std::size_t>(w) * h;
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) out[c * plane + i] = raw[i * 3 + c] / 255.0f;
  }
  return Tensor(Shape{3, h, w}, std::move(out));
}

void write_ppm(const fs::path& path, const Tensor& image) {
  require_image(image, "write_ppm");
  const int h = image.dim(1), w = image.dim(2);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw LoadError("cannot write image " + path.string());
  out << "P6\n" << w << ' ' << h << "\n255\n";
  auto d = image.data();
  const std::size_t plane = static_cast<std::size_t>(w) * h;
  std::vector<unsigned char> raw(plane * 3);
  for (std::size_t i = 0; i < plane; ++i) {
    for (int c = 0; c < 3; ++c) {
      raw[i * 3 + c] = static_cast<unsigned char>(std::lround(std::clamp(d[c * plane + i], 0.0f, 1.0f) * 255.0f));
    }
  }
  out.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
}

// ===========================================================================
// Synthetic scenes
// ===========================================================================

namespace {

// Object-local coordinates u, v in [-1,1]. Returns whether the pixel belongs
// to the shape.
bool shape_hit(int cls, int variant, double u, double v) {
  if (cls % 2 == 0) {
    if (variant == 0) {
      // chevron: two wings meeting at the body
      return std::abs(v - (-0.55 + 1.1 * std::abs(u))) < 0.32;
    }
    // soaring silhouette: filled triangle pointing up
    return v > 2.0 * std::abs(u) - 1.0;
  }
  // quad-rotor: cross frame with four rotor dots
  const bool arm = std::abs(u) < 0.17 || std::abs(v) < 0.17;
  const double du = std::abs(u) - 0.72, dv = std::abs(v) - 0.72;
  const bool rotor = du * du + dv * dv < 0.28 * 0.28;
  return (arm && std::abs(u) < 0.75 && std::abs(v) < 0.75) || rotor;
}

}  // namespace

std::vector<Sample> synth_dataset(std::size_t n, int num_classes, int img_size, std::uint64_t seed) {
  if (n < 1) throw ValidationError("synth_dataset needs n >= 1");
  if (num_classes < 1) throw ValidationError("synth_dataset needs num_classes >= 1");
  if (img_size < 16) throw ValidationError("synth_dataset needs img_size >= 16");
  Rng rng(seed);
  std::vector<Sample> out;
  out.reserve(n);
  const std::size_t plane = static_cast<std::size_t>(img_size) * img_size;
  for (std::size_t s = 0; s < n; ++s) {
    std::vector<float> px(3 * plane);
    // sky gradient + mild texture
    std::array<double, 3> top{}, bottom{};
    for (int c = 0; c < 3; ++c) {
      top[c] = rng.uniform(0.55, 0.95);
      bottom[c] = rng.uniform(0.45, 0.9);
    }
    for (int y = 0; y < img_size; ++y) {
      const double t = static_cast<double>(y) / (img_size - 1);
      for (int x = 0; x < img_size; ++x) {
        const double noise = rng.uniform(-0.03, 0.03);
        for (int c = 0; c < 3; ++c) {
          px[c * plane + static_cast<std::size_t>(y) * img_size + x] =
              static_cast<float>(std::clamp(top[c] * (1 - t) + bottom[c] * t + noise, 0.0, 1.0));
        }
      }
    }

    Sample sample;
    sample.source_path = "synthetic/" + std::to_string(seed) + "/" + std::to_string(s);
    const int objects = 1 + rng.below(3);
    std::vector<BoxXYXY> placed;
    for (int o = 0; o < objects; ++o) {
      const int cls = rng.below(num_classes);
      const int variant = rng.below(2);
      const double side = rng.uniform(0.16, 0.32) * img_size;
      const double aspect = rng.uniform(0.8, 1.25);
      const double bw = side * std::sqrt(aspect), bh = side / std::sqrt(aspect);
      BoxXYXY box;
      bool ok = false;
      for (int attempt = 0; attempt < 20 && !ok; ++attempt) {
        const double x1 = rng.uniform(1.0, img_size - bw - 1.0);
        const double y1 = rng.uniform(1.0, img_size - bh - 1.0);
        box = {x1, y1, x1 + bw, y1 + bh};
        ok = std::none_of(placed.begin(), placed.end(), [&](const BoxXYXY& p) {
          return iou(p, {box.x1 - 2, box.y1 - 2, box.x2 + 2, box.y2 + 2}) > 0.0;
        });
      }
      if (!ok) continue;
      std::array<double, 3> color{};
      const double base = rng.uniform(0.02, 0.25);
      for (int c = 0; c < 3; ++c) color[c] = std::clamp(base + rng.uniform(-0.05, 0.05) + 0.12 * (cls / 2), 0.0, 1.0);

      int min_x = img_size, min_y = img_size, max_x = -1, max_y = -1;
      for (int y = static_cast<int>(box.y1); y <= static_cast<int>(box.y2) && y < img_size; ++y) {
        for (int x = static_cast<int>(box.x1); x <= static_cast<int>(box.x2) && x < img_size; ++x) {
          const double u = ((x + 0.5) - (box.x1 + box.x2) / 2) / (bw / 2);
          const double v = ((y + 0.5) - (box.y1 + box.y2) / 2) / (bh / 2);
          if (std::abs(u) > 1 || std::abs(v) > 1 || !shape_hit(cls, variant, u, v)) continue;
          for (int c = 0; c < 3; ++c) px[c * plane + static_cast<std::size_t>(y) * img_size + x] = static_cast<float>(color[c]);
          min_x = std::min(min_x, x);
          max_x = std::max(max_x, x);
          min_y = std::min(min_y, y);
          max_y = std::max(max_y, y);
        }
      }
      if (max_x < 0) continue;
      const BoxXYXY tight{static_cast<double>(min_x), static_cast<double>(min_y),
                          static_cast<double>(max_x + 1), static_cast<double>(max_y + 1)};
      placed.push_back(tight);
      const auto n4 = xyxy_to_xywhn(tight, img_size, img_size);
      sample.annotations.push_back({cls, n4[0], n4[1], n4[2], n4[3]});
    }
    sample.image = Tensor(Shape{3, img_size, img_size}, std::move(px));
    out.push_back(std::move(sample));
  }
  return out;
}

// ===========================================================================
// Directory datasets
// ===========================================================================

std::vector<Sample> load_dataset(const fs::path& image_dir, const fs::path& label_dir,
                                 const LoadOptions& options, std::vector<std::string>* warnings) {
  if (!fs::is_directory(image_dir)) throw LoadError("image directory not found: " + image_dir.string());
  std::vector<fs::path> images;
  for (const auto& entry : fs::directory_iterator(image_dir)) {
    if (entry.is_regular_file() && entry.path().extension() == ".ppm") images.push_back(entry.path());
  }
  std::sort(images.begin(), images.end());
  std::vector<Sample> out;
  for (const auto& img_path : images) {
    Sample s;
    s.source_path = img_path.string();
    s.image = read_ppm(img_path);
    const fs::path label = label_dir / (img_path.stem().string() + ".txt");
    if (fs::exists(label)) {
      s.annotations = parse_annotation_file(label, options.num_classes);
    } else if (options.strict) {
      throw LoadError("missing label file " + label.string() + " for " + img_path.string());
    } else if (warnings) {
      warnings->push_back("no label file for " + img_path.string() + "; treating as background");
    }
    if (options.contrast) s.image = contrast_stretch(s.image);
    if (options.resize_to > 0) {
      s.image = options.letterbox ? letterbox_square(s.image, options.resize_to, s.annotations)
                                  : resize_square(s.image, options.resize_to);
    }
    out.push_back(std::move(s));
  }
  return out;
}

void save_dataset(const fs::path& root, const std::vector<Sample>& samples) {
  fs::create_directories(root / "images");
  fs::create_directories(root / "labels");
  for (std::size_t i = 0; i < samples.size(); ++i) {
    char stem[32];
    std::snprintf(stem, sizeof(stem), "%06zu", i);
    write_ppm(root / "images" / (std::string(stem) + ".ppm"), samples[i].image);
    write_annotation_file(root / "labels" / (std::string(stem) + ".txt"), samples[i].annotations);
  }
}

Tensor stack_images(const std::vector<const Sample*>& samples) {
  if (samples.empty()) throw ValidationError("stack_images: empty batch");
  const Shape first = samples[0]->image.shape();
  std::vector<float> out;
  out.reserve(samples.size() * samples[0]->image.numel());
  for (const Sample* s : samples) {
    if (s->image.shape() != first) throw DimensionError("stack_images: mixed image shapes");
    out.insert(out.end(), s->image.data().begin(), s->image.data().end());
  }
  Shape shape{static_cast<int>(samples.size())};
  shape.insert(shape.end(), first.begin(), first.end());
  return Tensor(std::move(shape), std::move(out));
}

void draw_box(Tensor& image, const BoxXYXY& box, const std::array<float, 3>& rgb, int thickness) {
  require_image(image, "draw_box");
  const int h = image.dim(1), w = image.dim(2);
  const BoxXYXY b = clip_box(box, w - 1, h - 1);
  const int x1 = static_cast<int>(std::lround(b.x1)), x2 = static_cast<int>(std::lround(b.x2));
  const int y1 = static_cast<int>(std::lround(b.y1)), y2 = static_cast<int>(std::lround(b.y2));
  auto d = image.mutable_data();
  const std::size_t plane = static_cast<std::size_t>(w) * h;
  auto put = [&](int x, int y) {
    if (x < 0 || y < 0 || x >= w || y >= h) return;
    for (int c = 0; c < 3; ++c) d[c * plane + static_cast<std::size_t>(y) * w + x] = rgb[c];
  };
  for (int t = 0; t < thickness; ++t) {
    for (int x = x1; x <= x2; ++x) {
      put(x, y1 + t);
      put(x, y2 - t);
    }
    for (int y = y1; y <= y2; ++y) {
      put(x1 + t, y);
      put(x2 - t, y);
    }
  }
}

}  // namespace mfnet
