#include "mfnet/eval.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <sstream>

#include "mfnet/error.hpp"

namespace mfnet {

using nlohmann::json;

void ClassMatch::merge(const ClassMatch& other) {
  tp += other.tp;
  fp += other.fp;
  fn += other.fn;
  ious.insert(ious.end(), other.ious.begin(), other.ious.end());
  scored.insert(scored.end(), other.scored.begin(), other.scored.end());
}

void MatchSet::merge(const MatchSet& other) {
  if (classes.size() < other.classes.size()) classes.resize(other.classes.size());
  for (std::size_t c = 0; c < other.classes.size(); ++c) classes[c].merge(other.classes[c]);
}

MatchSet match_detections(std::span<const Detection> dets, std::span<const GroundTruth> gts, int num_classes,
                          double iou_thr) {
  if (num_classes < 1) throw ValidationError("match_detections: num_classes must be >= 1");
  MatchSet ms;
  ms.classes.resize(static_cast<std::size_t>(num_classes));
  for (const auto& d : dets) {
    if (d.class_id < 0 || d.class_id >= num_classes) throw ValidationError("match_detections: detection class out of range");
  }
  for (const auto& g : gts) {
    if (g.class_id < 0 || g.class_id >= num_classes) throw ValidationError("match_detections: ground-truth class out of range");
  }
  for (int c = 0; c < num_classes; ++c) {
    ClassMatch& cm = ms.classes[static_cast<std::size_t>(c)];
    std::vector<std::size_t> order, truth;
    for (std::size_t i = 0; i < dets.size(); ++i) {
      if (dets[i].class_id == c) order.push_back(i);
    }
    for (std::size_t i = 0; i < gts.size(); ++i) {
      if (gts[i].class_id == c) truth.push_back(i);
    }
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
    std::vector<bool> used(truth.size(), false);
    for (std::size_t i : order) {
      int best = -1;
      double best_iou = iou_thr;
      for (std::size_t j = 0; j < truth.size(); ++j) {
        if (used[j]) continue;
        const double v = iou(dets[i].box, gts[truth[j]].box);
        if (v >= best_iou && (best < 0 || v > best_iou)) {
          best = static_cast<int>(j);
          best_iou = v;
        }
      }
      if (best >= 0) {
        used[static_cast<std::size_t>(best)] = true;
        ++cm.tp;
        cm.ious.push_back(best_iou);
        cm.scored.emplace_back(dets[i].score, true);
      } else {
        ++cm.fp;
        cm.scored.emplace_back(dets[i].score, false);
      }
    }
    cm.fn = static_cast<int>(std::count(used.begin(), used.end(), false));
  }
  return ms;
}

PrecisionRecall precision_recall(const ClassMatch& m) {
  PrecisionRecall pr;
  if (m.tp + m.fp > 0) pr.precision = static_cast<double>(m.tp) / (m.tp + m.fp);
  if (m.tp + m.fn > 0) pr.recall = static_cast<double>(m.tp) / (m.tp + m.fn);
  return pr;
}

double paper_map(std::span<const double> per_class_precision) {
  if (per_class_precision.empty()) throw ValidationError("paper_map: no classes");
  return std::accumulate(per_class_precision.begin(), per_class_precision.end(), 0.0) /
         static_cast<double>(per_class_precision.size());
}

double ap50(std::vector<std::pair<double, bool>> scored, int n_gt) {
  if (n_gt <= 0) return 0.0;
  std::stable_sort(scored.begin(), scored.end(), [](const auto& a, const auto& b) { return a.first > b.first; });
  std::vector<double> prec, rec;
  int tp = 0;
  for (std::size_t i = 0; i < scored.size(); ++i) {
    if (scored[i].second) ++tp;
    prec.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
    rec.push_back(static_cast<double>(tp) / n_gt);
  }
  for (std::size_t i = prec.size(); i-- > 1;) prec[i - 1] = std::max(prec[i - 1], prec[i]);
  double ap = 0, prev_r = 0;
  for (std::size_t i = 0; i < prec.size(); ++i) {
    ap += (rec[i] - prev_r) * prec[i];
    prev_r = rec[i];
  }
  return ap;
}

double mean_iou(const ClassMatch& m) {
  if (m.ious.empty()) return 0.0;
  return std::accumulate(m.ious.begin(), m.ious.end(), 0.0) / static_cast<double>(m.ious.size());
}

MetricsReport report_from_rows(std::vector<ReportRow> rows) {
  if (rows.empty()) throw ValidationError("report: at least one class row is required");
  MetricsReport r;
  r.classes = std::move(rows);
  r.average.name = "Average";
  const double n = static_cast<double>(r.classes.size());
  for (const auto& row : r.classes) {
    r.average.precision += row.precision / n;
    r.average.recall += row.recall / n;
    r.average.map += row.map / n;
    r.average.iou += row.iou / n;
  }
  std::vector<double> precisions;
  for (const auto& row : r.classes) precisions.push_back(row.precision / 100.0);
  r.paper_map = paper_map(precisions);
  r.map50 = r.average.map / 100.0;
  return r;
}

MetricsReport report_table(const MatchSet& ms, const std::vector<std::string>& class_names) {
  std::vector<ReportRow> rows;
  for (std::size_t c = 0; c < ms.classes.size(); ++c) {
    const ClassMatch& m = ms.classes[c];
    const PrecisionRecall pr = precision_recall(m);
    ReportRow row;
    row.name = c < class_names.size() ? class_names[c] : "class" + std::to_string(c);
    row.precision = 100.0 * pr.precision;
    row.recall = 100.0 * pr.recall;
    row.map = 100.0 * ap50(m.scored, m.tp + m.fn);
    row.iou = 100.0 * mean_iou(m);
    rows.push_back(row);
  }
  return report_from_rows(std::move(rows));
}

double round_half_down_1dp(double value) {
  const double scaled = value * 10.0;
  const double lo = std::floor(scaled);
  // Treat values within rounding noise of an exact half as that half.
  const double up = scaled - lo > 0.5 + 1e-9 ? 1.0 : 0.0;
  return (lo + up) / 10.0;
}

namespace {

json row_json(const ReportRow& r) {
  return {{"class", r.name}, {"precision", r.precision}, {"recall", r.recall}, {"map50", r.map}, {"iou", r.iou}};
}

std::string fmt1(double v) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(1) << round_half_down_1dp(v);
  return os.str();
}

}  // namespace

json report_to_json(const MetricsReport& r) {
  json rows = json::array();
  for (const auto& row : r.classes) rows.push_back(row_json(row));
  return {{"classes", rows}, {"average", row_json(r.average)}, {"paper_map", r.paper_map}, {"map50", r.map50}};
}

std::string report_to_text(const MetricsReport& r) {
  std::ostringstream os;
  auto line = [&](const ReportRow& row) {
    os << std::left << std::setw(10) << row.name << std::right << std::setw(14) << fmt1(row.precision)
       << std::setw(12) << fmt1(row.recall) << std::setw(14) << fmt1(row.map) << std::setw(10) << fmt1(row.iou)
       << '\n';
  };
  os << std::left << std::setw(10) << "Class" << std::right << std::setw(14) << "Precision(%)" << std::setw(12)
     << "Recall(%)" << std::setw(14) << "AP@0.5(%)" << std::setw(10) << "IoU(%)" << '\n';
  for (const auto& row : r.classes) line(row);
  line(r.average);
  os << "paper-mAP (mean class precision): " << fmt1(100.0 * r.paper_map) << "%\n";
  os << "mAP@0.5: " << fmt1(100.0 * r.map50) << "%\n";
  return os.str();
}

std::vector<std::string> default_class_names(int num_classes) {
  std::vector<std::string> names;
  for (int c = 0; c < num_classes; ++c) {
    if (c == 0) names.push_back("bird");
    else if (c == 1) names.push_back("drone");
    else names.push_back("class" + std::to_string(c));
  }
  return names;
}

std::vector<std::vector<Detection>> postprocess(const std::array<Tensor, 3>& maps, const ModelSpec& spec,
                                                const PostprocessOptions& opts) {
  const int batch = maps[0].dim(0);
  std::vector<std::vector<Detection>> out(static_cast<std::size_t>(batch));
  std::vector<double> prob;
  for (int b = 0; b < batch; ++b) {
    std::vector<Detection> cands;
    for (int l = 0; l < 3; ++l) {
      const Tensor& m = maps[l];
      const int na = m.dim(1), z = m.dim(2), k = m.dim(4);
      const int nc = k - 5;
      if (nc != spec.num_classes || z != spec.img_size / spec.strides[l]) {
        throw DimensionError("postprocess: head map " + shape_str(m.shape()) + " does not match the spec");
      }
      prob.resize(static_cast<std::size_t>(nc));
      auto d = m.data();
      for (int a = 0; a < na; ++a) {
        for (int gy = 0; gy < z; ++gy) {
          for (int gx = 0; gx < z; ++gx) {
            const float* p = d.data() + ((((static_cast<std::size_t>(b) * na + a) * z + gy) * z + gx) * k);
            const double obj = sigmoid(p[4]);
            if (obj < opts.conf) continue;  // score <= obj, so nothing here can pass
            const double mx = *std::max_element(p + 5, p + k);
            double zsum = 0;
            int best = 0;
            for (int c = 0; c < nc; ++c) {
              zsum += (prob[c] = std::exp(p[5 + c] - mx));
              if (p[5 + c] > p[5 + best]) best = c;
            }
            const double score = obj * prob[best] / zsum;
            if (score < opts.conf) continue;
            RawCellPred raw;
            raw.t_x = p[0];
            raw.t_y = p[1];
            raw.t_w = p[2];
            raw.t_h = p[3];
            raw.c_x = gx;
            raw.c_y = gy;
            raw.p_w = spec.anchors[l][a].w;
            raw.p_h = spec.anchors[l][a].h;
            raw.stride = spec.strides[l];
            cands.push_back({clip_box(decode(raw, opts.decode), spec.img_size, spec.img_size), score, best});
          }
        }
      }
    }
    out[b] = nms(cands, opts.iou, opts.conf);
  }
  return out;
}

std::vector<GroundTruth> ground_truth_boxes(const std::vector<Annotation>& anns, int img_w, int img_h) {
  std::vector<GroundTruth> out;
  for (const auto& a : anns) out.push_back({xywhn_to_xyxy(a.cx, a.cy, a.w, a.h, img_w, img_h), a.class_id});
  return out;
}

void write_detections_jsonl(const std::filesystem::path& path, const std::vector<DumpRecord>& records) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  for (const auto& r : records) {
    json j = {{"image", r.image},
              {"class", r.det.class_id},
              {"box_xyxy", {r.det.box.x1, r.det.box.y1, r.det.box.x2, r.det.box.y2}},
              {"score", r.det.score}};
    out << j.dump() << '\n';
  }
}

std::vector<DumpRecord> read_detections_jsonl(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw LoadError("cannot read " + path.string());
  std::vector<DumpRecord> out;
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    try {
      const json j = json::parse(line);
      DumpRecord r;
      r.image = j.at("image").get<std::string>();
      r.det.class_id = j.at("class").get<int>();
      const auto& b = j.at("box_xyxy");
      r.det.box = {b.at(0).get<double>(), b.at(1).get<double>(), b.at(2).get<double>(), b.at(3).get<double>()};
      r.det.score = j.value("score", 1.0);
      out.push_back(std::move(r));
    } catch (const json::exception& e) {
      throw ParseError(path.string() + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

BenchResult benchmark(const Network<float>& net, const std::vector<Tensor>& images, int warmup_iters,
                      const PostprocessOptions& opts) {
  if (images.empty()) throw ValidationError("benchmark: no images");
  using clock = std::chrono::steady_clock;
  const ModelSpec& spec = net.spec();
  NoGradGuard no_grad;
  auto run = [&](const Tensor& raw, double* t_pre, double* t_inf, double* t_nms) {
    const auto t0 = clock::now();
    Tensor img = contrast_stretch(raw);
    if (img.dim(1) != spec.img_size || img.dim(2) != spec.img_size) {
      img = detail::resize_bilinear_any(img, spec.img_size, spec.img_size);
    }
    const Tensor batch = reshape(img, Shape{1, 3, spec.img_size, spec.img_size});
    const auto t1 = clock::now();
    const auto maps = net.forward(batch);
    const auto t2 = clock::now();
    const auto dets = postprocess(maps, spec, opts);
    const auto t3 = clock::now();
    auto ms = [](auto a, auto b) { return std::chrono::duration<double, std::milli>(b - a).count(); };
    *t_pre += ms(t0, t1);
    *t_inf += ms(t1, t2);
    *t_nms += ms(t2, t3);
    return dets.size();
  };
  double sink = 0;
  for (int i = 0; i < warmup_iters; ++i) run(images[static_cast<std::size_t>(i) % images.size()], &sink, &sink, &sink);
  BenchResult r;
  for (const auto& img : images) run(img, &r.preprocess_ms, &r.inference_ms, &r.nms_ms);
  const double n = static_cast<double>(images.size());
  r.images = static_cast<int>(images.size());
  r.preprocess_ms /= n;
  r.inference_ms /= n;
  r.nms_ms /= n;
  const double total = r.preprocess_ms + r.inference_ms + r.nms_ms;
  r.fps = total > 0 ? 1000.0 / total : 0.0;
  return r;
}

}  // namespace mfnet
