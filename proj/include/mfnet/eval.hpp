#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"
#include "mfnet/boxes.hpp"
#include "mfnet/data.hpp"
#include "mfnet/model.hpp"

namespace mfnet {

struct GroundTruth {
  BoxXYXY box;
  int class_id = 0;
};

struct ClassMatch {
  int tp = 0, fp = 0, fn = 0;
  std::vector<double> ious;                      // one per TP
  std::vector<std::pair<double, bool>> scored;   // (score, is_tp) per detection

  void merge(const ClassMatch& other);
};

// Per-class matching state; index = class id.
struct MatchSet {
  std::vector<ClassMatch> classes;

  void merge(const MatchSet& other);
};

// Per class, detections are visited by descending score (ties by input
// order); each takes the unmatched same-class ground truth with the highest
// IoU >= iou_thr (ties to the lower index) as a TP, otherwise it is a FP.
// Ground truths left over are FNs.
MatchSet match_detections(std::span<const Detection> dets, std::span<const GroundTruth> gts, int num_classes,
                          double iou_thr = 0.5);

struct PrecisionRecall {
  double precision = 0;
  double recall = 0;
};

// Zero denominators give 0.
PrecisionRecall precision_recall(const ClassMatch& m);

// Mean of per-class precisions; empty input raises ValidationError.
double paper_map(std::span<const double> per_class_precision);

// All-point interpolated area under the precision/recall curve with the
// monotone envelope. Pairs are ordered by descending score (stable).
double ap50(std::vector<std::pair<double, bool>> scored, int n_gt);

// Mean IoU of matched TPs; 0 without TPs.
double mean_iou(const ClassMatch& m);

// Percentages.
struct ReportRow {
  std::string name;
  double precision = 0, recall = 0, map = 0, iou = 0;
};

struct MetricsReport {
  std::vector<ReportRow> classes;
  ReportRow average;  // unweighted mean of the class rows
  // Mean of class precisions as a fraction ("paper-mAP") and mean AP@0.5.
  double paper_map = 0;
  double map50 = 0;
};

// Builds the Average row from explicit class rows.
MetricsReport report_from_rows(std::vector<ReportRow> rows);

// Rows from matches. The per-class "mAP" column is AP@0.5.
MetricsReport report_table(const MatchSet& ms, const std::vector<std::string>& class_names);

// One-decimal rounding where exact halves go down (92.45 -> 92.4).
double round_half_down_1dp(double value);

nlohmann::json report_to_json(const MetricsReport& r);
std::string report_to_text(const MetricsReport& r);

// Class names used in reports.
std::vector<std::string> default_class_names(int num_classes);

// Raw head maps for one batch -> per-image detections after NMS. Scores are
// sigmoid(obj) * max softmax(class); boxes are clipped to the image.
struct PostprocessOptions {
  DecodeMode decode = DecodeMode::kPaper;
  double conf = 0.25;
  double iou = 0.45;
};

std::vector<std::vector<Detection>> postprocess(const std::array<Tensor, 3>& maps, const ModelSpec& spec,
                                                const PostprocessOptions& opts);

// Annotations of one image as pixel boxes.
std::vector<GroundTruth> ground_truth_boxes(const std::vector<Annotation>& anns, int img_w, int img_h);

// JSON-lines dump, one {image, class, box_xyxy, score} object per line.
struct DumpRecord {
  std::string image;
  Detection det;
};
void write_detections_jsonl(const std::filesystem::path& path, const std::vector<DumpRecord>& records);
std::vector<DumpRecord> read_detections_jsonl(const std::filesystem::path& path);

struct BenchResult {
  double preprocess_ms = 0;
  double inference_ms = 0;
  double nms_ms = 0;
  double fps = 0;
  int images = 0;
};

// Per-image mean stage times over `images` (raw [3,h,w] rasters), after
// `warmup_iters` untimed passes. fps = 1000 / (sum of stage means).
BenchResult benchmark(const Network<float>& net, const std::vector<Tensor>& images, int warmup_iters,
                      const PostprocessOptions& opts = {});

}  // namespace mfnet
