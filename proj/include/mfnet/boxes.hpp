#pragma once

#include <array>
#include <span>
#include <string>
#include <vector>

namespace mfnet {

struct BoxXYXY {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  bool operator==(const BoxXYXY&) const = default;
};

struct Detection {
  BoxXYXY box;
  double score = 0;  // [0,1]
  int class_id = 0;
};

// One anchor's raw outputs at one grid cell.
struct RawCellPred {
  double t_x = 0, t_y = 0, t_w = 0, t_h = 0;
  double obj_logit = 0;
  std::vector<double> class_logits;
  int c_x = 0, c_y = 0;          // cell
  double p_w = 0, p_h = 0;       // anchor, pixels
  int stride = 1;
};

// kPaper: b_w = p_w * sigmoid(t_w)^2 (as printed).
// kV5:    b_w = p_w * (2 * sigmoid(t_w))^2.
// Both:   b_x = 2 * sigmoid(t_x) - 0.5 + c_x (grid units, scaled by stride).
enum class DecodeMode { kPaper, kV5 };

DecodeMode parse_decode_mode(const std::string& text);
const char* to_string(DecodeMode mode);

// Size multiplier on the anchor for one raw size output.
double decode_size_factor(double t, DecodeMode mode);

BoxXYXY decode(const RawCellPred& p, DecodeMode mode);

double iou(const BoxXYXY& a, const BoxXYXY& b);

// Class-aware greedy suppression. Detections below conf_thr are dropped; the
// rest are visited by descending score (ties by input order) and a detection
// is suppressed when its IoU with a kept detection of the same class exceeds
// iou_thr. Output is sorted by descending score.
std::vector<Detection> nms(std::span<const Detection> dets, double iou_thr = 0.45,
                           double conf_thr = 0.25);

// Normalized center/size to pixel corners. Inputs must lie in [0,1].
BoxXYXY xywhn_to_xyxy(double cx, double cy, double w, double h, double img_w, double img_h);
std::array<double, 4> xyxy_to_xywhn(const BoxXYXY& box, double img_w, double img_h);

BoxXYXY clip_box(const BoxXYXY& box, double img_w, double img_h);

}  // namespace mfnet
