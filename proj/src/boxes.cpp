#include "mfnet/boxes.hpp"

#include <algorithm>
#include <numeric>
#include <string>

#include "mfnet/error.hpp"
#include "mfnet/tensor.hpp"

namespace mfnet {

DecodeMode parse_decode_mode(const std::string& text) {
  if (text == "paper") return DecodeMode::kPaper;
  if (text == "v5") return DecodeMode::kV5;
  throw ConfigError("unknown decode mode '" + text + "' (expected paper|v5)");
}

const char* to_string(DecodeMode mode) { return mode == DecodeMode::kPaper ? "paper" : "v5"; }

double decode_size_factor(double t, DecodeMode mode) {
  const double s = sigmoid(t);
  return mode == DecodeMode::kPaper ? s * s : 4.0 * s * s;
}

BoxXYXY decode(const RawCellPred& p, DecodeMode mode) {
  const double bx = (2.0 * sigmoid(p.t_x) - 0.5 + p.c_x) * p.stride;
  const double by = (2.0 * sigmoid(p.t_y) - 0.5 + p.c_y) * p.stride;
  const double bw = p.p_w * decode_size_factor(p.t_w, mode);
  const double bh = p.p_h * decode_size_factor(p.t_h, mode);
  return {bx - bw / 2, by - bh / 2, bx + bw / 2, by + bh / 2};
}

double iou(const BoxXYXY& a, const BoxXYXY& b) {
  const double iw = std::max(0.0, std::min(a.x2, b.x2) - std::max(a.x1, b.x1));
  const double ih = std::max(0.0, std::min(a.y2, b.y2) - std::max(a.y1, b.y1));
  const double inter = iw * ih;
  const double uni = a.area() + b.area() - inter;
  return uni > 0 ? inter / uni : 0.0;
}

std::vector<Detection> nms(std::span<const Detection> dets, double iou_thr, double conf_thr) {
  if (iou_thr < 0 || iou_thr > 1 || conf_thr < 0 || conf_thr > 1) {
    throw ValidationError("nms thresholds must lie in [0,1]");
  }
  std::vector<std::size_t> order;
  for (std::size_t i = 0; i < dets.size(); ++i) {
    if (dets[i].score >= conf_thr) order.push_back(i);
  }
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return dets[a].score > dets[b].score; });
  std::vector<Detection> kept;
  for (std::size_t i : order) {
    const Detection& d = dets[i];
    const bool suppressed = std::any_of(kept.begin(), kept.end(), [&](const Detection& k) {
      return k.class_id == d.class_id && iou(k.box, d.box) > iou_thr;
    });
    if (!suppressed) kept.push_back(d);
  }
  return kept;
}

BoxXYXY xywhn_to_xyxy(double cx, double cy, double w, double h, double img_w, double img_h) {
  for (double v : {cx, cy, w, h}) {
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("normalized box values must lie in [0,1]");
  }
  return {(cx - w / 2) * img_w, (cy - h / 2) * img_h, (cx + w / 2) * img_w, (cy + h / 2) * img_h};
}

std::array<double, 4> xyxy_to_xywhn(const BoxXYXY& box, double img_w, double img_h) {
  return {(box.x1 + box.x2) / 2 / img_w, (box.y1 + box.y2) / 2 / img_h, box.width() / img_w,
          box.height() / img_h};
}

BoxXYXY clip_box(const BoxXYXY& box, double img_w, double img_h) {
  return {std::clamp(box.x1, 0.0, img_w), std::clamp(box.y1, 0.0, img_h),
          std::clamp(box.x2, 0.0, img_w), std::clamp(box.y2, 0.0, img_h)};
}

}  // namespace mfnet
