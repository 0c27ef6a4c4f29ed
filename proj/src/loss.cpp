#include "mfnet/loss.hpp"

#include <algorithm>
#include <cmath>
#include <tuple>

#include "mfnet/error.hpp"

namespace mfnet {

std::size_t LevelTarget::positives() const {
  return static_cast<std::size_t>(std::count(indicator.begin(), indicator.end(), std::uint8_t{1}));
}

std::size_t GridTarget::positives() const {
  std::size_t n = 0;
  for (const auto& l : levels) n += l.positives();
  return n;
}

double shape_iou(double w1, double h1, double w2, double h2) {
  const double inter = std::min(w1, w2) * std::min(h1, h2);
  const double uni = w1 * h1 + w2 * h2 - inter;
  return uni > 0 ? inter / uni : 0.0;
}

namespace {

// True when `a` should own a contested slot over `b`.
bool wins(const Annotation& a, const Annotation& b) {
  if (a.area() != b.area()) return a.area() > b.area();
  return std::tie(a.class_id, a.cx, a.cy, a.w, a.h) < std::tie(b.class_id, b.cx, b.cy, b.w, b.h);
}

void validate_label(const Annotation& a, int num_classes) {
  for (double v : {a.cx, a.cy, a.w, a.h}) {
    if (!(v >= 0.0 && v <= 1.0)) throw ValidationError("label geometry outside [0,1]");
  }
  if (a.class_id < 0 || a.class_id >= num_classes) {
    throw ValidationError("label class " + std::to_string(a.class_id) + " outside [0," +
                          std::to_string(num_classes) + ")");
  }
}

}  // namespace

GridTarget assign_targets(const std::vector<std::vector<Annotation>>& labels, const ModelSpec& spec,
                          const AssignOptions& options) {
  GridTarget out;
  out.img_size = spec.img_size;
  const int batch = static_cast<int>(labels.size());
  for (int l = 0; l < 3; ++l) {
    LevelTarget& lt = out.levels[l];
    lt.batch = batch;
    lt.anchors = static_cast<int>(spec.anchors[l].size());
    lt.stride = spec.strides[l];
    lt.grid = spec.img_size / spec.strides[l];
    lt.anchor_sizes = spec.anchors[l];
    const std::size_t n = static_cast<std::size_t>(batch) * lt.anchors * lt.grid * lt.grid;
    lt.indicator.assign(n, 0);
    lt.box.assign(n, {0, 0, 0, 0});
    lt.cls.assign(n, 0);
  }

  for (int b = 0; b < batch; ++b) {
    for (const auto& ann : labels[b]) validate_label(ann, spec.num_classes);
    for (int l = 0; l < 3; ++l) {
      LevelTarget& lt = out.levels[l];
      std::vector<const Annotation*> owner(static_cast<std::size_t>(lt.anchors) * lt.grid * lt.grid, nullptr);
      for (const auto& ann : labels[b]) {
        const double wpx = ann.w * spec.img_size, hpx = ann.h * spec.img_size;
        int best = 0;
        double best_iou = -1;
        for (int a = 0; a < lt.anchors; ++a) {
          const double s = shape_iou(wpx, hpx, lt.anchor_sizes[a].w, lt.anchor_sizes[a].h);
          if (s > best_iou) {
            best_iou = s;
            best = a;
          }
        }
        const double fx = ann.cx * lt.grid, fy = ann.cy * lt.grid;
        const int gx = std::min(static_cast<int>(fx), lt.grid - 1);
        const int gy = std::min(static_cast<int>(fy), lt.grid - 1);
        std::vector<std::pair<int, int>> cells{{gx, gy}};
        if (options.neighbor_cells) {
          const double ox = fx - gx, oy = fy - gy;
          if (ox < 0.5 && gx > 0) cells.emplace_back(gx - 1, gy);
          if (ox > 0.5 && gx < lt.grid - 1) cells.emplace_back(gx + 1, gy);
          if (oy < 0.5 && gy > 0) cells.emplace_back(gx, gy - 1);
          if (oy > 0.5 && gy < lt.grid - 1) cells.emplace_back(gx, gy + 1);
        }
        for (auto [cx, cy] : cells) {
          const std::size_t slot = (static_cast<std::size_t>(best) * lt.grid + cy) * lt.grid + cx;
          if (owner[slot] == nullptr || wins(ann, *owner[slot])) owner[slot] = &ann;
        }
      }
      for (std::size_t slot = 0; slot < owner.size(); ++slot) {
        if (owner[slot] == nullptr) continue;
        const std::size_t idx = static_cast<std::size_t>(b) * owner.size() + slot;
        lt.indicator[idx] = 1;
        lt.box[idx] = {owner[slot]->cx, owner[slot]->cy, owner[slot]->w, owner[slot]->h};
        lt.cls[idx] = owner[slot]->class_id;
      }
    }
  }
  return out;
}

void LossWeights::validate() const {
  for (double v : {cls, obj, loc, noobj, coord}) {
    if (!(v >= 0.0) || !std::isfinite(v)) throw ConfigError("loss weights must be finite and >= 0");
  }
}

double box_loss(const std::array<double, 4>& target, const std::array<double, 4>& pred, double coord) {
  if (target[2] < 0 || target[3] < 0 || pred[2] < 0 || pred[3] < 0) {
    throw ContractError("box_loss: negative width or height");
  }
  const double dx = target[0] - pred[0], dy = target[1] - pred[1];
  const double dw = std::sqrt(target[2]) - std::sqrt(pred[2]);
  const double dh = std::sqrt(target[3]) - std::sqrt(pred[3]);
  return dx * dx + dy * dy + coord * (dw * dw + dh * dh);
}

namespace {

template <class T>
void check_shapes(const std::array<BasicTensor<T>, 3>& preds, const GridTarget& targets) {
  for (int l = 0; l < 3; ++l) {
    const auto& lt = targets.levels[l];
    const auto& p = preds[l];
    if (!p.defined() || p.rank() != 5 || p.dim(0) != lt.batch || p.dim(1) != lt.anchors ||
        p.dim(2) != lt.grid || p.dim(3) != lt.grid || p.dim(4) < 6) {
      throw DimensionError("loss: prediction " + (p.defined() ? shape_str(p.shape()) : std::string("<undefined>")) +
                           " does not match target grid at level " + std::to_string(l));
    }
  }
}

// Wraps a loss whose gradient was computed alongside its value.
template <class T>
BasicTensor<T> fused_scalar(const std::array<BasicTensor<T>, 3>& preds, double value,
                            std::array<std::vector<double>, 3> grads) {
  std::vector<BasicTensor<T>> inputs(preds.begin(), preds.end());
  return make_op_result<T>(Shape{1}, std::vector<T>{static_cast<T>(value)}, inputs,
                           [grads = std::move(grads)](detail::Node<T>& node) {
                             const double up = node.grad[0];
                             for (int l = 0; l < 3; ++l) {
                               auto& pn = *node.parents[l];
                               if (!pn.requires_grad || grads[l].empty()) continue;
                               auto g = pn.grad_span();
                               for (std::size_t i = 0; i < g.size(); ++i) g[i] += static_cast<T>(up * grads[l][i]);
                             }
                           });
}

double bce_with_logits(double logit, double target) {
  return std::max(logit, 0.0) - logit * target + std::log1p(std::exp(-std::abs(logit)));
}

}  // namespace

template <class T>
BasicTensor<T> objectness_loss(const std::array<BasicTensor<T>, 3>& preds, const GridTarget& targets,
                               double noobj_weight) {
  check_shapes(preds, targets);
  double total = 0;
  std::array<std::vector<double>, 3> grads;
  for (int l = 0; l < 3; ++l) {
    const auto& lt = targets.levels[l];
    auto d = preds[l].data();
    const std::size_t k = static_cast<std::size_t>(preds[l].dim(4));
    grads[l].assign(d.size(), 0.0);
    for (std::size_t i = 0; i < lt.cells(); ++i) {
      const double y = lt.indicator[i] ? 1.0 : 0.0;
      const double w = lt.indicator[i] ? 1.0 : noobj_weight;
      const double o = d[i * k + 4];
      total += w * bce_with_logits(o, y);
      grads[l][i * k + 4] = w * (sigmoid(o) - y);
    }
  }
  return fused_scalar(preds, total, std::move(grads));
}

template <class T>
BasicTensor<T> class_loss(const std::array<BasicTensor<T>, 3>& preds, const GridTarget& targets) {
  check_shapes(preds, targets);
  double total = 0;
  std::array<std::vector<double>, 3> grads;
  std::vector<double> prob;
  for (int l = 0; l < 3; ++l) {
    const auto& lt = targets.levels[l];
    auto d = preds[l].data();
    const std::size_t k = static_cast<std::size_t>(preds[l].dim(4));
    const std::size_t nc = k - 5;
    grads[l].assign(d.size(), 0.0);
    prob.resize(nc);
    for (std::size_t i = 0; i < lt.cells(); ++i) {
      if (!lt.indicator[i]) continue;
      const std::size_t t = static_cast<std::size_t>(lt.cls[i]);
      if (t >= nc) throw ContractError("class_loss: target class exceeds head outputs");
      const T* logits = d.data() + i * k + 5;
      const double mx = *std::max_element(logits, logits + nc);
      double z = 0;
      for (std::size_t c = 0; c < nc; ++c) z += (prob[c] = std::exp(logits[c] - mx));
      total += -(logits[t] - mx - std::log(z));
      for (std::size_t c = 0; c < nc; ++c) grads[l][i * k + 5 + c] = prob[c] / z - (c == t ? 1.0 : 0.0);
    }
  }
  return fused_scalar(preds, total, std::move(grads));
}

template <class T>
BasicTensor<T> localization_loss(const std::array<BasicTensor<T>, 3>& preds, const GridTarget& targets,
                                 double coord_weight, DecodeMode mode) {
  check_shapes(preds, targets);
  const double gain = mode == DecodeMode::kPaper ? 1.0 : 2.0;
  double total = 0;
  std::array<std::vector<double>, 3> grads;
  for (int l = 0; l < 3; ++l) {
    const auto& lt = targets.levels[l];
    auto d = preds[l].data();
    const std::size_t k = static_cast<std::size_t>(preds[l].dim(4));
    const double z = lt.grid;
    grads[l].assign(d.size(), 0.0);
    for (std::size_t i = 0; i < lt.cells(); ++i) {
      if (!lt.indicator[i]) continue;
      const auto& tb = lt.box[i];
      if (tb[2] < 0 || tb[3] < 0) throw ContractError("localization_loss: negative target size");
      const int gx = static_cast<int>(i % lt.grid);
      const int gy = static_cast<int>((i / lt.grid) % lt.grid);
      const int a = static_cast<int>((i / (static_cast<std::size_t>(lt.grid) * lt.grid)) % lt.anchors);
      const T* p = d.data() + i * k;
      const double sx = sigmoid(p[0]), sy = sigmoid(p[1]), sw = sigmoid(p[2]), sh = sigmoid(p[3]);
      const double px = (2 * sx - 0.5 + gx) / z;
      const double py = (2 * sy - 0.5 + gy) / z;
      const double aw = std::sqrt(lt.anchor_sizes[a].w / targets.img_size) * gain;
      const double ah = std::sqrt(lt.anchor_sizes[a].h / targets.img_size) * gain;
      const double rw = aw * sw, rh = ah * sh;  // sqrt of decoded normalized size
      const double ex = px - tb[0], ey = py - tb[1];
      const double ew = rw - std::sqrt(tb[2]), eh = rh - std::sqrt(tb[3]);
      total += ex * ex + ey * ey + coord_weight * (ew * ew + eh * eh);
      double* g = grads[l].data() + i * k;
      g[0] = 2 * ex * 2 * sx * (1 - sx) / z;
      g[1] = 2 * ey * 2 * sy * (1 - sy) / z;
      g[2] = coord_weight * 2 * ew * aw * sw * (1 - sw);
      g[3] = coord_weight * 2 * eh * ah * sh * (1 - sh);
    }
  }
  return fused_scalar(preds, total, std::move(grads));
}

template <class T>
BasicTensor<T> weighted_sum(const std::vector<BasicTensor<T>>& terms, const std::vector<double>& weights) {
  if (terms.size() != weights.size() || terms.empty()) throw ContractError("weighted_sum: size mismatch");
  double s = 0;
  for (std::size_t i = 0; i < terms.size(); ++i) {
    if (terms[i].numel() != 1) throw DimensionError("weighted_sum: terms must be scalars");
    s += weights[i] * static_cast<double>(terms[i].item());
  }
  return make_op_result<T>(Shape{1}, std::vector<T>{static_cast<T>(s)}, terms, [weights](detail::Node<T>& node) {
    for (std::size_t i = 0; i < weights.size(); ++i) {
      auto& pn = *node.parents[i];
      if (!pn.requires_grad) continue;
      pn.grad_span()[0] += static_cast<T>(node.grad[0] * weights[i]);
    }
  });
}

template <class T>
LossResult<T> total_loss(const std::array<BasicTensor<T>, 3>& preds, const GridTarget& targets,
                         const LossWeights& weights, DecodeMode mode) {
  weights.validate();
  auto cls = class_loss(preds, targets);
  auto obj = objectness_loss(preds, targets, weights.noobj);
  auto loc = localization_loss(preds, targets, weights.coord, mode);
  LossResult<T> out;
  out.cls = cls.item();
  out.obj = obj.item();
  out.loc = loc.item();
  out.total = weighted_sum<T>({cls, obj, loc}, {weights.cls, weights.obj, weights.loc});
  return out;
}

#define MFNET_INSTANTIATE_LOSS(T)                                                                          \
  template BasicTensor<T> objectness_loss<T>(const std::array<BasicTensor<T>, 3>&, const GridTarget&,     \
                                             double);                                                     \
  template BasicTensor<T> class_loss<T>(const std::array<BasicTensor<T>, 3>&, const GridTarget&);         \
  template BasicTensor<T> localization_loss<T>(const std::array<BasicTensor<T>, 3>&, const GridTarget&,   \
                                               double, DecodeMode);                                       \
  template BasicTensor<T> weighted_sum<T>(const std::vector<BasicTensor<T>>&, const std::vector<double>&); \
  template LossResult<T> total_loss<T>(const std::array<BasicTensor<T>, 3>&, const GridTarget&,           \
                                       const LossWeights&, DecodeMode);

MFNET_INSTANTIATE_LOSS(float)
MFNET_INSTANTIATE_LOSS(double)

}  // namespace mfnet
