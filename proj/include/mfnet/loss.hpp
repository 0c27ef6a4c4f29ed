#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "mfnet/boxes.hpp"
#include "mfnet/data.hpp"
#include "mfnet/model.hpp"
#include "mfnet/tensor.hpp"

namespace mfnet {

// Targets for one detection level, indexed [b, anchor, gy, gx] in row-major
// order. `box` and `cls` are meaningful only where `indicator` is set.
struct LevelTarget {
  int batch = 0;
  int anchors = 0;
  int grid = 0;
  int stride = 0;
  std::vector<AnchorSize> anchor_sizes;  // pixels
  std::vector<std::uint8_t> indicator;
  std::vector<std::array<double, 4>> box;  // normalized cx, cy, w, h
  std::vector<int> cls;

  std::size_t index(int b, int a, int gy, int gx) const {
    return ((static_cast<std::size_t>(b) * anchors + a) * grid + gy) * grid + gx;
  }
  std::size_t cells() const { return indicator.size(); }
  std::size_t positives() const;
};

struct GridTarget {
  std::array<LevelTarget, 3> levels;
  int img_size = 0;
  std::size_t positives() const;
};

struct AssignOptions {
  // Also mark the two neighbouring cells nearest the center (one horizontal,
  // one vertical), which the (-0.5, 1.5) center range can reach.
  bool neighbor_cells = false;
};

// Width/height IoU of two boxes sharing a center.
double shape_iou(double w1, double h1, double w2, double h2);

// Center-cell / best-shape-anchor assignment at every level. When two labels
// claim the same slot the larger box wins; equal areas fall back to a
// value ordering so the result does not depend on label order.
GridTarget assign_targets(const std::vector<std::vector<Annotation>>& labels, const ModelSpec& spec,
                          const AssignOptions& options = {});

struct LossWeights {
  double cls = 0.5;    // lambda_1
  double obj = 1.0;    // lambda_2
  double loc = 0.05;   // lambda_3
  double noobj = 0.5;  // lambda_n
  double coord = 5.0;  // lambda_cd

  void validate() const;  // all >= 0, else ConfigError
};

// Per-box localization terms on normalized (cx, cy, w, h):
// (x - x')^2 + (y - y')^2 + coord * ((sqrt w - sqrt w')^2 + (sqrt h - sqrt h')^2).
double box_loss(const std::array<double, 4>& target, const std::array<double, 4>& pred, double coord);

// Each loss takes the three raw head maps [b, A, Z, Z, 5+nc] and returns a
// scalar summed over images.
template <class T>
BasicTensor<T> objectness_loss(const std::array<BasicTensor<T>, 3>& preds, const GridTarget& targets,
                               double noobj_weight);

template <class T>
BasicTensor<T> class_loss(const std::array<BasicTensor<T>, 3>& preds, const GridTarget& targets);

template <class T>
BasicTensor<T> localization_loss(const std::array<BasicTensor<T>, 3>& preds, const GridTarget& targets,
                                 double coord_weight, DecodeMode mode);

template <class T>
struct LossResult {
  BasicTensor<T> total;
  double cls = 0, obj = 0, loc = 0;  // unweighted components
};

// Differentiable lambda-weighted sum of scalar tensors.
template <class T>
BasicTensor<T> weighted_sum(const std::vector<BasicTensor<T>>& terms, const std::vector<double>& weights);

template <class T>
LossResult<T> total_loss(const std::array<BasicTensor<T>, 3>& preds, const GridTarget& targets,
                         const LossWeights& weights, DecodeMode mode);

}  // namespace mfnet
