#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mfnet/tensor.hpp"

namespace mfnet {

struct GradcheckOptions {
  double eps = 1e-6;           // central-difference step for single blocks
  double model_eps = 1e-3;     // step for the full-model loss, whose larger
                               // magnitude makes small steps rounding-bound
  double tol = 1e-3;           // max relative error
  double floor = 1e-6;         // relative-error denominator floor
  int max_coords = 24;         // per tensor; smaller tensors are checked fully
  int total_coords = 0;        // > 0: sample this many (tensor, coord) pairs overall
  std::uint64_t seed = 0;
  bool inject_fault = false;   // corrupt one analytic coordinate (negative control)
};

struct GradcheckResult {
  std::string name;
  double max_rel_err = 0;
  int coords = 0;
  bool passed = false;
};

// Compares the autograd gradient of the scalar `f` with central differences
// for the leaf tensors in `wrt`. Relative error per coordinate is
// |a - n| / max(|a|, |n|, floor). `f` must rebuild its graph on every call.
GradcheckResult numeric_gradcheck(const std::string& name, const std::function<Tensor64()>& f,
                                  const std::vector<Tensor64*>& wrt, const GradcheckOptions& options = {});

// Block types covered by run_block_gradchecks, in report order.
const std::vector<std::string>& gradcheck_block_names();

// One result per block type plus the full toy-model loss.
std::vector<GradcheckResult> run_block_gradchecks(std::uint64_t seed, const GradcheckOptions& options = {});

}  // namespace mfnet
