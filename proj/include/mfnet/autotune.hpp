#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "mfnet/model.hpp"

namespace mfnet {

struct Trial {
  std::string kind;  // "batch" or "img_size"
  int setting = 0;
  double memory_bytes = 0;
  double time_ms = 0;
  double fitness = 0;  // images/sec for batch trials, search fitness for sizes
  bool feasible = true;
};

struct TuneResult {
  int chosen_batch = 0;
  double scaled_wd = 0;
  int chosen_img_size = 0;
  std::vector<Trial> trial_log;
};

struct DbsaOptions {
  double headroom = 0.9;
  int max_batch = 1 << 16;
};

struct DbsaResult {
  int batch = 0;
  double scaled_wd = 0;
  int largest_feasible = 0;
  std::vector<Trial> trials;
};

// Doubling from 1 until the memory probe exceeds headroom * budget, then
// bisection between the last feasible and first infeasible batch. Among all
// probed feasible batches the one with the most images per second wins (ties
// to the larger batch). Batch 1 infeasible raises ResourceError.
DbsaResult dbsa_search(const std::function<double(int)>& mem_probe, const std::function<double(int)>& time_probe,
                       double budget_bytes, const DbsaOptions& options = {});

// Hill-climb over the sorted candidate lattice from 320 (or the candidate
// nearest to it). Moves to the best neighbour until neither improves. The
// smaller neighbour is taken when it ties the current size, so plateaus drift
// downwards.
int automl_imgsize(std::vector<int> candidates, const std::function<double(int)>& fitness,
                   std::vector<Trial>* log = nullptr);

std::vector<int> default_imgsize_candidates();  // 256..640 step 32

// Analytic training-memory model in bytes: float32 parameters, gradients and
// two Adam moments, plus stored activations (with their gradients) per image.
struct MemoryModel {
  double fixed_bytes = 0;
  double per_image_bytes = 0;

  double bytes(int batch) const { return fixed_bytes + per_image_bytes * batch; }
};

MemoryModel memory_model(Network<float>& net);

void write_trial_log(const std::filesystem::path& path, const std::vector<Trial>& trials);

}  // namespace mfnet
