#pragma once

#include <cstdint>
#include <vector>

#include "mfnet/data.hpp"
#include "mfnet/eval.hpp"
#include "mfnet/loss.hpp"
#include "mfnet/model.hpp"
#include "mfnet/optim.hpp"

namespace mfnet {

struct TrainConfig {
  int batch = 16;
  int nominal_batch = 64;
  double lr0 = 0.01;
  double momentum = 0.937;
  double base_weight_decay = 0.0005;
  // Short runs still get a usable bias/momentum ramp.
  WarmupSchedule warmup{.min_iterations = 100};
  LossWeights weights;
  AssignOptions assign;
  DecodeMode decode = DecodeMode::kPaper;
  std::uint64_t seed = 0;
};

struct EpochLog {
  int epoch = 0;
  int steps = 0;  // optimizer steps taken so far
  double loss = 0, cls = 0, obj = 0, loc = 0;  // summed over the epoch
  double lr = 0, momentum = 0;
};

// Adam with warmup, scaled weight decay and gradient accumulation:
// every optimizer step consumes micro_batch_count(batch, nominal) batches.
class Trainer {
 public:
  Trainer(Network<float>& net, TrainConfig cfg);

  const TrainConfig& config() const { return cfg_; }
  int steps() const { return steps_; }
  int micro_batches() const { return n_micro_; }
  double weight_decay() const { return wd_; }

  // One pass over `data` in a seeded order. `max_steps > 0` stops early once
  // the optimizer has taken that many steps in total.
  EpochLog train_epoch(const std::vector<Sample>& data, int max_steps = 0);

  // Loss of one batch without updating anything.
  LossResult<float> batch_loss(const std::vector<const Sample*>& batch);

 private:
  Network<float>& net_;
  TrainConfig cfg_;
  AdamState adam_;
  int n_micro_ = 1;
  double wd_ = 0;
  int steps_ = 0;
  int epoch_ = 0;
};

struct EvalOutput {
  MatchSet matches;
  MetricsReport report;
  std::vector<std::vector<Detection>> detections;  // per sample
};

// Forward in batches without gradients, postprocess, and match against the
// sample labels.
EvalOutput evaluate(const Network<float>& net, const std::vector<Sample>& data, const PostprocessOptions& opts,
                    int batch = 16, double match_iou = 0.5);

}  // namespace mfnet
