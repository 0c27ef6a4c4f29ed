#pragma once

#include <functional>
#include <map>
#include <string>
#include <vector>

#include "mfnet/blocks.hpp"

namespace mfnet {

struct AdamState {
  double lr = 0.01;
  double bias_lr = -1;  // < 0: same as lr
  double beta1 = 0.937;
  double beta2 = 0.999;
  double eps = 1e-8;
  int t = 0;

  struct Moments {
    std::vector<double> m1, m2;
  };
  std::map<std::string, Moments> moments;  // keyed by parameter name
};

// One bias-corrected Adam update over every parameter that requires a
// gradient. Decoupled decay theta *= (1 - lr * wd) is applied to non-bias
// weights first. Gradients are cleared afterwards. A trainable parameter
// without a gradient raises ContractError.
template <class T>
void adam_step(AdamState& state, const ParamRefs<T>& params, double weight_decay);

// base_wd * batch / nominal.
double scaled_weight_decay(int batch, double base_wd = 0.0005, int nominal = 64);

struct WarmupSchedule {
  double warmup_epochs = 3.0;
  double warmup_momentum = 0.8;
  double warmup_bias_lr = 0.1;
  int iterations_per_epoch = 1;
  int min_iterations = 0;  // floor on the warmup length

  // max(round(warmup_epochs * iterations_per_epoch), min_iterations)
  int warmup_iterations() const;
};

struct WarmupValues {
  double lr = 0;
  double momentum = 0;
  double bias_lr = 0;
};

// Linear ramps over the warmup window: lr 0 -> lr0, momentum
// warmup_momentum -> momentum, bias_lr warmup_bias_lr -> lr0. Steady values
// afterwards.
WarmupValues warmup_interp(int iter, const WarmupSchedule& sched, double lr0, double momentum = 0.937);

// max(1, round(nominal / batch)).
int micro_batch_count(int batch, int nominal = 64);

// Runs backward on micro_loss(0..n_micro-1), then scales the accumulated
// gradients by 1/n_micro. Returns the summed loss values.
template <class T>
double grad_accumulate(const ParamRefs<T>& params, int n_micro, const std::function<BasicTensor<T>(int)>& micro_loss);

}  // namespace mfnet
