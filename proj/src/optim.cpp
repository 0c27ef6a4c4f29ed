#include "mfnet/optim.hpp"

#include <algorithm>
#include <cmath>

#include "mfnet/error.hpp"

namespace mfnet {

template <class T>
void adam_step(AdamState& state, const ParamRefs<T>& params, double weight_decay) {
  for (const Param<T>* p : params) {
    if (p->value.requires_grad() && !p->value.has_grad()) {
      throw ContractError("adam_step: parameter '" + p->name + "' has no gradient");
    }
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(state.beta1, state.t);
  const double c2 = 1.0 - std::pow(state.beta2, state.t);
  for (Param<T>* p : params) {
    if (!p->value.requires_grad()) continue;
    const bool bias = p->is_bias();
    const double lr = bias && state.bias_lr >= 0 ? state.bias_lr : state.lr;
    auto& mom = state.moments[p->name];
    auto g = p->value.grad();
    auto theta = p->value.mutable_data();
    if (mom.m1.size() != theta.size()) {
      mom.m1.assign(theta.size(), 0.0);
      mom.m2.assign(theta.size(), 0.0);
    }
    const double decay = bias ? 1.0 : 1.0 - lr * weight_decay;
    for (std::size_t i = 0; i < theta.size(); ++i) {
      const double gi = g[i];
      mom.m1[i] = state.beta1 * mom.m1[i] + (1 - state.beta1) * gi;
      mom.m2[i] = state.beta2 * mom.m2[i] + (1 - state.beta2) * gi * gi;
      const double m1_hat = mom.m1[i] / c1;
      const double m2_hat = mom.m2[i] / c2;
      const double v = static_cast<double>(theta[i]) * decay - lr * m1_hat / (std::sqrt(m2_hat) + state.eps);
      theta[i] = static_cast<T>(v);
    }
    p->value.zero_grad();
  }
}

double scaled_weight_decay(int batch, double base_wd, int nominal) {
  if (batch < 1) throw ValidationError("scaled_weight_decay: batch must be >= 1");
  if (nominal < 1) throw ValidationError("scaled_weight_decay: nominal batch must be >= 1");
  return base_wd * batch / nominal;
}

int WarmupSchedule::warmup_iterations() const {
  return std::max(static_cast<int>(std::lround(warmup_epochs * iterations_per_epoch)), min_iterations);
}

WarmupValues warmup_interp(int iter, const WarmupSchedule& sched, double lr0, double momentum) {
  if (iter < 0) throw ValidationError("warmup_interp: iteration must be >= 0");
  if (sched.warmup_epochs < 0) throw ValidationError("warmup_interp: warmup_epochs must be >= 0");
  const int nw = sched.warmup_iterations();
  if (iter >= nw) return {lr0, momentum, lr0};
  const double f = static_cast<double>(iter) / nw;
  return {lr0 * f, sched.warmup_momentum + (momentum - sched.warmup_momentum) * f,
          sched.warmup_bias_lr + (lr0 - sched.warmup_bias_lr) * f};
}

int micro_batch_count(int batch, int nominal) {
  if (batch < 1) throw ValidationError("micro_batch_count: batch must be >= 1");
  return std::max(1, static_cast<int>(std::lround(static_cast<double>(nominal) / batch)));
}

template <class T>
double grad_accumulate(const ParamRefs<T>& params, int n_micro,
                       const std::function<BasicTensor<T>(int)>& micro_loss) {
  if (n_micro < 1) throw ValidationError("grad_accumulate: n_micro must be >= 1");
  double total = 0;
  for (int i = 0; i < n_micro; ++i) {
    BasicTensor<T> loss = micro_loss(i);
    total += loss.item();
    loss.backward();
  }
  if (n_micro > 1) {
    const T scale = T(1) / static_cast<T>(n_micro);
    for (Param<T>* p : params) {
      if (!p->value.has_grad()) continue;
      for (auto& g : p->value.mutable_grad()) g *= scale;
    }
  }
  return total;
}

template void adam_step<float>(AdamState&, const ParamRefs<float>&, double);
template void adam_step<double>(AdamState&, const ParamRefs<double>&, double);
template double grad_accumulate<float>(const ParamRefs<float>&, int, const std::function<BasicTensor<float>(int)>&);
template double grad_accumulate<double>(const ParamRefs<double>&, int,
                                        const std::function<BasicTensor<double>(int)>&);

}  // namespace mfnet
