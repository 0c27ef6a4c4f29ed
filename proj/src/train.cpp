#include "mfnet/train.hpp"

#include <algorithm>
#include <numeric>
#include <random>

#include "mfnet/error.hpp"

namespace mfnet {

Trainer::Trainer(Network<float>& net, TrainConfig cfg) : net_(net), cfg_(std::move(cfg)) {
  if (cfg_.batch < 1) throw ConfigError("batch must be >= 1");
  cfg_.weights.validate();
  n_micro_ = micro_batch_count(cfg_.batch, cfg_.nominal_batch);
  wd_ = scaled_weight_decay(cfg_.batch, cfg_.base_weight_decay, cfg_.nominal_batch);
  adam_.lr = cfg_.lr0;
  adam_.beta1 = cfg_.momentum;
}

LossResult<float> Trainer::batch_loss(const std::vector<const Sample*>& batch) {
  std::vector<std::vector<Annotation>> labels;
  for (const Sample* s : batch) labels.push_back(s->annotations);
  const GridTarget targets = assign_targets(labels, net_.spec(), cfg_.assign);
  const auto maps = net_.forward(stack_images(batch));
  return total_loss(maps, targets, cfg_.weights, cfg_.decode);
}

EpochLog Trainer::train_epoch(const std::vector<Sample>& data, int max_steps) {
  if (data.empty()) throw ValidationError("train_epoch: empty dataset");
  ++epoch_;
  std::vector<std::size_t> order(data.size());
  std::iota(order.begin(), order.end(), 0);
  std::mt19937_64 rng(cfg_.seed * 1000003ULL + static_cast<std::uint64_t>(epoch_));
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<std::vector<const Sample*>> chunks;
  for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(cfg_.batch)) {
    std::vector<const Sample*> chunk;
    for (std::size_t j = i; j < std::min(order.size(), i + static_cast<std::size_t>(cfg_.batch)); ++j) {
      chunk.push_back(&data[order[j]]);
    }
    chunks.push_back(std::move(chunk));
  }
  const int groups = static_cast<int>((chunks.size() + n_micro_ - 1) / n_micro_);
  WarmupSchedule sched = cfg_.warmup;
  sched.iterations_per_epoch = groups;

  EpochLog log;
  log.epoch = epoch_;
  ParamRefs<float> params = net_.params();
  for (int g = 0; g < groups; ++g) {
    if (max_steps > 0 && steps_ >= max_steps) break;
    const WarmupValues wv = warmup_interp(steps_, sched, cfg_.lr0, cfg_.momentum);
    adam_.lr = wv.lr;
    adam_.beta1 = wv.momentum;
    adam_.bias_lr = wv.bias_lr;
    const std::size_t first = static_cast<std::size_t>(g) * n_micro_;
    const int count = static_cast<int>(std::min<std::size_t>(n_micro_, chunks.size() - first));
    grad_accumulate<float>(params, count, [&](int i) {
      LossResult<float> r = batch_loss(chunks[first + static_cast<std::size_t>(i)]);
      log.loss += r.total.item();
      log.cls += r.cls;
      log.obj += r.obj;
      log.loc += r.loc;
      return r.total;
    });
    adam_step(adam_, params, wd_);
    ++steps_;
    log.lr = wv.lr;
    log.momentum = wv.momentum;
  }
  log.steps = steps_;
  return log;
}

EvalOutput evaluate(const Network<float>& net, const std::vector<Sample>& data, const PostprocessOptions& opts,
                    int batch, double match_iou) {
  if (batch < 1) throw ValidationError("evaluate: batch must be >= 1");
  const ModelSpec& spec = net.spec();
  EvalOutput out;
  out.matches.classes.resize(static_cast<std::size_t>(spec.num_classes));
  NoGradGuard no_grad;
  for (std::size_t i = 0; i < data.size(); i += static_cast<std::size_t>(batch)) {
    std::vector<const Sample*> chunk;
    for (std::size_t j = i; j < std::min(data.size(), i + static_cast<std::size_t>(batch)); ++j) chunk.push_back(&data[j]);
    const auto maps = net.forward(stack_images(chunk));
    auto dets = postprocess(maps, spec, opts);
    for (std::size_t k = 0; k < chunk.size(); ++k) {
      const auto gts = ground_truth_boxes(chunk[k]->annotations, spec.img_size, spec.img_size);
      out.matches.merge(match_detections(dets[k], gts, spec.num_classes, match_iou));
      out.detections.push_back(std::move(dets[k]));
    }
  }
  out.report = report_table(out.matches, default_class_names(spec.num_classes));
  return out;
}

}  // namespace mfnet
