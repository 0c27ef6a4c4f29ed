#include "mfnet/gradcheck.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <set>

#include "mfnet/blocks.hpp"
#include "mfnet/data.hpp"
#include "mfnet/error.hpp"
#include "mfnet/loss.hpp"
#include "mfnet/model.hpp"

namespace mfnet {

GradcheckResult numeric_gradcheck(const std::string& name, const std::function<Tensor64()>& f,
                                  const std::vector<Tensor64*>& wrt, const GradcheckOptions& options) {
  for (Tensor64* t : wrt) {
    if (!t->requires_grad()) throw ContractError("gradcheck: tensor does not require grad");
    t->zero_grad();
  }
  {
    Tensor64 y = f();
    if (y.numel() != 1) throw DimensionError("gradcheck: function must return a scalar");
    if (!std::isfinite(y.item())) throw EvaluationError("gradcheck: " + name + " produced a non-finite value");
    y.backward();
  }
  std::vector<std::vector<double>> analytic;
  for (Tensor64* t : wrt) {
    auto g = t->grad();
    analytic.emplace_back(t->numel(), 0.0);
    std::copy(g.begin(), g.end(), analytic.back().begin());
    t->zero_grad();
  }

  std::mt19937_64 rng(options.seed ^ 0x9e3779b97f4a7c15ULL);
  std::vector<std::pair<std::size_t, std::size_t>> coords;
  if (options.total_coords > 0) {
    std::set<std::pair<std::size_t, std::size_t>> picked;
    const std::size_t limit = [&] {
      std::size_t n = 0;
      for (Tensor64* t : wrt) n += t->numel();
      return std::min<std::size_t>(n, static_cast<std::size_t>(options.total_coords));
    }();
    while (picked.size() < limit) {
      const std::size_t ti = std::uniform_int_distribution<std::size_t>(0, wrt.size() - 1)(rng);
      const std::size_t ci = std::uniform_int_distribution<std::size_t>(0, wrt[ti]->numel() - 1)(rng);
      picked.emplace(ti, ci);
    }
    coords.assign(picked.begin(), picked.end());
  } else {
    for (std::size_t ti = 0; ti < wrt.size(); ++ti) {
      const std::size_t n = wrt[ti]->numel();
      if (n <= static_cast<std::size_t>(options.max_coords)) {
        for (std::size_t ci = 0; ci < n; ++ci) coords.emplace_back(ti, ci);
      } else {
        std::vector<std::size_t> all(n);
        for (std::size_t ci = 0; ci < n; ++ci) all[ci] = ci;
        std::shuffle(all.begin(), all.end(), rng);
        for (int k = 0; k < options.max_coords; ++k) coords.emplace_back(ti, all[static_cast<std::size_t>(k)]);
      }
    }
  }
  if (options.inject_fault && !coords.empty()) {
    double& a = analytic[coords[0].first][coords[0].second];
    a += 0.1 * (std::abs(a) + 1.0);
  }

  GradcheckResult result;
  result.name = name;
  NoGradGuard no_grad;
  for (auto [ti, ci] : coords) {
    auto data = wrt[ti]->mutable_data();
    const double orig = data[ci];
    data[ci] = orig + options.eps;
    const double fp = f().item();
    data[ci] = orig - options.eps;
    const double fm = f().item();
    data[ci] = orig;
    if (!std::isfinite(fp) || !std::isfinite(fm)) throw EvaluationError("gradcheck: " + name + " produced a non-finite value");
    const double numeric = (fp - fm) / (2 * options.eps);
    const double a = analytic[ti][ci];
    const double denom = std::max({std::abs(a), std::abs(numeric), options.floor});
    result.max_rel_err = std::max(result.max_rel_err, std::abs(a - numeric) / denom);
    ++result.coords;
  }
  result.passed = result.max_rel_err <= options.tol;
  return result;
}

const std::vector<std::string>& gradcheck_block_names() {
  static const std::vector<std::string> names{"conv",  "focus", "fa",     "bottleneck", "csp",
                                              "c3",    "spp",   "sppf",   "detect",     "toy_loss"};
  return names;
}

namespace {

Tensor64 random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
  std::uniform_real_distribution<double> u(lo, hi);
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = u(rng);
  return Tensor64(std::move(shape), std::move(v), true);
}

void randomize(const ParamRefs<double>& params, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-0.5, 0.5);
  for (Param<double>* p : params) {
    for (auto& v : p->value.mutable_data()) v = u(rng);
    p->value.set_requires_grad(true);
  }
}

std::vector<Tensor64*> leaves(Tensor64& x, const ParamRefs<double>& params) {
  std::vector<Tensor64*> out{&x};
  for (Param<double>* p : params) out.push_back(&p->value);
  return out;
}

// Random projection of a block output onto a scalar.
template <class Fwd>
std::function<Tensor64()> projected(Fwd fwd, const Shape& out_shape, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(-1.0, 1.0);
  std::vector<double> w(shape_numel(out_shape));
  for (auto& v : w) v = u(rng);
  return [fwd, w]() { return dot_const<double>(fwd(), w); };
}

template <class Block>
GradcheckResult check_block(const std::string& name, Block& block, Shape in_shape, std::mt19937_64& rng,
                            const GradcheckOptions& options) {
  auto params = block.params();
  randomize(params, rng);
  Tensor64 x = random_tensor(std::move(in_shape), rng);
  const Shape out_shape = block.forward(x).shape();
  auto f = projected([&block, &x]() { return block.forward(x); }, out_shape, rng);
  return numeric_gradcheck(name, f, leaves(x, params), options);
}

}  // namespace

std::vector<GradcheckResult> run_block_gradchecks(std::uint64_t seed, const GradcheckOptions& options) {
  std::mt19937_64 rng(seed);
  Initializer init(seed);
  GradcheckOptions opt = options;
  opt.seed = seed;
  std::vector<GradcheckResult> out;

  {
    ConvBlock<double> b("conv", 3, 4, 3, 2, -1, 1, Activation::kSiLU, init);
    out.push_back(check_block("conv", b, {2, 3, 7, 7}, rng, opt));
  }
  {
    FocusBlock<double> b("focus", 3, 4, init);
    out.push_back(check_block("focus", b, {2, 3, 6, 6}, rng, opt));
  }
  {
    FABlock<double> b("fa", 32, 16, init);
    out.push_back(check_block("fa", b, {2, 32, 3, 3}, rng, opt));
  }
  {
    Bottleneck<double> b("bottleneck", 4, 4, true, init);
    out.push_back(check_block("bottleneck", b, {2, 4, 5, 5}, rng, opt));
  }
  {
    CSPBlock<double> b("csp", 4, 6, 1, true, init);
    out.push_back(check_block("csp", b, {2, 4, 5, 5}, rng, opt));
  }
  {
    C3Block<double> b("c3", 4, 6, 1, true, init);
    out.push_back(check_block("c3", b, {2, 4, 5, 5}, rng, opt));
  }
  {
    SPPBlock<double> b("spp", 4, 4, init);
    out.push_back(check_block("spp", b, {1, 4, 6, 6}, rng, opt));
  }
  {
    SPPFBlock<double> b("sppf", 4, 4, init);
    out.push_back(check_block("sppf", b, {1, 4, 6, 6}, rng, opt));
  }
  {
    DetectHead<double> head("detect", {4, 6, 8}, 2, 3, init);
    auto params = head.params();
    randomize(params, rng);
    std::array<Tensor64, 3> xs{random_tensor({2, 4, 4, 4}, rng), random_tensor({2, 6, 2, 2}, rng),
                               random_tensor({2, 8, 1, 1}, rng)};
    std::vector<Tensor64*> wrt{&xs[0], &xs[1], &xs[2]};
    for (Param<double>* p : params) wrt.push_back(&p->value);
    std::uniform_real_distribution<double> u(-1.0, 1.0);
    std::array<std::vector<double>, 3> w;
    const auto outs = head.forward(xs);
    for (int l = 0; l < 3; ++l) {
      w[l].resize(outs[l].numel());
      for (auto& v : w[l]) v = u(rng);
    }
    auto f = [&head, &xs, w]() {
      const auto o = head.forward(xs);
      std::vector<Tensor64> terms;
      for (int l = 0; l < 3; ++l) terms.push_back(dot_const<double>(o[l], w[l]));
      return weighted_sum<double>(terms, {1.0, 1.0, 1.0});
    };
    out.push_back(numeric_gradcheck("detect", f, wrt, opt));
  }
  {
    const ModelSpec spec = make_spec(Family::kMFNetFA, SizePreset::kToy, 2, 64);
    Network<double> net(spec, seed);
    const auto samples = synth_dataset(2, spec.num_classes, spec.img_size, seed);
    std::vector<const Sample*> ptrs{&samples[0], &samples[1]};
    const Tensor64 images = stack_images(ptrs).cast<double>();
    std::vector<std::vector<Annotation>> labels{samples[0].annotations, samples[1].annotations};
    const GridTarget targets = assign_targets(labels, spec);
    auto f = [&net, &images, &targets]() {
      return total_loss(net.forward(images), targets, LossWeights{}, DecodeMode::kPaper).total;
    };
    std::vector<Tensor64*> wrt;
    for (Param<double>* p : net.params()) wrt.push_back(&p->value);
    GradcheckOptions toy = opt;
    toy.eps = opt.model_eps;
    if (toy.total_coords <= 0) toy.total_coords = 48;
    out.push_back(numeric_gradcheck("toy_loss", f, wrt, toy));
  }
  return out;
}

}  // namespace mfnet
