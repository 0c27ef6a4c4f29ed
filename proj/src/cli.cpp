#include "mfnet/cli.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include "CLI11.hpp"
#include "mfnet/autotune.hpp"
#include "mfnet/data.hpp"
#include "mfnet/error.hpp"
#include "mfnet/eval.hpp"
#include "mfnet/gradcheck.hpp"
#include "mfnet/model.hpp"
#include "mfnet/train.hpp"

namespace mfnet {

namespace fs = std::filesystem;
using nlohmann::json;

// ===========================================================================
// RunConfig
// ===========================================================================

void RunConfig::validate() const {
  parse_family(model);
  parse_size(size);
  parse_decode_mode(decode);
  if (batch != "auto") {
    try {
      std::size_t pos = 0;
      const int b = std::stoi(batch, &pos);
      if (pos != batch.size() || b < 1) throw ConfigError("");
    } catch (const std::exception&) {
      throw ConfigError("--batch must be a positive integer or 'auto', got '" + batch + "'");
    }
  }
  if (img_size < 0 || (img_size > 0 && img_size % 32 != 0)) {
    throw ConfigError("--img-size must be a positive multiple of 32");
  }
  if (num_classes < 1) throw ConfigError("--classes must be >= 1");
  if (nominal_batch < 1) throw ConfigError("--nominal-batch must be >= 1");
  if (epochs < 1) throw ConfigError("--epochs must be >= 1");
  if (max_steps < 0) throw ConfigError("--max-steps must be >= 0");
  for (double t : {conf, iou, match_iou}) {
    if (!(t >= 0.0 && t <= 1.0)) throw ConfigError("thresholds must lie in [0,1]");
  }
  if (!(lr0 > 0.0)) throw ConfigError("--lr must be > 0");
  weights.validate();
  if (synthetic < 0) throw ConfigError("--synthetic must be >= 0");
  if (!split.empty() && split != "train" && split != "val" && split != "test" && split != "all") {
    throw ConfigError("--split must be one of train|val|test|all");
  }
  if (tune != "batch" && tune != "imgsize" && tune != "both") throw ConfigError("--tune must be batch|imgsize|both");
  if (!(mem_budget > 0)) throw ConfigError("--mem-budget must be > 0");
  for (int c : candidates) {
    if (c < 32 || c % 32 != 0) throw ConfigError("image-size candidates must be positive multiples of 32");
  }
  if (seeds < 1) throw ConfigError("--seeds must be >= 1");
  if (bench_images < 1) throw ConfigError("--images must be >= 1");
  if (warmup < 0 || fitness_steps < 1 || stub < 0) throw ConfigError("counts must be non-negative");
}

json config_to_json(const RunConfig& c) {
  return {{"command", c.command},
          {"model", c.model},
          {"size", c.size},
          {"img_size", c.img_size},
          {"num_classes", c.num_classes},
          {"batch", c.batch},
          {"nominal_batch", c.nominal_batch},
          {"epochs", c.epochs},
          {"max_steps", c.max_steps},
          {"seed", c.seed},
          {"decode", c.decode},
          {"conf", c.conf},
          {"iou", c.iou},
          {"match_iou", c.match_iou},
          {"lr0", c.lr0},
          {"weights",
           {{"cls", c.weights.cls},
            {"obj", c.weights.obj},
            {"loc", c.weights.loc},
            {"noobj", c.weights.noobj},
            {"coord", c.weights.coord}}},
          {"synthetic", c.synthetic},
          {"strict", c.strict},
          {"data", c.data},
          {"checkpoint", c.checkpoint},
          {"out", c.out},
          {"split", c.split},
          {"detections", c.detections},
          {"images", c.images},
          {"mem_budget", c.mem_budget},
          {"tune", c.tune},
          {"candidates", c.candidates},
          {"fitness_steps", c.fitness_steps},
          {"seeds", c.seeds},
          {"inject_fault", c.inject_fault},
          {"bench_images", c.bench_images},
          {"warmup", c.warmup},
          {"stub", c.stub}};
}

RunConfig config_from_json(const json& j) {
  if (!j.is_object()) throw ConfigError("config must be a JSON object");
  RunConfig c;
  try {
    auto get = [&](const char* key, auto& field) {
      if (j.contains(key)) j.at(key).get_to(field);
    };
    get("command", c.command);
    get("model", c.model);
    get("size", c.size);
    get("img_size", c.img_size);
    get("num_classes", c.num_classes);
    if (j.contains("batch")) {
      c.batch = j.at("batch").is_string() ? j.at("batch").get<std::string>() : std::to_string(j.at("batch").get<int>());
    }
    get("nominal_batch", c.nominal_batch);
    get("epochs", c.epochs);
    get("max_steps", c.max_steps);
    get("seed", c.seed);
    get("decode", c.decode);
    get("conf", c.conf);
    get("iou", c.iou);
    get("match_iou", c.match_iou);
    get("lr0", c.lr0);
    if (j.contains("weights")) {
      const json& w = j.at("weights");
      c.weights.cls = w.value("cls", c.weights.cls);
      c.weights.obj = w.value("obj", c.weights.obj);
      c.weights.loc = w.value("loc", c.weights.loc);
      c.weights.noobj = w.value("noobj", c.weights.noobj);
      c.weights.coord = w.value("coord", c.weights.coord);
    }
    get("synthetic", c.synthetic);
    get("strict", c.strict);
    get("data", c.data);
    get("checkpoint", c.checkpoint);
    get("out", c.out);
    get("split", c.split);
    get("detections", c.detections);
    get("images", c.images);
    get("mem_budget", c.mem_budget);
    get("tune", c.tune);
    get("candidates", c.candidates);
    get("fitness_steps", c.fitness_steps);
    get("seeds", c.seeds);
    get("inject_fault", c.inject_fault);
    get("bench_images", c.bench_images);
    get("warmup", c.warmup);
    get("stub", c.stub);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("malformed config: ") + e.what());
  }
  return c;
}

// ===========================================================================
// Shared helpers
// ===========================================================================

namespace {

class VerificationFailure : public Error {
 public:
  using Error::Error;
};

ModelSpec spec_for(const RunConfig& cfg) {
  return make_spec(parse_family(cfg.model), parse_size(cfg.size), cfg.num_classes, cfg.img_size);
}

PostprocessOptions post_options(const RunConfig& cfg) {
  return {parse_decode_mode(cfg.decode), cfg.conf, cfg.iou};
}

fs::path prepare_out(const RunConfig& cfg) {
  fs::path out(cfg.out);
  fs::create_directories(out);
  return out;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream f(path);
  if (!f) throw ValidationError("cannot write " + path.string());
  f << j.dump(2) << '\n';
}

void write_resolved(const fs::path& out, const RunConfig& cfg) { write_json(out / "resolved_config.json", config_to_json(cfg)); }

std::vector<Sample> load_samples(const RunConfig& cfg, const ModelSpec& spec, std::ostream& err) {
  if (cfg.synthetic > 0) return synth_dataset(static_cast<std::size_t>(cfg.synthetic), spec.num_classes, spec.img_size, cfg.seed);
  if (cfg.data.empty()) throw ConfigError("no dataset: pass --data DIR or --synthetic N");
  const fs::path root(cfg.data);
  if (!fs::is_directory(root / "images")) throw LoadError("dataset directory " + root.string() + " has no images/ folder");
  LoadOptions lo;
  lo.strict = cfg.strict;
  lo.num_classes = spec.num_classes;
  lo.resize_to = spec.img_size;
  lo.contrast = true;
  std::vector<std::string> warnings;
  auto samples = load_dataset(root / "images", root / "labels", lo, &warnings);
  for (const auto& w : warnings) err << "warning: " << w << '\n';
  return samples;
}

struct Splits {
  std::vector<Sample> train, val, test;
};

Splits split_samples(std::vector<Sample> samples, std::uint64_t seed) {
  Splits s;
  if (samples.size() < 3) {
    s.train = std::move(samples);
    return s;
  }
  SplitSpec spec;
  spec.seed = seed;
  const SplitIndices idx = split_dataset(samples.size(), spec);
  for (auto i : idx.train) s.train.push_back(samples[i]);
  for (auto i : idx.val) s.val.push_back(samples[i]);
  for (auto i : idx.test) s.test.push_back(samples[i]);
  return s;
}

std::vector<Sample> pick_split(std::vector<Sample> samples, const std::string& which, std::uint64_t seed) {
  if (which == "all") return samples;
  Splits s = split_samples(std::move(samples), seed);
  if (which == "train") return std::move(s.train);
  if (which == "val") return std::move(s.val);
  return std::move(s.test);
}

// Deterministic throughput model for batch search: a fixed 5 ms step cost
// plus forward+backward at an assumed 10 GFLOP/s.
double modelled_step_ms(double gflops_per_image, int batch) { return 5.0 + batch * 3.0 * gflops_per_image * 100.0; }

json bench_json(const RunConfig& cfg, const ModelSpec& spec, std::size_t params, double gflops, const BenchResult& b) {
  return {{"model", cfg.model},
          {"size", cfg.size},
          {"img_size", spec.img_size},
          {"images", b.images},
          {"efficiency", {{"params", params}, {"gflops", gflops}, {"fps", b.fps}}},
          {"timing", {{"preprocess_ms", b.preprocess_ms}, {"inference_ms", b.inference_ms}, {"nms_ms", b.nms_ms}}}};
}

// ===========================================================================
// Commands
// ===========================================================================

int cmd_train(RunConfig cfg, std::ostream& out, std::ostream& err) {
  const ModelSpec spec = spec_for(cfg);
  cfg.img_size = spec.img_size;
  const fs::path dir = prepare_out(cfg);
  Network<float> net(spec, cfg.seed);

  std::vector<Sample> train_set, val_set;
  {
    auto samples = load_samples(cfg, spec, err);
    if (samples.empty()) throw ValidationError("dataset is empty");
    if (cfg.split == "all") {
      train_set = samples;
      val_set = std::move(samples);
    } else {
      Splits s = split_samples(std::move(samples), cfg.seed);
      train_set = std::move(s.train);
      val_set = std::move(s.val);
    }
  }

  if (cfg.batch == "auto") {
    const MemoryModel mem = memory_model(net);
    const double gflops = estimate_gflops(net, spec);
    DbsaOptions opt;
    opt.max_batch = static_cast<int>(train_set.size());
    const DbsaResult r = dbsa_search([&](int b) { return mem.bytes(b); },
                                     [&](int b) { return modelled_step_ms(gflops, b); }, cfg.mem_budget, opt);
    write_trial_log(dir / "dbsa_trials.jsonl", r.trials);
    cfg.batch = std::to_string(r.batch);
    out << json{{"event", "dbsa"}, {"batch", r.batch}, {"scaled_wd", r.scaled_wd}}.dump() << '\n';
  }
  write_resolved(dir, cfg);

  TrainConfig tc;
  tc.batch = std::stoi(cfg.batch);
  tc.nominal_batch = cfg.nominal_batch;
  tc.lr0 = cfg.lr0;
  tc.weights = cfg.weights;
  tc.decode = parse_decode_mode(cfg.decode);
  tc.seed = cfg.seed;
  Trainer trainer(net, tc);
  std::ofstream log(dir / "train_log.jsonl");
  const PostprocessOptions po = post_options(cfg);
  for (int e = 1; e <= cfg.epochs; ++e) {
    const EpochLog el = trainer.train_epoch(train_set, cfg.max_steps);
    json j = {{"epoch", el.epoch}, {"steps", el.steps}, {"loss", el.loss}, {"cls", el.cls},
              {"obj", el.obj},     {"loc", el.loc},     {"lr", el.lr},     {"momentum", el.momentum},
              {"weight_decay", trainer.weight_decay()}, {"micro_batches", trainer.micro_batches()}};
    if (!val_set.empty()) {
      const EvalOutput ev = evaluate(net, val_set, po, tc.batch, cfg.match_iou);
      j["val_paper_map"] = ev.report.paper_map;
      j["val_map50"] = ev.report.map50;
    }
    log << j.dump() << '\n';
    out << j.dump() << '\n';
    if (cfg.max_steps > 0 && trainer.steps() >= cfg.max_steps) break;
  }
  save_checkpoint(net, dir / "model.ckpt");
  out << json{{"event", "checkpoint"}, {"path", (dir / "model.ckpt").string()}}.dump() << '\n';
  return kExitOk;
}

int cmd_eval(RunConfig cfg, std::ostream& out, std::ostream& err) {
  if (cfg.checkpoint.empty()) throw ConfigError("eval needs --checkpoint");
  Network<float> net = load_checkpoint(cfg.checkpoint);
  net.freeze();
  const ModelSpec& spec = net.spec();
  cfg.model = to_string(spec.family);
  cfg.size = to_string(spec.size);
  cfg.img_size = spec.img_size;
  cfg.num_classes = spec.num_classes;
  if (cfg.split.empty()) cfg.split = "test";
  const fs::path dir = prepare_out(cfg);
  write_resolved(dir, cfg);

  const std::vector<Sample> data = pick_split(load_samples(cfg, spec, err), cfg.split, cfg.seed);
  if (data.empty()) throw ValidationError("the '" + cfg.split + "' split is empty");

  MatchSet matches;
  matches.classes.resize(static_cast<std::size_t>(spec.num_classes));
  std::vector<DumpRecord> dump;
  if (!cfg.detections.empty()) {
    std::map<std::string, std::vector<Detection>> by_image;
    for (auto& r : read_detections_jsonl(cfg.detections)) by_image[r.image].push_back(r.det);
    for (const auto& s : data) {
      const auto gts = ground_truth_boxes(s.annotations, spec.img_size, spec.img_size);
      matches.merge(match_detections(by_image[s.source_path], gts, spec.num_classes, cfg.match_iou));
    }
  } else {
    const EvalOutput ev = evaluate(net, data, post_options(cfg), 16, cfg.match_iou);
    matches = ev.matches;
    for (std::size_t i = 0; i < data.size(); ++i) {
      for (const auto& d : ev.detections[i]) dump.push_back({data[i].source_path, d});
    }
    write_detections_jsonl(dir / "detections.jsonl", dump);
  }
  const MetricsReport report = report_table(matches, default_class_names(spec.num_classes));
  write_json(dir / "eval_report.json", report_to_json(report));
  const std::string text = report_to_text(report);
  std::ofstream(dir / "eval_report.txt") << text;
  out << text;
  return kExitOk;
}

std::array<float, 3> class_color(int c) {
  static const std::array<std::array<float, 3>, 4> colors{{{0.1f, 0.9f, 0.1f}, {0.95f, 0.1f, 0.1f}, {0.1f, 0.3f, 1.0f}, {1.0f, 0.8f, 0.0f}}};
  return colors[static_cast<std::size_t>(c) % colors.size()];
}

int cmd_detect(RunConfig cfg, std::ostream& out, std::ostream& err) {
  if (cfg.checkpoint.empty()) throw ConfigError("detect needs --checkpoint");
  Network<float> net = load_checkpoint(cfg.checkpoint);
  net.freeze();
  const ModelSpec& spec = net.spec();
  std::vector<std::string> inputs = cfg.images;
  if (!cfg.data.empty()) {
    std::vector<std::string> found;
    for (const auto& e : fs::directory_iterator(cfg.data)) {
      if (e.is_regular_file() && e.path().extension() == ".ppm") found.push_back(e.path().string());
    }
    std::sort(found.begin(), found.end());
    inputs.insert(inputs.end(), found.begin(), found.end());
  }
  if (inputs.empty()) throw ConfigError("detect needs image paths or --data DIR");
  const fs::path dir = prepare_out(cfg);
  write_resolved(dir, cfg);

  const PostprocessOptions po = post_options(cfg);
  std::vector<DumpRecord> dump;
  int failures = 0;
  NoGradGuard no_grad;
  for (const auto& path : inputs) {
    try {
      Tensor raw = read_ppm(path);
      const int h = raw.dim(1), w = raw.dim(2);
      Tensor img = contrast_stretch(raw);
      if (h != spec.img_size || w != spec.img_size) img = detail::resize_bilinear_any(img, spec.img_size, spec.img_size);
      const auto maps = net.forward(reshape(img, Shape{1, 3, spec.img_size, spec.img_size}));
      const auto dets = postprocess(maps, spec, po)[0];
      const double sx = static_cast<double>(w) / spec.img_size, sy = static_cast<double>(h) / spec.img_size;
      for (const auto& d : dets) {
        Detection mapped = d;
        mapped.box = clip_box({d.box.x1 * sx, d.box.y1 * sy, d.box.x2 * sx, d.box.y2 * sy}, w, h);
        dump.push_back({path, mapped});
        draw_box(raw, mapped.box, class_color(mapped.class_id), 1);
        // class tab in the top-left corner of the box
        draw_box(raw, {mapped.box.x1, mapped.box.y1, mapped.box.x1 + 3, mapped.box.y1 + 3}, class_color(mapped.class_id), 2);
      }
      write_ppm(dir / (fs::path(path).stem().string() + "_det.ppm"), raw);
      out << json{{"image", path}, {"detections", dets.size()}}.dump() << '\n';
    } catch (const Error& e) {
      ++failures;
      err << "error: " << path << ": " << e.what() << '\n';
    }
  }
  write_detections_jsonl(dir / "detections.jsonl", dump);
  if (failures == static_cast<int>(inputs.size())) return kExitConfig;
  return kExitOk;
}

int cmd_bench(RunConfig cfg, std::ostream& out, std::ostream& err) {
  (void)err;
  Network<float> net = cfg.checkpoint.empty() ? Network<float>(spec_for(cfg), cfg.seed) : load_checkpoint(cfg.checkpoint);
  net.freeze();
  const ModelSpec spec = net.spec();
  cfg.img_size = spec.img_size;
  const fs::path dir = prepare_out(cfg);
  write_resolved(dir, cfg);
  std::vector<Tensor> images;
  for (auto& s : synth_dataset(static_cast<std::size_t>(cfg.bench_images), spec.num_classes, spec.img_size, cfg.seed)) {
    images.push_back(std::move(s.image));
  }
  const std::size_t params = count_params(net);
  const double gflops = estimate_gflops(net, spec);
  const BenchResult b = benchmark(net, images, cfg.warmup, post_options(cfg));
  const json j = bench_json(cfg, spec, params, gflops, b);
  write_json(dir / "bench.json", j);
  out << j.dump(2) << '\n';
  return kExitOk;
}

int cmd_tune(RunConfig cfg, std::ostream& out, std::ostream& err) {
  (void)err;
  const ModelSpec spec = spec_for(cfg);
  cfg.img_size = spec.img_size;
  const fs::path dir = prepare_out(cfg);
  write_resolved(dir, cfg);
  TuneResult result;
  result.chosen_img_size = spec.img_size;
  result.chosen_batch = cfg.batch == "auto" ? 0 : std::stoi(cfg.batch);
  result.scaled_wd = scaled_weight_decay(std::max(1, result.chosen_batch));

  if (cfg.tune == "batch" || cfg.tune == "both") {
    Network<float> net(spec, cfg.seed);
    const MemoryModel mem = memory_model(net);
    const double gflops = estimate_gflops(net, spec);
    const DbsaResult r = dbsa_search([&](int b) { return mem.bytes(b); },
                                     [&](int b) { return modelled_step_ms(gflops, b); }, cfg.mem_budget);
    result.chosen_batch = r.batch;
    result.scaled_wd = r.scaled_wd;
    result.trial_log.insert(result.trial_log.end(), r.trials.begin(), r.trials.end());
  }
  if (cfg.tune == "imgsize" || cfg.tune == "both") {
    const std::vector<int> candidates = cfg.candidates.empty() ? default_imgsize_candidates() : cfg.candidates;
    const int n_images = cfg.synthetic > 0 ? cfg.synthetic : 16;
    const int batch = std::max(1, std::min(result.chosen_batch > 0 ? result.chosen_batch : 16, n_images));
    auto fitness = [&](int size) {
      const ModelSpec s = make_spec(spec.family, spec.size, spec.num_classes, size);
      Network<float> net(s, cfg.seed);
      Splits sp = split_samples(synth_dataset(static_cast<std::size_t>(n_images), s.num_classes, size, cfg.seed), cfg.seed);
      TrainConfig tc;
      tc.batch = batch;
      tc.nominal_batch = batch;
      tc.lr0 = cfg.lr0;
      tc.weights = cfg.weights;
      tc.decode = parse_decode_mode(cfg.decode);
      tc.seed = cfg.seed;
      Trainer trainer(net, tc);
      while (trainer.steps() < cfg.fitness_steps) trainer.train_epoch(sp.train, cfg.fitness_steps);
      const auto& eval_set = sp.val.empty() ? sp.train : sp.val;
      return evaluate(net, eval_set, post_options(cfg), batch, cfg.match_iou).report.paper_map;
    };
    result.chosen_img_size = automl_imgsize(candidates, fitness, &result.trial_log);
  }
  write_trial_log(dir / "trial_log.jsonl", result.trial_log);
  const json j = {{"chosen_batch", result.chosen_batch},
                  {"scaled_wd", result.scaled_wd},
                  {"chosen_img_size", result.chosen_img_size},
                  {"trials", result.trial_log.size()}};
  write_json(dir / "tune_result.json", j);
  out << j.dump(2) << '\n';
  return kExitOk;
}

int cmd_gradcheck(RunConfig cfg, std::ostream& out, std::ostream& err) {
  (void)err;
  const fs::path dir = prepare_out(cfg);
  write_resolved(dir, cfg);
  GradcheckOptions opt;
  opt.inject_fault = cfg.inject_fault;
  std::map<std::string, GradcheckResult> worst;
  for (int s = 1; s <= cfg.seeds; ++s) {
    for (const auto& r : run_block_gradchecks(cfg.seed + static_cast<std::uint64_t>(s), opt)) {
      auto it = worst.find(r.name);
      if (it == worst.end()) {
        worst.emplace(r.name, r);
        continue;
      }
      it->second.max_rel_err = std::max(it->second.max_rel_err, r.max_rel_err);
      it->second.coords += r.coords;
      it->second.passed = it->second.passed && r.passed;
    }
  }
  bool all = true;
  json rows = json::array();
  out << std::left << std::setw(12) << "block" << std::right << std::setw(14) << "max_rel_err" << std::setw(8)
      << "coords" << "  status\n";
  for (const auto& name : gradcheck_block_names()) {
    const GradcheckResult& r = worst.at(name);
    all = all && r.passed;
    out << std::left << std::setw(12) << name << std::right << std::setw(14) << std::scientific << std::setprecision(3)
        << r.max_rel_err << std::defaultfloat << std::setw(8) << r.coords << "  " << (r.passed ? "PASS" : "FAIL") << '\n';
    rows.push_back({{"block", name}, {"max_rel_err", r.max_rel_err}, {"coords", r.coords}, {"passed", r.passed}});
  }
  write_json(dir / "gradcheck.json", {{"seeds", cfg.seeds}, {"tolerance", opt.tol}, {"blocks", rows}, {"passed", all}});
  return all ? kExitOk : kExitVerification;
}

int histogram_bin(double v, int bins) { return std::clamp(static_cast<int>(v * bins), 0, bins - 1); }

std::string bar_line(const std::vector<int>& h) {
  std::ostringstream os;
  for (std::size_t i = 0; i < h.size(); ++i) os << (i ? " " : "") << h[i];
  return os.str();
}

int cmd_dataset(RunConfig cfg, std::ostream& out, std::ostream& err) {
  const fs::path dir = prepare_out(cfg);
  write_resolved(dir, cfg);
  SplitSpec ss;
  ss.seed = cfg.seed;
  auto write_split = [&](const std::string& name, const std::vector<std::size_t>& idx,
                         const std::vector<std::string>* names) {
    std::ofstream f(dir / ("split_" + name + ".txt"));
    for (auto i : idx) f << (names ? (*names)[i] : std::to_string(i)) << '\n';
  };
  if (cfg.stub > 0) {
    const SplitIndices idx = split_dataset(static_cast<std::size_t>(cfg.stub), ss);
    write_split("train", idx.train, nullptr);
    write_split("val", idx.val, nullptr);
    write_split("test", idx.test, nullptr);
    out << json{{"items", cfg.stub}, {"train", idx.train.size()}, {"val", idx.val.size()}, {"test", idx.test.size()}}.dump()
        << '\n';
    return kExitOk;
  }

  const ModelSpec spec = spec_for(cfg);
  std::vector<Sample> samples;
  if (cfg.synthetic > 0) {
    samples = synth_dataset(static_cast<std::size_t>(cfg.synthetic), cfg.num_classes, spec.img_size, cfg.seed);
    save_dataset(dir / "dataset", samples);
  } else {
    samples = load_samples(cfg, spec, err);
  }
  const int bins = 10;
  std::vector<int> per_class(static_cast<std::size_t>(cfg.num_classes), 0);
  std::vector<int> size_hist(bins, 0), x_hist(bins, 0), y_hist(bins, 0);
  int labels = 0;
  for (const auto& s : samples) {
    for (const auto& a : s.annotations) {
      ++labels;
      if (a.class_id >= 0 && a.class_id < cfg.num_classes) ++per_class[static_cast<std::size_t>(a.class_id)];
      ++size_hist[static_cast<std::size_t>(histogram_bin(std::sqrt(a.area()), bins))];
      ++x_hist[static_cast<std::size_t>(histogram_bin(a.cx, bins))];
      ++y_hist[static_cast<std::size_t>(histogram_bin(a.cy, bins))];
    }
  }
  std::vector<std::string> names;
  for (const auto& s : samples) names.push_back(s.source_path);
  if (samples.size() >= 3) {
    const SplitIndices idx = split_dataset(samples.size(), ss);
    write_split("train", idx.train, &names);
    write_split("val", idx.val, &names);
    write_split("test", idx.test, &names);
  }
  const auto class_names = default_class_names(cfg.num_classes);
  json counts = json::object();
  for (int c = 0; c < cfg.num_classes; ++c) counts[class_names[static_cast<std::size_t>(c)]] = per_class[static_cast<std::size_t>(c)];
  const json stats = {{"images", samples.size()},  {"labels", labels},       {"per_class", counts},
                      {"size_hist", size_hist},    {"center_x_hist", x_hist}, {"center_y_hist", y_hist},
                      {"hist_bins", bins}};
  write_json(dir / "dataset_stats.json", stats);
  out << "images " << samples.size() << ", labels " << labels << '\n';
  for (int c = 0; c < cfg.num_classes; ++c) {
    out << "  " << class_names[static_cast<std::size_t>(c)] << ": " << per_class[static_cast<std::size_t>(c)] << '\n';
  }
  out << "box size (sqrt area, 10 bins over [0,1]): " << bar_line(size_hist) << '\n';
  out << "center x (10 bins): " << bar_line(x_hist) << '\n';
  out << "center y (10 bins): " << bar_line(y_hist) << '\n';
  return kExitOk;
}

// ===========================================================================
// Argument parsing
// ===========================================================================

std::string prescan_config(const std::vector<std::string>& args) {
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (args[i] == "--config" && i + 1 < args.size()) return args[i + 1];
    if (args[i].rfind("--config=", 0) == 0) return args[i].substr(9);
  }
  return {};
}

void add_common(CLI::App* sub, RunConfig& c, std::string& config_path) {
  sub->add_option("--config", config_path, "Resolved-config JSON to start from");
  sub->add_option("--model", c.model, "mfnet | mfnet-fa");
  sub->add_option("--size", c.size, "s | m | l | toy");
  sub->add_option("--img-size", c.img_size, "Square input size (multiple of 32)");
  sub->add_option("--classes", c.num_classes, "Number of classes");
  sub->add_option("--seed", c.seed, "Seed for data, init and splits");
  sub->add_option("--decode", c.decode, "paper | v5");
  sub->add_option("--conf", c.conf, "Score threshold");
  sub->add_option("--iou", c.iou, "NMS IoU threshold");
  sub->add_option("--out", c.out, "Output directory");
}

void add_data(CLI::App* sub, RunConfig& c) {
  sub->add_option("--data", c.data, "Dataset root with images/*.ppm and labels/*.txt");
  sub->add_option("--synthetic", c.synthetic, "Use N procedurally generated images");
  sub->add_flag("--strict", c.strict, "Missing label files are errors");
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  RunConfig cfg;
  std::string config_path;
  try {
    config_path = prescan_config(args);
    if (!config_path.empty()) {
      std::ifstream f(config_path);
      if (!f) throw ConfigError("cannot read config " + config_path);
      json j;
      try {
        j = json::parse(f);
      } catch (const json::exception& e) {
        throw ConfigError("config " + config_path + " is not valid JSON: " + e.what());
      }
      cfg = config_from_json(j);
    }
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  }

  CLI::App app("MFNet / MFNet-FA detection toolkit", "mfnet");
  app.require_subcommand(1);
  auto* train = app.add_subcommand("train", "Train a detector");
  auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint");
  auto* detect = app.add_subcommand("detect", "Run detection on PPM images");
  auto* bench = app.add_subcommand("bench", "Parameters, GFLOPs and stage timings");
  auto* tune = app.add_subcommand("tune", "Batch-size and image-size search");
  auto* grad = app.add_subcommand("gradcheck", "Finite-difference gradient checks");
  auto* dataset = app.add_subcommand("dataset", "Dataset statistics and splits");
  for (auto* sub : {train, eval, detect, bench, tune, grad, dataset}) add_common(sub, cfg, config_path);
  for (auto* sub : {train, eval, tune, dataset}) add_data(sub, cfg);

  for (auto* sub : {train, tune}) {
    sub->add_option("--batch", cfg.batch, "Batch size or 'auto'");
    sub->add_option("--lr", cfg.lr0, "Initial learning rate");
    sub->add_option("--mem-budget", cfg.mem_budget, "Memory budget in bytes for batch search");
  }
  train->add_option("--epochs", cfg.epochs, "Training epochs");
  train->add_option("--max-steps", cfg.max_steps, "Stop after this many optimizer steps (0 = no limit)");
  train->add_option("--nominal-batch", cfg.nominal_batch, "Accumulate gradients toward this batch");
  train->add_option("--split", cfg.split, "Train on the train split (default) or 'all'");
  train->add_option("--lambda-cls", cfg.weights.cls, "Class loss weight");
  train->add_option("--lambda-obj", cfg.weights.obj, "Objectness loss weight");
  train->add_option("--lambda-loc", cfg.weights.loc, "Localization loss weight");
  train->add_option("--lambda-noobj", cfg.weights.noobj, "No-object weight");
  train->add_option("--lambda-coord", cfg.weights.coord, "Size-term weight");
  for (auto* sub : {train, eval}) sub->add_option("--match-iou", cfg.match_iou, "IoU for TP matching");

  eval->add_option("--checkpoint", cfg.checkpoint, "Checkpoint file")->required();
  eval->add_option("--split", cfg.split, "train | val | test | all (default test)");
  eval->add_option("--detections", cfg.detections, "Score this JSON-lines dump instead of running the model");

  detect->add_option("--checkpoint", cfg.checkpoint, "Checkpoint file")->required();
  detect->add_option("--data", cfg.data, "Directory of .ppm images");
  detect->add_option("images", cfg.images, "PPM images");

  bench->add_option("--checkpoint", cfg.checkpoint, "Checkpoint file (default: fresh network)");
  bench->add_option("--images", cfg.bench_images, "Number of synthetic images to time");
  bench->add_option("--warmup", cfg.warmup, "Untimed warmup passes");

  tune->add_option("--tune", cfg.tune, "batch | imgsize | both");
  tune->add_option("--candidates", cfg.candidates, "Image-size candidates")->delimiter(',');
  tune->add_option("--fitness-steps", cfg.fitness_steps, "Training steps per image-size trial");

  grad->add_option("--seeds", cfg.seeds, "Number of seeds");
  grad->add_flag("--inject-fault", cfg.inject_fault, "Corrupt one analytic gradient (test hook)");

  dataset->add_option("--stub", cfg.stub, "Only split N anonymous items");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    std::ostringstream o, x;
    const int code = app.exit(e, o, x);
    out << o.str();
    err << x.str();
    return code == 0 ? kExitOk : kExitConfig;
  }

  try {
    cfg.command = app.get_subcommands().front()->get_name();
    cfg.validate();
    if (cfg.command == "train") return cmd_train(cfg, out, err);
    if (cfg.command == "eval") return cmd_eval(cfg, out, err);
    if (cfg.command == "detect") return cmd_detect(cfg, out, err);
    if (cfg.command == "bench") return cmd_bench(cfg, out, err);
    if (cfg.command == "tune") return cmd_tune(cfg, out, err);
    if (cfg.command == "gradcheck") return cmd_gradcheck(cfg, out, err);
    if (cfg.command == "dataset") return cmd_dataset(cfg, out, err);
    return kExitConfig;
  } catch (const ResourceError& e) {
    err << "error: " << e.what() << '\n';
    return kExitResource;
  } catch (const VerificationFailure& e) {
    err << "error: " << e.what() << '\n';
    return kExitVerification;
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return kExitConfig;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitFailure;
  }
}

}  // namespace mfnet
