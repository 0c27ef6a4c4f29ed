#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "json.hpp"
#include "mfnet/loss.hpp"

namespace mfnet {

// Process exit codes.
enum ExitCode : int {
  kExitOk = 0,
  kExitFailure = 1,
  kExitConfig = 2,
  kExitResource = 3,
  kExitVerification = 4,
};

struct RunConfig {
  std::string command;
  std::string model = "mfnet";
  std::string size = "s";
  int img_size = 0;  // 0 = preset default
  int num_classes = 2;
  std::string batch = "16";  // integer or "auto"
  int nominal_batch = 64;
  int epochs = 30;
  int max_steps = 0;
  std::uint64_t seed = 0;
  std::string decode = "paper";
  double conf = 0.25;
  double iou = 0.45;
  double match_iou = 0.5;
  double lr0 = 0.01;
  LossWeights weights;
  int synthetic = 0;
  bool strict = false;
  std::string data;        // dataset root with images/ and labels/
  std::string checkpoint;  // input checkpoint (eval, detect, bench)
  std::string out = "runs";
  std::string split = "";  // train|val|test|all; empty = command default
  std::string detections;  // eval: re-score this JSON-lines dump instead of running the model
  std::vector<std::string> images;  // detect inputs
  double mem_budget = 2e9;          // bytes, for --batch auto and tune
  std::string tune = "both";        // batch|imgsize|both
  std::vector<int> candidates;      // image sizes for tune; empty = 256..640
  int fitness_steps = 20;
  int seeds = 5;                    // gradcheck
  bool inject_fault = false;        // gradcheck negative control
  int bench_images = 8;
  int warmup = 2;
  int stub = 0;                     // dataset: index-only split of this many items

  // Throws ConfigError.
  void validate() const;
};

nlohmann::json config_to_json(const RunConfig& cfg);
RunConfig config_from_json(const nlohmann::json& j);

// Parses argv, runs the subcommand and maps errors onto exit codes. Human
// output goes to `out`, diagnostics to `err`.
int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err);

}  // namespace mfnet
