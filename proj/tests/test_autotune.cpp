#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <random>

#include "json.hpp"
#include "mfnet/autotune.hpp"
#include "mfnet/error.hpp"
#include "mfnet/optim.hpp"
#include "test_util.hpp"

namespace mfnet {
namespace {

using testing::TempDir;

double linear_mem(int b) { return 100.0 + 10.0 * b; }
// Throughput b / (10 + b) grows with the batch.
double sublinear_time(int b) { return 10.0 + b; }

int exhaustive_argmax(const std::vector<int>& cands, const std::function<double(int)>& f) {
  int best = cands.front();
  for (int c : cands)
    if (f(c) > f(best)) best = c;  // candidates ascend, so ties keep the smaller size
  return best;
}

TEST(Dbsa, LinearModelLargestFeasible) {
  const auto r = dbsa_search(linear_mem, sublinear_time, 1000);
  EXPECT_EQ(r.largest_feasible, 80);
  EXPECT_EQ(r.batch, 80);
  EXPECT_DOUBLE_EQ(r.scaled_wd, scaled_weight_decay(80));
  bool logged = false;
  for (const auto& t : r.trials) {
    EXPECT_EQ(t.kind, "batch");
    EXPECT_EQ(t.feasible, linear_mem(t.setting) <= 900);
    logged |= t.setting == 80;
  }
  EXPECT_TRUE(logged);
}

TEST(Dbsa, ThroughputPicksAmongFeasible) {
  // Throughput peaks at 16 and falls afterwards.
  auto time = [](int b) { return b <= 16 ? 10.0 : 10.0 * b / 16.0 * (1 + 0.01 * (b - 16)); };
  const auto r = dbsa_search(linear_mem, time, 1000);
  EXPECT_EQ(r.largest_feasible, 80);
  EXPECT_EQ(r.batch, 16);
}

TEST(Dbsa, InfeasibleBudget) {
  EXPECT_THROW(dbsa_search(linear_mem, sublinear_time, 100), ResourceError);
  EXPECT_THROW(dbsa_search(linear_mem, sublinear_time, 120), ResourceError);  // 0.9 * 120 < 110
  EXPECT_EQ(dbsa_search(linear_mem, sublinear_time, 123).batch, 1);
}

TEST(Dbsa, BudgetMonotonicityAndFeasibility) {
  int prev = 0;
  for (double budget = 130; budget < 2e5; budget *= 1.13) {
    const auto r = dbsa_search(linear_mem, sublinear_time, budget);
    EXPECT_LE(linear_mem(r.batch), 0.9 * budget);
    EXPECT_GT(linear_mem(r.largest_feasible + 1), 0.9 * budget);
    EXPECT_GE(r.batch, prev);
    prev = r.batch;
  }
}

TEST(Dbsa, MaxBatchCap) {
  DbsaOptions opt;
  opt.max_batch = 50;
  const auto r = dbsa_search(linear_mem, sublinear_time, 1e9, opt);
  EXPECT_EQ(r.batch, 50);
}

TEST(Dbsa, TrialLogIsReproducible) {
  TempDir dir("dbsa");
  const auto a = dbsa_search(linear_mem, sublinear_time, 5000), b = dbsa_search(linear_mem, sublinear_time, 5000);
  write_trial_log(dir.path() / "a.jsonl", a.trials);
  write_trial_log(dir.path() / "b.jsonl", b.trials);
  auto slurp = [](const std::filesystem::path& p) {
    std::ifstream in(p);
    return std::string(std::istreambuf_iterator<char>(in), {});
  };
  const std::string text = slurp(dir.path() / "a.jsonl");
  EXPECT_EQ(text, slurp(dir.path() / "b.jsonl"));
  std::istringstream lines(text);
  std::string line;
  std::size_t n = 0;
  while (std::getline(lines, line)) {
    const auto j = nlohmann::json::parse(line);
    EXPECT_EQ(j["setting"].get<int>(), a.trials[n].setting);
    EXPECT_TRUE(j.contains("memory_bytes") && j.contains("time_ms") && j.contains("fitness"));
    ++n;
  }
  EXPECT_EQ(n, a.trials.size());
}

TEST(Automl, PeakAt320) {
  const auto cands = default_imgsize_candidates();
  ASSERT_EQ(cands.front(), 256);
  ASSERT_EQ(cands.back(), 640);
  ASSERT_EQ(cands.size(), 13u);
  std::vector<Trial> log;
  EXPECT_EQ(automl_imgsize(cands, [](int s) { return -std::abs(s - 320.0); }, &log), 320);
  ASSERT_FALSE(log.empty());
  EXPECT_EQ(log.front().setting, 320);
  for (const auto& t : log) EXPECT_EQ(t.setting % 32, 0);
}

TEST(Automl, SingleCandidateAndErrors) {
  EXPECT_EQ(automl_imgsize({512}, [](int) { return 0.0; }), 512);
  EXPECT_THROW(automl_imgsize({}, [](int) { return 0.0; }), ValidationError);
  EXPECT_THROW(automl_imgsize({320, 300}, [](int) { return 0.0; }), ValidationError);
}

TEST(Automl, PeakAt448MatchesExhaustive) {
  const auto cands = default_imgsize_candidates();
  auto f = [](int s) { return -std::pow(s - 448.0, 2); };
  EXPECT_EQ(automl_imgsize(cands, f), 448);
  EXPECT_EQ(automl_imgsize(cands, f), exhaustive_argmax(cands, f));
}

TEST(Automl, TiesDriftToSmallerSizes) {
  const auto cands = default_imgsize_candidates();
  auto flat = [](int) { return 1.0; };
  EXPECT_EQ(automl_imgsize(cands, flat), 256);
  EXPECT_EQ(automl_imgsize(cands, flat), exhaustive_argmax(cands, flat));
  // Plateau above 320: the climb never leaves the start.
  EXPECT_EQ(automl_imgsize(cands, [](int s) { return s >= 320 ? 1.0 : 0.0; }), 320);
}

TEST(Automl, RandomUnimodalEqualsExhaustiveArgmax) {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> peak(200, 700), slope(0.01, 5);
  for (int trial = 0; trial < 100; ++trial) {
    auto cands = default_imgsize_candidates();
    // Random contiguous sub-lattice, not always containing 320.
    const std::size_t lo = rng() % 6, hi = cands.size() - rng() % 6;
    cands = std::vector<int>(cands.begin() + static_cast<std::ptrdiff_t>(lo),
                             cands.begin() + static_cast<std::ptrdiff_t>(hi));
    const double p = peak(rng), left = slope(rng), right = slope(rng);
    auto f = [=](int s) { return s < p ? -left * (p - s) : -right * (s - p); };
    EXPECT_EQ(automl_imgsize(cands, f), exhaustive_argmax(cands, f)) << trial;
  }
}

TEST(MemoryModel, ParamsAndActivations) {
  Network<float> net(make_spec(Family::kMFNetFA, SizePreset::kToy, 2), 1);
  const auto m = memory_model(net);
  EXPECT_DOUBLE_EQ(m.fixed_bytes, 16.0 * static_cast<double>(count_params(net)));
  EXPECT_GT(m.per_image_bytes, 0);
  EXPECT_DOUBLE_EQ(m.bytes(3) - m.bytes(2), m.per_image_bytes);
  Network<float> big(make_spec(Family::kMFNetFA, SizePreset::kToy, 2, 128), 1);
  EXPECT_NEAR(memory_model(big).per_image_bytes / m.per_image_bytes, 4.0, 0.2);
}

}  // namespace
}  // namespace mfnet
