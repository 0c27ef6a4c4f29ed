#include "mfnet/autotune.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>

#include "json.hpp"
#include "mfnet/error.hpp"
#include "mfnet/optim.hpp"

namespace mfnet {

DbsaResult dbsa_search(const std::function<double(int)>& mem_probe, const std::function<double(int)>& time_probe,
                       double budget_bytes, const DbsaOptions& options) {
  if (options.headroom <= 0 || options.headroom > 1) throw ConfigError("dbsa: headroom must lie in (0,1]");
  const double cap = options.headroom * budget_bytes;
  DbsaResult r;
  auto probe = [&](int b) {
    Trial t;
    t.kind = "batch";
    t.setting = b;
    t.memory_bytes = mem_probe(b);
    t.feasible = t.memory_bytes <= cap;
    if (t.feasible) {
      t.time_ms = time_probe(b);
      t.fitness = t.time_ms > 0 ? b / (t.time_ms / 1000.0) : 0.0;
    }
    r.trials.push_back(t);
    return t.feasible;
  };
  if (!probe(1)) {
    throw ResourceError("dbsa: batch 1 needs " + std::to_string(r.trials[0].memory_bytes) + " bytes, over the " +
                        std::to_string(cap) + " byte limit");
  }
  int lo = 1, hi = 0;
  for (long b = 2; b <= options.max_batch; b *= 2) {
    if (probe(static_cast<int>(b))) {
      lo = static_cast<int>(b);
    } else {
      hi = static_cast<int>(b);
      break;
    }
  }
  if (hi == 0) hi = std::min(options.max_batch + 1, lo * 2);
  while (hi - lo > 1 && lo < options.max_batch) {
    const int mid = lo + (hi - lo) / 2;
    if (probe(mid)) {
      lo = mid;
    } else {
      hi = mid;
    }
  }
  r.largest_feasible = lo;
  const Trial* best = nullptr;
  for (const auto& t : r.trials) {
    if (!t.feasible) continue;
    if (!best || t.fitness > best->fitness || (t.fitness == best->fitness && t.setting > best->setting)) best = &t;
  }
  r.batch = best->setting;
  r.scaled_wd = scaled_weight_decay(r.batch);
  return r;
}

std::vector<int> default_imgsize_candidates() {
  std::vector<int> out;
  for (int s = 256; s <= 640; s += 32) out.push_back(s);
  return out;
}

int automl_imgsize(std::vector<int> candidates, const std::function<double(int)>& fitness, std::vector<Trial>* log) {
  if (candidates.empty()) throw ValidationError("automl_imgsize: no candidates");
  for (int c : candidates) {
    if (c < 32 || c % 32 != 0) throw ValidationError("automl_imgsize: candidate " + std::to_string(c) + " is not a multiple of 32");
  }
  std::sort(candidates.begin(), candidates.end());
  candidates.erase(std::unique(candidates.begin(), candidates.end()), candidates.end());
  std::map<int, double> seen;
  auto eval = [&](int size) {
    auto it = seen.find(size);
    if (it != seen.end()) return it->second;
    const double f = fitness(size);
    seen.emplace(size, f);
    if (log) {
      Trial t;
      t.kind = "img_size";
      t.setting = size;
      t.fitness = f;
      log->push_back(t);
    }
    return f;
  };
  std::size_t cur = 0;
  for (std::size_t i = 1; i < candidates.size(); ++i) {
    if (std::abs(candidates[i] - 320) < std::abs(candidates[cur] - 320)) cur = i;
  }
  double f_cur = eval(candidates[cur]);
  for (;;) {
    std::size_t next = cur;
    double f_next = f_cur;
    if (cur > 0) {
      const double f = eval(candidates[cur - 1]);
      if (f >= f_next) {
        next = cur - 1;
        f_next = f;
      }
    }
    if (cur + 1 < candidates.size()) {
      const double f = eval(candidates[cur + 1]);
      if (f > f_next) {
        next = cur + 1;
        f_next = f;
      }
    }
    if (next == cur) break;
    cur = next;
    f_cur = f_next;
  }
  return candidates[cur];
}

MemoryModel memory_model(Network<float>& net) {
  MemoryModel m;
  m.fixed_bytes = 16.0 * static_cast<double>(count_params(net));
  m.per_image_bytes = 8.0 * net.activation_elements();
  return m;
}

void write_trial_log(const std::filesystem::path& path, const std::vector<Trial>& trials) {
  std::ofstream out(path);
  if (!out) throw ValidationError("cannot write " + path.string());
  for (const auto& t : trials) {
    nlohmann::json j = {{"kind", t.kind},         {"setting", t.setting}, {"memory_bytes", t.memory_bytes},
                        {"time_ms", t.time_ms},   {"fitness", t.fitness}, {"feasible", t.feasible}};
    out << j.dump() << '\n';
  }
}

}  // namespace mfnet
