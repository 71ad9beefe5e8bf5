#pragma once

// Episodic task generation: the periodic-function regression benchmark and a
// synthetic few-shot classification family (Gaussian clusters on a ring with
// a train/test class split), plus a line-oriented task record format.
//
// Generators are pure functions of (config, stream, index) so tasks can be
// re-drawn deterministically and in parallel.

#include <charconv>
#include <cmath>
#include <cstdint>
#include <istream>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include "dkt/rng.hpp"

namespace dkt {

struct parse_error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

enum class SineMode { Train, TestIn, TestOut };

inline std::string sine_mode_name(SineMode m) {
  switch (m) {
    case SineMode::Train: return "train";
    case SineMode::TestIn: return "test_in";
    case SineMode::TestOut: return "test_out";
  }
  throw std::logic_error("bad mode");
}

inline SineMode sine_mode_from_name(const std::string& s) {
  if (s == "train") return SineMode::Train;
  if (s == "test_in") return SineMode::TestIn;
  if (s == "test_out") return SineMode::TestOut;
  throw parse_error("unknown task mode '" + s + "'");
}

struct SineTaskConfig {
  double amplitude_lo = 0.1;
  double amplitude_hi = 5.0;
  double phase_lo = 0.0;
  double phase_hi = M_PI;
  double x_lo_train = -5.0;
  double x_hi_train = 5.0;
  double x_lo_test_out = -5.0;
  double x_hi_test_out = 10.0;
  double noise_sigma = 0.1;
  int n_support = 5;
  int n_query_train = 5;
  int n_query_test = 200;
  std::uint64_t seed = 0;
};

struct RegressionTask {
  SineMode mode = SineMode::Train;
  std::vector<double> support_x, support_y;
  std::vector<double> query_x, query_y;
  double amplitude = 0.0;  // kept for inspection
  double phase = 0.0;
};

// y = A sin(x + φ) + ε. Out-of-range tasks draw every point (support included)
// from the extended domain.
inline RegressionTask sample_sine_task(const SineTaskConfig& cfg, SineMode mode,
                                       std::uint64_t stream, std::uint64_t index) {
  Rng rng = Rng::keyed(cfg.seed, stream, index);
  RegressionTask task;
  task.mode = mode;
  task.amplitude = rng.uniform(cfg.amplitude_lo, cfg.amplitude_hi);
  task.phase = rng.uniform(cfg.phase_lo, cfg.phase_hi);
  const bool out = mode == SineMode::TestOut;
  const double lo = out ? cfg.x_lo_test_out : cfg.x_lo_train;
  const double hi = out ? cfg.x_hi_test_out : cfg.x_hi_train;
  const int nq = mode == SineMode::Train ? cfg.n_query_train : cfg.n_query_test;
  auto draw = [&](std::vector<double>& xs, std::vector<double>& ys, int n) {
    xs.resize(n);
    ys.resize(n);
    for (int i = 0; i < n; ++i) xs[i] = rng.uniform(lo, hi);
    for (int i = 0; i < n; ++i)
      ys[i] = task.amplitude * std::sin(xs[i] + task.phase) +
              (cfg.noise_sigma > 0.0 ? rng.normal(0.0, cfg.noise_sigma) : 0.0);
  };
  draw(task.support_x, task.support_y, cfg.n_support);
  draw(task.query_x, task.query_y, nq);
  return task;
}

// ---------------------------------------------------------------------------
// Synthetic classification family
// ---------------------------------------------------------------------------

enum class ClassSplit { Train, Test };

// Library of 2-D Gaussian clusters centered on a ring; episodes draw C novel
// classes from the split's share of the library.
struct SyntheticFamilyConfig {
  int library_size = 100;
  double ring_radius = 10.0;
  double within_std_ratio = 0.25;  // × inter-center spacing
  double train_fraction = 0.8;
  std::uint64_t split_seed = 0;
  std::uint64_t seed = 0;

  double spacing() const { return 2.0 * M_PI * ring_radius / library_size; }
  double within_std() const { return within_std_ratio * spacing(); }

  std::pair<double, double> center(int cls) const {
    const double theta = 2.0 * M_PI * cls / library_size;
    return {ring_radius * std::cos(theta), ring_radius * std::sin(theta)};
  }

  // Deterministic class split; train classes first, test classes after.
  std::vector<int> split_classes(ClassSplit split) const {
    std::vector<int> ids(library_size);
    std::iota(ids.begin(), ids.end(), 0);
    Rng rng = Rng::keyed(split_seed, rng_stream::kClassSplit, 0);
    for (int i = library_size - 1; i > 0; --i) {
      const int j = static_cast<int>(rng.uniform_int(static_cast<std::uint64_t>(i) + 1));
      std::swap(ids[i], ids[j]);
    }
    const int n_train = static_cast<int>(std::round(train_fraction * library_size));
    if (split == ClassSplit::Train)
      return std::vector<int>(ids.begin(), ids.begin() + n_train);
    return std::vector<int>(ids.begin() + n_train, ids.end());
  }
};

struct ClassificationTask {
  int ways = 5;
  int shots = 1;
  int query_per_class = 16;
  int dim = 2;
  std::vector<double> support_x;  // row-major (ways·shots)×dim
  std::vector<int> support_labels;
  std::vector<double> query_x;  // row-major (ways·query_per_class)×dim
  std::vector<int> query_labels;

  int support_count() const { return static_cast<int>(support_labels.size()); }
  int query_count() const { return static_cast<int>(query_labels.size()); }
};

// C-way K-shot episode with M query points per class, classes relabeled
// 0..C−1 in draw order.
inline ClassificationTask sample_classification_task(const SyntheticFamilyConfig& cfg, int ways,
                                                     int shots, int query_per_class,
                                                     ClassSplit split, std::uint64_t stream,
                                                     std::uint64_t index) {
  std::vector<int> library = cfg.split_classes(split);
  if (ways > static_cast<int>(library.size()))
    throw std::invalid_argument("requested " + std::to_string(ways) + " ways but split has " +
                                std::to_string(library.size()) + " classes");
  Rng rng = Rng::keyed(cfg.seed, stream, index);
  // partial Fisher-Yates for C distinct classes
  for (int i = 0; i < ways; ++i) {
    const int j = i + static_cast<int>(rng.uniform_int(library.size() - i));
    std::swap(library[i], library[j]);
  }
  ClassificationTask task;
  task.ways = ways;
  task.shots = shots;
  task.query_per_class = query_per_class;
  const double sd = cfg.within_std();
  auto emit = [&](std::vector<double>& xs, std::vector<int>& labels, int cls_index, int count) {
    const auto [cx, cy] = cfg.center(library[cls_index]);
    for (int i = 0; i < count; ++i) {
      xs.push_back(cx + sd * rng.normal());
      xs.push_back(cy + sd * rng.normal());
      labels.push_back(cls_index);
    }
  };
  for (int c = 0; c < ways; ++c) emit(task.support_x, task.support_labels, c, shots);
  for (int c = 0; c < ways; ++c) emit(task.query_x, task.query_labels, c, query_per_class);
  return task;
}

// ---------------------------------------------------------------------------
// Task records: one task per line, `mode;C;K;x...;y...`
// ---------------------------------------------------------------------------
//
// Regression: C = 0, K = |S|; x holds support then query inputs, y the
// matching targets. Classification: C = ways, K = shots; x holds 2 coordinates
// per sample (support block first), y the integer labels.

struct TaskRecord {
  bool is_classification = false;
  RegressionTask regression;
  ClassificationTask classification;
};

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
  if (ec != std::errc()) throw std::runtime_error("to_chars failed");
  return std::string(buf, ptr);
}

inline double parse_double(const std::string& tok) {
  double v = 0.0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size())
    throw parse_error("bad numeric field '" + tok + "'");
  return v;
}

inline long parse_long(const std::string& tok) {
  long v = 0;
  auto [ptr, ec] = std::from_chars(tok.data(), tok.data() + tok.size(), v);
  if (ec != std::errc() || ptr != tok.data() + tok.size())
    throw parse_error("bad integer field '" + tok + "'");
  return v;
}

inline std::vector<std::string> split_fields(const std::string& line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (start <= line.size()) {
    const std::size_t pos = line.find(sep, start);
    if (pos == std::string::npos) {
      out.push_back(line.substr(start));
      break;
    }
    out.push_back(line.substr(start, pos - start));
    start = pos + 1;
  }
  return out;
}

}  // namespace detail

inline std::string task_to_record(const RegressionTask& task) {
  std::string out = sine_mode_name(task.mode);
  out += ";0;" + std::to_string(task.support_x.size());
  for (double v : task.support_x) out += ";" + detail::format_double(v);
  for (double v : task.query_x) out += ";" + detail::format_double(v);
  for (double v : task.support_y) out += ";" + detail::format_double(v);
  for (double v : task.query_y) out += ";" + detail::format_double(v);
  return out;
}

inline std::string task_to_record(const ClassificationTask& task) {
  std::string out = "train";
  out += ";" + std::to_string(task.ways) + ";" + std::to_string(task.shots);
  for (double v : task.support_x) out += ";" + detail::format_double(v);
  for (double v : task.query_x) out += ";" + detail::format_double(v);
  for (int v : task.support_labels) out += ";" + std::to_string(v);
  for (int v : task.query_labels) out += ";" + std::to_string(v);
  return out;
}

inline TaskRecord record_to_task(const std::string& line) {
  std::vector<std::string> f = detail::split_fields(line, ';');
  if (f.size() < 3) throw parse_error("record needs at least mode;C;K");
  TaskRecord rec;
  const long ways = detail::parse_long(f[1]);
  const long k = detail::parse_long(f[2]);
  const std::size_t numeric = f.size() - 3;
  if (ways == 0) {
    // regression: 2n numeric fields, n = K support + the rest query
    if (numeric % 2 != 0) throw parse_error("regression record has odd value count");
    const std::size_t n = numeric / 2;
    if (k < 0 || static_cast<std::size_t>(k) > n)
      throw parse_error("support count exceeds sample count");
    RegressionTask& t = rec.regression;
    t.mode = sine_mode_from_name(f[0]);
    std::vector<double> xs(n), ys(n);
    for (std::size_t i = 0; i < n; ++i) xs[i] = detail::parse_double(f[3 + i]);
    for (std::size_t i = 0; i < n; ++i) ys[i] = detail::parse_double(f[3 + n + i]);
    t.support_x.assign(xs.begin(), xs.begin() + k);
    t.query_x.assign(xs.begin() + k, xs.end());
    t.support_y.assign(ys.begin(), ys.begin() + k);
    t.query_y.assign(ys.begin() + k, ys.end());
    return rec;
  }
  if (ways < 2) throw parse_error("classification record needs C >= 2");
  // classification: 2 coordinates + 1 label per sample → 3n numeric fields
  if (numeric % 3 != 0) throw parse_error("classification record has invalid value count");
  const std::size_t n = numeric / 3;
  const std::size_t n_support = static_cast<std::size_t>(ways) * k;
  if (k < 1 || n_support > n) throw parse_error("support block exceeds sample count");
  rec.is_classification = true;
  ClassificationTask& t = rec.classification;
  t.ways = static_cast<int>(ways);
  t.shots = static_cast<int>(k);
  std::vector<double> xs(2 * n);
  std::vector<int> labels(n);
  for (std::size_t i = 0; i < 2 * n; ++i) xs[i] = detail::parse_double(f[3 + i]);
  for (std::size_t i = 0; i < n; ++i) {
    const long lbl = detail::parse_long(f[3 + 2 * n + i]);
    if (lbl < 0 || lbl >= ways) throw parse_error("label out of range");
    labels[i] = static_cast<int>(lbl);
  }
  t.support_x.assign(xs.begin(), xs.begin() + 2 * n_support);
  t.query_x.assign(xs.begin() + 2 * n_support, xs.end());
  t.support_labels.assign(labels.begin(), labels.begin() + n_support);
  t.query_labels.assign(labels.begin() + n_support, labels.end());
  const std::size_t n_query = n - n_support;
  t.query_per_class = static_cast<int>(n_query / ways);
  return rec;
}

// Reads task records line by line; '#' lines are provenance comments. Parse
// failures are rethrown with the 1-based line number.
inline std::vector<TaskRecord> read_task_records(std::istream& in) {
  std::vector<TaskRecord> out;
  std::string line;
  long line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    try {
      out.push_back(record_to_task(line));
    } catch (const parse_error& e) {
      throw parse_error("line " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace dkt
