#pragma once

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <cstdlib>
#include <exception>
#include <functional>
#include <iomanip>
#include <limits>
#include <mutex>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "dsfpn/instrument.hpp"
#include "dsfpn/training.hpp"

namespace dsfpn {

// One training job of a sweep.
struct AblationRun {
  std::string label;
  ModelConfig model;
  TrainConfig train;
};

struct RunOutcome {
  std::string label;
  std::uint64_t seed = 0;
  ApMetrics final_val;
  LearningCurve curve;
  std::vector<LogRow> log;
  double seconds = 0;
};

// Worker count for sweeps: DSFPN_THREADS when set to a positive integer, otherwise the hardware concurrency.
inline std::size_t ablation_threads() {
  if (const char* env = std::getenv("DSFPN_THREADS")) {
    char* end = nullptr;
    const long v = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && v > 0) return static_cast<std::size_t>(v);
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

// Runs every job (each one single-threaded and self-seeded); results come back in job order regardless of
// scheduling. The first failure is rethrown after all workers stop.
inline std::vector<RunOutcome> run_all(const std::vector<AblationRun>& runs, const std::vector<const Sample*>& train_set,
                                       const std::vector<const Sample*>& val_set, std::size_t threads,
                                       const std::function<void(const RunOutcome&)>& on_done = {}) {
  std::vector<RunOutcome> out(runs.size());
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  std::mutex mu;
  auto worker = [&] {
    for (std::size_t i = next++; i < runs.size(); i = next++) {
      try {
        const auto t0 = std::chrono::steady_clock::now();
        auto result = train<float>(runs[i].model, runs[i].train, train_set, val_set);
        RunOutcome& o = out[i];
        o.label = runs[i].label;
        o.seed = runs[i].train.seed;
        o.curve = result.evals;
        o.final_val = result.evals.empty() ? ApMetrics{} : result.evals.back().val;
        o.log = std::move(result.log);
        o.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::lock_guard lock(mu);
        if (on_done) on_done(o);
      } catch (...) {
        std::lock_guard lock(mu);
        if (!failure) failure = std::current_exception();
        next = runs.size();
      }
    }
  };
  const std::size_t n = std::max<std::size_t>(1, std::min(threads, runs.size()));
  if (n == 1) {
    worker();
  } else {
    std::vector<std::thread> pool;
    for (std::size_t t = 0; t < n; ++t) pool.emplace_back(worker);
    for (auto& t : pool) t.join();
  }
  if (failure) std::rethrow_exception(failure);
  return out;
}

// ---- sweeps ----

inline std::string mark(bool on) { return on ? "✓" : "✗"; }

inline std::string ds_dc_label(bool ds, bool dc) { return "ds=" + mark(ds) + " dc=" + mark(dc); }
inline std::string box_source_label(std::size_t s) { return "B" + std::to_string(s); }
inline const std::string kBaselineLabel = "baseline";
inline const std::string kDsfpnLabel = "dsfpn";

// Rows (✗,✗), (✓,✗), (✗,✓), (✓,✓), each over every seed; two-stage detector.
inline std::vector<AblationRun> ds_dc_runs(ModelConfig base, const TrainConfig& train, const std::vector<std::uint64_t>& seeds) {
  base.num_stages = 1;
  base.aux_box_source = 0;
  std::vector<AblationRun> runs;
  for (auto [ds, dc] : {std::pair{false, false}, {true, false}, {false, true}, {true, true}}) {
    for (auto seed : seeds) {
      AblationRun r{ds_dc_label(ds, dc), base, train};
      r.model.ds_enabled = ds;
      r.model.dc_enabled = dc;
      r.train.seed = seed;
      runs.push_back(r);
    }
  }
  return runs;
}

// Three-stage cascade with dual supervision, aux boxes from B0, B1, B2.
inline std::vector<AblationRun> box_source_runs(ModelConfig base, const TrainConfig& train,
                                                const std::vector<std::uint64_t>& seeds) {
  base.num_stages = 3;
  base.ds_enabled = true;
  std::vector<AblationRun> runs;
  for (std::size_t source = 0; source < 3; ++source) {
    for (auto seed : seeds) {
      AblationRun r{box_source_label(source), base, train};
      r.model.aux_box_source = source;
      r.train.seed = seed;
      runs.push_back(r);
    }
  }
  return runs;
}

// Baseline and dual-supervised detector (decoupling as in `base`) on a shared evaluation grid.
inline std::vector<AblationRun> convergence_runs(ModelConfig base, const TrainConfig& train,
                                                 const std::vector<std::uint64_t>& seeds) {
  base.num_stages = 1;
  base.aux_box_source = 0;
  std::vector<AblationRun> runs;
  for (bool ds : {false, true}) {
    for (auto seed : seeds) {
      AblationRun r{ds ? kDsfpnLabel : kBaselineLabel, base, train};
      r.model.ds_enabled = ds;
      r.train.seed = seed;
      runs.push_back(r);
    }
  }
  return runs;
}

// ---- tables ----

struct MeanSd {
  double mean = 0, sd = 0;
};

inline MeanSd mean_sd(const std::vector<double>& v) {
  MeanSd m;
  if (v.empty()) return m;
  for (double x : v) m.mean += x;
  m.mean /= double(v.size());
  if (v.size() > 1) {
    for (double x : v) m.sd += (x - m.mean) * (x - m.mean);
    m.sd = std::sqrt(m.sd / double(v.size() - 1));
  }
  return m;
}

inline double median(std::vector<double> v) {
  if (v.empty()) return std::numeric_limits<double>::quiet_NaN();
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

struct TableRow {
  std::string label;
  ModelConfig model;
  std::size_t seeds = 0;
  MeanSd ap, ap50, ap75;
};

// Aggregates outcomes by label, in first-appearance order.
inline std::vector<TableRow> summarize_runs(const std::vector<AblationRun>& runs, const std::vector<RunOutcome>& outcomes) {
  std::vector<TableRow> rows;
  for (std::size_t i = 0; i < runs.size(); ++i) {
    auto it = std::find_if(rows.begin(), rows.end(), [&](const TableRow& r) { return r.label == runs[i].label; });
    if (it != rows.end()) continue;
    TableRow row{runs[i].label, runs[i].model, 0, {}, {}, {}};
    std::vector<double> ap, ap50, ap75;
    for (const auto& o : outcomes) {
      if (o.label != row.label) continue;
      ap.push_back(o.final_val.ap);
      ap50.push_back(o.final_val.ap50);
      ap75.push_back(o.final_val.ap75);
    }
    row.seeds = ap.size();
    row.ap = mean_sd(ap);
    row.ap50 = mean_sd(ap50);
    row.ap75 = mean_sd(ap75);
    rows.push_back(row);
  }
  return rows;
}

inline const char* kTableHeader = "row,ds,dc,num_stages,aux_box_source,seeds,AP_mean,AP_sd,AP50_mean,AP50_sd,AP75_mean,AP75_sd";

inline std::string table_csv(const std::vector<TableRow>& rows) {
  std::ostringstream os;
  os << std::setprecision(6) << kTableHeader << '\n';
  for (const auto& r : rows) {
    os << r.label << ',' << mark(r.model.ds_enabled) << ',' << mark(r.model.dc_enabled) << ',' << r.model.num_stages
       << ',' << r.model.aux_box_source << ',' << r.seeds << ',' << r.ap.mean << ',' << r.ap.sd << ',' << r.ap50.mean
       << ',' << r.ap50.sd << ',' << r.ap75.mean << ',' << r.ap75.sd << '\n';
  }
  return os.str();
}

inline std::string table_markdown(const std::vector<TableRow>& rows) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(3);
  os << "| row | DS | DC | stages | aux boxes | seeds | AP | AP50 | AP75 |\n";
  os << "|---|---|---|---|---|---|---|---|---|\n";
  for (const auto& r : rows) {
    os << "| " << r.label << " | " << mark(r.model.ds_enabled) << " | " << mark(r.model.dc_enabled) << " | "
       << r.model.num_stages << " | " << (r.model.ds_enabled ? box_source_label(r.model.aux_box_source) : "-") << " | "
       << r.seeds << " | " << r.ap.mean << " ± " << r.ap.sd << " | " << r.ap50.mean << " ± " << r.ap50.sd << " | "
       << r.ap75.mean << " ± " << r.ap75.sd << " |\n";
  }
  return os.str();
}

// Per seed: threshold = fraction · (baseline final AP50); iterations each config needs to reach it on the shared
// grid. A curve that never reaches the threshold counts as infinitely slow.
struct ConvergenceRow {
  std::uint64_t seed = 0;
  double threshold = 0;
  double baseline_iterations = 0;
  double dsfpn_iterations = 0;
};

struct ConvergenceSummary {
  std::vector<ConvergenceRow> rows;
  double baseline_median = 0;
  double dsfpn_median = 0;
};

inline ConvergenceSummary convergence_summary(const std::vector<RunOutcome>& outcomes,
                                              const std::string& baseline = kBaselineLabel,
                                              const std::string& dsfpn = kDsfpnLabel, double fraction = 0.5) {
  ConvergenceSummary s;
  const double never = std::numeric_limits<double>::infinity();
  auto reach = [&](const LearningCurve& c, double t) {
    auto it = iterations_to_reach(c, t);
    return it ? double(*it) : never;
  };
  std::vector<double> b, d;
  for (const auto& base : outcomes) {
    if (base.label != baseline) continue;
    for (const auto& ds : outcomes) {
      if (ds.label != dsfpn || ds.seed != base.seed) continue;
      ConvergenceRow row;
      row.seed = base.seed;
      row.threshold = fraction * (base.curve.empty() ? 0.0 : base.curve.back().val.ap50);
      row.baseline_iterations = reach(base.curve, row.threshold);
      row.dsfpn_iterations = reach(ds.curve, row.threshold);
      b.push_back(row.baseline_iterations);
      d.push_back(row.dsfpn_iterations);
      s.rows.push_back(row);
    }
  }
  s.baseline_median = median(b);
  s.dsfpn_median = median(d);
  return s;
}

inline std::string convergence_csv(const ConvergenceSummary& s) {
  std::ostringstream os;
  os << std::setprecision(6) << "seed,threshold_ap50,baseline_iterations,dsfpn_iterations\n";
  for (const auto& r : s.rows) {
    os << r.seed << ',' << r.threshold << ',' << r.baseline_iterations << ',' << r.dsfpn_iterations << '\n';
  }
  os << "median,," << s.baseline_median << ',' << s.dsfpn_median << '\n';
  return os.str();
}

inline std::vector<std::pair<std::string, LearningCurve>> labelled_curves(const std::vector<RunOutcome>& outcomes) {
  std::vector<std::pair<std::string, LearningCurve>> out;
  for (const auto& o : outcomes) out.emplace_back(o.label + " seed=" + std::to_string(o.seed), o.curve);
  return out;
}

}  // namespace dsfpn
