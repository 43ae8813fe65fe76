#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "msaw/errors.hpp"
#include "msaw/evaluator.hpp"
#include "msaw/trainer.hpp"

namespace msaw::ablation {

/// Switches of one ablation; modes combine with '+', e.g.
/// "no-attention+uniform-weights".
struct Mode {
  bool no_attention = false;     // lambda1 = 0
  bool uniform_weights = false;  // fixed 1/3 scale weights
  bool no_final = false;         // fusion without the deep feature

  std::string name() const {
    std::string s;
    auto add = [&](bool on, const char* part) {
      if (!on) return;
      if (!s.empty()) s += "+";
      s += part;
    };
    add(no_attention, "no-attention");
    add(uniform_weights, "uniform-weights");
    add(no_final, "no-final-concat");
    return s.empty() ? "full" : s;
  }
};

inline Mode parse_mode(const std::string& text) {
  Mode m;
  std::istringstream in(text);
  bool any = false;
  for (std::string part; std::getline(in, part, '+');) {
    any = true;
    if (part == "full") continue;
    if (part == "no-attention") m.no_attention = true;
    else if (part == "uniform-weights") m.uniform_weights = true;
    else if (part == "no-final-concat") m.no_final = true;
    else throw UsageError("unknown ablation mode '" + part + "' (full, no-attention, uniform-weights, no-final-concat)");
  }
  if (!any) throw UsageError("empty ablation mode");
  return m;
}

inline train::TrainConfig apply_mode(train::TrainConfig cfg, const Mode& m) {
  if (m.no_attention) cfg.loss_weights.attention = 0.0;
  if (m.uniform_weights) cfg.weighting = awc::Weighting::uniform;
  if (m.no_final) cfg.use_final = false;
  return cfg;
}

struct RunOutcome {
  std::string mode;
  std::uint64_t seed = 0;
  eval::EvalReport report;
  eval::ConfusionMatrix confusion;
  double separation_gap = 0;
  double final_train_acc = 0;
};

/// Trains and evaluates one configuration; artifacts go to out_dir when it is
/// non-empty.
inline RunOutcome run_one(const data::Manifest& manifest, const train::TrainConfig& cfg, const Mode& mode,
                          const std::filesystem::path& out_dir, std::size_t workers = 1) {
  const train::TrainConfig run_cfg = apply_mode(cfg, mode);
  train::FitOptions options;
  options.keep_scale_weights = !out_dir.empty();
  auto fit = train::fit(manifest, run_cfg, out_dir, options);
  const auto ev = eval::evaluate(fit.model, manifest, workers);
  RunOutcome r;
  r.mode = mode.name();
  r.seed = run_cfg.seed;
  r.confusion = ev.confusion;
  r.report = eval::metrics(ev.confusion, manifest.classes);
  r.separation_gap = eval::held_out_separation(fit.model, manifest, run_cfg.attention.power_iterations);
  r.final_train_acc = fit.epochs.empty() ? 0.0 : fit.epochs.back().train_acc;
  if (!out_dir.empty()) {
    std::map<std::size_t, eval::EvalReport> one{{manifest.min_count(data::Split::train), r.report}};
    data::write_file(out_dir / "report.txt", eval::render_report(one, manifest.classes));
    data::write_file(out_dir / "confusion.csv", eval::confusion_csv(ev.confusion, manifest.classes));
  }
  return r;
}

/// Every mode for seeds seed, seed+1, ...; each run writes to
/// out_dir/<mode>/seed<k> when out_dir is non-empty.
inline std::vector<RunOutcome> run_ablation(const data::Manifest& manifest, const train::TrainConfig& cfg,
                                            const std::vector<Mode>& modes, std::size_t seeds,
                                            const std::filesystem::path& out_dir, std::size_t workers = 1,
                                            const std::function<void(const RunOutcome&)>& progress = {}) {
  std::vector<RunOutcome> out;
  for (const Mode& mode : modes) {
    for (std::size_t s = 0; s < seeds; ++s) {
      train::TrainConfig c = cfg;
      c.seed = cfg.seed + s;
      const auto dir = out_dir.empty() ? out_dir : out_dir / mode.name() / ("seed" + std::to_string(c.seed));
      out.push_back(run_one(manifest, c, mode, dir, workers));
      if (progress) progress(out.back());
    }
  }
  return out;
}

struct Summary {
  std::string mode;
  std::size_t runs = 0;
  double accuracy_mean = 0, accuracy_std = 0;
  double gap_mean = 0, gap_std = 0;
};

/// Mean and sample standard deviation per mode, in first-seen order.
inline std::vector<Summary> summarize(const std::vector<RunOutcome>& runs) {
  std::vector<Summary> out;
  for (const auto& r : runs) {
    if (std::none_of(out.begin(), out.end(), [&](const Summary& s) { return s.mode == r.mode; }))
      out.push_back({r.mode});
  }
  auto stats = [](const std::vector<double>& v, double& mean, double& sd) {
    mean = 0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double ss = 0;
    for (double x : v) ss += (x - mean) * (x - mean);
    sd = v.size() > 1 ? std::sqrt(ss / static_cast<double>(v.size() - 1)) : 0.0;
  };
  for (auto& s : out) {
    std::vector<double> acc, gap;
    for (const auto& r : runs) {
      if (r.mode != s.mode) continue;
      acc.push_back(r.report.accuracy);
      gap.push_back(r.separation_gap);
    }
    s.runs = acc.size();
    stats(acc, s.accuracy_mean, s.accuracy_std);
    stats(gap, s.gap_mean, s.gap_std);
  }
  return out;
}

inline std::string summary_csv(const std::vector<Summary>& rows) {
  std::string out = "mode,runs,accuracy_mean,accuracy_std,separation_gap_mean,separation_gap_std\n";
  for (const auto& s : rows)
    out += s.mode + "," + std::to_string(s.runs) + "," + train::format_float(s.accuracy_mean) + "," +
           train::format_float(s.accuracy_std) + "," + train::format_float(s.gap_mean) + "," +
           train::format_float(s.gap_std) + "\n";
  return out;
}

inline std::string runs_csv(const std::vector<RunOutcome>& runs) {
  std::string out = "mode,seed,accuracy,macro_recall,macro_precision,f1,separation_gap,final_train_acc\n";
  for (const auto& r : runs)
    out += r.mode + "," + std::to_string(r.seed) + "," + train::format_float(r.report.accuracy) + "," +
           train::format_float(r.report.macro_recall) + "," + train::format_float(r.report.macro_precision) + "," +
           train::format_float(r.report.f1) + "," + train::format_float(r.separation_gap) + "," +
           train::format_float(r.final_train_acc) + "\n";
  return out;
}

}  // namespace msaw::ablation
