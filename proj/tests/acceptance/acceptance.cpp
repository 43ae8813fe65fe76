// Runs the eight acceptance checks and prints one PASS/FAIL line for each.
// Exit status is non-zero when any check fails.

#include <malloc.h>

#include <CLI11.hpp>

#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <iostream>
#include <limits>
#include <map>
#include <numbers>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "msaw/ablation.hpp"
#include "msaw/cli.hpp"
#include "msaw/data/balance.hpp"
#include "msaw/data/synthetic.hpp"
#include "msaw/evaluator.hpp"
#include "msaw/gradcheck.hpp"
#include "msaw/msfa.hpp"
#include "msaw/trainer.hpp"
#include "oracles.hpp"
#include "report_fixture.hpp"

#ifndef MSAW_TEST_DATA_DIR
#define MSAW_TEST_DATA_DIR "tests/data"
#endif

using namespace msaw;
namespace fs = std::filesystem;

namespace {

struct Verdict {
  bool pass = true;
  std::ostringstream detail;

  void require(bool ok, const std::string& what) {
    if (!ok) {
      pass = false;
      detail << " [failed: " << what << "]";
    }
  }
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::vector<std::vector<std::string>> read_csv(const fs::path& path) {
  std::istringstream in(data::read_file(path));
  std::vector<std::vector<std::string>> rows;
  for (std::string line; std::getline(in, line);) {
    std::vector<std::string> cells;
    std::stringstream ls(line);
    for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
    rows.push_back(cells);
  }
  return rows;
}

int quiet_cli(const std::vector<std::string>& args) {
  std::ostringstream out, err;
  const int code = cli::run(args, out, err);
  if (code != 0) std::cerr << "msaw " << args.front() << " failed (" << code << "): " << err.str() << "\n";
  return code;
}

// Datasets shared by several checks, generated on first use.
class Workspace {
 public:
  explicit Workspace(fs::path root) : root_(std::move(root)) { fs::create_directories(root_); }

  const fs::path& root() const { return root_; }

  const data::Manifest& overlap() {
    if (!overlap_) overlap_ = make("overlap", data::default_class_specs(3));
    return *overlap_;
  }
  const data::Manifest& separable() {
    if (!separable_) separable_ = make("separable", data::separable_class_specs());
    return *separable_;
  }

 private:
  data::Manifest make(const std::string& name, const std::vector<data::SyntheticClassSpec>& specs) {
    const fs::path dir = root_ / ("data_" + name);
    fs::remove_all(dir);
    return data::generate_synthetic(specs, 100, 100, 1, dir);
  }

  fs::path root_;
  std::optional<data::Manifest> overlap_, separable_;
};

// 1. Gradient checks over ten seeds.
Verdict gradients(Workspace&) {
  Verdict v;
  const auto t0 = Clock::now();
  double elementary = 0, pipeline = 0;
  std::size_t checked = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    for (const auto& r : gradcheck::run_all(seed)) {
      (r.suite == "pipeline" ? pipeline : elementary) = std::max(r.suite == "pipeline" ? pipeline : elementary, r.max_error);
      checked += r.checked;
    }
  }
  const double elapsed = seconds_since(t0);
  v.detail << "elementary max rel err " << elementary << ", pipeline " << pipeline << ", " << checked
           << " entries, " << elapsed << " s";
  v.require(elementary < 1e-4, "elementary < 1e-4");
  v.require(pipeline < 1e-3, "pipeline < 1e-3");
  v.require(elapsed < 120.0, "runtime < 2 min");
  return v;
}

// 2. Power iteration against a Jacobi eigensolver.
Verdict pca_oracle(Workspace&) {
  Verdict v;
  std::mt19937_64 rng(20241019);
  double worst = 1.0;
  std::size_t flagged = 0;
  for (int trial = 0; trial < 100; ++trial) {
    const auto m = oracle::random_map(rng);
    const auto got = msfa::principal_vector<double>(m.values, m.h, m.w, 20);
    const auto want = oracle::dominant_direction(m.values, m.h, m.w);
    worst = std::min(worst, oracle::abs_cosine(got.vector, want));
    flagged += got.degenerate ? 1 : 0;
  }
  std::size_t constant_flagged = 0;
  for (double c : {0.0, 0.37, -2.5, 1e6}) {
    for (auto [h, w] : {std::pair<std::size_t, std::size_t>{2, 1}, {4, 5}, {8, 8}}) {
      const std::vector<double> map(h * w, c);
      constant_flagged += msfa::principal_vector<double>(map, h, w, 20).degenerate ? 1 : 0;
    }
  }
  v.detail << "min |cos| " << worst << " over 100 maps, " << constant_flagged << "/12 constant maps flagged";
  v.require(worst > 0.999, "|cos| > 0.999");
  v.require(flagged == 0, "random maps not flagged");
  v.require(constant_flagged == 12, "constant maps flagged");
  return v;
}

double loss_from_cosines(double pos, double neg1, double neg2, double margin) {
  // a = e1, b = (pos, sqrt(1 - pos^2), 0), q solves a.q = neg1, b.q = neg2.
  const double bs = std::sqrt(1.0 - pos * pos);
  const double q1 = neg1, q2 = (neg2 - pos * neg1) / bs;
  const double q3 = std::sqrt(1.0 - q1 * q1 - q2 * q2);
  Tensor<double> vectors({3, 1, 3}, std::vector<double>{1, 0, 0, pos, bs, 0, q1, q2, q3});
  std::vector<msfa::PrincipalVectors<double>> scales{{vectors, {0, 0, 0}}};
  auto tape = Tape<double>::inference();
  return msfa::attention_loss<double>(tape, scales, {{0, 1, 2}}, {0, 0, 1}, margin).item();
}

// 3. Loss identities: logged totals, the hinge example and ln 3.
Verdict loss_identities(Workspace& ws) {
  Verdict v;
  train::TrainConfig cfg;
  cfg.epochs = 2;
  cfg.balance_target = 40;
  cfg.loss_weights = {0.5, 1.0};
  const fs::path dir = ws.root() / "c3_run";
  const auto fit = train::fit(ws.overlap(), cfg, dir);
  const float l1 = static_cast<float>(cfg.loss_weights.attention), l2 = static_cast<float>(cfg.loss_weights.recognition);
  std::size_t mismatched = 0, rows = 0;
  for (const auto& s : fit.steps) {
    const float a = l1 * s.attention, b = l2 * s.recognition;
    if (s.total != a + b) ++mismatched;
  }
  const auto csv = read_csv(dir / "steps.csv");
  for (std::size_t i = 1; i < csv.size(); ++i) {
    const float total = std::stof(csv[i].at(3)), att = std::stof(csv[i].at(4)), recg = std::stof(csv[i].at(5));
    const float a = l1 * att, b = l2 * recg;
    if (total != a + b) ++mismatched;
    ++rows;
  }
  const double hinge = loss_from_cosines(0.6, 0.5, 0.4, 0.3);
  const double zero = loss_from_cosines(0.9, 0.0, 0.0, 0.5);
  auto tape = Tape<double>::inference();
  const double ce = ops::cross_entropy(tape, Tensor<double>({1, 3}, 1.0 / 3.0), ops::one_hot<double>({1}, 3)).item();
  v.detail << rows << " logged steps, " << mismatched << " mismatches; hinge(0.6,0.5,0.4,0.3) = " << hinge
           << "; CE(uniform, K=3) - ln 3 = " << ce - std::log(3.0);
  v.require(rows == fit.steps.size() && rows > 0, "every step logged");
  v.require(mismatched == 0, "bit-exact totals");
  v.require(std::abs(hinge - 0.6) < 1e-12, "hinge example");
  v.require(zero == 0.0, "satisfied margin gives 0");
  v.require(std::abs(ce - std::log(3.0)) < 1e-9, "ln 3");
  return v;
}

// 4. Scale weights are distributions; equal scores give exact thirds.
Verdict weight_invariants(Workspace& ws) {
  Verdict v;
  const fs::path log = ws.root() / "c3_run" / "scale_weights.csv";
  if (!fs::exists(log)) loss_identities(ws);
  const auto csv = read_csv(log);
  double worst = 0;
  for (std::size_t i = 1; i < csv.size(); ++i) {
    double s = 0;
    for (std::size_t k = 2; k < csv[i].size(); ++k) s += std::stod(csv[i][k]);
    worst = std::max(worst, std::abs(s - 1.0));
  }
  // Zeroed predictors give every scale the same score.
  ModelConfig mc;
  Model<double> model(mc, 4);
  for (auto& wp : model.classifier().predictors) {
    for (double& x : wp.weight.mutable_data()) x = 0;
    for (double& x : wp.bias.mutable_data()) x = 0;
  }
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0, 1);
  std::vector<double> px(4 * 64 * 64);
  for (double& x : px) x = u(rng);
  double third_err = 0;
  for (auto mode : {ops::Mode::eval, ops::Mode::train}) {
    auto tape = Tape<double>::inference();
    const auto out = model.forward(tape, Tensor<double>({4, 1, 64, 64}, px), mode);
    for (double w : out.weights.data()) third_err = std::max(third_err, std::abs(w - 1.0 / 3.0));
  }
  // Float weights cannot hold 1/3 to 1e-9; they must equal the nearest float.
  const auto fixed = awc::uniform_weights<float>(8, 3);
  bool float_exact = true;
  for (float w : fixed.data()) float_exact = float_exact && w == 1.0f / 3.0f;
  v.detail << csv.size() - 1 << " logged rows, max |sum - 1| " << worst << "; max |w - 1/3| " << third_err;
  v.require(csv.size() > 1, "rows logged");
  v.require(worst <= 1e-6, "rows sum to 1");
  v.require(third_err <= 1e-9, "exact thirds");
  v.require(float_exact, "float uniform weights equal 1/3f");
  return v;
}

// 5. Attention widens the principal-vector gap and improves accuracy.
Verdict separation_effect(Workspace& ws) {
  Verdict v;
  const auto t0 = Clock::now();
  train::TrainConfig cfg;
  cfg.epochs = 30;
  cfg.balance_target = 100;
  cfg.seed = 1;
  const std::vector<ablation::Mode> modes{ablation::parse_mode("full"), ablation::parse_mode("no-attention"),
                                          ablation::parse_mode("no-attention+uniform-weights")};
  const auto runs = ablation::run_ablation(ws.overlap(), cfg, modes, 5, ws.root() / "c5_ablation", 1,
                                           [](const ablation::RunOutcome& r) {
                                             std::cerr << "  " << r.mode << " seed " << r.seed << ": accuracy "
                                                       << r.report.accuracy << ", gap " << r.separation_gap << "\n";
                                           });
  const auto summary = ablation::summarize(runs);
  data::write_file(ws.root() / "c5_ablation" / "ablation.csv", ablation::summary_csv(summary));
  data::write_file(ws.root() / "c5_ablation" / "runs.csv", ablation::runs_csv(runs));
  std::map<std::string, ablation::Summary> by;
  for (const auto& s : summary) by[s.mode] = s;
  const auto& full = by["full"];
  const auto& no_att = by["no-attention"];
  const auto& base = by["no-attention+uniform-weights"];
  const double gap_delta = full.gap_mean - no_att.gap_mean;
  const double acc_delta = 100.0 * (full.accuracy_mean - base.accuracy_mean);
  const double elapsed = seconds_since(t0);
  v.detail << "gap full " << full.gap_mean << " vs lambda1=0 " << no_att.gap_mean << " (delta " << gap_delta
           << "); accuracy full " << 100 * full.accuracy_mean << "% vs no-attention+uniform " << 100 * base.accuracy_mean
           << "% (delta " << acc_delta << " pp); " << elapsed << " s";
  v.require(gap_delta >= 0.05, "gap delta >= 0.05");
  v.require(acc_delta >= 2.0, "accuracy delta >= 2 pp");
  v.require(elapsed < 900.0, "runtime < 15 min");
  return v;
}

// 6. Disjoint size ranges are learned to >= 95% on every seed.
Verdict sanity_ceiling(Workspace& ws) {
  Verdict v;
  train::TrainConfig cfg;
  cfg.epochs = 30;
  cfg.balance_target = 100;
  v.detail << "accuracy";
  for (std::uint64_t seed = 1; seed <= 3; ++seed) {
    cfg.seed = seed;
    const auto r = ablation::run_one(ws.separable(), cfg, ablation::Mode{}, ws.root() / ("c6_seed" + std::to_string(seed)));
    v.detail << " seed " << seed << " " << 100 * r.report.accuracy << "%";
    v.require(r.report.accuracy >= 0.95, "seed " + std::to_string(seed) + " >= 95%");
  }
  return v;
}

// 7. Exact 200-per-class resampling and a byte-stable report layout.
Verdict protocol(Workspace& ws) {
  Verdict v;
  const auto& m = ws.overlap();
  data::Dataset train(m, data::Split::train);
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < train.size(); ++i) labels.push_back(train.label(i));
  bool exact = true;
  for (std::uint64_t epoch = 0; epoch < 5; ++epoch) {
    std::vector<std::size_t> per(m.num_classes(), 0);
    for (const auto& e : data::balance_resample(labels, m.classes, 200, 1, epoch)) ++per[e.label];
    for (auto c : per) exact = exact && c == 200;
  }
  const auto rows = eval::layout_rows(eval::Layout::three_class);
  const auto first = eval::render_report(fixture::six_count_reports(), rows);
  const auto second = eval::render_report(fixture::six_count_reports(), rows);
  const auto golden = data::read_file(fs::path(MSAW_TEST_DATA_DIR) / "report_3class_all_counts.txt");
  const std::string header = "Training number |      20 |      30 |      40 |      60 |      80 |     100\n";
  bool layout = first.find(header) != std::string::npos && first.find("\nAverage ") != std::string::npos;
  for (const auto& r : rows) layout = layout && first.find("\n" + r + " ") != std::string::npos;
  v.detail << "200 per class over 5 epochs: " << (exact ? "yes" : "no") << "; report "
           << (first == golden ? "matches" : "differs from") << " golden file";
  v.require(exact, "200 per class");
  v.require(first == second && first == golden, "byte-stable golden report");
  v.require(layout, "class rows, count columns and Average row");
  return v;
}

// 8. Two CLI runs with one seed produce identical bytes.
Verdict determinism(Workspace& ws) {
  Verdict v;
  const std::string manifest = (ws.root() / "data_overlap" / "manifest.csv").string();
  ws.overlap();
  const std::vector<std::string> files{"checkpoint.msaw", "train_log.csv", "steps.csv", "scale_weights.csv",
                                       "config.json", "eval/report.txt", "eval/report.csv", "eval/confusion_100.csv",
                                       "eval/predictions_100.csv"};
  std::vector<std::map<std::string, std::string>> bytes;
  for (int run = 0; run < 2; ++run) {
    const fs::path dir = ws.root() / ("c8_run" + std::to_string(run));
    fs::remove_all(dir);
    const bool ok = quiet_cli({"train", "--manifest", manifest, "--out", dir.string(), "--seed", "7", "--epochs", "2",
                               "--balance", "40", "--augment"}) == 0 &&
                    quiet_cli({"eval", "--checkpoint", (dir / "checkpoint.msaw").string(), "--manifest", manifest,
                               "--out", (dir / "eval").string()}) == 0;
    v.require(ok, "run " + std::to_string(run) + " completed");
    if (!ok) return v;
    std::map<std::string, std::string> b;
    for (const auto& f : files) b[f] = data::read_file(dir / f);
    bytes.push_back(std::move(b));
  }
  std::size_t same = 0;
  for (const auto& f : files) {
    if (bytes[0][f] == bytes[1][f]) ++same;
    else v.require(false, f + " identical");
  }
  v.detail << same << "/" << files.size() << " artifacts identical";
  return v;
}

}  // namespace

int main(int argc, char** argv) {
  mallopt(M_MMAP_THRESHOLD, 1 << 30);
  mallopt(M_TRIM_THRESHOLD, 1 << 30);
  CLI::App app{"msaw acceptance checks"};
  std::string work = "acceptance_work";
  std::vector<int> only;
  app.add_option("--work", work, "Scratch directory for datasets and runs");
  app.add_option("--only", only, "Run only these criteria (1-8)")->check(CLI::Range(1, 8));
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<std::string, std::function<Verdict(Workspace&)>>> checks{
      {"gradient correctness", gradients},
      {"PCA oracle equivalence", pca_oracle},
      {"loss identities", loss_identities},
      {"softmax-weight invariants", weight_invariants},
      {"separation effect of attention", separation_effect},
      {"separable sanity ceiling", sanity_ceiling},
      {"protocol fidelity", protocol},
      {"determinism", determinism},
  };
  Workspace ws(work);
  int failed = 0;
  for (std::size_t i = 0; i < checks.size(); ++i) {
    const int id = static_cast<int>(i) + 1;
    if (!only.empty() && std::find(only.begin(), only.end(), id) == only.end()) continue;
    Verdict v;
    try {
      v = checks[i].second(ws);
    } catch (const std::exception& e) {
      v.pass = false;
      v.detail << "exception: " << e.what();
    }
    failed += v.pass ? 0 : 1;
    std::cout << "criterion " << id << " " << (v.pass ? "PASS" : "FAIL") << " (" << checks[i].first
              << "): " << v.detail.str() << std::endl;
  }
  return failed == 0 ? 0 : 1;
}
