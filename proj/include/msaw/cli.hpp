#pragma once

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "msaw/ablation.hpp"
#include "msaw/checkpoint.hpp"
#include "msaw/data/synthetic.hpp"
#include "msaw/errors.hpp"
#include "msaw/evaluator.hpp"
#include "msaw/gradcheck.hpp"
#include "msaw/trainer.hpp"

// Command-line front end. Exit codes: 0 success, 1 usage or configuration
// error, 2 data error, 3 numeric error.

namespace msaw::cli {

enum ExitCode { ok = 0, usage = 1, data_error = 2, numeric = 3 };

namespace fs = std::filesystem;

struct Streams {
  std::ostream& out;
  std::ostream& err;
};

/// Training flags shared by train and ablate; each is applied only when given.
struct TrainFlags {
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, triplets, balance;
  std::optional<double> lr, lambda1, lambda2, margin;
  bool augment = false;
  std::string config;

  void add(CLI::App& app) {
    app.add_option("--seed", seed, "Random seed");
    app.add_option("--epochs", epochs, "Training epochs")->check(CLI::NonNegativeNumber);
    app.add_option("--triplets", triplets, "Triplets per batch (3T images)")->check(CLI::PositiveNumber);
    app.add_option("--lr", lr, "Learning rate");
    app.add_option("--lambda1", lambda1, "Attention loss weight");
    app.add_option("--lambda2", lambda2, "Recognition loss weight");
    app.add_option("--margin", margin, "Attention hinge margin");
    app.add_option("--balance", balance, "Draws per class per epoch")->check(CLI::PositiveNumber);
    app.add_flag("--augment", augment, "Random flip and +-4 px shift on each draw");
    app.add_option("--config", config, "JSON training config; flags override it");
  }

  train::TrainConfig resolve() const {
    train::TrainConfig c;
    if (!config.empty()) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(data::read_file(config));
      } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(config + ": " + e.what());
      }
      train::apply_json(j, c);
    }
    if (seed) c.seed = *seed;
    if (epochs) c.epochs = *epochs;
    if (triplets) c.triplets = *triplets;
    if (balance) c.balance_target = *balance;
    if (lr) c.learning_rate = *lr;
    if (lambda1) c.loss_weights.attention = *lambda1;
    if (lambda2) c.loss_weights.recognition = *lambda2;
    if (margin) c.attention.margin = *margin;
    if (augment) c.augment = true;
    c.validate();
    return c;
  }
};

inline void print_config(Streams& io, const std::string& command, const nlohmann::json& resolved) {
  io.err << "msaw " << command << " resolved configuration:\n" << resolved.dump(2) << "\n";
}

inline void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());
}

inline std::vector<std::string> layout_for(std::size_t classes, const std::vector<std::string>& names) {
  if (classes == 0) return names;
  const auto rows = eval::layout_rows(classes == 6 ? eval::Layout::six_class : eval::Layout::three_class);
  if (classes != 3 && classes != 6) throw ConfigError("--classes must be 3 or 6");
  if (rows != names) throw ConfigError("the " + std::to_string(classes) + "-class layout does not match the manifest classes");
  return rows;
}

inline int cmd_gen_data(Streams& io, const fs::path& out, std::uint64_t seed, std::size_t classes, const std::string& preset,
                        const std::string& spec, std::size_t n_train, std::size_t n_test) {
  std::vector<data::SyntheticClassSpec> specs;
  if (!spec.empty()) specs = data::parse_class_specs(data::read_file(spec), spec);
  else if (preset == "separable") specs = data::separable_class_specs();
  else specs = data::default_class_specs(classes);
  nlohmann::json resolved{{"out", out.string()}, {"seed", seed}, {"n_train", n_train}, {"n_test", n_test},
                          {"specs", data::class_specs_to_json(specs)["classes"]}};
  print_config(io, "gen-data", resolved);
  const auto m = data::generate_synthetic(specs, n_train, n_test, seed, out);
  io.out << "wrote " << m.entries.size() << " images and " << (out / "manifest.csv").string() << "\n";
  return ok;
}

inline int cmd_train(Streams& io, const fs::path& manifest_path, const fs::path& out, const TrainFlags& flags) {
  const auto cfg = flags.resolve();
  const auto manifest = data::load_manifest(manifest_path);
  nlohmann::json resolved{{"manifest", manifest_path.string()}, {"out", out.string()}, {"classes", manifest.classes},
                          {"train", train::to_json(cfg)}};
  print_config(io, "train", resolved);
  const auto r = train::fit(manifest, cfg, out);
  for (const auto& row : r.epochs)
    io.err << "epoch " << row.epoch << " loss " << row.total << " att " << row.attention << " recg " << row.recognition
           << " acc " << row.train_acc << "\n";
  io.out << "checkpoint " << (out / "checkpoint.msaw").string() << "\n";
  return ok;
}

inline int cmd_eval(Streams& io, const std::vector<std::string>& checkpoints, const fs::path& manifest_path,
                    const fs::path& out, std::size_t workers, std::size_t classes) {
  const auto probe = data::load_manifest(manifest_path);
  const auto rows = layout_for(classes, probe.classes);
  nlohmann::json resolved{{"checkpoints", checkpoints}, {"manifest", manifest_path.string()}, {"out", out.string()},
                          {"workers", workers}, {"classes", rows}};
  print_config(io, "eval", resolved);
  if (!out.empty()) ensure_dir(out);
  std::map<std::size_t, eval::EvalReport> reports;
  for (const auto& path : checkpoints) {
    auto lm = train::restore_model(load_checkpoint(path));
    if (lm.classes != probe.classes) throw ConfigError(path + ": checkpoint classes differ from the manifest classes");
    const auto ev = eval::evaluate(lm.model, probe, workers);
    const std::size_t key = lm.train_count();
    if (reports.count(key)) throw ConfigError("two checkpoints were trained with " + std::to_string(key) + " samples per class");
    reports[key] = eval::metrics(ev.confusion, probe.classes);
    if (!out.empty()) {
      data::write_file(out / ("confusion_" + std::to_string(key) + ".csv"), eval::confusion_csv(ev.confusion, probe.classes));
      const auto test = probe.split(data::Split::test);
      std::string pred = "id,label,predicted\n";
      for (std::size_t i = 0; i < test.size(); ++i)
        pred += test[i].id + "," + probe.classes[test[i].label] + "," + probe.classes[ev.predictions[i]] + "\n";
      data::write_file(out / ("predictions_" + std::to_string(key) + ".csv"), pred);
    }
  }
  const std::string table = eval::render_report(reports, rows);
  io.out << table;
  if (!out.empty()) {
    data::write_file(out / "report.txt", table);
    data::write_file(out / "report.csv", eval::report_csv(reports, rows));
  }
  return ok;
}

inline int cmd_diagnose(Streams& io, const fs::path& checkpoint, const fs::path& manifest_path, const fs::path& out,
                        std::size_t workers) {
  const auto manifest = data::load_manifest(manifest_path);
  auto lm = train::restore_model(load_checkpoint(checkpoint));
  if (lm.classes != manifest.classes) throw ConfigError("checkpoint classes differ from the manifest classes");
  nlohmann::json resolved{{"checkpoint", checkpoint.string()}, {"manifest", manifest_path.string()},
                          {"out", out.string()}, {"workers", workers}, {"train", train::to_json(lm.config)}};
  print_config(io, "diagnose", resolved);
  const auto ev = eval::evaluate(lm.model, manifest, workers);
  const double gap = eval::held_out_separation(lm.model, manifest, lm.config.attention.power_iterations);
  std::vector<double> mean(PyramidConfig::num_scales, 0.0);
  for (const auto& w : ev.scale_weights)
    for (std::size_t k = 0; k < w.size(); ++k) mean[k] += w[k] / static_cast<double>(ev.scale_weights.size());
  const auto report = eval::metrics(ev.confusion, manifest.classes);
  nlohmann::json summary{{"accuracy", report.accuracy}, {"macro_recall", report.macro_recall},
                         {"macro_precision", report.macro_precision}, {"f1", report.f1},
                         {"separation_gap", gap}, {"mean_scale_weights", mean}};
  io.out << summary.dump(2) << "\n";
  if (!out.empty()) {
    ensure_dir(out);
    data::write_file(out / "diagnose.json", summary.dump(2) + "\n");
    std::string weights = "id,w1,w2,w3\n";
    const auto test = manifest.split(data::Split::test);
    for (std::size_t i = 0; i < test.size(); ++i) {
      weights += test[i].id;
      for (float w : ev.scale_weights[i]) weights += "," + train::format_float(w);
      weights += "\n";
    }
    data::write_file(out / "scale_weights.csv", weights);
    // Similarity matrix of the first channel at the finest scale, first batch.
    const std::size_t n = std::min(test.size(), eval::kEvalBatch);
    auto tape = Tape<float>::inference();
    const auto feats = pyramid_forward(tape, lm.model.pyramid(), eval::detail::load_batch(manifest, test, 0, n, lm.config.input_size),
                                       ops::Mode::eval);
    const auto pv = msfa::principal_vectors(tape, feats.scales[0], lm.config.attention.power_iterations);
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < n; ++i) ids.push_back(test[i].id);
    std::ostringstream sim;
    msfa::write_similarity_csv(sim, pv, 0, ids);
    data::write_file(out / "similarity_scale1_ch0.csv", sim.str());
  }
  return ok;
}

inline int cmd_grad_check(Streams& io, std::uint64_t seed, std::size_t seeds) {
  print_config(io, "grad-check", nlohmann::json{{"seed", seed}, {"seeds", seeds}, {"step", gradcheck::kStep},
                                                {"pipeline_step", gradcheck::kPipelineStep}});
  double elementary = 0, pipeline = 0;
  std::map<std::string, double> worst;
  std::vector<std::string> order;
  for (std::size_t s = 0; s < seeds; ++s) {
    for (const auto& r : gradcheck::run_all(seed + s)) {
      const std::string key = r.suite + ": " + r.name;
      if (!worst.count(key)) order.push_back(key);
      worst[key] = std::max(worst[key], r.max_error);
      (r.suite == "pipeline" ? pipeline : elementary) = std::max(r.suite == "pipeline" ? pipeline : elementary, r.max_error);
    }
  }
  for (const auto& key : order) io.out << key << "  max relative error " << worst[key] << "\n";
  const bool pass = elementary < 1e-4 && pipeline < 1e-3;
  io.out << "elementary max relative error " << elementary << " (limit 1e-4)\n";
  io.out << "pipeline max relative error " << pipeline << " (limit 1e-3)\n";
  io.out << (pass ? "grad-check PASS" : "grad-check FAIL") << "\n";
  return pass ? ok : numeric;
}

inline int cmd_ablate(Streams& io, const fs::path& manifest_path, const fs::path& out, const TrainFlags& flags,
                      const std::vector<std::string>& mode_names, std::size_t seeds, std::size_t workers) {
  const auto cfg = flags.resolve();
  const auto manifest = data::load_manifest(manifest_path);
  std::vector<ablation::Mode> modes{ablation::Mode{}};
  for (const auto& name : mode_names) {
    const auto m = ablation::parse_mode(name);
    if (std::none_of(modes.begin(), modes.end(), [&](const ablation::Mode& x) { return x.name() == m.name(); }))
      modes.push_back(m);
  }
  std::vector<std::string> names;
  for (const auto& m : modes) names.push_back(m.name());
  nlohmann::json resolved{{"manifest", manifest_path.string()}, {"out", out.string()}, {"modes", names},
                          {"seeds", seeds}, {"workers", workers}, {"train", train::to_json(cfg)}};
  print_config(io, "ablate", resolved);
  ensure_dir(out);
  const auto runs = ablation::run_ablation(manifest, cfg, modes, seeds, out, workers, [&](const ablation::RunOutcome& r) {
    io.err << r.mode << " seed " << r.seed << " accuracy " << r.report.accuracy << " gap " << r.separation_gap << "\n";
  });
  const auto summary = ablation::summarize(runs);
  data::write_file(out / "ablation.csv", ablation::summary_csv(summary));
  data::write_file(out / "runs.csv", ablation::runs_csv(runs));
  io.out << ablation::summary_csv(summary);
  return ok;
}

/// Runs one command; args excludes the program name.
inline int run(const std::vector<std::string>& args, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
  Streams io{out, err};
  CLI::App app{"Multi-scale attention ship recognition lab", "msaw"};
  app.require_subcommand(1);

  std::string out_dir, manifest, spec, preset = "overlap";
  std::uint64_t seed = 1;
  std::size_t classes = 3, n_train = 100, n_test = 100, workers = 1, seeds = 10, layout = 0;
  std::vector<std::string> checkpoints, modes;

  auto* gen = app.add_subcommand("gen-data", "Render a synthetic ship-chip dataset");
  gen->add_option("--out", out_dir, "Output directory")->required();
  gen->add_option("--seed", seed, "Random seed");
  gen->add_option("--classes", classes, "Built-in class set: 3 or 6")->check(CLI::IsMember({3, 6}));
  gen->add_option("--preset", preset, "overlap (realistic sizes) or separable (disjoint sizes)")
      ->check(CLI::IsMember({"overlap", "separable"}));
  gen->add_option("--spec", spec, "JSON class specs instead of a built-in set");
  gen->add_option("--n-train", n_train, "Train images per class");
  gen->add_option("--n-test", n_test, "Test images per class");

  TrainFlags train_flags;
  auto* tr = app.add_subcommand("train", "Train on a manifest's train split");
  tr->add_option("--manifest", manifest, "Dataset manifest CSV")->required();
  tr->add_option("--out", out_dir, "Output directory")->required();
  tr->add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);
  train_flags.add(*tr);

  auto* ev = app.add_subcommand("eval", "Evaluate checkpoints on a manifest's test split");
  ev->add_option("--checkpoint", checkpoints, "Checkpoint file; repeat for one column per training number")->required();
  ev->add_option("--manifest", manifest, "Dataset manifest CSV")->required();
  ev->add_option("--out", out_dir, "Output directory for report and CSV files");
  ev->add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);
  ev->add_option("--classes", layout, "Report layout: 3 or 6 named classes")->check(CLI::IsMember({3, 6}));

  auto* diag = app.add_subcommand("diagnose", "Principal-vector separation and scale weights of a checkpoint");
  std::string checkpoint;
  diag->add_option("--checkpoint", checkpoint, "Checkpoint file")->required();
  diag->add_option("--manifest", manifest, "Dataset manifest CSV")->required();
  diag->add_option("--out", out_dir, "Output directory");
  diag->add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);

  auto* gc = app.add_subcommand("grad-check", "Finite-difference check of every backward pass");
  gc->add_option("--seed", seed, "First seed");
  gc->add_option("--seeds", seeds, "Number of seeds")->check(CLI::PositiveNumber);

  TrainFlags ablate_flags;
  std::size_t ablate_seeds = 5;
  auto* ab = app.add_subcommand("ablate", "Train and evaluate the full model against ablations over several seeds");
  ab->add_option("--manifest", manifest, "Dataset manifest CSV")->required();
  ab->add_option("--out", out_dir, "Output directory")->required();
  ab->add_option("--mode", modes, "full, no-attention, uniform-weights, no-final-concat; join with '+', repeatable");
  ab->add_option("--seeds", ablate_seeds, "Seeds per mode")->check(CLI::PositiveNumber);
  ab->add_option("--workers", workers, "Worker threads")->check(CLI::PositiveNumber);
  ablate_flags.add(*ab);

  std::vector<std::string> argv_copy(args.rbegin(), args.rend());
  try {
    app.parse(argv_copy);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return ok;
  } catch (const CLI::CallForAllHelp& e) {
    out << app.help("", CLI::AppFormatMode::All);
    return ok;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << "\n";
    CLI::App* sub = nullptr;
    for (auto* s : app.get_subcommands()) sub = s;
    err << (sub ? sub->help() : app.help());
    return usage;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(io, out_dir, seed, classes, preset, spec, n_train, n_test);
    if (tr->parsed()) return cmd_train(io, manifest, out_dir, train_flags);
    if (ev->parsed()) return cmd_eval(io, checkpoints, manifest, out_dir, workers, layout);
    if (diag->parsed()) return cmd_diagnose(io, checkpoint, manifest, out_dir, workers);
    if (gc->parsed()) return cmd_grad_check(io, seed, seeds);
    if (ab->parsed()) return cmd_ablate(io, manifest, out_dir, ablate_flags, modes, ablate_seeds, workers);
  } catch (const UsageError& e) {
    err << "usage error: " << e.what() << "\n";
    return usage;
  } catch (const ConfigError& e) {
    err << "configuration error: " << e.what() << "\n";
    return usage;
  } catch (const NumericError& e) {
    err << "numeric error: " << e.what() << "\n";
    return numeric;
  } catch (const Error& e) {
    err << "data error: " << e.what() << "\n";
    return data_error;
  } catch (const std::filesystem::filesystem_error& e) {
    err << "data error: " << e.what() << "\n";
    return data_error;
  }
  return usage;
}

}  // namespace msaw::cli
