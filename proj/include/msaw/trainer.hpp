#pragma once

#include <nlohmann/json.hpp>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "msaw/awc.hpp"
#include "msaw/checkpoint.hpp"
#include "msaw/data/balance.hpp"
#include "msaw/data/manifest.hpp"
#include "msaw/errors.hpp"
#include "msaw/model.hpp"
#include "msaw/msfa.hpp"

namespace msaw::train {

struct TrainConfig {
  std::size_t epochs = 30;
  std::size_t triplets = 8;  // T; a batch holds 3T images
  double learning_rate = 0.01;
  double momentum = 0.9;
  bool lr_decay = true;  // x0.1 at 60% and 85% of the epochs
  awc::LossWeights loss_weights;
  msfa::AttentionConfig attention;
  std::uint64_t seed = 1;
  std::size_t balance_target = 200;  // draws per class per epoch
  bool augment = false;
  awc::Weighting weighting = awc::Weighting::adaptive;
  bool use_final = true;
  std::size_t adjusted_channels = 16;
  std::size_t input_size = 64;

  void validate() const {
    if (triplets < 1) throw ConfigError("triplets per batch must be >= 1");
    if (!(learning_rate >= 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning rate must be finite and >= 0");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must be in [0,1)");
    if (balance_target < 1) throw ConfigError("balance target must be >= 1");
    loss_weights.validate();
    attention.validate();
  }

  double lr_at(std::size_t epoch) const {
    double lr = learning_rate;
    if (lr_decay) {
      if (static_cast<double>(epoch) >= 0.6 * static_cast<double>(epochs)) lr *= 0.1;
      if (static_cast<double>(epoch) >= 0.85 * static_cast<double>(epochs)) lr *= 0.1;
    }
    return lr;
  }

  ModelConfig model_config(std::size_t classes) const {
    ModelConfig mc;
    mc.pyramid.input_size = input_size;
    mc.pyramid.adjusted_channels = adjusted_channels;
    mc.classifier.classes = classes;
    mc.classifier.weighting = weighting;
    mc.classifier.use_final = use_final;
    return mc;
  }
};

inline nlohmann::json to_json(const TrainConfig& c) {
  return {{"epochs", c.epochs},
          {"triplets", c.triplets},
          {"learning_rate", c.learning_rate},
          {"momentum", c.momentum},
          {"lr_decay", c.lr_decay},
          {"lambda1", c.loss_weights.attention},
          {"lambda2", c.loss_weights.recognition},
          {"margin", c.attention.margin},
          {"power_iterations", c.attention.power_iterations},
          {"seed", c.seed},
          {"balance_target", c.balance_target},
          {"augment", c.augment},
          {"weighting", c.weighting == awc::Weighting::uniform ? "uniform" : "adaptive"},
          {"use_final", c.use_final},
          {"adjusted_channels", c.adjusted_channels},
          {"input_size", c.input_size}};
}

/// Overlays the keys present in `j` onto `c`; unknown keys are rejected.
inline void apply_json(const nlohmann::json& j, TrainConfig& c) {
  if (!j.is_object()) throw ConfigError("training config must be a JSON object");
  try {
    for (const auto& [key, v] : j.items()) {
      if (key == "epochs") c.epochs = v.get<std::size_t>();
      else if (key == "triplets") c.triplets = v.get<std::size_t>();
      else if (key == "learning_rate") c.learning_rate = v.get<double>();
      else if (key == "momentum") c.momentum = v.get<double>();
      else if (key == "lr_decay") c.lr_decay = v.get<bool>();
      else if (key == "lambda1") c.loss_weights.attention = v.get<double>();
      else if (key == "lambda2") c.loss_weights.recognition = v.get<double>();
      else if (key == "margin") c.attention.margin = v.get<double>();
      else if (key == "power_iterations") c.attention.power_iterations = v.get<std::size_t>();
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "balance_target") c.balance_target = v.get<std::size_t>();
      else if (key == "augment") c.augment = v.get<bool>();
      else if (key == "weighting") {
        const auto s = v.get<std::string>();
        if (s == "adaptive") c.weighting = awc::Weighting::adaptive;
        else if (s == "uniform") c.weighting = awc::Weighting::uniform;
        else throw ConfigError("weighting must be adaptive or uniform, got '" + s + "'");
      } else if (key == "use_final") c.use_final = v.get<bool>();
      else if (key == "adjusted_channels") c.adjusted_channels = v.get<std::size_t>();
      else if (key == "input_size") c.input_size = v.get<std::size_t>();
      else throw ConfigError("unknown training config key '" + key + "'");
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("training config: ") + e.what());
  }
}

/// T triplets laid out as rows (3t, 3t+1, 3t+2) = (anchor, positive, other).
struct TripletBatch {
  std::vector<data::EpochEntry> entries;  // 3T
  std::vector<msfa::Triplet> triplets;

  std::vector<std::size_t> labels() const {
    std::vector<std::size_t> out;
    for (const auto& e : entries) out.push_back(e.label);
    return out;
  }
};

inline std::mt19937_64 step_rng(std::uint64_t seed, std::uint64_t step) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(step), static_cast<std::uint32_t>(step >> 32), 0x7a1bu};
  return std::mt19937_64(seq);
}

/// Draws class i uniformly among classes with at least two entries, class j
/// uniformly among the other present classes, then two distinct positions of
/// class i and one of class j.
inline TripletBatch sample_triplets(const std::vector<data::EpochEntry>& epoch, std::size_t t, std::uint64_t seed,
                                    std::uint64_t step) {
  if (t < 1) throw ConfigError("triplets per batch must be >= 1");
  if (epoch.empty()) throw ContractError("attention loss requires >= 2 classes");
  std::size_t classes = 0;
  for (const auto& e : epoch) classes = std::max(classes, e.label + 1);
  std::vector<std::vector<std::size_t>> by_class(classes);
  for (std::size_t p = 0; p < epoch.size(); ++p) by_class[epoch[p].label].push_back(p);
  std::vector<std::size_t> present, anchors;
  for (std::size_t k = 0; k < classes; ++k) {
    if (!by_class[k].empty()) present.push_back(k);
    if (by_class[k].size() >= 2) anchors.push_back(k);
  }
  if (present.size() < 2) throw ContractError("attention loss requires >= 2 classes");
  if (anchors.empty()) throw ContractError("attention loss requires a class with >= 2 samples");

  auto rng = step_rng(seed, step);
  auto uniform = [&](std::size_t n) { return std::uniform_int_distribution<std::size_t>(0, n - 1)(rng); };
  TripletBatch batch;
  for (std::size_t r = 0; r < t; ++r) {
    const std::size_t i = anchors[uniform(anchors.size())];
    const auto skip = static_cast<std::size_t>(std::find(present.begin(), present.end(), i) - present.begin());
    std::size_t u = uniform(present.size() - 1);
    if (u >= skip) ++u;
    const std::size_t j = present[u];
    const auto& pi = by_class[i];
    const std::size_t a = uniform(pi.size());
    std::size_t b = uniform(pi.size() - 1);
    if (b >= a) ++b;
    const std::size_t q = by_class[j][uniform(by_class[j].size())];
    const std::size_t base = batch.entries.size();
    batch.entries.push_back(epoch[pi[a]]);
    batch.entries.push_back(epoch[pi[b]]);
    batch.entries.push_back(epoch[q]);
    batch.triplets.push_back({base, base + 1, base + 2});
  }
  return batch;
}

/// Stacks the (augmented) images of a batch into [3T,1,S,S].
inline Tensor<float> batch_images(data::Dataset& ds, const std::vector<data::EpochEntry>& entries) {
  const std::size_t s = ds.image_size();
  std::vector<float> buf;
  buf.reserve(entries.size() * s * s);
  for (const auto& e : entries) {
    const auto img = data::augment_image(ds.sample(e.sample).image, s, e);
    buf.insert(buf.end(), img.begin(), img.end());
  }
  return Tensor<float>({entries.size(), 1, s, s}, std::move(buf));
}

struct StepResult {
  float total = 0;
  float attention = 0;
  float recognition = 0;
  std::size_t correct = 0;
  std::size_t count = 0;
  Tensor<float> weights;  // [3T,3]
};

/// SGD with momentum: v <- mu v + g, p <- p - lr v.
class Optimizer {
 public:
  Optimizer(Model<float>& model, double momentum) : momentum_(static_cast<float>(momentum)) {
    for (auto& nt : model.named_tensors()) {
      if (nt.role != TensorRole::parameter) continue;
      params_.push_back(nt.tensor);
      velocity_.emplace_back(nt.tensor.size(), 0.0f);
    }
  }

  void step(float lr) {
    for (std::size_t i = 0; i < params_.size(); ++i) {
      auto& p = params_[i];
      if (!p.has_grad()) continue;
      auto g = p.grad();
      auto v = std::span<float>(velocity_[i]);
      auto w = p.mutable_data();
      for (std::size_t k = 0; k < w.size(); ++k) {
        v[k] = momentum_ * v[k] + g[k];
        w[k] -= lr * v[k];
      }
    }
  }

 private:
  float momentum_;
  std::vector<Tensor<float>> params_;
  std::vector<std::vector<float>> velocity_;
};

struct StepOptions {
  bool attention_when_unweighted = true;  // report L_att even when lambda1 == 0
};

/// One forward/backward/update over a triplet batch.
inline StepResult train_step(Model<float>& model, Optimizer& opt, const Tensor<float>& images,
                             const TripletBatch& batch, const TrainConfig& cfg, double lr, std::uint64_t step,
                             const StepOptions& options = {}) {
  const auto labels = batch.labels();
  Tape<float> tape;
  model.zero_grad();
  const auto fwd = model.forward(tape, images, ops::Mode::train);
  Tensor<float> recg = awc::recognition_loss(tape, fwd.prediction, labels);
  Tensor<float> att;
  if (cfg.loss_weights.attention > 0.0 || options.attention_when_unweighted) {
    std::vector<msfa::PrincipalVectors<float>> pvs;
    for (const auto& s : fwd.pyramid.scales) pvs.push_back(msfa::principal_vectors(tape, s, cfg.attention.power_iterations));
    att = msfa::attention_loss(tape, pvs, batch.triplets, labels, static_cast<float>(cfg.attention.margin));
  } else {
    att = Tensor<float>::scalar(0.0f);
  }
  Tensor<float> total = awc::total_loss(tape, att, recg, cfg.loss_weights);
  try {
    tape.backward(total);
  } catch (const NumericError& e) {
    throw NumericError("step " + std::to_string(step) + ": " + e.what());
  }
  opt.step(static_cast<float>(lr));

  StepResult r;
  r.total = total.item();
  r.attention = att.item();
  r.recognition = recg.item();
  r.weights = fwd.weights.detach();
  r.count = labels.size();
  for (std::size_t n = 0; n < labels.size(); ++n) r.correct += fwd.prediction.predicted(n) == labels[n] ? 1 : 0;
  return r;
}

struct EpochRow {
  std::size_t epoch = 0;
  double total = 0;
  double attention = 0;
  double recognition = 0;
  double train_acc = 0;
};

struct StepRow {
  std::uint64_t step = 0;
  std::size_t epoch = 0;
  double lr = 0;
  float total = 0;
  float attention = 0;
  float recognition = 0;
};

struct FitResult {
  Model<float> model;
  std::vector<EpochRow> epochs;
  std::vector<StepRow> steps;
  std::vector<std::vector<float>> scale_weights;  // one row per image per step
  Checkpoint checkpoint;
};

/// JSON stored in checkpoints: class names, originals per class in the train
/// split, and the training configuration.
inline std::string config_echo(const TrainConfig& cfg, const data::Manifest& manifest) {
  std::vector<std::size_t> counts;
  for (std::size_t k = 0; k < manifest.num_classes(); ++k) counts.push_back(manifest.count(data::Split::train, k));
  nlohmann::json j{{"classes", manifest.classes}, {"train_counts", counts}, {"train", to_json(cfg)}};
  return j.dump();
}

inline std::string format_float(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  return os.str();
}

inline std::string format_float(float v) {
  std::ostringstream os;
  os.precision(9);
  os << v;
  return os.str();
}

inline std::string train_log_csv(const std::vector<EpochRow>& rows) {
  std::string out = "epoch,total_loss,att_loss,recg_loss,train_acc\n";
  for (const auto& r : rows)
    out += std::to_string(r.epoch) + "," + format_float(r.total) + "," + format_float(r.attention) + "," +
           format_float(r.recognition) + "," + format_float(r.train_acc) + "\n";
  return out;
}

inline std::string steps_csv(const std::vector<StepRow>& rows) {
  std::string out = "step,epoch,lr,total_loss,att_loss,recg_loss\n";
  for (const auto& r : rows)
    out += std::to_string(r.step) + "," + std::to_string(r.epoch) + "," + format_float(r.lr) + "," +
           format_float(r.total) + "," + format_float(r.attention) + "," + format_float(r.recognition) + "\n";
  return out;
}

inline std::string scale_weights_csv(const std::vector<std::vector<float>>& rows, std::size_t per_step) {
  std::string out = "step,row,w1,w2,w3\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    out += std::to_string(i / per_step) + "," + std::to_string(i % per_step);
    for (float w : rows[i]) out += "," + format_float(w);
    out += "\n";
  }
  return out;
}

struct FitOptions {
  StepOptions step;
  bool keep_scale_weights = true;
};

/// Balanced resampling each epoch, ceil(epoch size / 3T) steps per epoch.
/// Writes train_log.csv, steps.csv, scale_weights.csv, config.json and
/// checkpoint.msaw to out_dir when it is non-empty.
inline FitResult fit(const data::Manifest& manifest, const TrainConfig& cfg, const std::filesystem::path& out_dir,
                     const FitOptions& options = {}) {
  cfg.validate();
  data::Dataset train(manifest, data::Split::train, cfg.input_size);
  if (train.size() == 0) throw ConfigError("manifest has no train split");
  std::vector<std::size_t> labels;
  for (std::size_t i = 0; i < train.size(); ++i) labels.push_back(train.label(i));

  FitResult r{Model<float>(cfg.model_config(manifest.num_classes()), cfg.seed), {}, {}, {}, {}};
  Optimizer opt(r.model, cfg.momentum);
  const std::size_t per_step = 3 * cfg.triplets;
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto list = data::balance_resample(labels, manifest.classes, cfg.balance_target, cfg.seed, epoch, cfg.augment);
    const std::size_t steps = (list.size() + per_step - 1) / per_step;
    const double lr = cfg.lr_at(epoch);
    double att = 0, recg = 0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t s = 0; s < steps; ++s, ++step) {
      const TripletBatch batch = sample_triplets(list, cfg.triplets, cfg.seed, step);
      const Tensor<float> images = batch_images(train, batch.entries);
      const StepResult sr = train_step(r.model, opt, images, batch, cfg, lr, step, options.step);
      att += sr.attention;
      recg += sr.recognition;
      correct += sr.correct;
      seen += sr.count;
      r.steps.push_back({step, epoch, lr, sr.total, sr.attention, sr.recognition});
      if (options.keep_scale_weights) {
        const auto w = sr.weights.data();
        const std::size_t k = sr.weights.dim(1);
        for (std::size_t n = 0; n < sr.weights.dim(0); ++n)
          r.scale_weights.emplace_back(w.begin() + static_cast<long>(n * k), w.begin() + static_cast<long>((n + 1) * k));
      }
    }
    EpochRow row;
    row.epoch = epoch + 1;
    row.attention = att / static_cast<double>(steps);
    row.recognition = recg / static_cast<double>(steps);
    row.total = cfg.loss_weights.attention * row.attention + cfg.loss_weights.recognition * row.recognition;
    row.train_acc = static_cast<double>(correct) / static_cast<double>(seen);
    r.epochs.push_back(row);
  }
  r.model.zero_grad();
  r.checkpoint = make_checkpoint(r.model, config_echo(cfg, manifest), cfg.epochs);

  if (!out_dir.empty()) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
    data::write_file(out_dir / "train_log.csv", train_log_csv(r.epochs));
    data::write_file(out_dir / "steps.csv", steps_csv(r.steps));
    if (options.keep_scale_weights) data::write_file(out_dir / "scale_weights.csv", scale_weights_csv(r.scale_weights, per_step));
    data::write_file(out_dir / "config.json", nlohmann::json::parse(config_echo(cfg, manifest)).dump(2) + "\n");
    save_checkpoint(out_dir / "checkpoint.msaw", r.checkpoint);
  }
  return r;
}

/// Model and class names restored from a checkpoint's config echo.
struct LoadedModel {
  TrainConfig config;
  std::vector<std::string> classes;
  std::vector<std::size_t> train_counts;
  Model<float> model;

  /// Smallest per-class train count; the column key of recall tables.
  std::size_t train_count() const {
    return train_counts.empty() ? 0 : *std::min_element(train_counts.begin(), train_counts.end());
  }
};

inline LoadedModel restore_model(const Checkpoint& ck) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(ck.config);
  } catch (const nlohmann::json::parse_error& e) {
    throw CheckpointError(std::string("checkpoint config is not valid JSON: ") + e.what());
  }
  TrainConfig cfg;
  std::vector<std::string> classes;
  std::vector<std::size_t> counts;
  try {
    apply_json(j.at("train"), cfg);
    classes = j.at("classes").get<std::vector<std::string>>();
    counts = j.value("train_counts", std::vector<std::size_t>{});
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("checkpoint config: ") + e.what());
  }
  LoadedModel lm{cfg, classes, counts, Model<float>(cfg.model_config(classes.size()), cfg.seed)};
  apply_checkpoint(ck, lm.model);
  return lm;
}

}  // namespace msaw::train
