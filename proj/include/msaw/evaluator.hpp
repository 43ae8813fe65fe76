#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include "msaw/data/manifest.hpp"
#include "msaw/errors.hpp"
#include "msaw/model.hpp"
#include "msaw/msfa.hpp"

namespace msaw::eval {

/// Rows are true classes, columns predicted classes.
class ConfusionMatrix {
 public:
  explicit ConfusionMatrix(std::size_t classes = 0) : k_(classes), counts_(classes * classes, 0) {}

  static ConfusionMatrix from_rows(const std::vector<std::vector<std::uint64_t>>& rows) {
    ConfusionMatrix cm(rows.size());
    for (std::size_t r = 0; r < rows.size(); ++r) {
      if (rows[r].size() != rows.size()) throw DimensionError("confusion matrix must be square");
      for (std::size_t c = 0; c < rows.size(); ++c) cm.at(r, c) = rows[r][c];
    }
    return cm;
  }

  std::size_t classes() const { return k_; }
  std::uint64_t& at(std::size_t truth, std::size_t predicted) { return counts_.at(truth * k_ + predicted); }
  std::uint64_t at(std::size_t truth, std::size_t predicted) const { return counts_.at(truth * k_ + predicted); }

  void add(std::size_t truth, std::size_t predicted) {
    if (truth >= k_ || predicted >= k_) throw ContractError("confusion matrix: class index out of range");
    ++at(truth, predicted);
  }

  void merge(const ConfusionMatrix& other) {
    if (other.k_ != k_) throw DimensionError("cannot merge confusion matrices of different sizes");
    for (std::size_t i = 0; i < counts_.size(); ++i) counts_[i] += other.counts_[i];
  }

  std::uint64_t row_sum(std::size_t r) const {
    std::uint64_t s = 0;
    for (std::size_t c = 0; c < k_; ++c) s += at(r, c);
    return s;
  }
  std::uint64_t col_sum(std::size_t c) const {
    std::uint64_t s = 0;
    for (std::size_t r = 0; r < k_; ++r) s += at(r, c);
    return s;
  }
  std::uint64_t trace() const {
    std::uint64_t s = 0;
    for (std::size_t k = 0; k < k_; ++k) s += at(k, k);
    return s;
  }
  std::uint64_t total() const {
    std::uint64_t s = 0;
    for (auto v : counts_) s += v;
    return s;
  }

  bool operator==(const ConfusionMatrix&) const = default;

 private:
  std::size_t k_;
  std::vector<std::uint64_t> counts_;
};

struct EvalReport {
  std::vector<std::string> classes;
  std::vector<std::uint64_t> support;  // true samples per class
  std::vector<double> recall;
  std::vector<double> precision;
  std::vector<bool> precision_undefined;  // class never predicted; precision reported as 0
  double macro_recall = 0;
  double macro_precision = 0;
  double f1 = 0;
  double accuracy = 0;
  std::uint64_t total = 0;
};

/// A class with no true samples gets recall 0 as well; macro means still run
/// over all K classes.
inline EvalReport metrics(const ConfusionMatrix& cm, std::vector<std::string> classes = {}) {
  const std::size_t k = cm.classes();
  if (k == 0 || cm.total() == 0) throw ContractError("metrics: empty confusion matrix");
  if (classes.empty())
    for (std::size_t i = 0; i < k; ++i) classes.push_back("class " + std::to_string(i));
  if (classes.size() != k) throw DimensionError("metrics: one class name per row required");
  EvalReport r;
  r.classes = std::move(classes);
  r.total = cm.total();
  for (std::size_t i = 0; i < k; ++i) {
    const auto row = cm.row_sum(i), col = cm.col_sum(i);
    const auto hit = static_cast<double>(cm.at(i, i));
    r.support.push_back(row);
    r.recall.push_back(row ? hit / static_cast<double>(row) : 0.0);
    r.precision.push_back(col ? hit / static_cast<double>(col) : 0.0);
    r.precision_undefined.push_back(col == 0);
    r.macro_recall += r.recall.back();
    r.macro_precision += r.precision.back();
  }
  r.macro_recall /= static_cast<double>(k);
  r.macro_precision /= static_cast<double>(k);
  const double denom = r.macro_precision + r.macro_recall;
  r.f1 = denom > 0 ? 2.0 * r.macro_precision * r.macro_recall / denom : 0.0;
  r.accuracy = static_cast<double>(cm.trace()) / static_cast<double>(r.total);
  return r;
}

/// 100 * rate rounded half-up to two decimals. The small offset absorbs
/// binary representation error of exact decimal ties.
inline double percent(double rate) { return std::floor(rate * 10000.0 + 0.5 + 1e-7) / 100.0; }

inline std::string format_percent(double rate) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2) << percent(rate);
  return os.str();
}

inline const std::vector<std::size_t>& report_counts() {
  static const std::vector<std::size_t> counts{20, 30, 40, 60, 80, 100};
  return counts;
}

enum class Layout { three_class, six_class };

inline std::vector<std::string> layout_rows(Layout layout) {
  std::vector<std::string> rows{"Bulk Carrier", "Container Ship", "Tanker"};
  if (layout == Layout::six_class) rows.insert(rows.end(), {"Cargo", "Fishing", "General Cargo"});
  return rows;
}

/// Per-class recall table with one column per training count, an Average
/// row (overall accuracy) and a Macro Recall row, followed by a summary of
/// recall, precision, F1 and accuracy per count. Counts without a report are
/// left out and listed in a note.
inline std::string render_report(const std::map<std::size_t, EvalReport>& reports, const std::vector<std::string>& rows) {
  if (reports.empty()) throw ContractError("render_report: no reports");
  for (const auto& [count, r] : reports)
    if (r.classes != rows) throw ContractError("render_report: report for count " + std::to_string(count) + " has a different class set");
  std::vector<std::size_t> columns, missing;
  for (std::size_t c : report_counts()) (reports.count(c) ? columns : missing).push_back(c);
  for (const auto& [count, r] : reports)
    if (std::find(report_counts().begin(), report_counts().end(), count) == report_counts().end()) columns.push_back(count);

  std::size_t label_width = std::string("Training number").size();
  for (const auto& name : rows) label_width = std::max(label_width, name.size());
  constexpr int cell = 8;
  std::ostringstream os;
  os << "Recognition performance of " << rows.size() << " classes (recall, %)\n";
  auto label = [&](const std::string& s) { os << std::left << std::setw(static_cast<int>(label_width)) << s << std::right; };
  label("Training number");
  for (std::size_t c : columns) os << " |" << std::setw(cell) << c;
  os << '\n' << std::string(label_width, '-');
  for (std::size_t i = 0; i < columns.size(); ++i) os << "-+" << std::string(cell, '-');
  os << '\n';
  auto row = [&](const std::string& name, auto value) {
    label(name);
    for (std::size_t c : columns) os << " |" << std::setw(cell) << format_percent(value(reports.at(c)));
    os << '\n';
  };
  for (std::size_t k = 0; k < rows.size(); ++k) row(rows[k], [k](const EvalReport& r) { return r.recall[k]; });
  row("Average", [](const EvalReport& r) { return r.accuracy; });
  row("Macro Recall", [](const EvalReport& r) { return r.macro_recall; });
  if (!missing.empty()) {
    os << "note: no report for training number";
    for (std::size_t i = 0; i < missing.size(); ++i) os << (i ? ", " : " ") << missing[i];
    os << '\n';
  }
  os << '\n';
  os << std::left << std::setw(static_cast<int>(label_width)) << "Training number" << std::right;
  for (const char* h : {"Recall", "Precision", "F1", "Acc"}) os << " |" << std::setw(10) << h;
  os << '\n';
  bool flagged = false;
  for (std::size_t c : columns) {
    const auto& r = reports.at(c);
    const bool undefined = std::find(r.precision_undefined.begin(), r.precision_undefined.end(), true) != r.precision_undefined.end();
    flagged = flagged || undefined;
    label(std::to_string(c));
    os << " |" << std::setw(10) << format_percent(r.macro_recall) << " |" << std::setw(10)
       << (format_percent(r.macro_precision) + (undefined ? "*" : "")) << " |" << std::setw(10) << format_percent(r.f1)
       << " |" << std::setw(10) << format_percent(r.accuracy) << '\n';
  }
  if (flagged) os << "* a class was never predicted; its precision counts as 0\n";
  return os.str();
}

/// `class,count_20,...` with percentages; Average and Macro Recall rows last.
inline std::string report_csv(const std::map<std::size_t, EvalReport>& reports, const std::vector<std::string>& rows) {
  std::vector<std::size_t> columns;
  for (std::size_t c : report_counts())
    if (reports.count(c)) columns.push_back(c);
  for (const auto& [count, r] : reports)
    if (std::find(columns.begin(), columns.end(), count) == columns.end()) columns.push_back(count);
  std::string out = "class";
  for (std::size_t c : columns) out += ",count_" + std::to_string(c);
  out += '\n';
  auto line = [&](const std::string& name, auto value) {
    out += name;
    for (std::size_t c : columns) out += "," + format_percent(value(reports.at(c)));
    out += '\n';
  };
  for (std::size_t k = 0; k < rows.size(); ++k) line(rows[k], [k](const EvalReport& r) { return r.recall[k]; });
  line("Average", [](const EvalReport& r) { return r.accuracy; });
  line("Macro Recall", [](const EvalReport& r) { return r.macro_recall; });
  return out;
}

inline std::string confusion_csv(const ConfusionMatrix& cm, const std::vector<std::string>& classes) {
  std::string out = "true\\predicted";
  for (const auto& c : classes) out += "," + c;
  out += '\n';
  for (std::size_t r = 0; r < cm.classes(); ++r) {
    out += classes.at(r);
    for (std::size_t c = 0; c < cm.classes(); ++c) out += "," + std::to_string(cm.at(r, c));
    out += '\n';
  }
  return out;
}

struct Evaluation {
  ConfusionMatrix confusion;
  std::vector<std::size_t> predictions;  // per test sample, manifest order
  std::vector<std::vector<float>> scale_weights;
};

inline constexpr std::size_t kEvalBatch = 32;

namespace detail {

inline Tensor<float> load_batch(const data::Manifest& m, const std::vector<data::ManifestEntry>& entries,
                                std::size_t begin, std::size_t end, std::size_t size) {
  std::vector<float> buf;
  buf.reserve((end - begin) * size * size);
  for (std::size_t i = begin; i < end; ++i) {
    const auto s = data::load_sample(m, entries[i], size);
    buf.insert(buf.end(), s.image.begin(), s.image.end());
  }
  return Tensor<float>({end - begin, 1, size, size}, std::move(buf));
}

}  // namespace detail

/// Eval-mode forward over the test split in fixed batches of 32. Batches are
/// dealt round-robin to `workers` threads; per-worker matrices are summed, so
/// the result does not depend on the worker count.
inline Evaluation evaluate(Model<float>& model, const data::Manifest& manifest, std::size_t workers = 1) {
  if (model.config().classifier.classes != manifest.num_classes())
    throw ConfigError("model predicts " + std::to_string(model.config().classifier.classes) + " classes, manifest has " +
                      std::to_string(manifest.num_classes()));
  const auto entries = manifest.split(data::Split::test);
  if (entries.empty()) throw ConfigError("manifest has no test split");
  const std::size_t size = model.config().pyramid.input_size;
  const std::size_t batches = (entries.size() + kEvalBatch - 1) / kEvalBatch;
  workers = std::clamp<std::size_t>(workers, 1, batches);

  Evaluation ev{ConfusionMatrix(manifest.num_classes()), std::vector<std::size_t>(entries.size()),
                std::vector<std::vector<float>>(entries.size())};
  std::vector<ConfusionMatrix> partial(workers, ConfusionMatrix(manifest.num_classes()));
  std::vector<std::exception_ptr> errors(workers);
  auto work = [&](std::size_t w) {
    try {
      for (std::size_t b = w; b < batches; b += workers) {
        const std::size_t begin = b * kEvalBatch, end = std::min(entries.size(), begin + kEvalBatch);
        auto tape = Tape<float>::inference();
        const auto out = model.forward(tape, detail::load_batch(manifest, entries, begin, end, size), ops::Mode::eval);
        const std::size_t k = out.weights.dim(1);
        for (std::size_t i = begin; i < end; ++i) {
          const std::size_t pred = out.prediction.predicted(i - begin);
          ev.predictions[i] = pred;
          partial[w].add(entries[i].label, pred);
          const auto wr = out.weights.data().subspan((i - begin) * k, k);
          ev.scale_weights[i].assign(wr.begin(), wr.end());
        }
      }
    } catch (...) {
      errors[w] = std::current_exception();
    }
  };
  if (workers == 1) {
    work(0);
  } else {
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work, w);
    for (auto& t : pool) t.join();
  }
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  for (const auto& p : partial) ev.confusion.merge(p);
  return ev;
}

/// Mean same-class minus other-class cosine of principal vectors over the
/// test split, computed in eval mode.
inline double held_out_separation(Model<float>& model, const data::Manifest& manifest, std::size_t iterations) {
  const auto entries = manifest.split(data::Split::test);
  if (entries.empty()) throw ConfigError("manifest has no test split");
  const std::size_t size = model.config().pyramid.input_size;
  std::vector<std::vector<float>> vectors(PyramidConfig::num_scales);
  std::vector<std::vector<std::uint8_t>> degenerate(PyramidConfig::num_scales);
  std::size_t channels = 0;
  std::vector<std::size_t> widths(PyramidConfig::num_scales);
  std::vector<std::size_t> labels;
  for (std::size_t begin = 0; begin < entries.size(); begin += kEvalBatch) {
    const std::size_t end = std::min(entries.size(), begin + kEvalBatch);
    auto tape = Tape<float>::inference();
    const auto feats = pyramid_forward(tape, model.pyramid(), detail::load_batch(manifest, entries, begin, end, size), ops::Mode::eval);
    for (std::size_t s = 0; s < feats.scales.size(); ++s) {
      const auto pv = msfa::principal_vectors(tape, feats.scales[s], iterations);
      vectors[s].insert(vectors[s].end(), pv.vectors.data().begin(), pv.vectors.data().end());
      degenerate[s].insert(degenerate[s].end(), pv.degenerate.begin(), pv.degenerate.end());
      channels = pv.channels();
      widths[s] = pv.width();
    }
    for (std::size_t i = begin; i < end; ++i) labels.push_back(entries[i].label);
  }
  std::vector<msfa::PrincipalVectors<float>> scales;
  for (std::size_t s = 0; s < vectors.size(); ++s) {
    msfa::PrincipalVectors<float> pv;
    pv.vectors = Tensor<float>({labels.size(), channels, widths[s]}, std::move(vectors[s]));
    pv.degenerate = std::move(degenerate[s]);
    scales.push_back(std::move(pv));
  }
  return msfa::separation_gap(scales, labels);
}

}  // namespace msaw::eval
