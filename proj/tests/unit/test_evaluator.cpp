#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <numeric>
#include <random>
#include <string>

#include "msaw/evaluator.hpp"
#include "msaw/trainer.hpp"
#include "report_fixture.hpp"
#include "tiny_data.hpp"

using namespace msaw;
using eval::ConfusionMatrix;

#ifndef MSAW_TEST_DATA_DIR
#define MSAW_TEST_DATA_DIR "tests/data"
#endif

namespace {

std::map<std::size_t, eval::EvalReport> golden_reports() {
  const auto rows = eval::layout_rows(eval::Layout::three_class);
  std::map<std::size_t, eval::EvalReport> out;
  out[20] = eval::metrics(ConfusionMatrix::from_rows({{70, 20, 10}, {15, 80, 5}, {30, 10, 60}}), rows);
  out[60] = eval::metrics(ConfusionMatrix::from_rows({{85, 10, 5}, {10, 88, 2}, {12, 6, 82}}), rows);
  out[100] = eval::metrics(ConfusionMatrix::from_rows({{100, 0, 0}, {3, 97, 0}, {0, 1, 99}}), rows);
  return out;
}

}  // namespace

// Hand-computed: recall 8/10 and 6/10, precision 8/12 and 6/8.
TEST(Metrics, TwoClassExample) {
  const auto r = eval::metrics(ConfusionMatrix::from_rows({{8, 2}, {4, 6}}));
  EXPECT_DOUBLE_EQ(r.recall[0], 0.8);
  EXPECT_DOUBLE_EQ(r.recall[1], 0.6);
  EXPECT_DOUBLE_EQ(r.precision[0], 2.0 / 3.0);
  EXPECT_DOUBLE_EQ(r.precision[1], 0.75);
  EXPECT_DOUBLE_EQ(r.macro_recall, 0.7);
  EXPECT_NEAR(r.macro_precision, 17.0 / 24.0, 1e-15);
  EXPECT_NEAR(r.f1, 2.0 * (17.0 / 24.0) * 0.7 / (17.0 / 24.0 + 0.7), 1e-15);
  EXPECT_DOUBLE_EQ(r.accuracy, 0.7);
  EXPECT_EQ(eval::format_percent(r.f1), "70.41");
  EXPECT_EQ(eval::format_percent(r.macro_precision), "70.83");
}

TEST(Metrics, NeverPredictedClassIsFlagged) {
  const auto r = eval::metrics(ConfusionMatrix::from_rows({{5, 0}, {5, 0}}));
  EXPECT_TRUE(r.precision_undefined[1]);
  EXPECT_EQ(r.precision[1], 0.0);
  EXPECT_DOUBLE_EQ(r.macro_precision, 0.25);
  const auto text = eval::render_report({{100, eval::metrics(ConfusionMatrix::from_rows({{5, 0, 0}, {5, 0, 0}, {0, 0, 3}}),
                                                              eval::layout_rows(eval::Layout::three_class))}},
                                        eval::layout_rows(eval::Layout::three_class));
  EXPECT_NE(text.find("* a class was never predicted"), std::string::npos);
}

TEST(Metrics, EmptyMatrixAndBadNames) {
  EXPECT_THROW(eval::metrics(ConfusionMatrix(3)), ContractError);
  EXPECT_THROW(eval::metrics(ConfusionMatrix::from_rows({{1, 0}, {0, 1}}), {"a"}), DimensionError);
  EXPECT_THROW(ConfusionMatrix::from_rows({{1, 0}, {0}}), DimensionError);
  ConfusionMatrix cm(2);
  EXPECT_THROW(cm.add(2, 0), ContractError);
}

// Relabelling classes permutes per-class numbers and leaves macro numbers alone.
TEST(Metrics, PermutationEquivariance) {
  std::mt19937_64 rng(8);
  std::uniform_int_distribution<int> count(0, 30);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t k = 3 + static_cast<std::size_t>(trial % 4);
    ConfusionMatrix cm(k);
    for (std::size_t r = 0; r < k; ++r)
      for (std::size_t c = 0; c < k; ++c) cm.at(r, c) = static_cast<std::uint64_t>(count(rng)) + (r == c ? 10u : 0u);
    std::vector<std::size_t> perm(k);
    std::iota(perm.begin(), perm.end(), 0);
    std::shuffle(perm.begin(), perm.end(), rng);
    ConfusionMatrix pm(k);
    for (std::size_t r = 0; r < k; ++r)
      for (std::size_t c = 0; c < k; ++c) pm.at(perm[r], perm[c]) = cm.at(r, c);
    const auto a = eval::metrics(cm), b = eval::metrics(pm);
    for (std::size_t i = 0; i < k; ++i) {
      EXPECT_DOUBLE_EQ(a.recall[i], b.recall[perm[i]]);
      EXPECT_DOUBLE_EQ(a.precision[i], b.precision[perm[i]]);
    }
    EXPECT_NEAR(a.macro_recall, b.macro_recall, 1e-12);
    EXPECT_NEAR(a.f1, b.f1, 1e-12);
    EXPECT_DOUBLE_EQ(a.accuracy, b.accuracy);
  }
}

TEST(Metrics, PercentRoundsHalfUp) {
  EXPECT_EQ(eval::format_percent(0.12345), "12.35");
  EXPECT_EQ(eval::format_percent(0.12344), "12.34");
  EXPECT_EQ(eval::format_percent(2.0 / 3.0), "66.67");
  EXPECT_EQ(eval::format_percent(0.00005), "0.01");
  EXPECT_EQ(eval::format_percent(1.0), "100.00");
  EXPECT_EQ(eval::format_percent(0.0), "0.00");
  EXPECT_EQ(eval::format_percent(0.5), "50.00");
}

TEST(Report, MatchesGoldenFile) {
  const auto rows = eval::layout_rows(eval::Layout::three_class);
  const auto text = eval::render_report(golden_reports(), rows);
  const auto golden = data::read_file(std::filesystem::path(MSAW_TEST_DATA_DIR) / "report_3class.txt");
  EXPECT_EQ(text, golden);
  EXPECT_EQ(eval::report_csv(golden_reports(), rows), data::read_file(std::filesystem::path(MSAW_TEST_DATA_DIR) / "report_3class.csv"));
}

TEST(Report, AllCountsMatchGoldenFile) {
  const auto text = eval::render_report(fixture::six_count_reports(), eval::layout_rows(eval::Layout::three_class));
  EXPECT_EQ(text, data::read_file(std::filesystem::path(MSAW_TEST_DATA_DIR) / "report_3class_all_counts.txt"));
  EXPECT_EQ(text.find("note:"), std::string::npos);
}

TEST(Report, RowsAndMissingColumns) {
  const auto rows = eval::layout_rows(eval::Layout::three_class);
  const auto text = eval::render_report(golden_reports(), rows);
  EXPECT_NE(text.find("Average"), std::string::npos);
  EXPECT_NE(text.find("Macro Recall"), std::string::npos);
  EXPECT_NE(text.find("note: no report for training number 30, 40, 80"), std::string::npos);
  EXPECT_EQ(eval::layout_rows(eval::Layout::six_class).size(), 6u);
  auto other = golden_reports();
  other[20].classes[0] = "Fishing";
  EXPECT_THROW(eval::render_report(other, rows), ContractError);
  EXPECT_THROW(eval::render_report({}, rows), ContractError);
}

TEST(Report, ConfusionCsv) {
  const auto cm = ConfusionMatrix::from_rows({{1, 2}, {3, 4}});
  EXPECT_EQ(eval::confusion_csv(cm, {"A", "B"}), "true\\predicted,A,B\nA,1,2\nB,3,4\n");
}

TEST(Evaluate, WorkerCountDoesNotChangeResults) {
  const auto dir = fixture::scratch("evaluate");
  const auto manifest = fixture::tiny_set(dir, 3, 15);
  auto cfg = fixture::quick_config();
  auto fit = train::fit(manifest, cfg, {});
  const auto one = eval::evaluate(fit.model, manifest, 1);
  const auto three = eval::evaluate(fit.model, manifest, 3);
  EXPECT_EQ(one.confusion, three.confusion);
  EXPECT_EQ(one.predictions, three.predictions);
  EXPECT_EQ(one.scale_weights, three.scale_weights);
  EXPECT_EQ(one.confusion.total(), 45u);
  for (const auto& w : one.scale_weights) EXPECT_NEAR(w[0] + w[1] + w[2], 1.0, 1e-6);
  std::filesystem::remove_all(dir);
}

TEST(Evaluate, ClassCountMismatch) {
  const auto dir = fixture::scratch("evaluate_mismatch");
  const auto manifest = fixture::tiny_set(dir, 2, 1);
  ModelConfig mc;
  mc.classifier.classes = 6;
  Model<float> m(mc, 1);
  EXPECT_THROW(eval::evaluate(m, manifest), ConfigError);
  std::filesystem::remove_all(dir);
}
