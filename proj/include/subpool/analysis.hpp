#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "subpool/pool.hpp"
#include "subpool/probe.hpp"

namespace subpool {

/// Accuracy-weighted mean layer index: sum(i * A_i) / sum(A_i).
/// `accuracies[i]` belongs to layer i; a SUM entry must not be passed in.
double expected_layer(std::span<const double> accuracies);

struct RatioPoint {
  std::size_t layer = 0;
  std::optional<double> ratio;  // empty when the first-pooling accuracy is 0
};

/// acc_last(i) / acc_first(i) per layer.
std::vector<RatioPoint> last_first_ratio(std::span<const double> last, std::span<const double> first);

struct TTestResult {
  double t = 0.0;
  double p = 1.0;
  std::size_t df = 0;
  bool significant = false;  // p < alpha
};

/// Regularized incomplete beta I_x(a, b), continued-fraction evaluation.
double incomplete_beta(double a, double b, double x);

/// Two-sided tail probability of Student's t with `df` degrees of freedom.
double student_t_two_sided(double t, double df);

/// Paired two-sided t-test on a - b. Identical lists give t = 0, p = 1.
/// Constant nonzero differences give an infinite t and p = 0.
TTestResult paired_t_test(std::span<const double> a, std::span<const double> b, double alpha = 0.05);

/// Accuracy in percent keyed by (task, model, pooling).
class ResultTable {
 public:
  struct Row {
    std::string task;
    std::string model;
    std::map<PoolingMethod, double> accuracy;
  };

  /// Wide CSV: task,model followed by one column per pooling name.
  static ResultTable parse_csv(std::string_view text);
  static ResultTable load(const std::string& path);
  /// Mean test accuracy over seeds, in percent, for one layer of a results file.
  static ResultTable from_results(std::span<const ResultRecord> records, std::string_view layer);

  void set(const std::string& task, const std::string& model, PoolingMethod method, double accuracy);
  std::optional<double> find(std::string_view task, std::string_view model, PoolingMethod method) const;
  double at(std::string_view task, std::string_view model, PoolingMethod method) const;

  const std::vector<Row>& rows() const noexcept { return rows_; }
  std::vector<std::string> tasks(std::string_view model) const;  // in table order
  std::vector<std::string> models() const;                        // in table order
  std::vector<PoolingMethod> methods(std::string_view model) const;  // present in every row of model

 private:
  std::vector<Row> rows_;
};

struct PairwiseCell {
  double ratio = 1.0;  // mean over tasks of acc_row / acc_col
  double p = 1.0;
  bool significant = false;
};

struct PairwiseMatrix {
  std::vector<PoolingMethod> methods;
  std::vector<std::vector<PairwiseCell>> cells;  // [row][col]

  const PairwiseCell& at(PoolingMethod row, PoolingMethod col) const;
  std::string to_csv() const;  // significant cells carry a trailing '*'
};

/// `tasks` restricts the comparison; empty means every task of `model`.
PairwiseMatrix pairwise_matrix(const ResultTable& table, std::string_view model,
                               std::span<const std::string> tasks = {});

enum class MacroGrouping {
  AllCells,     // every (task, pooling) cell
  BestPerTask,  // the best pooling of each task
};

double macro_average(const ResultTable& table, std::string_view model, MacroGrouping grouping,
                     std::span<const PoolingMethod> methods = {});

struct ClaimResult {
  std::string id;
  std::string description;
  bool passed = false;
  std::string detail;
};

struct FixtureReport {
  std::vector<ClaimResult> claims;

  bool passed() const;
  std::string to_text() const;
};

inline constexpr std::string_view kMultilingualBert = "mBERT";
inline constexpr std::string_view kXlmRoberta = "XLM-RoBERTa";

/// Machine checks of the published result tables (morphology, POS, NER).
FixtureReport verify_fixture_claims(const ResultTable& morph, const ResultTable& pos, const ResultTable& ner);

}  // namespace subpool
