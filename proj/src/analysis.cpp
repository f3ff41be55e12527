#include "subpool/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>

#include "subpool/binary_io.hpp"
#include "subpool/errors.hpp"

namespace subpool {

double expected_layer(std::span<const double> accuracies) {
  double weighted = 0.0;
  double total = 0.0;
  for (std::size_t i = 0; i < accuracies.size(); ++i) {
    if (!(accuracies[i] >= 0.0)) throw Error("expected layer needs non-negative accuracies");
    weighted += static_cast<double>(i) * accuracies[i];
    total += accuracies[i];
  }
  if (total == 0.0) throw Error("expected layer is undefined for an all-zero profile");
  return weighted / total;
}

std::vector<RatioPoint> last_first_ratio(std::span<const double> last, std::span<const double> first) {
  if (last.size() != first.size()) throw Error("ratio curves need the same number of layers");
  std::vector<RatioPoint> out;
  for (std::size_t i = 0; i < last.size(); ++i) {
    RatioPoint point{i, std::nullopt};
    if (first[i] != 0.0) point.ratio = last[i] / first[i];
    out.push_back(point);
  }
  return out;
}

// ------------------------------------------------------------- statistics

namespace {

// Continued fraction for the incomplete beta, modified Lentz evaluation.
double beta_continued_fraction(double a, double b, double x) {
  constexpr int kMaxIterations = 500;
  constexpr double kEps = 1e-16;
  constexpr double kTiny = 1e-300;
  const double qab = a + b;
  const double qap = a + 1.0;
  const double qam = a - 1.0;
  double c = 1.0;
  double d = 1.0 - qab * x / qap;
  if (std::abs(d) < kTiny) d = kTiny;
  d = 1.0 / d;
  double h = d;
  for (int m = 1; m <= kMaxIterations; ++m) {
    const double m2 = 2.0 * m;
    double aa = m * (b - m) * x / ((qam + m2) * (a + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    h *= d * c;
    aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
    d = 1.0 + aa * d;
    if (std::abs(d) < kTiny) d = kTiny;
    c = 1.0 + aa / c;
    if (std::abs(c) < kTiny) c = kTiny;
    d = 1.0 / d;
    const double delta = d * c;
    h *= delta;
    if (std::abs(delta - 1.0) < kEps) break;
  }
  return h;
}

}  // namespace

double incomplete_beta(double a, double b, double x) {
  if (a <= 0.0 || b <= 0.0) throw Error("incomplete beta needs positive shape parameters");
  if (x < 0.0 || x > 1.0) throw Error("incomplete beta needs x in [0,1]");
  if (x == 0.0) return 0.0;
  if (x == 1.0) return 1.0;
  const double log_front = std::lgamma(a + b) - std::lgamma(a) - std::lgamma(b) + a * std::log(x) +
                           b * std::log1p(-x);
  const double front = std::exp(log_front);
  // The fraction converges fast only on one side of the mean; use symmetry.
  if (x < (a + 1.0) / (a + b + 2.0)) return front * beta_continued_fraction(a, b, x) / a;
  return 1.0 - front * beta_continued_fraction(b, a, 1.0 - x) / b;
}

double student_t_two_sided(double t, double df) {
  if (!(df > 0.0)) throw Error("t distribution needs positive degrees of freedom");
  if (std::isnan(t)) throw Error("t statistic is NaN");
  if (std::isinf(t)) return 0.0;
  return incomplete_beta(df / 2.0, 0.5, df / (df + t * t));
}

TTestResult paired_t_test(std::span<const double> a, std::span<const double> b, double alpha) {
  if (a.size() != b.size()) {
    throw Error("paired t-test needs equal lengths, got " + std::to_string(a.size()) + " and " +
                std::to_string(b.size()));
  }
  if (a.size() < 2) throw Error("paired t-test needs at least two pairs");
  const std::size_t n = a.size();
  std::vector<double> diff(n);
  for (std::size_t i = 0; i < n; ++i) diff[i] = a[i] - b[i];
  double mean = 0.0;
  for (double d : diff) mean += d;
  mean /= static_cast<double>(n);
  double ss = 0.0;
  for (double d : diff) ss += (d - mean) * (d - mean);
  const double sd = std::sqrt(ss / static_cast<double>(n - 1));

  TTestResult result;
  result.df = n - 1;
  if (sd == 0.0) {
    if (mean == 0.0) {
      result.t = 0.0;
      result.p = 1.0;
    } else {
      result.t = std::copysign(std::numeric_limits<double>::infinity(), mean);
      result.p = 0.0;
    }
  } else {
    result.t = mean / (sd / std::sqrt(static_cast<double>(n)));
    result.p = student_t_two_sided(result.t, static_cast<double>(result.df));
  }
  result.significant = result.p < alpha;
  return result;
}

// ------------------------------------------------------------- result table

namespace {

std::vector<std::string> split_csv_line(std::string_view line) {
  std::vector<std::string> out;
  std::string cell;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cell);
      cell.clear();
    } else if (c != '\r') {
      cell.push_back(c);
    }
  }
  out.push_back(cell);
  return out;
}

double parse_percent(const std::string& cell, std::size_t line_no) {
  try {
    std::size_t used = 0;
    const double value = std::stod(cell, &used);
    if (used != cell.size()) throw std::invalid_argument(cell);
    if (value < 0.0 || value > 100.0) throw ParseError(line_no, "accuracy " + cell + " is outside [0,100]");
    return value;
  } catch (const std::logic_error&) {
    throw ParseError(line_no, "'" + cell + "' is not a number");
  }
}

}  // namespace

ResultTable ResultTable::parse_csv(std::string_view text) {
  ResultTable table;
  std::vector<PoolingMethod> columns;
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    const auto line = text.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    const auto cells = split_csv_line(line);
    if (columns.empty()) {
      if (cells.size() < 3 || cells[0] != "task" || cells[1] != "model") {
        throw ParseError(line_no, "result table header must start with task,model");
      }
      for (std::size_t i = 2; i < cells.size(); ++i) columns.push_back(parse_pooling(cells[i]));
      continue;
    }
    if (cells.size() != columns.size() + 2) {
      throw ParseError(line_no, "expected " + std::to_string(columns.size() + 2) + " columns, got " +
                                    std::to_string(cells.size()));
    }
    for (std::size_t i = 0; i < columns.size(); ++i) {
      table.set(cells[0], cells[1], columns[i], parse_percent(cells[i + 2], line_no));
    }
  }
  if (columns.empty()) throw ParseError(line_no, "result table is empty");
  return table;
}

ResultTable ResultTable::load(const std::string& path) {
  return parse_csv(binio::read_file(path));
}

ResultTable ResultTable::from_results(std::span<const ResultRecord> records, std::string_view layer) {
  std::map<std::tuple<std::string, std::string, PoolingMethod>, std::pair<double, std::size_t>> sums;
  std::vector<std::tuple<std::string, std::string, PoolingMethod>> order;
  for (const auto& r : records) {
    if (r.layer != layer) continue;
    const auto key = std::make_tuple(r.task, r.model_store, parse_pooling(r.pooling));
    auto [it, inserted] = sums.try_emplace(key, 0.0, 0);
    if (inserted) order.push_back(key);
    it->second.first += r.test_acc;
    ++it->second.second;
  }
  ResultTable table;
  for (const auto& key : order) {
    const auto& [sum, count] = sums.at(key);
    table.set(std::get<0>(key), std::get<1>(key), std::get<2>(key), 100.0 * sum / static_cast<double>(count));
  }
  return table;
}

void ResultTable::set(const std::string& task, const std::string& model, PoolingMethod method, double accuracy) {
  for (auto& row : rows_) {
    if (row.task == task && row.model == model) {
      row.accuracy[method] = accuracy;
      return;
    }
  }
  rows_.push_back({task, model, {{method, accuracy}}});
}

std::optional<double> ResultTable::find(std::string_view task, std::string_view model, PoolingMethod method) const {
  for (const auto& row : rows_) {
    if (row.task == task && row.model == model) {
      const auto it = row.accuracy.find(method);
      if (it != row.accuracy.end()) return it->second;
      return std::nullopt;
    }
  }
  return std::nullopt;
}

double ResultTable::at(std::string_view task, std::string_view model, PoolingMethod method) const {
  const auto value = find(task, model, method);
  if (!value) {
    throw Error("no result for " + std::string(task) + " / " + std::string(model) + " / " +
                std::string(pooling_name(method)));
  }
  return *value;
}

std::vector<std::string> ResultTable::tasks(std::string_view model) const {
  std::vector<std::string> out;
  for (const auto& row : rows_) {
    if (row.model == model) out.push_back(row.task);
  }
  return out;
}

std::vector<std::string> ResultTable::models() const {
  std::vector<std::string> out;
  for (const auto& row : rows_) {
    if (std::find(out.begin(), out.end(), row.model) == out.end()) out.push_back(row.model);
  }
  return out;
}

std::vector<PoolingMethod> ResultTable::methods(std::string_view model) const {
  std::vector<PoolingMethod> out;
  bool first_row = true;
  for (const auto& row : rows_) {
    if (row.model != model) continue;
    if (first_row) {
      for (auto method : kAllPoolings) {
        if (row.accuracy.count(method)) out.push_back(method);
      }
      first_row = false;
    } else {
      std::erase_if(out, [&](PoolingMethod m) { return !row.accuracy.count(m); });
    }
  }
  return out;
}

// ------------------------------------------------------------- pairwise

const PairwiseCell& PairwiseMatrix::at(PoolingMethod row, PoolingMethod col) const {
  const auto r = std::find(methods.begin(), methods.end(), row);
  const auto c = std::find(methods.begin(), methods.end(), col);
  if (r == methods.end() || c == methods.end()) throw Error("pooling not present in the pairwise matrix");
  return cells[static_cast<std::size_t>(r - methods.begin())][static_cast<std::size_t>(c - methods.begin())];
}

std::string PairwiseMatrix::to_csv() const {
  std::ostringstream out;
  out << "pooling";
  for (auto m : methods) out << ',' << pooling_name(m);
  out << '\n';
  for (std::size_t r = 0; r < methods.size(); ++r) {
    out << pooling_name(methods[r]);
    for (std::size_t c = 0; c < methods.size(); ++c) {
      char buf[32];
      std::snprintf(buf, sizeof buf, "%.4f", cells[r][c].ratio);
      out << ',' << buf << (cells[r][c].significant ? "*" : "");
    }
    out << '\n';
  }
  return out.str();
}

PairwiseMatrix pairwise_matrix(const ResultTable& table, std::string_view model, std::span<const std::string> tasks) {
  const std::vector<std::string> chosen =
      tasks.empty() ? table.tasks(model) : std::vector<std::string>(tasks.begin(), tasks.end());
  if (chosen.size() < 2) throw Error("pairwise comparison needs at least two tasks");
  PairwiseMatrix matrix;
  matrix.methods = table.methods(model);
  const std::size_t k = matrix.methods.size();
  std::vector<std::vector<double>> acc(k, std::vector<double>(chosen.size()));
  for (std::size_t m = 0; m < k; ++m) {
    for (std::size_t t = 0; t < chosen.size(); ++t) acc[m][t] = table.at(chosen[t], model, matrix.methods[m]);
  }
  matrix.cells.assign(k, std::vector<PairwiseCell>(k));
  for (std::size_t r = 0; r < k; ++r) {
    for (std::size_t c = 0; c < k; ++c) {
      if (r == c) continue;  // ratio 1, p 1
      double ratio = 0.0;
      for (std::size_t t = 0; t < chosen.size(); ++t) {
        if (acc[c][t] == 0.0) throw Error("pairwise ratio has a zero denominator in task " + chosen[t]);
        ratio += acc[r][t] / acc[c][t];
      }
      const auto test = paired_t_test(acc[r], acc[c]);
      matrix.cells[r][c] = {ratio / static_cast<double>(chosen.size()), test.p, test.significant};
    }
  }
  return matrix;
}

double macro_average(const ResultTable& table, std::string_view model, MacroGrouping grouping,
                     std::span<const PoolingMethod> methods_in) {
  const auto methods = methods_in.empty() ? table.methods(model)
                                          : std::vector<PoolingMethod>(methods_in.begin(), methods_in.end());
  const auto tasks = table.tasks(model);
  if (tasks.empty() || methods.empty()) throw Error("no cells to average for model " + std::string(model));
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& task : tasks) {
    if (grouping == MacroGrouping::AllCells) {
      for (auto m : methods) {
        total += table.at(task, model, m);
        ++count;
      }
    } else {
      double best = -std::numeric_limits<double>::infinity();
      for (auto m : methods) best = std::max(best, table.at(task, model, m));
      total += best;
      ++count;
    }
  }
  return total / static_cast<double>(count);
}

// ------------------------------------------------------------- fixture claims

bool FixtureReport::passed() const {
  return std::all_of(claims.begin(), claims.end(), [](const ClaimResult& c) { return c.passed; });
}

std::string FixtureReport::to_text() const {
  std::ostringstream out;
  for (const auto& claim : claims) {
    out << (claim.passed ? "PASS " : "FAIL ") << claim.id << ": " << claim.description;
    if (!claim.detail.empty()) out << " (" << claim.detail << ")";
    out << '\n';
  }
  return out.str();
}

namespace {

std::string fmt(double value, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, value);
  return buf;
}

ClaimResult ner_claim(const ResultTable& ner) {
  ClaimResult claim{"ner-mbert-ahead", "NER: mBERT >= XLM-RoBERTa for every language and pooling", true, ""};
  std::size_t checked = 0;
  for (const auto& language : ner.tasks(kMultilingualBert)) {
    for (auto m : kAllPoolings) {
      const auto a = ner.find(language, kMultilingualBert, m);
      const auto b = ner.find(language, kXlmRoberta, m);
      if (!a || !b) {
        claim.passed = false;
        claim.detail += "missing " + language + "/" + std::string(pooling_name(m)) + "; ";
        continue;
      }
      ++checked;
      if (*a < *b) {
        claim.passed = false;
        claim.detail += language + "/" + std::string(pooling_name(m)) + " " + fmt(*a, 1) + " < " + fmt(*b, 1) + "; ";
      }
    }
  }
  if (checked == 0) claim.passed = false;
  if (claim.passed) claim.detail = std::to_string(checked) + " cells";
  return claim;
}

ClaimResult last_over_first_claim(const ResultTable& morph) {
  ClaimResult claim{"morph-last-over-first",
                    "morphology: LAST > FIRST everywhere except Arabic_Case_NOUN in both models", true, ""};
  const std::set<std::pair<std::string, std::string>> expected = {
      {"Arabic_Case_NOUN", std::string(kMultilingualBert)}, {"Arabic_Case_NOUN", std::string(kXlmRoberta)}};
  std::set<std::pair<std::string, std::string>> exceptions;
  for (const auto& row : morph.rows()) {
    if (morph.at(row.task, row.model, PoolingMethod::Last) <= morph.at(row.task, row.model, PoolingMethod::First)) {
      exceptions.insert({row.task, row.model});
    }
  }
  claim.passed = exceptions == expected;
  claim.detail = "exceptions:";
  for (const auto& [task, model] : exceptions) claim.detail += " " + task + "/" + model;
  return claim;
}

ClaimResult korean_first_claim(const ResultTable& pos) {
  ClaimResult claim{"pos-korean-first-min", "POS: FIRST is the row minimum for Korean in both models", true, ""};
  for (auto model : {kMultilingualBert, kXlmRoberta}) {
    const double first = pos.at("Korean", model, PoolingMethod::First);
    for (auto m : kAllPoolings) {
      if (m == PoolingMethod::First) continue;
      if (pos.at("Korean", model, m) <= first) {
        claim.passed = false;
        claim.detail += std::string(model) + "/" + std::string(pooling_name(m)) + " <= first; ";
      }
    }
    claim.detail += std::string(model) + " first=" + fmt(first, 1) + "; ";
  }
  return claim;
}

ClaimResult finnish_ratio_claim(const ResultTable& morph) {
  ClaimResult claim{"morph-finnish-ratio", "morphology: Finnish_Case_NOUN mBERT last/first = 2.748 +- 0.001", true, ""};
  const auto ratios = last_first_ratio(
      std::vector<double>{morph.at("Finnish_Case_NOUN", kMultilingualBert, PoolingMethod::Last)},
      std::vector<double>{morph.at("Finnish_Case_NOUN", kMultilingualBert, PoolingMethod::First)});
  claim.passed = ratios[0].ratio && std::abs(*ratios[0].ratio - 2.748) <= 0.001;
  claim.detail = ratios[0].ratio ? "ratio " + fmt(*ratios[0].ratio) : "zero denominator";
  return claim;
}

ClaimResult attn_claim(const ResultTable& morph) {
  ClaimResult claim{"morph-attn-dominates", "morphology: mBERT ATTN mean pairwise ratio >= 1 against every pooling",
                    true, ""};
  const auto matrix = pairwise_matrix(morph, kMultilingualBert);
  double smallest = std::numeric_limits<double>::infinity();
  for (auto m : matrix.methods) {
    if (m == PoolingMethod::Attn) continue;
    const double ratio = matrix.at(PoolingMethod::Attn, m).ratio;
    smallest = std::min(smallest, ratio);
    if (ratio < 1.0) {
      claim.passed = false;
      claim.detail += std::string(pooling_name(m)) + " " + fmt(ratio) + "; ";
    }
  }
  claim.detail += "smallest ratio " + fmt(smallest);
  return claim;
}

ClaimResult macro_claim(const ResultTable& morph) {
  ClaimResult claim{"morph-xlmr-macro", "morphology: XLM-RoBERTa macro accuracy > mBERT", true, ""};
  const double mbert = macro_average(morph, kMultilingualBert, MacroGrouping::AllCells);
  const double xlmr = macro_average(morph, kXlmRoberta, MacroGrouping::AllCells);
  claim.passed = xlmr > mbert;
  claim.detail = "mBERT " + fmt(mbert, 2) + ", XLM-RoBERTa " + fmt(xlmr, 2);
  return claim;
}

template <typename Fn>
ClaimResult guarded(std::string id, Fn&& fn) {
  try {
    return fn();
  } catch (const Error& e) {
    return {std::move(id), "claim could not be evaluated", false, e.what()};
  }
}

}  // namespace

FixtureReport verify_fixture_claims(const ResultTable& morph, const ResultTable& pos, const ResultTable& ner) {
  FixtureReport report;
  report.claims.push_back(guarded("ner-mbert-ahead", [&] { return ner_claim(ner); }));
  report.claims.push_back(guarded("morph-last-over-first", [&] { return last_over_first_claim(morph); }));
  report.claims.push_back(guarded("pos-korean-first-min", [&] { return korean_first_claim(pos); }));
  report.claims.push_back(guarded("morph-finnish-ratio", [&] { return finnish_ratio_claim(morph); }));
  report.claims.push_back(guarded("morph-attn-dominates", [&] { return attn_claim(morph); }));
  report.claims.push_back(guarded("morph-xlmr-macro", [&] { return macro_claim(morph); }));
  return report;
}

}  // namespace subpool
