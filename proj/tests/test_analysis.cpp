#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <boost/math/distributions/students_t.hpp>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "subpool/analysis.hpp"
#include "subpool/errors.hpp"
#include "subpool/rng.hpp"

using namespace subpool;

namespace {

std::string fixture(const std::string& name) { return std::string(SUBPOOL_FIXTURE_DIR) + "/" + name; }

struct Fixtures {
  ResultTable morph = ResultTable::load(fixture("morph_results.csv"));
  ResultTable pos = ResultTable::load(fixture("pos_results.csv"));
  ResultTable ner = ResultTable::load(fixture("ner_results.csv"));
};

const ClaimResult& claim(const FixtureReport& report, const std::string& id) {
  const auto it = std::find_if(report.claims.begin(), report.claims.end(), [&](const auto& c) { return c.id == id; });
  REQUIRE(it != report.claims.end());
  return *it;
}

double boost_two_sided(double t, double df) {
  boost::math::students_t dist(df);
  return 2.0 * boost::math::cdf(boost::math::complement(dist, std::abs(t)));
}

ResultTable tiny_table(const std::vector<std::array<double, 2>>& rows) {
  ResultTable table;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    table.set("t" + std::to_string(i), "m", PoolingMethod::First, rows[i][0]);
    table.set("t" + std::to_string(i), "m", PoolingMethod::Last, rows[i][1]);
  }
  return table;
}

}  // namespace

TEST_CASE("expected layer examples") {
  const std::vector<double> uniform(13, 0.7);
  CHECK(expected_layer(uniform) == doctest::Approx(6.0));
  std::vector<double> one_hot(13, 0.0);
  one_hot[6] = 0.9;
  CHECK(expected_layer(one_hot) == 6.0);
  CHECK(expected_layer(std::vector<double>{0.2, 0.4}) == doctest::Approx(2.0 / 3.0));
  CHECK_THROWS_AS(expected_layer(std::vector<double>(13, 0.0)), Error);
  CHECK_THROWS_AS(expected_layer(std::vector<double>{0.5, -0.1}), Error);
}

TEST_CASE("expected layer is scale invariant and stays in range") {
  Rng rng(41);
  for (int trial = 0; trial < 500; ++trial) {
    std::vector<double> acc(13);
    for (auto& a : acc) a = rng.uniform();
    const double e = expected_layer(acc);
    CHECK(e >= 0.0);
    CHECK(e <= 12.0);
    // Powers of two keep the scaled sums exact.
    std::vector<double> scaled = acc;
    for (auto& a : scaled) a *= 4.0;
    CHECK(expected_layer(scaled) == e);
  }
}

TEST_CASE("last/first ratio per layer") {
  const std::vector<double> last = {0.9, 0.8, 0.5};
  const std::vector<double> first = {0.3, 0.0, 0.5};
  const auto points = last_first_ratio(last, first);
  REQUIRE(points.size() == 3);
  CHECK(*points[0].ratio == doctest::Approx(3.0));
  CHECK_FALSE(points[1].ratio.has_value());
  CHECK(*points[2].ratio == 1.0);
  CHECK(points[2].layer == 2);
  CHECK_THROWS_AS(last_first_ratio(last, std::vector<double>{1.0}), Error);
}

TEST_CASE("paired t-test known value") {
  const std::vector<double> a = {2, 4, 6};
  const std::vector<double> b = {1, 2, 3};
  const auto r = paired_t_test(a, b);
  CHECK(r.t == doctest::Approx(3.4641016151377544).epsilon(1e-12));
  CHECK(r.p == doctest::Approx(0.07417990022744862).epsilon(1e-9));
  CHECK(r.df == 2);
  CHECK_FALSE(r.significant);
}

TEST_CASE("paired t-test edge cases") {
  const std::vector<double> a = {1, 2, 3};
  const auto same = paired_t_test(a, a);
  CHECK(same.t == 0.0);
  CHECK(same.p == 1.0);
  const std::vector<double> shifted = {2, 3, 4};
  const auto constant = paired_t_test(shifted, a);
  CHECK(std::isinf(constant.t));
  CHECK(constant.t > 0);
  CHECK(constant.p == 0.0);
  CHECK(constant.significant);
  CHECK_THROWS_AS(paired_t_test(a, std::vector<double>{1, 2}), Error);
  CHECK_THROWS_AS(paired_t_test(std::vector<double>{1}, std::vector<double>{2}), Error);
}

TEST_CASE("paired t-test matches an independent Student-t implementation") {
  Rng rng(2024);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(30);
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = 50.0 + 10.0 * rng.normal();
      b[i] = a[i] + 0.5 * rng.normal() + (trial % 3 == 0 ? 1.0 : 0.0);
    }
    const auto r = paired_t_test(a, b);
    std::vector<double> d(n);
    for (std::size_t i = 0; i < n; ++i) d[i] = a[i] - b[i];
    const double mean = std::accumulate(d.begin(), d.end(), 0.0) / n;
    double ss = 0.0;
    for (double x : d) ss += (x - mean) * (x - mean);
    const double t = mean / std::sqrt(ss / (n - 1) / n);
    CHECK(std::abs(r.t - t) < 1e-8);
    CHECK(std::abs(r.p - boost_two_sided(t, n - 1.0)) < 1e-6);
    CHECK(r.p > 0.0);
    CHECK(r.p <= 1.0);
  }
}

TEST_CASE("paired t-test antisymmetry and shift invariance") {
  Rng rng(9);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.below(20);
    // Values on a 1/64 grid keep shifted differences exact.
    std::vector<double> a(n), b(n);
    for (std::size_t i = 0; i < n; ++i) {
      a[i] = static_cast<double>(rng.below(6400)) / 64.0;
      b[i] = static_cast<double>(rng.below(6400)) / 64.0;
    }
    const auto ab = paired_t_test(a, b);
    const auto ba = paired_t_test(b, a);
    CHECK(ab.t == -ba.t);
    CHECK(ab.p == ba.p);
    const double c = static_cast<double>(rng.below(64)) / 4.0;
    auto a2 = a, b2 = b;
    for (auto& x : a2) x += c;
    for (auto& x : b2) x += c;
    const auto shifted = paired_t_test(a2, b2);
    CHECK(shifted.t == ab.t);
    CHECK(shifted.p == ab.p);
  }
}

TEST_CASE("incomplete beta reference values") {
  CHECK(incomplete_beta(1.0, 1.0, 0.3) == doctest::Approx(0.3));
  CHECK(incomplete_beta(2.0, 3.0, 0.0) == 0.0);
  CHECK(incomplete_beta(2.0, 3.0, 1.0) == 1.0);
  // I_x(2,3) = 6x^2 - 8x^3 + 3x^4
  const double x = 0.4;
  CHECK(incomplete_beta(2.0, 3.0, x) == doctest::Approx(6 * x * x - 8 * x * x * x + 3 * x * x * x * x).epsilon(1e-12));
  CHECK(student_t_two_sided(0.0, 5.0) == doctest::Approx(1.0));
  CHECK_THROWS_AS(incomplete_beta(0.0, 1.0, 0.5), Error);
  CHECK_THROWS_AS(student_t_two_sided(1.0, 0.0), Error);
}

TEST_CASE("result table parsing") {
  const auto table = ResultTable::parse_csv("task,model,first,last\nA,m,50,60\nB,m,70,80.5\n");
  CHECK(table.at("B", "m", PoolingMethod::Last) == 80.5);
  CHECK(table.tasks("m") == std::vector<std::string>{"A", "B"});
  CHECK(table.methods("m") == std::vector<PoolingMethod>{PoolingMethod::First, PoolingMethod::Last});
  CHECK_FALSE(table.find("A", "m", PoolingMethod::Attn).has_value());
  CHECK_THROWS_AS(table.at("A", "m", PoolingMethod::Attn), Error);
  CHECK_THROWS_AS(ResultTable::parse_csv("task,model,first\nA,m,101\n"), ParseError);
  CHECK_THROWS_AS(ResultTable::parse_csv("task,model,first\nA,m,x\n"), ParseError);
  CHECK_THROWS_AS(ResultTable::parse_csv("task,model,first\nA,m,1,2\n"), ParseError);
  CHECK_THROWS_AS(ResultTable::parse_csv("name,model,first\n"), ParseError);
  CHECK_THROWS_AS(ResultTable::load("/nonexistent/table.csv"), Error);
}

TEST_CASE("result table from training records averages seeds") {
  std::vector<ResultRecord> records = {
      {"A", "synth", "6", "last", 0, 0.9, 0.9, 10, 0.1},
      {"A", "synth", "6", "last", 1, 0.9, 0.8, 10, 0.1},
      {"A", "synth", "5", "last", 0, 0.9, 0.1, 10, 0.1},
      {"A", "synth", "6", "first", 0, 0.4, 0.3, 10, 0.1},
  };
  const auto table = ResultTable::from_results(records, "6");
  CHECK(table.at("A", "synth", PoolingMethod::Last) == doctest::Approx(85.0));
  CHECK(table.at("A", "synth", PoolingMethod::First) == doctest::Approx(30.0));
}

TEST_CASE("pairwise matrix properties") {
  const auto table = tiny_table({{50, 60}, {40, 60}, {80, 80}});
  const auto matrix = pairwise_matrix(table, "m");
  CHECK(matrix.at(PoolingMethod::First, PoolingMethod::First).ratio == 1.0);
  CHECK(matrix.at(PoolingMethod::First, PoolingMethod::First).p == 1.0);
  CHECK(matrix.at(PoolingMethod::Last, PoolingMethod::First).ratio == doctest::Approx((1.2 + 1.5 + 1.0) / 3.0));
  CHECK(matrix.at(PoolingMethod::Last, PoolingMethod::First).ratio > 1.0);
  CHECK(matrix.at(PoolingMethod::First, PoolingMethod::Last).ratio < 1.0);
  const auto csv = matrix.to_csv();
  CHECK(csv.find("first") != std::string::npos);
  CHECK(csv.find("1.0000") != std::string::npos);
  CHECK_THROWS_AS(pairwise_matrix(tiny_table({{50, 60}}), "m"), Error);
  CHECK_THROWS_AS(pairwise_matrix(tiny_table({{0, 60}, {10, 20}}), "m"), Error);
}

TEST_CASE("a dominating method is significant in the pairwise matrix") {
  std::vector<std::array<double, 2>> rows;
  for (int i = 0; i < 8; ++i) rows.push_back({40.0 + i, 60.0 + i + (i % 2) * 0.5});
  const auto matrix = pairwise_matrix(tiny_table(rows), "m");
  CHECK(matrix.at(PoolingMethod::Last, PoolingMethod::First).significant);
  CHECK(matrix.to_csv().find('*') != std::string::npos);
}

TEST_CASE("macro average properties") {
  const auto one = tiny_table({{70, 70}});
  const std::vector<PoolingMethod> only_first = {PoolingMethod::First};
  CHECK(macro_average(one, "m", MacroGrouping::AllCells, only_first) == 70.0);
  CHECK(macro_average(tiny_table({{60, 60}, {60, 60}}), "m", MacroGrouping::AllCells) == 60.0);
  const auto table = tiny_table({{50, 60}, {40, 90}});
  CHECK(macro_average(table, "m", MacroGrouping::AllCells) == doctest::Approx(60.0));
  CHECK(macro_average(table, "m", MacroGrouping::BestPerTask) == doctest::Approx(75.0));
  const auto permuted = tiny_table({{40, 90}, {50, 60}});
  CHECK(macro_average(permuted, "m", MacroGrouping::AllCells) == macro_average(table, "m", MacroGrouping::AllCells));
  CHECK_THROWS_AS(macro_average(table, "absent", MacroGrouping::AllCells), Error);
}

TEST_CASE("fixture tables reproduce the published observations") {
  const Fixtures f;
  CHECK(f.morph.rows().size() == 28);
  CHECK(f.pos.rows().size() == 18);
  CHECK(f.ner.rows().size() == 18);
  const auto report = verify_fixture_claims(f.morph, f.pos, f.ner);
  INFO(report.to_text());
  CHECK(report.claims.size() == 6);
  CHECK(report.passed());

  const double mbert = macro_average(f.morph, kMultilingualBert, MacroGrouping::AllCells);
  const double xlmr = macro_average(f.morph, kXlmRoberta, MacroGrouping::AllCells);
  CHECK(mbert == doctest::Approx(84.14).epsilon(1e-4));
  CHECK(xlmr == doctest::Approx(85.85).epsilon(1e-4));
  CHECK(f.pos.at("Korean", kMultilingualBert, PoolingMethod::First) == 84.8);
  CHECK(f.pos.at("Korean", kXlmRoberta, PoolingMethod::First) == 87.6);

  const auto matrix = pairwise_matrix(f.morph, kMultilingualBert);
  for (auto m : matrix.methods) CHECK(matrix.at(PoolingMethod::Attn, m).ratio >= 1.0);
}

TEST_CASE("negative controls: one changed cell breaks the matching claim") {
  SUBCASE("NER") {
    Fixtures f;
    f.ner.set("Arabic", std::string(kXlmRoberta), PoolingMethod::Sum, 99.0);
    const auto report = verify_fixture_claims(f.morph, f.pos, f.ner);
    CHECK_FALSE(claim(report, "ner-mbert-ahead").passed);
    CHECK_FALSE(report.passed());
  }
  SUBCASE("Korean FIRST") {
    Fixtures f;
    f.pos.set("Korean", std::string(kMultilingualBert), PoolingMethod::First, 99.0);
    CHECK_FALSE(claim(verify_fixture_claims(f.morph, f.pos, f.ner), "pos-korean-first-min").passed);
  }
  SUBCASE("Finnish ratio") {
    Fixtures f;
    f.morph.set("Finnish_Case_NOUN", std::string(kMultilingualBert), PoolingMethod::First, 34.0);
    CHECK_FALSE(claim(verify_fixture_claims(f.morph, f.pos, f.ner), "morph-finnish-ratio").passed);
  }
  SUBCASE("LAST over FIRST exceptions") {
    Fixtures f;
    f.morph.set("Finnish_Case_NOUN", std::string(kXlmRoberta), PoolingMethod::First, 99.0);
    CHECK_FALSE(claim(verify_fixture_claims(f.morph, f.pos, f.ner), "morph-last-over-first").passed);
  }
  SUBCASE("ATTN dominance") {
    Fixtures f;
    for (const auto& task : f.morph.tasks(std::string(kMultilingualBert))) {
      f.morph.set(task, std::string(kMultilingualBert), PoolingMethod::Attn, 1.0);
    }
    CHECK_FALSE(claim(verify_fixture_claims(f.morph, f.pos, f.ner), "morph-attn-dominates").passed);
  }
  SUBCASE("macro average") {
    Fixtures f;
    f.morph.set("Finnish_Case_NOUN", std::string(kXlmRoberta), PoolingMethod::First, 0.0);
    for (const auto& task : f.morph.tasks(std::string(kXlmRoberta))) {
      f.morph.set(task, std::string(kXlmRoberta), PoolingMethod::Lstm, 0.0);
    }
    CHECK_FALSE(claim(verify_fixture_claims(f.morph, f.pos, f.ner), "morph-xlmr-macro").passed);
  }
  SUBCASE("missing table rows") {
    Fixtures f;
    const auto report = verify_fixture_claims(f.morph, ResultTable::parse_csv("task,model,first\nX,m,1\n"), f.ner);
    CHECK_FALSE(claim(report, "pos-korean-first-min").passed);
  }
}
