#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>

#include "subpool/pool.hpp"
#include "test_support.hpp"

using namespace subpool;

namespace {

Pooler<double> make(PoolingMethod method, std::size_t dim, std::uint64_t seed = 0, std::size_t attn = 5,
                    std::size_t lstm = 3) {
  Pooler<double> pooler(PoolingSpec{method, dim, attn, lstm});
  Rng rng(seed, 5);
  pooler.init(rng);
  return pooler;
}

Matrix<double> m2x2() { return Matrix<double>(2, 2, std::vector<double>{1, 2, 3, 4}); }

// Values on a dyadic grid add and permute without rounding.
Matrix<double> grid_matrix(Rng& rng, std::size_t rows, std::size_t cols) {
  Matrix<double> m(rows, cols);
  for (auto& x : m.flat()) x = std::ldexp(static_cast<double>(static_cast<int>(rng.below(257)) - 128), -4);
  return m;
}

Matrix<double> permute_rows(const Matrix<double>& m, const std::vector<std::size_t>& order) {
  Matrix<double> out(m.rows(), m.cols());
  for (std::size_t r = 0; r < m.rows(); ++r) {
    for (std::size_t c = 0; c < m.cols(); ++c) out(r, c) = m(order[r], c);
  }
  return out;
}

std::vector<double> projection(std::size_t n, std::uint64_t seed) {
  Rng rng(seed, 77);
  std::vector<double> w(n);
  for (auto& x : w) x = rng.normal();
  return w;
}

double dot(std::span<const double> a, std::span<const double> b) {
  return std::inner_product(a.begin(), a.end(), b.begin(), 0.0);
}

double sig(double x) { return 1.0 / (1.0 + std::exp(-x)); }

// Hand-unrolled LSTM cell for one input from the zero state.
std::vector<double> cell_from_zero(const nn::LstmDirection<double>& cell, std::span<const double> x) {
  const std::size_t h = cell.hidden();
  std::vector<double> out(h);
  for (std::size_t j = 0; j < h; ++j) {
    double z[4];
    for (std::size_t b = 0; b < 4; ++b) {
      z[b] = cell.bias[b * h + j];
      for (std::size_t c = 0; c < x.size(); ++c) z[b] += cell.wx(b * h + j, c) * x[c];
    }
    const double c = sig(z[0]) * std::tanh(z[2]);
    out[j] = sig(z[3]) * std::tanh(c);
  }
  return out;
}

}  // namespace

TEST_CASE("pooling names roundtrip") {
  for (auto method : kAllPoolings) CHECK(parse_pooling(pooling_name(method)) == method);
  CHECK(parse_pooling("FPLUSL") == PoolingMethod::FirstPlusLast);
  CHECK(parse_pooling("ATTN") == PoolingMethod::Attn);
  CHECK_THROWS(parse_pooling("mean"));
  CHECK(is_trainable(PoolingMethod::Attn));
  CHECK(is_trainable(PoolingMethod::Lstm));
  CHECK(is_trainable(PoolingMethod::FirstPlusLast));
  CHECK_FALSE(is_trainable(PoolingMethod::Max));
}

TEST_CASE("output dimensions") {
  CHECK(PoolingSpec{PoolingMethod::Last2, 768}.output_dim() == 1536);
  CHECK(PoolingSpec{PoolingMethod::Lstm, 768, 50, 50}.output_dim() == 100);
  CHECK(PoolingSpec{PoolingMethod::Attn, 768}.output_dim() == 768);
}

TEST_CASE("fixed poolers on a 2x2 input") {
  const auto v = m2x2();
  CHECK(pool_forward(make(PoolingMethod::First, 2), v) == std::vector<double>{1, 2});
  CHECK(pool_forward(make(PoolingMethod::Last, 2), v) == std::vector<double>{3, 4});
  CHECK(pool_forward(make(PoolingMethod::Avg, 2), v) == std::vector<double>{2, 3});
  CHECK(pool_forward(make(PoolingMethod::Sum, 2), v) == std::vector<double>{4, 6});
  CHECK(pool_forward(make(PoolingMethod::Max, 2), v) == std::vector<double>{3, 4});
  CHECK(pool_forward(make(PoolingMethod::Last2, 2), v) == std::vector<double>{1, 2, 3, 4});
  CHECK(pool_forward(make(PoolingMethod::FirstPlusLast, 2), v) == std::vector<double>{2, 3});
}

TEST_CASE("ATTN with a zero scorer equals AVG") {
  Pooler<double> attn(PoolingSpec{PoolingMethod::Attn, 2, 4});
  const auto v = m2x2();
  const auto out = pool_forward(attn, v);
  CHECK(out[0] == doctest::Approx(2.0));
  CHECK(out[1] == doctest::Approx(3.0));
}

TEST_CASE("F+L weight stays inside (0,1) and approaches FIRST") {
  auto pooler = make(PoolingMethod::FirstPlusLast, 2);
  pooler.theta[0] = 40.0;
  const auto out = pool_forward(pooler, m2x2());
  CHECK(out[0] == doctest::Approx(1.0));
  CHECK(out[1] == doctest::Approx(2.0));
  for (double theta : {-30.0, -1.0, 0.0, 2.5, 30.0}) {
    const double w = nn::sigmoid(theta);
    CHECK(w > 0.0);
    CHECK(w < 1.0);
  }
}

TEST_CASE("empty and mis-shaped inputs are rejected") {
  CHECK_THROWS_AS(pool_forward(make(PoolingMethod::Avg, 2), Matrix<double>(0, 2)), ShapeError);
  CHECK_THROWS_AS(pool_forward(make(PoolingMethod::Avg, 3), m2x2()), ShapeError);
  auto sum = make(PoolingMethod::Sum, 2);
  Pooler<double> grad = sum;
  std::vector<double> wrong(3, 1.0);
  CHECK_THROWS_AS(pool_backward<double>(sum, m2x2(), wrong, grad, nullptr), ShapeError);
}

TEST_CASE("single-subword words agree across methods") {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const auto v = testing::random_matrix<double>(rng, 1, 4);
    const std::vector<double> row(v.row(0).begin(), v.row(0).end());
    for (auto method : {PoolingMethod::First, PoolingMethod::Last, PoolingMethod::Avg, PoolingMethod::Sum,
                        PoolingMethod::Max, PoolingMethod::FirstPlusLast, PoolingMethod::Attn}) {
      const auto pooler = make(method, 4, trial);
      const auto out = pool_forward(pooler, v);
      REQUIRE(out.size() == 4);
      for (std::size_t i = 0; i < 4; ++i) CHECK(out[i] == doctest::Approx(row[i]).epsilon(1e-12));
    }
    auto doubled = row;
    doubled.insert(doubled.end(), row.begin(), row.end());
    CHECK(pool_forward(make(PoolingMethod::Last2, 4), v) == doubled);
  }
}

TEST_CASE("LSTM on one subword equals the hand-unrolled cells") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const auto pooler = make(PoolingMethod::Lstm, 4, seed, 5, 3);
    Rng rng(seed);
    const auto v = testing::random_matrix<double>(rng, 1, 4);
    const auto out = pool_forward(pooler, v);
    const auto fwd = cell_from_zero(pooler.lstm.forward_cell, v.row(0));
    const auto bwd = cell_from_zero(pooler.lstm.backward_cell, v.row(0));
    REQUIRE(out.size() == 6);
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(out[j] == doctest::Approx(fwd[j]).epsilon(1e-13));
      CHECK(out[3 + j] == doctest::Approx(bwd[j]).epsilon(1e-13));
    }
  }
}

TEST_CASE("LSTM reads the rows in both directions") {
  const auto pooler = make(PoolingMethod::Lstm, 3, 2);
  Rng rng(4);
  const auto v = testing::random_matrix<double>(rng, 3, 3);
  const auto reversed = permute_rows(v, {2, 1, 0});
  const auto a = pool_forward(pooler, v);
  const auto b = pool_forward(pooler, reversed);
  CHECK(a != b);
}

TEST_CASE("pooling algebra over 1000 random spans") {
  Rng rng(2024);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + rng.below(6);
    const std::size_t h = 1 + rng.below(5);
    const auto v = grid_matrix(rng, n, h);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    rng.shuffle(std::span<std::size_t>(order));
    const auto permuted = permute_rows(v, order);

    for (auto method : {PoolingMethod::Sum, PoolingMethod::Avg, PoolingMethod::Max}) {
      const auto pooler = make(method, h);
      CHECK(pool_forward(pooler, v) == pool_forward(pooler, permuted));
    }

    const auto sum = pool_forward(make(PoolingMethod::Sum, h), v);
    const auto avg = pool_forward(make(PoolingMethod::Avg, h), v);
    for (std::size_t i = 0; i < h; ++i) CHECK(avg[i] == sum[i] / static_cast<double>(n));

    const auto attn = make(PoolingMethod::Attn, h, trial);
    const auto weights = attention_weights(attn, v);
    CHECK(std::accumulate(weights.begin(), weights.end(), 0.0) == doctest::Approx(1.0).epsilon(1e-6));
    for (double w : weights) CHECK(w >= 0.0);
    const auto out = pool_forward(attn, v);
    for (std::size_t c = 0; c < h; ++c) {
      double lo = v(0, c), hi = v(0, c);
      for (std::size_t r = 1; r < n; ++r) {
        lo = std::min(lo, v(r, c));
        hi = std::max(hi, v(r, c));
      }
      CHECK(out[c] >= lo - 1e-12);
      CHECK(out[c] <= hi + 1e-12);
    }

    const auto last2 = pool_forward(make(PoolingMethod::Last2, h), v);
    const std::size_t penultimate = n >= 2 ? n - 2 : n - 1;
    for (std::size_t c = 0; c < h; ++c) {
      CHECK(last2[c] == v(penultimate, c));
      CHECK(last2[h + c] == v(n - 1, c));
    }

    if (n == 1) {
      for (auto method : {PoolingMethod::First, PoolingMethod::Last, PoolingMethod::Avg, PoolingMethod::Sum,
                          PoolingMethod::Max, PoolingMethod::FirstPlusLast}) {
        CHECK(pool_forward(make(method, h), v) == std::vector<double>(v.row(0).begin(), v.row(0).end()));
      }
    }
  }
}

TEST_CASE("FIRST and LAST are not permutation invariant") {
  const auto v = m2x2();
  const auto swapped = permute_rows(v, {1, 0});
  CHECK(pool_forward(make(PoolingMethod::First, 2), v) != pool_forward(make(PoolingMethod::First, 2), swapped));
  CHECK(pool_forward(make(PoolingMethod::Last, 2), v) != pool_forward(make(PoolingMethod::Last, 2), swapped));
}

TEST_CASE("SUM sends the upstream gradient to every row") {
  const auto pooler = make(PoolingMethod::Sum, 3);
  Rng rng(3);
  const auto v = testing::random_matrix<double>(rng, 4, 3);
  const std::vector<double> up = {0.5, -1.0, 2.0};
  Pooler<double> grad = pooler;
  Matrix<double> dv(4, 3);
  pool_backward<double>(pooler, v, up, grad, &dv);
  for (std::size_t r = 0; r < 4; ++r) {
    for (std::size_t c = 0; c < 3; ++c) CHECK(dv(r, c) == up[c]);
  }
}

TEST_CASE("MAX routes gradient to the lowest winning row") {
  const auto pooler = make(PoolingMethod::Max, 2);
  const Matrix<double> v(3, 2, std::vector<double>{5, 1, 5, 7, 2, 7});
  CHECK(pool_forward(pooler, v) == std::vector<double>{5, 7});
  Pooler<double> grad = pooler;
  Matrix<double> dv(3, 2);
  const std::vector<double> up = {1.0, 2.0};
  pool_backward<double>(pooler, v, up, grad, &dv);
  CHECK(dv(0, 0) == 1.0);
  CHECK(dv(1, 0) == 0.0);
  CHECK(dv(1, 1) == 2.0);
  CHECK(dv(2, 1) == 0.0);
  CHECK(dv(0, 1) == 0.0);
}

TEST_CASE("trainable poolers pass parameter gradient checks") {
  for (auto method : {PoolingMethod::Attn, PoolingMethod::Lstm, PoolingMethod::FirstPlusLast}) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      auto pooler = make(method, 4, seed, 5, 3);
      if (method == PoolingMethod::FirstPlusLast) pooler.theta[0] = 0.3 * static_cast<double>(seed) - 1.0;
      if (method == PoolingMethod::Attn) {
        Rng brng(seed, 9);
        for (auto& b : pooler.scorer_hidden.bias) b = 0.1 * brng.normal();
      }
      Rng rng(seed);
      const auto v = testing::random_matrix<double>(rng, 2 + seed % 4, 4);
      const auto w = projection(pooler.output_dim(), seed);
      auto loss = [&](Pooler<double>& p) { return dot(pool_forward(p, v), w); };
      auto backward = [&](Pooler<double>& p, Pooler<double>& g) { pool_backward<double>(p, v, w, g, nullptr); };
      const auto report = testing::check_model_gradients(pooler, loss, backward);
      CHECK_MESSAGE(report.passed, pooling_name(method) << " seed " << seed << " rel err " << report.max_rel_error);
    }
  }
}

TEST_CASE("every pooler passes the input gradient check") {
  for (auto method : kAllPoolings) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      const auto pooler = make(method, 3, seed, 4, 3);
      Rng rng(seed + 100);
      auto v = testing::random_matrix<double>(rng, 1 + seed % 4, 3);
      const auto w = projection(pooler.output_dim(), seed);
      Pooler<double> grad = pooler;
      Matrix<double> dv(v.rows(), v.cols());
      pool_backward<double>(pooler, v, w, grad, &dv);
      auto f = [&](std::span<const double> flat) {
        const Matrix<double> m(v.rows(), v.cols(), std::vector<double>(flat.begin(), flat.end()));
        return dot(pool_forward(pooler, m), w);
      };
      const auto report = nn::grad_check(f, v.flat(), dv.flat());
      CHECK_MESSAGE(report.passed, pooling_name(method) << " seed " << seed << " rel err " << report.max_rel_error);
    }
  }
}

TEST_CASE("parameter counts") {
  CHECK(param_count(PoolingSpec{PoolingMethod::First, 768}, 3).combined() == 38603);
  CHECK(param_count(PoolingSpec{PoolingMethod::Lstm, 768, 50, 50}, 3).combined() == 332803);
  CHECK(param_count(PoolingSpec{PoolingMethod::Last2, 768}, 3).classifier == 2 * 768 * 50 + 50 + 153);
  CHECK(param_count(PoolingSpec{PoolingMethod::FirstPlusLast, 768}, 3).pooler == 1);
  // A 768 -> 50 -> 1 scorer with biases on both layers.
  CHECK(param_count(PoolingSpec{PoolingMethod::Attn, 768, 50}, 3).pooler == 38501);
  for (auto method : kAllPoolings) {
    const PoolingSpec spec{method, 7, 4, 3};
    const Pooler<double> pooler(spec);
    CHECK(pooler.param_count() == param_count(spec, 3).pooler);
  }
}
