#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "subpool/errors.hpp"
#include "subpool/matrix.hpp"
#include "subpool/rng.hpp"
#include "subpool/tinynet.hpp"

namespace subpool {

enum class PoolingMethod { First, Last, Last2, FirstPlusLast, Sum, Max, Avg, Attn, Lstm };

inline constexpr std::array<PoolingMethod, 9> kAllPoolings = {
    PoolingMethod::First, PoolingMethod::Last, PoolingMethod::Last2,
    PoolingMethod::FirstPlusLast, PoolingMethod::Sum, PoolingMethod::Max,
    PoolingMethod::Avg, PoolingMethod::Attn, PoolingMethod::Lstm};

/// "first", "last", "last2", "f+l", "sum", "max", "avg", "attn", "lstm".
std::string_view pooling_name(PoolingMethod method);
/// Case-insensitive; also accepts "fplusl".
PoolingMethod parse_pooling(std::string_view name);
bool is_trainable(PoolingMethod method);

struct PoolingSpec {
  PoolingMethod method = PoolingMethod::First;
  std::size_t input_dim = 768;
  std::size_t attn_hidden = 50;
  std::size_t lstm_hidden = 50;  // per direction

  std::size_t output_dim() const;
};

struct ParamCount {
  std::size_t pooler = 0;
  std::size_t classifier = 0;
  std::size_t combined() const noexcept { return pooler + classifier; }
};

/// Trainable scalars of the pooler and of the pooled_dim -> mlp_hidden ->
/// num_classes classifier on top of it.
ParamCount param_count(const PoolingSpec& spec, std::size_t num_classes, std::size_t mlp_hidden = 50);

/// A pooling operator together with whatever parameters its method owns.
template <typename T>
struct Pooler {
  using Scalar = T;

  PoolingSpec spec;
  std::vector<T> theta;  // f+l mixing logit, w = sigmoid(theta)
  nn::Dense<T> scorer_hidden;
  nn::Dense<T> scorer_out;
  nn::BiLstm<T> lstm;

  Pooler() = default;
  explicit Pooler(const PoolingSpec& s) : spec(s) {
    switch (spec.method) {
      case PoolingMethod::FirstPlusLast:
        theta.assign(1, T(0));
        break;
      case PoolingMethod::Attn:
        scorer_hidden = nn::Dense<T>(spec.input_dim, spec.attn_hidden);
        scorer_out = nn::Dense<T>(spec.attn_hidden, 1);
        break;
      case PoolingMethod::Lstm:
        lstm = nn::BiLstm<T>(spec.input_dim, spec.lstm_hidden);
        break;
      default:
        break;
    }
  }

  std::size_t output_dim() const { return spec.output_dim(); }

  std::size_t param_count() const noexcept {
    return theta.size() + scorer_hidden.param_count() + scorer_out.param_count() + lstm.param_count();
  }

  // theta stays at 0 (w = 0.5).
  void init(Rng& rng) {
    if (spec.method == PoolingMethod::Attn) {
      scorer_hidden.init(rng);
      scorer_out.init(rng);
    } else if (spec.method == PoolingMethod::Lstm) {
      lstm.init(rng);
    }
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    switch (spec.method) {
      case PoolingMethod::FirstPlusLast:
        fn(nn::ParamView<T>{prefix + ".theta", {1}, std::span<T>(theta)});
        break;
      case PoolingMethod::Attn:
        scorer_hidden.visit(prefix + ".attn.hidden", fn);
        scorer_out.visit(prefix + ".attn.output", fn);
        break;
      case PoolingMethod::Lstm:
        lstm.visit(prefix + ".lstm", fn);
        break;
      default:
        break;
    }
  }
};

template <typename T>
struct PoolCache {
  std::vector<T> weights;                    // ATTN softmax
  std::vector<std::vector<T>> scorer_pre;    // ATTN hidden pre-activations per row
  std::vector<std::size_t> argmax;           // MAX winning row per column
  typename nn::BiLstm<T>::Cache lstm;
};

namespace detail {

template <typename T>
T attn_score(const Pooler<T>& pooler, std::span<const T> row, std::vector<T>& pre) {
  pre.assign(pooler.scorer_hidden.out_dim(), T(0));
  pooler.scorer_hidden.forward(row, pre);
  std::vector<T> act(pre.size());
  for (std::size_t i = 0; i < pre.size(); ++i) act[i] = std::max(pre[i], T(0));
  T score = T(0);
  pooler.scorer_out.forward(act, std::span<T>(&score, 1));
  return score;
}

template <typename T>
void check_input(const Pooler<T>& pooler, const Matrix<T>& v) {
  if (v.rows() == 0) throw ShapeError("pooling needs at least one subword");
  if (v.cols() != pooler.spec.input_dim) {
    throw ShapeError("pooling input has width " + std::to_string(v.cols()) + ", expected " +
                     std::to_string(pooler.spec.input_dim));
  }
}

}  // namespace detail

/// Softmax weights ATTN assigns to the rows of `v`.
template <typename T>
std::vector<T> attention_weights(const Pooler<T>& pooler, const Matrix<T>& v) {
  if (pooler.spec.method != PoolingMethod::Attn) throw Error("attention weights need ATTN pooling");
  detail::check_input(pooler, v);
  std::vector<T> scores(v.rows());
  std::vector<T> pre;
  for (std::size_t r = 0; r < v.rows(); ++r) scores[r] = detail::attn_score(pooler, v.row(r), pre);
  return nn::softmax<T>(scores);
}

template <typename T>
std::vector<T> pool_forward(const Pooler<T>& pooler, const Matrix<T>& v, PoolCache<T>& cache) {
  detail::check_input(pooler, v);
  const std::size_t n = v.rows();
  const std::size_t h = v.cols();
  const auto first = v.row(0);
  const auto last = v.row(n - 1);
  std::vector<T> out;
  switch (pooler.spec.method) {
    case PoolingMethod::First:
      out.assign(first.begin(), first.end());
      break;
    case PoolingMethod::Last:
      out.assign(last.begin(), last.end());
      break;
    case PoolingMethod::Last2: {
      const auto before = v.row(n >= 2 ? n - 2 : n - 1);
      out.assign(before.begin(), before.end());
      out.insert(out.end(), last.begin(), last.end());
      break;
    }
    case PoolingMethod::FirstPlusLast: {
      const T w = nn::sigmoid(pooler.theta.at(0));
      out.resize(h);
      for (std::size_t d = 0; d < h; ++d) out[d] = w * first[d] + (T(1) - w) * last[d];
      break;
    }
    case PoolingMethod::Sum:
    case PoolingMethod::Avg:
      out.assign(h, T(0));
      for (std::size_t r = 0; r < n; ++r) {
        const auto row = v.row(r);
        for (std::size_t d = 0; d < h; ++d) out[d] += row[d];
      }
      if (pooler.spec.method == PoolingMethod::Avg) {
        for (auto& x : out) x /= static_cast<T>(n);
      }
      break;
    case PoolingMethod::Max:
      out.assign(first.begin(), first.end());
      cache.argmax.assign(h, 0);
      for (std::size_t r = 1; r < n; ++r) {
        const auto row = v.row(r);
        for (std::size_t d = 0; d < h; ++d) {
          if (row[d] > out[d]) {  // strict: ties stay with the lowest row
            out[d] = row[d];
            cache.argmax[d] = r;
          }
        }
      }
      break;
    case PoolingMethod::Attn: {
      std::vector<T> scores(n);
      cache.scorer_pre.resize(n);
      for (std::size_t r = 0; r < n; ++r) {
        scores[r] = detail::attn_score(pooler, v.row(r), cache.scorer_pre[r]);
      }
      cache.weights = nn::softmax<T>(scores);
      out.assign(h, T(0));
      for (std::size_t r = 0; r < n; ++r) {
        const auto row = v.row(r);
        for (std::size_t d = 0; d < h; ++d) out[d] += cache.weights[r] * row[d];
      }
      break;
    }
    case PoolingMethod::Lstm:
      out = pooler.lstm.forward(v, cache.lstm);
      break;
  }
  return out;
}

template <typename T>
std::vector<T> pool_forward(const Pooler<T>& pooler, const Matrix<T>& v) {
  PoolCache<T> cache;
  return pool_forward(pooler, v, cache);
}

/// Accumulates parameter gradients into `grad` and, when `dv` is given,
/// input gradients into `*dv` (which must be v-shaped).
template <typename T>
void pool_backward(const Pooler<T>& pooler, const Matrix<T>& v, const PoolCache<T>& cache,
                   std::span<const T> upstream, Pooler<T>& grad, Matrix<T>* dv) {
  detail::check_input(pooler, v);
  const std::size_t n = v.rows();
  const std::size_t h = v.cols();
  if (upstream.size() != pooler.output_dim()) {
    throw ShapeError("pool_backward: upstream gradient has width " + std::to_string(upstream.size()) +
                     ", expected " + std::to_string(pooler.output_dim()));
  }
  if (dv != nullptr && (dv->rows() != n || dv->cols() != h)) {
    throw ShapeError("pool_backward: input gradient buffer has the wrong shape");
  }
  auto add_row = [&](std::size_t r, std::span<const T> g, T scale) {
    if (dv == nullptr) return;
    auto row = dv->row(r);
    for (std::size_t d = 0; d < h; ++d) row[d] += scale * g[d];
  };
  switch (pooler.spec.method) {
    case PoolingMethod::First:
      add_row(0, upstream, T(1));
      break;
    case PoolingMethod::Last:
      add_row(n - 1, upstream, T(1));
      break;
    case PoolingMethod::Last2:
      add_row(n >= 2 ? n - 2 : n - 1, upstream.first(h), T(1));
      add_row(n - 1, upstream.subspan(h), T(1));
      break;
    case PoolingMethod::FirstPlusLast: {
      const T w = nn::sigmoid(pooler.theta.at(0));
      const auto first = v.row(0);
      const auto last = v.row(n - 1);
      T dw = T(0);
      for (std::size_t d = 0; d < h; ++d) dw += upstream[d] * (first[d] - last[d]);
      grad.theta.at(0) += dw * w * (T(1) - w);
      add_row(0, upstream, w);
      add_row(n - 1, upstream, T(1) - w);
      break;
    }
    case PoolingMethod::Sum:
      for (std::size_t r = 0; r < n; ++r) add_row(r, upstream, T(1));
      break;
    case PoolingMethod::Avg:
      for (std::size_t r = 0; r < n; ++r) add_row(r, upstream, T(1) / static_cast<T>(n));
      break;
    case PoolingMethod::Max:
      if (dv != nullptr) {
        for (std::size_t d = 0; d < h; ++d) (*dv)(cache.argmax.at(d), d) += upstream[d];
      }
      break;
    case PoolingMethod::Attn: {
      const auto& a = cache.weights;
      // d out / d a_r = <upstream, v_r>; softmax Jacobian folds it into scores.
      std::vector<T> da(n);
      T mean = T(0);
      for (std::size_t r = 0; r < n; ++r) {
        const auto row = v.row(r);
        T dot = T(0);
        for (std::size_t d = 0; d < h; ++d) dot += upstream[d] * row[d];
        da[r] = dot;
        mean += a[r] * dot;
      }
      std::vector<T> act;
      std::vector<T> dact(pooler.scorer_hidden.out_dim());
      std::vector<T> dx(h);
      for (std::size_t r = 0; r < n; ++r) {
        add_row(r, upstream, a[r]);
        const T dscore = a[r] * (da[r] - mean);
        const auto& pre = cache.scorer_pre[r];
        act.resize(pre.size());
        for (std::size_t i = 0; i < pre.size(); ++i) act[i] = std::max(pre[i], T(0));
        std::fill(dact.begin(), dact.end(), T(0));
        pooler.scorer_out.backward(act, std::span<const T>(&dscore, 1), grad.scorer_out, dact);
        for (std::size_t i = 0; i < pre.size(); ++i) {
          if (pre[i] <= T(0)) dact[i] = T(0);
        }
        std::fill(dx.begin(), dx.end(), T(0));
        pooler.scorer_hidden.backward(v.row(r), dact, grad.scorer_hidden,
                                      dv != nullptr ? std::span<T>(dx) : std::span<T>());
        add_row(r, dx, T(1));
      }
      break;
    }
    case PoolingMethod::Lstm:
      pooler.lstm.backward(v, cache.lstm, upstream, grad.lstm, dv);
      break;
  }
}

/// Forward then backward in one call, for callers without a cache.
template <typename T>
void pool_backward(const Pooler<T>& pooler, const Matrix<T>& v, std::span<const T> upstream,
                   Pooler<T>& grad, Matrix<T>* dv) {
  PoolCache<T> cache;
  pool_forward(pooler, v, cache);
  pool_backward(pooler, v, cache, upstream, grad, dv);
}

}  // namespace subpool
