#pragma once

// Fixed-architecture neural kernels with hand-written backward passes.
// Everything is templated on the scalar so training runs in f32 while the
// gradient checks run the identical code in f64.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "subpool/errors.hpp"
#include "subpool/matrix.hpp"
#include "subpool/rng.hpp"

namespace subpool::nn {

/// A named parameter tensor as seen by optimizers and checkpoints.
template <typename T>
struct ParamView {
  std::string name;
  std::vector<std::size_t> shape;
  std::span<T> values;
};

template <typename T>
T sigmoid(T x) {
  if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
  const T e = std::exp(x);
  return e / (T(1) + e);
}

template <typename T>
void fill_uniform(std::span<T> values, Rng& rng, double bound) {
  for (auto& v : values) v = static_cast<T>(rng.uniform(-bound, bound));
}

// ------------------------------------------------------------------ Dense

template <typename T>
struct Dense {
  using Scalar = T;
  Matrix<T> weight;  // [out x in]
  std::vector<T> bias;

  Dense() = default;
  Dense(std::size_t in, std::size_t out) : weight(out, in), bias(out, T(0)) {}

  std::size_t in_dim() const noexcept { return weight.cols(); }
  std::size_t out_dim() const noexcept { return weight.rows(); }
  std::size_t param_count() const noexcept { return weight.size() + bias.size(); }

  void init(Rng& rng) {
    const double bound = std::sqrt(6.0 / static_cast<double>(in_dim() + out_dim()));
    fill_uniform(weight.flat(), rng, bound);
    std::fill(bias.begin(), bias.end(), T(0));
  }

  void forward(std::span<const T> x, std::span<T> y) const {
    if (x.size() != in_dim() || y.size() != out_dim()) throw ShapeError("Dense: shape mismatch");
    for (std::size_t o = 0; o < out_dim(); ++o) {
      T acc = bias[o];
      const auto w = weight.row(o);
      for (std::size_t i = 0; i < x.size(); ++i) acc += w[i] * x[i];
      y[o] = acc;
    }
  }

  /// Accumulates dW, db into `grad`; adds W^T dy into `dx` when non-empty.
  void backward(std::span<const T> x, std::span<const T> dy, Dense& grad, std::span<T> dx) const {
    if (dy.size() != out_dim() || x.size() != in_dim()) throw ShapeError("Dense: shape mismatch");
    for (std::size_t o = 0; o < out_dim(); ++o) {
      const T g = dy[o];
      if (g == T(0)) continue;
      grad.bias[o] += g;
      auto gw = grad.weight.row(o);
      for (std::size_t i = 0; i < x.size(); ++i) gw[i] += g * x[i];
      if (!dx.empty()) {
        const auto w = weight.row(o);
        for (std::size_t i = 0; i < dx.size(); ++i) dx[i] += g * w[i];
      }
    }
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(ParamView<T>{prefix + ".weight", {weight.rows(), weight.cols()}, weight.flat()});
    fn(ParamView<T>{prefix + ".bias", {bias.size()}, std::span<T>(bias)});
  }
};

// -------------------------------------------------------------------- MLP

/// affine -> ReLU -> affine
template <typename T>
struct Mlp {
  using Scalar = T;
  Dense<T> hidden;
  Dense<T> output;

  struct Cache {
    std::vector<T> pre;  // hidden pre-activations
    std::vector<T> act;
  };

  Mlp() = default;
  Mlp(std::size_t in, std::size_t hidden_dim, std::size_t out) : hidden(in, hidden_dim), output(hidden_dim, out) {}

  std::size_t in_dim() const noexcept { return hidden.in_dim(); }
  std::size_t out_dim() const noexcept { return output.out_dim(); }
  std::size_t param_count() const noexcept { return hidden.param_count() + output.param_count(); }

  void init(Rng& rng) {
    hidden.init(rng);
    output.init(rng);
  }

  std::vector<T> forward(std::span<const T> x, Cache& cache) const {
    cache.pre.assign(hidden.out_dim(), T(0));
    hidden.forward(x, cache.pre);
    cache.act.resize(cache.pre.size());
    for (std::size_t i = 0; i < cache.pre.size(); ++i) cache.act[i] = std::max(cache.pre[i], T(0));
    std::vector<T> logits(output.out_dim());
    output.forward(cache.act, logits);
    return logits;
  }

  std::vector<T> forward(std::span<const T> x) const {
    Cache cache;
    return forward(x, cache);
  }

  void backward(std::span<const T> x, const Cache& cache, std::span<const T> dlogits, Mlp& grad,
                std::span<T> dx) const {
    std::vector<T> dact(cache.act.size(), T(0));
    output.backward(cache.act, dlogits, grad.output, dact);
    for (std::size_t i = 0; i < dact.size(); ++i) {
      if (cache.pre[i] <= T(0)) dact[i] = T(0);
    }
    hidden.backward(x, dact, grad.hidden, dx);
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    hidden.visit(prefix + ".hidden", fn);
    output.visit(prefix + ".output", fn);
  }
};

// ---------------------------------------------------- softmax cross-entropy

template <typename T>
struct LossGrad {
  T loss;
  std::vector<T> grad;
};

template <typename T>
std::vector<T> softmax(std::span<const T> logits) {
  std::vector<T> probs(logits.size());
  if (logits.empty()) return probs;
  const T peak = *std::max_element(logits.begin(), logits.end());
  T total = T(0);
  for (std::size_t i = 0; i < logits.size(); ++i) {
    probs[i] = std::exp(logits[i] - peak);
    total += probs[i];
  }
  for (auto& p : probs) p /= total;
  return probs;
}

/// Loss -log softmax(logits)[label]; gradient softmax(logits) - onehot(label).
template <typename T>
LossGrad<T> softmax_xent(std::span<const T> logits, std::size_t label) {
  if (label >= logits.size()) throw ShapeError("softmax_xent: label out of range");
  const T peak = *std::max_element(logits.begin(), logits.end());
  T total = T(0);
  for (T v : logits) total += std::exp(v - peak);
  const T log_norm = peak + std::log(total);
  LossGrad<T> out{log_norm - logits[label], std::vector<T>(logits.size())};
  for (std::size_t i = 0; i < logits.size(); ++i) out.grad[i] = std::exp(logits[i] - log_norm);
  out.grad[label] -= T(1);
  return out;
}

// ------------------------------------------------------------------- LSTM

/// One direction. Gates are stacked as [input; forget; candidate; output].
template <typename T>
struct LstmDirection {
  using Scalar = T;
  Matrix<T> wx;  // [4h x in]
  Matrix<T> wh;  // [4h x h]
  std::vector<T> bias;

  LstmDirection() = default;
  LstmDirection(std::size_t in, std::size_t h) : wx(4 * h, in), wh(4 * h, h), bias(4 * h, T(0)) {}

  std::size_t hidden() const noexcept { return wh.cols(); }
  std::size_t in_dim() const noexcept { return wx.cols(); }
  std::size_t param_count() const noexcept { return wx.size() + wh.size() + bias.size(); }

  void init(Rng& rng) {
    const double bound = 1.0 / std::sqrt(static_cast<double>(hidden()));
    fill_uniform(wx.flat(), rng, bound);
    fill_uniform(wh.flat(), rng, bound);
    fill_uniform(std::span<T>(bias), rng, bound);
    for (std::size_t k = hidden(); k < 2 * hidden(); ++k) bias[k] = T(1);
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    fn(ParamView<T>{prefix + ".wx", {wx.rows(), wx.cols()}, wx.flat()});
    fn(ParamView<T>{prefix + ".wh", {wh.rows(), wh.cols()}, wh.flat()});
    fn(ParamView<T>{prefix + ".bias", {bias.size()}, std::span<T>(bias)});
  }
};

template <typename T>
struct LstmStep {
  std::size_t input_row;
  std::vector<T> i, f, g, o, c, h;
};

template <typename T>
struct LstmTrace {
  std::vector<LstmStep<T>> steps;
};

/// Runs one direction over `seq` rows in the given order; returns the trace.
template <typename T>
LstmTrace<T> lstm_run(const LstmDirection<T>& cell, const Matrix<T>& seq,
                      std::span<const std::size_t> order) {
  const std::size_t h = cell.hidden();
  if (seq.cols() != cell.in_dim()) throw ShapeError("LSTM: input width mismatch");
  LstmTrace<T> trace;
  std::vector<T> h_prev(h, T(0));
  std::vector<T> c_prev(h, T(0));
  std::vector<T> z(4 * h);
  for (std::size_t row : order) {
    const auto x = seq.row(row);
    for (std::size_t k = 0; k < 4 * h; ++k) {
      T acc = cell.bias[k];
      const auto wx = cell.wx.row(k);
      for (std::size_t j = 0; j < x.size(); ++j) acc += wx[j] * x[j];
      const auto wh = cell.wh.row(k);
      for (std::size_t j = 0; j < h; ++j) acc += wh[j] * h_prev[j];
      z[k] = acc;
    }
    LstmStep<T> step{row, std::vector<T>(h), std::vector<T>(h), std::vector<T>(h),
                     std::vector<T>(h), std::vector<T>(h), std::vector<T>(h)};
    for (std::size_t j = 0; j < h; ++j) {
      step.i[j] = sigmoid(z[j]);
      step.f[j] = sigmoid(z[h + j]);
      step.g[j] = std::tanh(z[2 * h + j]);
      step.o[j] = sigmoid(z[3 * h + j]);
      step.c[j] = step.f[j] * c_prev[j] + step.i[j] * step.g[j];
      step.h[j] = step.o[j] * std::tanh(step.c[j]);
    }
    h_prev = step.h;
    c_prev = step.c;
    trace.steps.push_back(std::move(step));
  }
  return trace;
}

/// Backpropagates `dh_final` (gradient of the last hidden state) through time.
template <typename T>
void lstm_backward(const LstmDirection<T>& cell, const Matrix<T>& seq, const LstmTrace<T>& trace,
                   std::span<const T> dh_final, LstmDirection<T>& grad, Matrix<T>* dseq) {
  const std::size_t h = cell.hidden();
  std::vector<T> dh(dh_final.begin(), dh_final.end());
  std::vector<T> dc(h, T(0));
  std::vector<T> dz(4 * h);
  const std::vector<T> zeros(h, T(0));
  for (std::size_t t = trace.steps.size(); t-- > 0;) {
    const auto& step = trace.steps[t];
    const auto& c_prev = t > 0 ? trace.steps[t - 1].c : zeros;
    const auto& h_prev = t > 0 ? trace.steps[t - 1].h : zeros;
    for (std::size_t j = 0; j < h; ++j) {
      const T tc = std::tanh(step.c[j]);
      const T d_o = dh[j] * tc;
      dc[j] += dh[j] * step.o[j] * (T(1) - tc * tc);
      const T d_i = dc[j] * step.g[j];
      const T d_g = dc[j] * step.i[j];
      const T d_f = dc[j] * c_prev[j];
      dz[j] = d_i * step.i[j] * (T(1) - step.i[j]);
      dz[h + j] = d_f * step.f[j] * (T(1) - step.f[j]);
      dz[2 * h + j] = d_g * (T(1) - step.g[j] * step.g[j]);
      dz[3 * h + j] = d_o * step.o[j] * (T(1) - step.o[j]);
      dc[j] *= step.f[j];
    }
    const auto x = seq.row(step.input_row);
    std::fill(dh.begin(), dh.end(), T(0));
    for (std::size_t k = 0; k < 4 * h; ++k) {
      const T g = dz[k];
      if (g == T(0)) continue;
      grad.bias[k] += g;
      auto gwx = grad.wx.row(k);
      const auto wx = cell.wx.row(k);
      for (std::size_t j = 0; j < x.size(); ++j) gwx[j] += g * x[j];
      if (dseq != nullptr) {
        auto dx = dseq->row(step.input_row);
        for (std::size_t j = 0; j < x.size(); ++j) dx[j] += g * wx[j];
      }
      auto gwh = grad.wh.row(k);
      const auto wh = cell.wh.row(k);
      for (std::size_t j = 0; j < h; ++j) {
        gwh[j] += g * h_prev[j];
        dh[j] += g * wh[j];
      }
    }
  }
}

/// Bidirectional LSTM summarizing a sequence as [forward final h ; backward final h].
template <typename T>
struct BiLstm {
  using Scalar = T;
  LstmDirection<T> forward_cell;
  LstmDirection<T> backward_cell;

  struct Cache {
    LstmTrace<T> forward;
    LstmTrace<T> backward;
  };

  BiLstm() = default;
  BiLstm(std::size_t in, std::size_t h) : forward_cell(in, h), backward_cell(in, h) {}

  std::size_t hidden() const noexcept { return forward_cell.hidden(); }
  std::size_t out_dim() const noexcept { return 2 * hidden(); }
  std::size_t param_count() const noexcept {
    return forward_cell.param_count() + backward_cell.param_count();
  }

  void init(Rng& rng) {
    forward_cell.init(rng);
    backward_cell.init(rng);
  }

  std::vector<T> forward(const Matrix<T>& seq, Cache& cache) const {
    if (seq.rows() == 0) throw ShapeError("BiLstm: empty sequence");
    std::vector<std::size_t> order(seq.rows());
    for (std::size_t r = 0; r < order.size(); ++r) order[r] = r;
    cache.forward = lstm_run(forward_cell, seq, order);
    std::reverse(order.begin(), order.end());
    cache.backward = lstm_run(backward_cell, seq, order);
    std::vector<T> out = cache.forward.steps.back().h;
    const auto& tail = cache.backward.steps.back().h;
    out.insert(out.end(), tail.begin(), tail.end());
    return out;
  }

  void backward(const Matrix<T>& seq, const Cache& cache, std::span<const T> dout, BiLstm& grad,
                Matrix<T>* dseq) const {
    if (dout.size() != out_dim()) throw ShapeError("BiLstm: upstream gradient width mismatch");
    lstm_backward(forward_cell, seq, cache.forward, dout.first(hidden()), grad.forward_cell, dseq);
    lstm_backward(backward_cell, seq, cache.backward, dout.subspan(hidden()), grad.backward_cell, dseq);
  }

  template <typename Fn>
  void visit(const std::string& prefix, Fn&& fn) {
    forward_cell.visit(prefix + ".fwd", fn);
    backward_cell.visit(prefix + ".bwd", fn);
  }
};

// ------------------------------------------------------------------- Adam

struct AdamConfig {
  double lr = 0.001;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam over a fixed, ordered list of parameter tensors.
template <typename T>
class AdamState {
 public:
  explicit AdamState(AdamConfig config = {}) : config_(config) {}

  const AdamConfig& config() const noexcept { return config_; }
  std::size_t step_count() const noexcept { return t_; }
  const std::vector<std::vector<T>>& second_moments() const noexcept { return v_; }

  void step(std::span<const ParamView<T>> params, std::span<const ParamView<T>> grads) {
    if (params.size() != grads.size()) throw ShapeError("Adam: parameter/gradient count mismatch");
    if (m_.empty()) {
      for (const auto& p : params) {
        m_.emplace_back(p.values.size(), T(0));
        v_.emplace_back(p.values.size(), T(0));
      }
    }
    if (m_.size() != params.size()) throw ShapeError("Adam: parameter list changed between steps");
    ++t_;
    const double correction1 = 1.0 - std::pow(config_.beta1, static_cast<double>(t_));
    const double correction2 = 1.0 - std::pow(config_.beta2, static_cast<double>(t_));
    const T b1 = static_cast<T>(config_.beta1);
    const T b2 = static_cast<T>(config_.beta2);
    const T step_size = static_cast<T>(config_.lr / correction1);
    const T sqrt_c2 = static_cast<T>(std::sqrt(correction2));
    const T eps = static_cast<T>(config_.eps);
    for (std::size_t p = 0; p < params.size(); ++p) {
      auto values = params[p].values;
      const auto g = grads[p].values;
      if (values.size() != g.size() || values.size() != m_[p].size()) {
        throw ShapeError("Adam: tensor '" + params[p].name + "' changed shape");
      }
      auto& m = m_[p];
      auto& v = v_[p];
      for (std::size_t i = 0; i < values.size(); ++i) {
        m[i] = b1 * m[i] + (T(1) - b1) * g[i];
        v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
        // lr * m_hat / (sqrt(v_hat) + eps)
        values[i] -= step_size * m[i] / (std::sqrt(v[i]) / sqrt_c2 + eps);
      }
    }
  }

 private:
  AdamConfig config_;
  std::size_t t_ = 0;
  std::vector<std::vector<T>> m_;
  std::vector<std::vector<T>> v_;
};

template <typename Model, typename T = typename Model::Scalar>
std::vector<ParamView<T>> collect_params(Model& model) {
  std::vector<ParamView<T>> views;
  model.visit("", [&](ParamView<T> view) { views.push_back(std::move(view)); });
  return views;
}

/// All parameter values concatenated in visit order.
template <typename T>
std::vector<T> flatten(std::span<const ParamView<T>> views) {
  std::vector<T> out;
  for (const auto& v : views) out.insert(out.end(), v.values.begin(), v.values.end());
  return out;
}

template <typename T>
void unflatten(std::span<const ParamView<T>> views, std::span<const T> flat) {
  std::size_t offset = 0;
  for (const auto& v : views) {
    if (offset + v.values.size() > flat.size()) throw ShapeError("unflatten: too few values");
    std::copy_n(flat.begin() + static_cast<std::ptrdiff_t>(offset), v.values.size(), v.values.begin());
    offset += v.values.size();
  }
  if (offset != flat.size()) throw ShapeError("unflatten: too many values");
}

// ------------------------------------------------------------- grad check

struct GradCheckReport {
  double max_rel_error = 0.0;
  std::size_t worst_index = 0;
  double analytic_at_worst = 0.0;
  double numeric_at_worst = 0.0;
  bool passed = false;
};

/// Central differences of `f` around `params` against `analytic`. Relative
/// error uses max(|a|, |n|, floor) as denominator so near-zero entries are
/// judged on absolute error.
GradCheckReport grad_check(const std::function<double(std::span<const double>)>& f,
                           std::span<const double> params, std::span<const double> analytic,
                           double step = 1e-5, double tolerance = 1e-4, double floor = 1e-6);

}  // namespace subpool::nn
