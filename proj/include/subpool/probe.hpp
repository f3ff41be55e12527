#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "subpool/corpus.hpp"
#include "subpool/embed.hpp"
#include "subpool/pool.hpp"
#include "subpool/tinynet.hpp"

namespace subpool {

/// One word to classify: its subword vectors at the probed layer.
struct Instance {
  Matrix<float> subwords;
  int label = -1;  // -1: label never seen in training, always scored wrong
};

struct ProbeSplits {
  std::vector<Instance> train;
  std::vector<Instance> dev;
  std::vector<Instance> test;
  std::vector<std::string> classes;
  std::size_t input_dim = 0;
};

/// Pairs dataset examples with store sentences (same order, same word count).
/// Morphology yields the target word per sentence; tagging yields every word.
ProbeSplits build_instances(const ProbeDataset& dataset, const EmbeddingStore& train,
                            const EmbeddingStore& dev, const EmbeddingStore& test, Layer layer);

template <typename T>
struct ProbeModel {
  using Scalar = T;

  Pooler<T> pooler;
  nn::Mlp<T> classifier;

  ProbeModel() = default;
  ProbeModel(const PoolingSpec& spec, std::size_t mlp_hidden, std::size_t num_classes)
      : pooler(spec), classifier(spec.output_dim(), mlp_hidden, num_classes) {}

  std::size_t param_count() const noexcept { return pooler.param_count() + classifier.param_count(); }

  void init(Rng& rng) {
    pooler.init(rng);
    classifier.init(rng);
  }

  template <typename Fn>
  void visit(const std::string&, Fn&& fn) {
    pooler.visit("pool", fn);
    classifier.visit("mlp", fn);
  }

  std::vector<T> logits(const Matrix<T>& subwords) const {
    return classifier.forward(pool_forward(pooler, subwords));
  }
};

/// Loss of one instance; gradients are accumulated into `grad`.
template <typename T>
T accumulate_gradients(const ProbeModel<T>& model, const Matrix<T>& subwords, std::size_t label,
                       ProbeModel<T>& grad, Matrix<T>* dsubwords = nullptr) {
  PoolCache<T> pool_cache;
  const auto pooled = pool_forward(model.pooler, subwords, pool_cache);
  typename nn::Mlp<T>::Cache mlp_cache;
  const auto logits = model.classifier.forward(pooled, mlp_cache);
  const auto loss = nn::softmax_xent<T>(logits, label);
  std::vector<T> dpooled(pooled.size(), T(0));
  model.classifier.backward(pooled, mlp_cache, loss.grad, grad.classifier, dpooled);
  pool_backward(model.pooler, subwords, pool_cache, std::span<const T>(dpooled), grad.pooler, dsubwords);
  return loss.loss;
}

struct TrainingConfig {
  std::size_t batch_size = 64;
  std::size_t max_epochs = 200;
  std::size_t patience = 5;
  std::size_t mlp_hidden = 50;
  nn::AdamConfig adam;
};

struct ExperimentSpec {
  PoolingSpec pooling;  // input_dim is taken from the data
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  TrainingConfig training;
};

struct SeedResult {
  std::uint64_t seed = 0;
  double dev_acc = 0.0;
  double test_acc = 0.0;
  std::size_t epochs = 0;      // epochs actually run
  std::size_t best_epoch = 0;  // 1-based epoch of the kept checkpoint
  double seconds = 0.0;
};

struct ExperimentResult {
  std::vector<SeedResult> runs;
  double mean_test = 0.0;
  double stddev_test = 0.0;  // sample standard deviation, 0 for one seed
  double mean_dev = 0.0;
  ParamCount params;
  double seconds = 0.0;
};

struct TrainedProbe {
  ProbeModel<float> model;
  SeedResult result;
  std::vector<double> dev_curve;  // dev accuracy after every epoch
};

TrainedProbe train_probe(const ProbeSplits& data, const PoolingSpec& pooling,
                         const TrainingConfig& config, std::uint64_t seed);

ExperimentResult run_experiment(const ProbeSplits& data, const ExperimentSpec& spec);

/// Argmax class, ties to the lowest index.
std::size_t predict(const ProbeModel<float>& model, const Instance& instance);

/// Fraction of instances whose predicted class equals the gold label.
double evaluate(const ProbeModel<float>& model, std::span<const Instance> split);

struct AttentionLocations {
  std::size_t first = 0;
  std::size_t last = 0;
  std::size_t middle = 0;
  std::size_t single = 0;

  std::size_t total() const noexcept { return first + last + middle + single; }
  double share(std::size_t count) const noexcept {
    return total() == 0 ? 0.0 : static_cast<double>(count) / static_cast<double>(total());
  }
};

/// Where ATTN puts its highest weight: index 0, index n-1, in between, or an
/// unsplit word. Ties go to the lowest index.
AttentionLocations attention_locations(const ProbeModel<float>& model, std::span<const Instance> split);

// Checkpoint envelope, little-endian: "SWPK", u32 version, u32 meta length,
// JSON meta, u32 blob count, then per blob u32 name length, name, u32 rank,
// rank x u32 dims, f32 data.
std::string encode_checkpoint(const ProbeModel<float>& model, std::span<const std::string> classes);
struct LoadedCheckpoint {
  ProbeModel<float> model;
  std::vector<std::string> classes;
};
LoadedCheckpoint decode_checkpoint(std::string_view bytes);

/// One line of the results file.
struct ResultRecord {
  std::string task;
  std::string model_store;
  std::string layer;
  std::string pooling;
  std::uint64_t seed = 0;
  double dev_acc = 0.0;
  double test_acc = 0.0;
  std::size_t params = 0;
  double seconds = 0.0;

  std::string key() const;  // task|model_store|layer|pooling|seed
};

std::string to_jsonl(const ResultRecord& record);
std::vector<ResultRecord> parse_results(std::string_view jsonl);

}  // namespace subpool
