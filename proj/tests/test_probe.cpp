#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "subpool/errors.hpp"
#include "subpool/probe.hpp"
#include "test_support.hpp"

using namespace subpool;

namespace {

SynthConfig small_config(SignalPosition position = SignalPosition::Last, double strength = 6.0) {
  SynthConfig config;
  config.seed = 3;
  config.hidden = 16;
  config.num_layers = 2;
  config.words_per_sentence = 6;
  config.fertility = parse_fertility("2:0.5,3:0.3,4:0.2");
  config.signal = {position, strength};
  return config;
}

ProbeSplits small_splits(const SynthConfig& config, SplitSizes sizes = {150, 40, 40}) {
  const auto corpus = synth_corpus(config, sizes);
  return build_instances(corpus.dataset, corpus.train, corpus.dev, corpus.test, Layer::index(1));
}

TrainingConfig quick() {
  TrainingConfig t;
  t.max_epochs = 40;
  return t;
}

// A 2-class model whose logits equal the first row of the input when the
// input is non-negative (identity layers, ReLU passes positives).
ProbeModel<float> identity_model() {
  ProbeModel<float> model(PoolingSpec{PoolingMethod::First, 2}, 2, 2);
  model.classifier.hidden.weight = Matrix<float>(2, 2, std::vector<float>{1, 0, 0, 1});
  model.classifier.output.weight = Matrix<float>(2, 2, std::vector<float>{1, 0, 0, 1});
  return model;
}

Instance word(float a, float b, int label) { return {Matrix<float>(1, 2, std::vector<float>{a, b}), label}; }

double binomial_sigma(double p, std::size_t n) { return std::sqrt(p * (1 - p) / static_cast<double>(n)); }

}  // namespace

TEST_CASE("build_instances pairs tagging examples with spans") {
  const auto config = small_config();
  const auto corpus = synth_corpus(config, {10, 4, 4});
  const auto splits = build_instances(corpus.dataset, corpus.train, corpus.dev, corpus.test, Layer::index(0));
  CHECK(splits.train.size() == 10 * config.words_per_sentence);
  CHECK(splits.input_dim == 16);
  CHECK(splits.classes == std::vector<std::string>{"c0", "c1", "c2"});
  const auto& first_span = corpus.train.sentences[0].spans[0];
  CHECK(splits.train[0].subwords.rows() == first_span.size());
  CHECK(splits.train[0].label >= 0);
}

TEST_CASE("build_instances takes the target word for morphology") {
  EmbeddingStore store{1, 2, {}};
  SentenceEmbeddings e;
  e.num_subwords = 3;
  e.spans = {{0, 1}, {1, 3}};
  e.data = {1, 1, 2, 2, 3, 3};
  store.sentences = {e};
  ProbeDataset dataset;
  dataset.train = {{{"a", "bc"}, 1, "Nom", {}}};
  dataset.dev = dataset.train;
  dataset.test = {{{"a", "bc"}, 0, "Unseen", {}}};
  const auto splits = build_instances(dataset, store, store, store, Layer::index(0));
  REQUIRE(splits.train.size() == 1);
  CHECK(splits.train[0].subwords.rows() == 2);
  CHECK(splits.train[0].subwords(0, 0) == 2.0f);
  CHECK(splits.test[0].label == -1);
}

TEST_CASE("build_instances rejects misaligned data") {
  const auto corpus = synth_corpus(small_config(), {5, 2, 2});
  auto dataset = corpus.dataset;
  dataset.train.pop_back();
  CHECK_THROWS_AS(build_instances(dataset, corpus.train, corpus.dev, corpus.test, Layer::index(0)), AlignmentError);
  dataset = corpus.dataset;
  dataset.dev[0].tokens.push_back("extra");
  dataset.dev[0].labels.push_back("c0");
  CHECK_THROWS_AS(build_instances(dataset, corpus.train, corpus.dev, corpus.test, Layer::index(0)), AlignmentError);
}

TEST_CASE("evaluate examples") {
  const auto model = identity_model();
  SUBCASE("all correct") {
    const std::vector<Instance> split = {word(1, 0, 0), word(0, 1, 1), word(2, 1, 0)};
    CHECK(evaluate(model, split) == 1.0);
  }
  SUBCASE("three of five") {
    const std::vector<Instance> split = {word(1, 0, 0), word(0, 1, 1), word(2, 1, 0), word(1, 0, 1), word(0, 3, 0)};
    CHECK(evaluate(model, split) == doctest::Approx(0.6));
  }
  SUBCASE("ties go to the lowest class") {
    CHECK(predict(model, word(1, 1, 0)) == 0);
  }
  SUBCASE("empty split") {
    CHECK_THROWS(evaluate(model, std::vector<Instance>{}));
  }
}

TEST_CASE("a constant predictor scores about one third on a balanced 3-class set") {
  ProbeModel<float> model(PoolingSpec{PoolingMethod::First, 2}, 2, 3);
  model.classifier.output.bias = {0.0f, 1.0f, 0.0f};
  std::vector<Instance> split;
  for (int i = 0; i < 300; ++i) split.push_back(word(0.5f, -0.5f, i % 3));
  CHECK(evaluate(model, split) == doctest::Approx(1.0 / 3.0));
}

TEST_CASE("LAST learns a last-subword signal and FIRST stays near chance") {
  const auto splits = small_splits(small_config());
  const auto last = train_probe(splits, PoolingSpec{PoolingMethod::Last}, quick(), 0);
  const auto first = train_probe(splits, PoolingSpec{PoolingMethod::First}, quick(), 0);
  CHECK(last.result.test_acc >= 0.99);
  const double n = static_cast<double>(splits.test.size());
  CHECK(std::abs(first.result.test_acc - 1.0 / 3.0) <= 3.0 * binomial_sigma(1.0 / 3.0, splits.test.size()) + 1.0 / n);
}

TEST_CASE("training is deterministic per seed") {
  const auto splits = small_splits(small_config(), {60, 20, 20});
  for (auto method : {PoolingMethod::Attn, PoolingMethod::FirstPlusLast}) {
    const auto a = train_probe(splits, PoolingSpec{method, 0, 6}, quick(), 5);
    const auto b = train_probe(splits, PoolingSpec{method, 0, 6}, quick(), 5);
    CHECK(a.result.test_acc == b.result.test_acc);
    CHECK(a.dev_curve == b.dev_curve);
    CHECK(encode_checkpoint(a.model, splits.classes) == encode_checkpoint(b.model, splits.classes));
  }
}

TEST_CASE("early stopping keeps the best dev checkpoint") {
  const auto splits = small_splits(small_config(SignalPosition::Last, 1.0), {60, 20, 20});
  auto config = quick();
  config.patience = 3;
  const auto trained = train_probe(splits, PoolingSpec{PoolingMethod::Avg}, config, 1);
  const double best = *std::max_element(trained.dev_curve.begin(), trained.dev_curve.end());
  CHECK(trained.result.dev_acc == best);
  REQUIRE(trained.result.best_epoch >= 1);
  CHECK(trained.dev_curve[trained.result.best_epoch - 1] == best);
  // The earliest epoch reaching the best score is kept.
  for (std::size_t e = 0; e + 1 < trained.result.best_epoch; ++e) CHECK(trained.dev_curve[e] < best);
  CHECK(evaluate(trained.model, splits.dev) == best);
  if (trained.result.epochs < config.max_epochs) {
    CHECK(trained.result.epochs - trained.result.best_epoch == config.patience);
  }
}

TEST_CASE("shuffled labels leave the probe at chance") {
  auto splits = small_splits(small_config(), {150, 40, 80});
  Rng rng(17);
  for (auto* split : {&splits.train, &splits.dev, &splits.test}) {
    for (auto& instance : *split) instance.label = static_cast<int>(rng.below(3));
  }
  const auto trained = train_probe(splits, PoolingSpec{PoolingMethod::Last}, quick(), 0);
  const double sigma = binomial_sigma(1.0 / 3.0, splits.test.size());
  CHECK(std::abs(trained.result.test_acc - 1.0 / 3.0) <= 3.0 * sigma);
}

TEST_CASE("a zero-strength signal leaves every probe at chance") {
  const auto splits = small_splits(small_config(SignalPosition::All, 0.0), {150, 40, 80});
  const double sigma = binomial_sigma(1.0 / 3.0, splits.test.size());
  for (auto method : {PoolingMethod::Last, PoolingMethod::Avg}) {
    const auto trained = train_probe(splits, PoolingSpec{method}, quick(), 0);
    CHECK(std::abs(trained.result.test_acc - 1.0 / 3.0) <= 3.0 * sigma);
  }
}

TEST_CASE("run_experiment aggregates seeds") {
  const auto splits = small_splits(small_config(), {100, 30, 30});
  ExperimentSpec spec;
  spec.pooling = PoolingSpec{PoolingMethod::Last};
  spec.training = quick();
  const auto result = run_experiment(splits, spec);
  REQUIRE(result.runs.size() == 3);
  double mean = 0.0;
  for (const auto& r : result.runs) mean += r.test_acc / 3.0;
  CHECK(result.mean_test == doctest::Approx(mean));
  CHECK(result.stddev_test >= 0.0);
  CHECK(result.stddev_test < 0.06);
  CHECK(result.params.combined() == 16 * 50 + 50 + 50 * 3 + 3);
  spec.seeds.clear();
  CHECK_THROWS(run_experiment(splits, spec));
}

TEST_CASE("training rejects empty splits") {
  auto splits = small_splits(small_config(), {10, 4, 4});
  splits.dev.clear();
  CHECK_THROWS(train_probe(splits, PoolingSpec{PoolingMethod::Last}, quick(), 0));
}

TEST_CASE("attention locations") {
  SUBCASE("single-subword words") {
    ProbeModel<float> model(PoolingSpec{PoolingMethod::Attn, 2, 3}, 2, 2);
    std::vector<Instance> split = {word(1, 2, 0), word(3, 4, 1)};
    const auto loc = attention_locations(model, split);
    CHECK(loc.single == 2);
    CHECK(loc.share(loc.single) == 1.0);
  }
  SUBCASE("a zero scorer ties and picks the first row") {
    ProbeModel<float> model(PoolingSpec{PoolingMethod::Attn, 2, 3}, 2, 2);
    std::vector<Instance> split(5, Instance{Matrix<float>(2, 2, std::vector<float>{1, 2, 3, 4}), 0});
    const auto loc = attention_locations(model, split);
    CHECK(loc.first == 5);
    CHECK(loc.share(loc.first) == 1.0);
  }
  SUBCASE("a last-signal model looks at the last subword") {
    const auto splits = small_splits(small_config(), {150, 40, 40});
    const auto trained = train_probe(splits, PoolingSpec{PoolingMethod::Attn, 0, 50}, quick(), 0);
    const auto loc = attention_locations(trained.model, splits.test);
    CHECK(loc.last > loc.first + loc.middle);
    const double total = loc.share(loc.first) + loc.share(loc.last) + loc.share(loc.middle) + loc.share(loc.single);
    CHECK(std::abs(total - 1.0) <= 1e-12);
  }
  SUBCASE("needs ATTN") {
    CHECK_THROWS(attention_locations(identity_model(), std::vector<Instance>{}));
  }
}

TEST_CASE("checkpoint roundtrip preserves predictions") {
  const auto splits = small_splits(small_config(), {40, 10, 10});
  for (auto method : kAllPoolings) {
    const auto trained = train_probe(splits, PoolingSpec{method, 0, 5, 4}, [] {
      TrainingConfig t;
      t.max_epochs = 2;
      return t;
    }(), 0);
    const auto bytes = encode_checkpoint(trained.model, splits.classes);
    const auto loaded = decode_checkpoint(bytes);
    CHECK(loaded.classes == splits.classes);
    CHECK(encode_checkpoint(loaded.model, loaded.classes) == bytes);
    for (const auto& instance : splits.test) CHECK(predict(loaded.model, instance) == predict(trained.model, instance));
  }
}

TEST_CASE("checkpoint errors") {
  const auto bytes = encode_checkpoint(identity_model(), std::vector<std::string>{"a", "b"});
  auto bad = bytes;
  bad[1] = 'X';
  CHECK_THROWS_AS(decode_checkpoint(bad), StoreError);
  CHECK_THROWS_AS(decode_checkpoint(std::string_view(bytes).substr(0, bytes.size() - 3)), StoreError);
  auto version = bytes;
  version[4] = 9;
  try {
    decode_checkpoint(version);
    FAIL("expected an error");
  } catch (const StoreError& e) {
    CHECK(e.kind() == StoreError::Kind::VersionMismatch);
  }
}

TEST_CASE("result records roundtrip through JSON lines") {
  const ResultRecord a{"Finnish_Case_NOUN", "mbert", "6", "attn", 2, 0.91, 0.9, 77104, 1.5};
  const ResultRecord b{"syn", "synth", "sum", "f+l", 0, 1.0, 0.995, 1804, 0.01};
  const auto records = parse_results(to_jsonl(a) + "\n" + to_jsonl(b));
  REQUIRE(records.size() == 2);
  CHECK(records[0].key() == a.key());
  CHECK(records[1].layer == "sum");
  CHECK(records[1].test_acc == 0.995);
  CHECK(records[0].params == 77104);
  try {
    parse_results(to_jsonl(a) + "{\"task\": 1}\n");
    FAIL("expected a parse error");
  } catch (const ParseError& e) {
    CHECK(e.line() == 2);
  }
}
