#include "subpool/probe.hpp"

#include <chrono>
#include <cmath>
#include <map>
#include <numeric>
#include <set>

#include <json.hpp>

#include "subpool/binary_io.hpp"
#include "subpool/errors.hpp"

namespace subpool {

namespace {

std::vector<Instance> instances_for(const std::vector<ProbeExample>& examples,
                                    const EmbeddingStore& store, Layer layer,
                                    const std::map<std::string, int>& label_ids,
                                    std::string_view split) {
  if (examples.size() != store.sentences.size()) {
    throw AlignmentError(std::string(split) + ": dataset has " + std::to_string(examples.size()) +
                         " sentences but the store has " + std::to_string(store.sentences.size()));
  }
  auto label_of = [&](const std::string& label) {
    const auto it = label_ids.find(label);
    return it == label_ids.end() ? -1 : it->second;
  };
  std::vector<Instance> out;
  for (std::size_t s = 0; s < examples.size(); ++s) {
    const auto& example = examples[s];
    const auto& spans = store.sentences[s].spans;
    if (spans.size() != example.tokens.size()) {
      throw AlignmentError(std::string(split) + " sentence " + std::to_string(s) + ": " +
                           std::to_string(example.tokens.size()) + " words but " +
                           std::to_string(spans.size()) + " spans in the store");
    }
    const auto view = layer_view(store, s, layer);
    if (example.target_index) {
      out.push_back({span_rows(view, spans[*example.target_index]), label_of(example.label)});
    } else {
      for (std::size_t w = 0; w < spans.size(); ++w) {
        out.push_back({span_rows(view, spans[w]), label_of(example.labels[w])});
      }
    }
  }
  return out;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

constexpr std::string_view kCheckpointMagic = "SWPK";
constexpr std::uint32_t kCheckpointVersion = 1;

}  // namespace

ProbeSplits build_instances(const ProbeDataset& dataset, const EmbeddingStore& train,
                            const EmbeddingStore& dev, const EmbeddingStore& test, Layer layer) {
  if (train.hidden != dev.hidden || train.hidden != test.hidden) {
    throw AlignmentError("train, dev and test stores differ in hidden size");
  }
  ProbeSplits splits;
  splits.classes = dataset.classes;
  if (splits.classes.empty()) {
    std::set<std::string> seen;
    for (const auto& example : dataset.train) {
      if (example.target_index) {
        seen.insert(example.label);
      } else {
        seen.insert(example.labels.begin(), example.labels.end());
      }
    }
    splits.classes.assign(seen.begin(), seen.end());
  }
  std::map<std::string, int> label_ids;
  for (std::size_t i = 0; i < splits.classes.size(); ++i) {
    label_ids[splits.classes[i]] = static_cast<int>(i);
  }
  splits.input_dim = train.hidden;
  splits.train = instances_for(dataset.train, train, layer, label_ids, "train");
  splits.dev = instances_for(dataset.dev, dev, layer, label_ids, "dev");
  splits.test = instances_for(dataset.test, test, layer, label_ids, "test");
  return splits;
}

std::size_t predict(const ProbeModel<float>& model, const Instance& instance) {
  const auto logits = model.logits(instance.subwords);
  return static_cast<std::size_t>(std::max_element(logits.begin(), logits.end()) - logits.begin());
}

double evaluate(const ProbeModel<float>& model, std::span<const Instance> split) {
  if (split.empty()) throw Error("cannot evaluate on an empty split");
  std::size_t correct = 0;
  for (const auto& instance : split) {
    if (instance.label >= 0 && predict(model, instance) == static_cast<std::size_t>(instance.label)) {
      ++correct;
    }
  }
  return static_cast<double>(correct) / static_cast<double>(split.size());
}

TrainedProbe train_probe(const ProbeSplits& data, const PoolingSpec& pooling_in,
                         const TrainingConfig& config, std::uint64_t seed) {
  if (data.train.empty() || data.dev.empty() || data.test.empty()) {
    throw Error("training needs non-empty train, dev and test splits");
  }
  if (data.classes.size() < 2) throw Error("training needs at least two classes");
  if (config.batch_size == 0) throw Error("batch size must be positive");
  PoolingSpec pooling = pooling_in;
  pooling.input_dim = data.input_dim;

  const auto start = std::chrono::steady_clock::now();
  TrainedProbe trained;
  trained.model = ProbeModel<float>(pooling, config.mlp_hidden, data.classes.size());
  if (trained.model.classifier.in_dim() != pooling.output_dim()) {
    throw ShapeError("pooling output does not match the classifier input");
  }
  Rng init_rng(seed, 7);
  trained.model.init(init_rng);

  ProbeModel<float> model = trained.model;
  ProbeModel<float> grad(pooling, config.mlp_hidden, data.classes.size());
  auto params = nn::collect_params(model);
  auto grads = nn::collect_params(grad);
  nn::AdamState<float> adam(config.adam);

  std::vector<std::size_t> order(data.train.size());
  std::iota(order.begin(), order.end(), 0);

  double best_dev = -1.0;
  std::size_t since_best = 0;
  for (std::size_t epoch = 1; epoch <= config.max_epochs; ++epoch) {
    Rng epoch_rng(seed, 1'000'000 + epoch);
    epoch_rng.shuffle(std::span<std::size_t>(order));
    for (std::size_t begin = 0; begin < order.size(); begin += config.batch_size) {
      const std::size_t end = std::min(order.size(), begin + config.batch_size);
      for (auto& view : grads) std::fill(view.values.begin(), view.values.end(), 0.0f);
      for (std::size_t k = begin; k < end; ++k) {
        const auto& instance = data.train[order[k]];
        if (instance.label < 0) continue;
        accumulate_gradients(model, instance.subwords, static_cast<std::size_t>(instance.label), grad);
      }
      const float scale = 1.0f / static_cast<float>(end - begin);
      for (auto& view : grads) {
        for (auto& g : view.values) g *= scale;
      }
      adam.step(params, grads);
    }

    const double dev_acc = evaluate(model, data.dev);
    trained.dev_curve.push_back(dev_acc);
    trained.result.epochs = epoch;
    if (dev_acc > best_dev) {  // ties keep the earlier checkpoint
      best_dev = dev_acc;
      since_best = 0;
      trained.model = model;
      trained.result.best_epoch = epoch;
    } else if (++since_best >= config.patience) {
      break;
    }
  }
  trained.result.seed = seed;
  trained.result.dev_acc = best_dev;
  trained.result.test_acc = evaluate(trained.model, data.test);
  trained.result.seconds = seconds_since(start);
  return trained;
}

ExperimentResult run_experiment(const ProbeSplits& data, const ExperimentSpec& spec) {
  if (spec.seeds.empty()) throw Error("an experiment needs at least one seed");
  const auto start = std::chrono::steady_clock::now();
  ExperimentResult result;
  PoolingSpec pooling = spec.pooling;
  pooling.input_dim = data.input_dim;
  result.params = param_count(pooling, data.classes.size(), spec.training.mlp_hidden);
  for (auto seed : spec.seeds) {
    result.runs.push_back(train_probe(data, pooling, spec.training, seed).result);
  }
  const double n = static_cast<double>(result.runs.size());
  for (const auto& run : result.runs) {
    result.mean_test += run.test_acc / n;
    result.mean_dev += run.dev_acc / n;
  }
  if (result.runs.size() > 1) {
    double ss = 0.0;
    for (const auto& run : result.runs) ss += (run.test_acc - result.mean_test) * (run.test_acc - result.mean_test);
    result.stddev_test = std::sqrt(ss / (n - 1.0));
  }
  result.seconds = seconds_since(start);
  return result;
}

AttentionLocations attention_locations(const ProbeModel<float>& model, std::span<const Instance> split) {
  if (model.pooler.spec.method != PoolingMethod::Attn) {
    throw Error("attention locations need a model with ATTN pooling");
  }
  AttentionLocations locations;
  for (const auto& instance : split) {
    const std::size_t n = instance.subwords.rows();
    if (n == 1) {
      ++locations.single;
      continue;
    }
    const auto weights = attention_weights(model.pooler, instance.subwords);
    const auto top = static_cast<std::size_t>(std::max_element(weights.begin(), weights.end()) - weights.begin());
    if (top == 0) {
      ++locations.first;
    } else if (top == n - 1) {
      ++locations.last;
    } else {
      ++locations.middle;
    }
  }
  return locations;
}

// ------------------------------------------------------------- checkpoint

std::string encode_checkpoint(const ProbeModel<float>& model_in, std::span<const std::string> classes) {
  auto model = model_in;
  const auto& spec = model.pooler.spec;
  nlohmann::json meta = {
      {"pooling", std::string(pooling_name(spec.method))},
      {"input_dim", spec.input_dim},
      {"attn_hidden", spec.attn_hidden},
      {"lstm_hidden", spec.lstm_hidden},
      {"mlp_hidden", model.classifier.hidden.out_dim()},
      {"classes", std::vector<std::string>(classes.begin(), classes.end())},
  };
  const auto meta_text = meta.dump();
  const auto views = nn::collect_params(model);

  std::string out;
  binio::put_bytes(out, kCheckpointMagic);
  binio::put_u32(out, kCheckpointVersion);
  binio::put_u32(out, static_cast<std::uint32_t>(meta_text.size()));
  binio::put_bytes(out, meta_text);
  binio::put_u32(out, static_cast<std::uint32_t>(views.size()));
  for (const auto& view : views) {
    binio::put_u32(out, static_cast<std::uint32_t>(view.name.size()));
    binio::put_bytes(out, view.name);
    binio::put_u32(out, static_cast<std::uint32_t>(view.shape.size()));
    for (auto dim : view.shape) binio::put_u32(out, static_cast<std::uint32_t>(dim));
    binio::put_f32s(out, view.values);
  }
  return out;
}

LoadedCheckpoint decode_checkpoint(std::string_view bytes) {
  if (bytes.substr(0, kCheckpointMagic.size()) != kCheckpointMagic) {
    throw StoreError(StoreError::Kind::BadMagic, "bad magic: not a probe checkpoint");
  }
  binio::Reader reader(bytes.substr(kCheckpointMagic.size()));
  const auto version = reader.u32();
  if (reader.ok() && version != kCheckpointVersion) {
    throw StoreError(StoreError::Kind::VersionMismatch, "checkpoint version " + std::to_string(version));
  }
  const auto meta_text = reader.bytes(reader.u32());
  if (!reader.ok()) throw StoreError(StoreError::Kind::Truncated, "truncated checkpoint header");
  const auto meta = nlohmann::json::parse(meta_text);

  PoolingSpec spec;
  spec.method = parse_pooling(meta.at("pooling").get<std::string>());
  spec.input_dim = meta.at("input_dim").get<std::size_t>();
  spec.attn_hidden = meta.at("attn_hidden").get<std::size_t>();
  spec.lstm_hidden = meta.at("lstm_hidden").get<std::size_t>();
  LoadedCheckpoint loaded;
  loaded.classes = meta.at("classes").get<std::vector<std::string>>();
  loaded.model = ProbeModel<float>(spec, meta.at("mlp_hidden").get<std::size_t>(), loaded.classes.size());

  auto views = nn::collect_params(loaded.model);
  const auto count = reader.u32();
  if (count != views.size()) {
    throw StoreError(StoreError::Kind::Invalid, "checkpoint has " + std::to_string(count) +
                                                    " tensors, model expects " + std::to_string(views.size()));
  }
  for (auto& view : views) {
    const auto name = reader.bytes(reader.u32());
    const auto rank = reader.u32();
    std::vector<std::size_t> shape;
    for (std::uint32_t i = 0; i < rank && reader.ok(); ++i) shape.push_back(reader.u32());
    if (!reader.ok()) throw StoreError(StoreError::Kind::Truncated, "truncated checkpoint tensor");
    if (name != view.name || shape != view.shape) {
      throw StoreError(StoreError::Kind::Invalid, "checkpoint tensor '" + std::string(name) + "' does not match the model");
    }
    reader.f32s(view.values);
    if (!reader.ok()) throw StoreError(StoreError::Kind::Truncated, "truncated checkpoint tensor data");
  }
  return loaded;
}

// ------------------------------------------------------------- results

std::string ResultRecord::key() const {
  return task + "|" + model_store + "|" + layer + "|" + pooling + "|" + std::to_string(seed);
}

std::string to_jsonl(const ResultRecord& r) {
  nlohmann::json record = {
      {"task", r.task},       {"model_store", r.model_store}, {"layer", r.layer},
      {"pooling", r.pooling}, {"seed", r.seed},               {"dev_acc", r.dev_acc},
      {"test_acc", r.test_acc}, {"params", r.params},         {"seconds", r.seconds},
  };
  return record.dump() + "\n";
}

std::vector<ResultRecord> parse_results(std::string_view jsonl) {
  std::vector<ResultRecord> records;
  std::size_t start = 0;
  std::size_t line_no = 0;
  while (start < jsonl.size()) {
    auto end = jsonl.find('\n', start);
    if (end == std::string_view::npos) end = jsonl.size();
    const auto line = jsonl.substr(start, end - start);
    start = end + 1;
    ++line_no;
    if (line.find_first_not_of(" \t\r") == std::string_view::npos) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      ResultRecord r;
      r.task = j.at("task").get<std::string>();
      r.model_store = j.at("model_store").get<std::string>();
      r.layer = j.at("layer").is_string() ? j.at("layer").get<std::string>()
                                           : std::to_string(j.at("layer").get<int>());
      r.pooling = j.at("pooling").get<std::string>();
      r.seed = j.at("seed").get<std::uint64_t>();
      r.dev_acc = j.at("dev_acc").get<double>();
      r.test_acc = j.at("test_acc").get<double>();
      r.params = j.at("params").get<std::size_t>();
      r.seconds = j.at("seconds").get<double>();
      records.push_back(std::move(r));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, e.what());
    }
  }
  return records;
}

}  // namespace subpool
