#include "subpool/embed.hpp"

#include <charconv>
#include <cmath>
#include <numeric>

#include "subpool/binary_io.hpp"
#include "subpool/errors.hpp"
#include "subpool/rng.hpp"

namespace subpool {

namespace {

constexpr std::string_view kMagic = "SWPE";

std::size_t payload_size(const EmbeddingStore& store, std::uint32_t num_subwords) {
  return static_cast<std::size_t>(store.num_layers) * num_subwords * store.hidden;
}

std::uint32_t parse_u32(std::string_view text) {
  std::uint32_t value = 0;
  const auto [ptr, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
  if (ec != std::errc() || ptr != text.data() + text.size()) {
    throw Error("expected a non-negative integer, got '" + std::string(text) + "'");
  }
  return value;
}

}  // namespace

Layer Layer::parse(std::string_view text) {
  if (text == "sum" || text == "SUM" || text == "S") return sum();
  return index(parse_u32(text));
}

std::string Layer::to_string() const { return sum_ ? "sum" : std::to_string(index_); }

std::string encode_store(const EmbeddingStore& store) {
  validate_store(store);
  std::string out;
  binio::put_bytes(out, kMagic);
  binio::put_u32(out, kStoreVersion);
  binio::put_u32(out, store.num_layers);
  binio::put_u32(out, store.hidden);
  binio::put_u32(out, static_cast<std::uint32_t>(store.sentences.size()));
  for (const auto& sentence : store.sentences) {
    binio::put_u32(out, sentence.num_subwords);
    binio::put_u32(out, static_cast<std::uint32_t>(sentence.spans.size()));
    for (const auto& span : sentence.spans) {
      binio::put_u32(out, span.start);
      binio::put_u32(out, span.end);
    }
    binio::put_f32s(out, sentence.data);
  }
  return out;
}

EmbeddingStore decode_store(std::string_view bytes) {
  if (bytes.size() < kMagic.size() || bytes.substr(0, kMagic.size()) != kMagic) {
    throw StoreError(StoreError::Kind::BadMagic, "bad magic: not an .swpe embedding store");
  }
  binio::Reader reader(bytes.substr(kMagic.size()));
  const auto truncated = [&](const std::string& where) {
    return StoreError(StoreError::Kind::Truncated, "truncated payload while reading " + where);
  };

  const auto version = reader.u32();
  if (!reader.ok()) throw truncated("header");
  if (version != kStoreVersion) {
    throw StoreError(StoreError::Kind::VersionMismatch,
                     "version mismatch: file has " + std::to_string(version) + ", expected " +
                         std::to_string(kStoreVersion));
  }
  EmbeddingStore store;
  store.num_layers = reader.u32();
  store.hidden = reader.u32();
  const auto num_sentences = reader.u32();
  if (!reader.ok()) throw truncated("header");

  store.sentences.reserve(std::min<std::size_t>(num_sentences, reader.remaining() / 8));
  for (std::uint32_t s = 0; s < num_sentences; ++s) {
    SentenceEmbeddings sentence;
    sentence.num_subwords = reader.u32();
    const auto num_words = reader.u32();
    if (!reader.ok() || reader.remaining() / 8 < num_words) {
      throw truncated("sentence " + std::to_string(s));
    }
    sentence.spans.resize(num_words);
    for (auto& span : sentence.spans) {
      span.start = reader.u32();
      span.end = reader.u32();
    }
    const auto count = payload_size(store, sentence.num_subwords);
    if (reader.remaining() / 4 < count) throw truncated("sentence " + std::to_string(s));
    sentence.data.resize(count);
    reader.f32s(sentence.data);
    if (!reader.ok()) throw truncated("sentence " + std::to_string(s));
    store.sentences.push_back(std::move(sentence));
  }
  if (reader.remaining() != 0) {
    throw StoreError(StoreError::Kind::Invalid,
                     std::to_string(reader.remaining()) + " trailing bytes after the last sentence");
  }
  validate_store(store);
  return store;
}

void write_store(const std::string& path, const EmbeddingStore& store) {
  binio::write_file(path, encode_store(store));
}

EmbeddingStore read_store(const std::string& path) { return decode_store(binio::read_file(path)); }

void validate_store(const EmbeddingStore& store) {
  for (std::size_t s = 0; s < store.sentences.size(); ++s) {
    const auto& sentence = store.sentences[s];
    const auto where = "sentence " + std::to_string(s);
    if (sentence.data.size() != payload_size(store, sentence.num_subwords)) {
      throw StoreError(StoreError::Kind::Invalid, where + ": payload does not match shape");
    }
    if (!spans_well_formed(sentence.spans, sentence.num_subwords)) {
      throw StoreError(StoreError::Kind::Invalid, where + ": spans are not sorted, disjoint and in range");
    }
    for (float v : sentence.data) {
      if (!std::isfinite(v)) throw StoreError(StoreError::Kind::Invalid, where + ": non-finite value");
    }
  }
}

Matrix<float> layer_view(const EmbeddingStore& store, std::size_t sentence_index, Layer layer) {
  if (sentence_index >= store.sentences.size()) {
    throw Error("sentence " + std::to_string(sentence_index) + " out of range");
  }
  if (!layer.is_sum() && layer.value() >= store.num_layers) {
    throw Error("layer " + std::to_string(layer.value()) + " out of range (store has " +
                std::to_string(store.num_layers) + ")");
  }
  const auto& sentence = store.sentences[sentence_index];
  const std::size_t slice = static_cast<std::size_t>(sentence.num_subwords) * store.hidden;
  Matrix<float> view(sentence.num_subwords, store.hidden);
  auto out = view.flat();
  if (!layer.is_sum()) {
    const auto begin = sentence.data.begin() + static_cast<std::ptrdiff_t>(layer.value() * slice);
    std::copy(begin, begin + static_cast<std::ptrdiff_t>(slice), out.begin());
    return view;
  }
  for (std::uint32_t l = 0; l < store.num_layers; ++l) {
    for (std::size_t i = 0; i < slice; ++i) out[i] += sentence.data[l * slice + i];
  }
  return view;
}

Matrix<float> span_rows(const Matrix<float>& view, Span span) {
  if (span.end > view.rows() || span.end <= span.start) throw ShapeError("span outside the view");
  Matrix<float> rows(span.size(), view.cols());
  for (std::uint32_t r = 0; r < span.size(); ++r) {
    std::copy_n(view.row(span.start + r).begin(), view.cols(), rows.row(r).begin());
  }
  return rows;
}

// ------------------------------------------------------------- synthesis

SignalPosition parse_signal_position(std::string_view text) {
  if (text == "first") return SignalPosition::First;
  if (text == "last") return SignalPosition::Last;
  if (text == "all") return SignalPosition::All;
  throw Error("signal position must be first, last or all");
}

namespace {

void check_fertility(std::span<const double> probs) {
  double mass = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0) || !std::isfinite(p)) throw Error("invalid distribution: negative or non-finite probability");
    mass += p;
  }
  if (std::abs(mass - 1.0) > 1e-6) throw Error("invalid distribution: fertility probabilities must sum to 1");
}

}  // namespace

std::vector<double> parse_fertility(std::string_view text) {
  std::vector<double> probs;
  std::size_t start = 0;
  while (start <= text.size()) {
    auto end = text.find(',', start);
    if (end == std::string_view::npos) end = text.size();
    const auto item = text.substr(start, end - start);
    const auto colon = item.find(':');
    if (colon == std::string_view::npos) throw Error("fertility entries look like pieces:probability");
    const auto pieces = parse_u32(item.substr(0, colon));
    if (pieces == 0) throw Error("invalid distribution: words need at least one subword");
    const double p = std::stod(std::string(item.substr(colon + 1)));
    if (probs.size() < pieces) probs.resize(pieces, 0.0);
    probs[pieces - 1] += p;
    start = end + 1;
  }
  check_fertility(probs);
  return probs;
}

SyntheticSplit synth_store(const SynthConfig& config, std::size_t num_sentences,
                           std::uint64_t stream) {
  check_fertility(config.fertility);
  const double mass = std::accumulate(config.fertility.begin(), config.fertility.end(), 0.0);
  if (config.num_classes < 2) throw Error("synthetic tasks need at least two classes");
  if (config.num_layers == 0 || config.hidden == 0 || config.words_per_sentence == 0) {
    throw Error("synthetic store needs positive layers, hidden size and sentence length");
  }

  // Unit class directions, shared by every stream of the same seed.
  Rng direction_rng(config.seed, 0);
  std::vector<std::vector<float>> directions(config.num_classes, std::vector<float>(config.hidden));
  for (auto& direction : directions) {
    double norm = 0.0;
    std::vector<double> raw(config.hidden);
    for (auto& v : raw) {
      v = direction_rng.normal();
      norm += v * v;
    }
    norm = std::sqrt(norm);
    for (std::size_t d = 0; d < config.hidden; ++d) direction[d] = static_cast<float>(raw[d] / norm);
  }

  Rng rng(config.seed, 1000 + stream);
  SyntheticSplit split;
  split.store.num_layers = config.num_layers;
  split.store.hidden = config.hidden;
  for (std::size_t s = 0; s < num_sentences; ++s) {
    SentenceEmbeddings sentence;
    ProbeExample example;
    std::vector<std::size_t> word_labels;
    for (std::size_t w = 0; w < config.words_per_sentence; ++w) {
      double draw = rng.uniform() * mass;
      std::uint32_t pieces = 1;
      for (std::size_t k = 0; k < config.fertility.size(); ++k) {
        if (draw < config.fertility[k] || k + 1 == config.fertility.size()) {
          pieces = static_cast<std::uint32_t>(k + 1);
          break;
        }
        draw -= config.fertility[k];
      }
      while (config.fertility[pieces - 1] == 0.0) --pieces;  // guard against rounding at the tail
      sentence.spans.push_back({sentence.num_subwords, sentence.num_subwords + pieces});
      sentence.num_subwords += pieces;
      const auto label = rng.below(config.num_classes);
      word_labels.push_back(label);
      example.tokens.push_back("w" + std::to_string(w));
      example.labels.push_back("c" + std::to_string(label));
    }

    const std::size_t slice = static_cast<std::size_t>(sentence.num_subwords) * config.hidden;
    sentence.data.resize(slice * config.num_layers);
    for (auto& v : sentence.data) v = static_cast<float>(config.noise * rng.normal());
    for (std::size_t w = 0; w < sentence.spans.size(); ++w) {
      const auto& span = sentence.spans[w];
      std::uint32_t first = span.start;
      std::uint32_t last = span.end;
      if (config.signal.position == SignalPosition::First) last = span.start + 1;
      if (config.signal.position == SignalPosition::Last) first = span.end - 1;
      const auto& direction = directions[word_labels[w]];
      for (std::uint32_t l = 0; l < config.num_layers; ++l) {
        for (std::uint32_t pos = first; pos < last; ++pos) {
          float* row = sentence.data.data() + l * slice + static_cast<std::size_t>(pos) * config.hidden;
          for (std::size_t d = 0; d < config.hidden; ++d) {
            row[d] += static_cast<float>(config.signal.strength) * direction[d];
          }
        }
      }
    }
    split.store.sentences.push_back(std::move(sentence));
    split.examples.push_back(std::move(example));
  }
  return split;
}

SyntheticCorpus synth_corpus(const SynthConfig& config, SplitSizes sentences) {
  auto train = synth_store(config, sentences.train, 0);
  auto dev = synth_store(config, sentences.dev, 1);
  auto test = synth_store(config, sentences.test, 2);
  SyntheticCorpus corpus;
  corpus.dataset.train = std::move(train.examples);
  corpus.dataset.dev = std::move(dev.examples);
  corpus.dataset.test = std::move(test.examples);
  for (std::size_t c = 0; c < config.num_classes; ++c) {
    corpus.dataset.classes.push_back("c" + std::to_string(c));
  }
  corpus.train = std::move(train.store);
  corpus.dev = std::move(dev.store);
  corpus.test = std::move(test.store);
  return corpus;
}

}  // namespace subpool
