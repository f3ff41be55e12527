#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "subpool/align.hpp"
#include "subpool/corpus.hpp"
#include "subpool/matrix.hpp"

namespace subpool {

/// Either one layer index or the sum over every layer.
class Layer {
 public:
  static Layer sum() { return Layer(true, 0); }
  static Layer index(std::uint32_t i) { return Layer(false, i); }
  static Layer parse(std::string_view text);  // "sum" or a decimal index

  bool is_sum() const noexcept { return sum_; }
  std::uint32_t value() const noexcept { return index_; }
  std::string to_string() const;

  friend bool operator==(const Layer&, const Layer&) = default;

 private:
  Layer(bool sum, std::uint32_t index) : sum_(sum), index_(index) {}
  bool sum_;
  std::uint32_t index_;
};

/// Hidden states of one sentence: layer-major [num_layers x num_subwords x hidden].
struct SentenceEmbeddings {
  std::uint32_t num_subwords = 0;
  std::vector<Span> spans;
  std::vector<float> data;

  friend bool operator==(const SentenceEmbeddings&, const SentenceEmbeddings&) = default;
};

struct EmbeddingStore {
  std::uint32_t num_layers = 0;
  std::uint32_t hidden = 0;
  std::vector<SentenceEmbeddings> sentences;

  friend bool operator==(const EmbeddingStore&, const EmbeddingStore&) = default;
};

inline constexpr std::uint32_t kStoreVersion = 1;

// .swpe layout, little-endian: "SWPE", u32 version, u32 num_layers, u32 hidden,
// u32 num_sentences, then per sentence u32 num_subwords, u32 num_words,
// num_words x (u32 start, u32 end) and the layer-major f32 payload.
std::string encode_store(const EmbeddingStore& store);
EmbeddingStore decode_store(std::string_view bytes);

void write_store(const std::string& path, const EmbeddingStore& store);
EmbeddingStore read_store(const std::string& path);

/// Throws StoreError(Invalid) on inconsistent shapes, bad spans or non-finite values.
void validate_store(const EmbeddingStore& store);

/// [num_subwords x hidden] slice of one layer, or the left-to-right f32 sum of
/// all layers.
Matrix<float> layer_view(const EmbeddingStore& store, std::size_t sentence, Layer layer);

/// Rows [span.start, span.end) of a layer view.
Matrix<float> span_rows(const Matrix<float>& view, Span span);

// ------------------------------------------------------------- synthesis

enum class SignalPosition { First, Last, All };

SignalPosition parse_signal_position(std::string_view text);

/// A label-dependent direction added to the chosen subword(s) of each word.
struct SignalSpec {
  SignalPosition position = SignalPosition::Last;
  double strength = 6.0;
};

struct SynthConfig {
  std::uint64_t seed = 0;
  std::size_t words_per_sentence = 8;
  // fertility[k] is the probability of a word having k + 1 subwords.
  std::vector<double> fertility = {0.0, 0.5, 0.3, 0.2};
  std::uint32_t num_layers = 13;
  std::uint32_t hidden = 64;
  std::size_t num_classes = 3;
  double noise = 1.0;
  SignalSpec signal;
};

/// "2:0.5,3:0.3,4:0.2" -> piece-count probabilities.
std::vector<double> parse_fertility(std::string_view text);

struct SyntheticSplit {
  EmbeddingStore store;
  std::vector<ProbeExample> examples;  // tagging form: one label per word
};

/// Sentences drawn from `stream`; class directions depend on the seed only,
/// so splits drawn from different streams share them.
SyntheticSplit synth_store(const SynthConfig& config, std::size_t num_sentences,
                           std::uint64_t stream = 0);

struct SyntheticCorpus {
  ProbeDataset dataset;
  EmbeddingStore train;
  EmbeddingStore dev;
  EmbeddingStore test;
};

SyntheticCorpus synth_corpus(const SynthConfig& config, SplitSizes sentences);

}  // namespace subpool
