#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <unordered_set>
#include <vector>

namespace subpool {

/// Half-open range [start, end) of subword positions belonging to one word.
struct Span {
  std::uint32_t start = 0;
  std::uint32_t end = 0;

  std::uint32_t size() const noexcept { return end - start; }
  friend bool operator==(const Span&, const Span&) = default;
};

/// Words with the subword span each one occupies. `subwords` is empty when
/// the alignment came from an external word-id stream.
struct AlignedSentence {
  std::vector<std::string> words;
  std::vector<Span> spans;
  std::vector<std::string> subwords;
};

// Sorted, non-empty, non-overlapping and in range.
bool spans_well_formed(std::span<const Span> spans, std::size_t num_subwords);
// Well formed and covering [0, num_subwords) without gaps.
bool spans_partition(std::span<const Span> spans, std::size_t num_subwords);

using Vocab = std::unordered_set<std::string>;

Vocab parse_vocab(std::string_view text);  // one subword per line

/// Greedy longest-match-first WordPiece over one pre-tokenized word.
std::vector<std::string> wordpiece_tokenize(std::string_view word, const Vocab& vocab,
                                            std::string_view unk = "[UNK]",
                                            std::string_view cont_prefix = "##",
                                            std::size_t max_chars = 100);

AlignedSentence align_words(std::span<const std::string> words, const Vocab& vocab,
                            std::string_view unk = "[UNK]", std::string_view cont_prefix = "##");

/// Word ids per subword position, null for special tokens. Ids must be
/// non-decreasing, dense from 0 and contiguous.
std::vector<Span> spans_from_word_ids(std::span<const std::optional<int>> word_ids);

struct TokenizationStats {
  double fertility = 0.0;
  double multi_rate = 0.0;
  std::optional<double> standalone_start_rate;
  std::size_t words = 0;
  std::size_t subwords = 0;
};

/// Table-2 style statistics. The standalone start rate is only reported when
/// every sentence carries its subword strings.
TokenizationStats tokenization_stats(std::span<const AlignedSentence> sentences,
                                     std::string_view start_symbol = "\xe2\x96\x81");

std::string stats_csv_header();
std::string stats_csv_row(std::string_view corpus, const TokenizationStats& stats);

}  // namespace subpool
