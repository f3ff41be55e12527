#include "subpool/align.hpp"

#include <cstdio>

#include "subpool/errors.hpp"

namespace subpool {

namespace {

// Byte offsets of code point boundaries, including text.size().
std::vector<std::size_t> char_boundaries(std::string_view text) {
  std::vector<std::size_t> bounds;
  for (std::size_t i = 0; i < text.size(); ++i) {
    if ((static_cast<unsigned char>(text[i]) & 0xc0) != 0x80) bounds.push_back(i);
  }
  bounds.push_back(text.size());
  return bounds;
}

}  // namespace

bool spans_well_formed(std::span<const Span> spans, std::size_t num_subwords) {
  std::uint32_t cursor = 0;
  for (const auto& span : spans) {
    if (span.start < cursor || span.end <= span.start || span.end > num_subwords) return false;
    cursor = span.end;
  }
  return true;
}

bool spans_partition(std::span<const Span> spans, std::size_t num_subwords) {
  std::uint32_t cursor = 0;
  for (const auto& span : spans) {
    if (span.start != cursor || span.end <= span.start) return false;
    cursor = span.end;
  }
  return cursor == num_subwords;
}

Vocab parse_vocab(std::string_view text) {
  Vocab vocab;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    auto line = text.substr(start, end - start);
    if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
    if (!line.empty()) vocab.emplace(line);
    start = end + 1;
  }
  return vocab;
}

std::vector<std::string> wordpiece_tokenize(std::string_view word, const Vocab& vocab,
                                            std::string_view unk, std::string_view cont_prefix,
                                            std::size_t max_chars) {
  const auto bounds = char_boundaries(word);
  const std::size_t num_chars = bounds.size() - 1;
  if (num_chars == 0 || num_chars > max_chars) return {std::string(unk)};

  std::vector<std::string> pieces;
  std::size_t start = 0;
  std::string candidate;
  while (start < num_chars) {
    std::size_t end = num_chars;
    bool matched = false;
    while (end > start) {
      candidate.clear();
      if (start > 0) candidate.append(cont_prefix);
      candidate.append(word.substr(bounds[start], bounds[end] - bounds[start]));
      if (vocab.contains(candidate)) {
        matched = true;
        break;
      }
      --end;
    }
    if (!matched) return {std::string(unk)};
    pieces.push_back(candidate);
    start = end;
  }
  return pieces;
}

AlignedSentence align_words(std::span<const std::string> words, const Vocab& vocab,
                            std::string_view unk, std::string_view cont_prefix) {
  AlignedSentence sentence;
  sentence.words.assign(words.begin(), words.end());
  for (const auto& word : words) {
    auto pieces = wordpiece_tokenize(word, vocab, unk, cont_prefix);
    const auto start = static_cast<std::uint32_t>(sentence.subwords.size());
    sentence.subwords.insert(sentence.subwords.end(), pieces.begin(), pieces.end());
    sentence.spans.push_back({start, static_cast<std::uint32_t>(sentence.subwords.size())});
  }
  return sentence;
}

std::vector<Span> spans_from_word_ids(std::span<const std::optional<int>> word_ids) {
  std::vector<Span> spans;
  int expected_next = 0;
  bool open = false;
  for (std::size_t pos = 0; pos < word_ids.size(); ++pos) {
    const auto& id = word_ids[pos];
    if (!id) {
      open = false;
      continue;
    }
    const auto p = static_cast<std::uint32_t>(pos);
    if (open && *id == expected_next - 1) {
      spans.back().end = p + 1;
      continue;
    }
    if (*id < expected_next) {
      throw AlignmentError("word " + std::to_string(*id) + " is not contiguous (position " +
                           std::to_string(pos) + ")");
    }
    if (*id != expected_next) {
      throw AlignmentError("word id " + std::to_string(*id) + " at position " +
                           std::to_string(pos) + " breaks the expected order (next id " +
                           std::to_string(expected_next) + ")");
    }
    spans.push_back({p, p + 1});
    ++expected_next;
    open = true;
  }
  return spans;
}

TokenizationStats tokenization_stats(std::span<const AlignedSentence> sentences,
                                     std::string_view start_symbol) {
  TokenizationStats stats;
  std::size_t multi = 0;
  std::size_t standalone = 0;
  bool have_subwords = true;
  for (const auto& sentence : sentences) {
    if (sentence.subwords.empty() && !sentence.spans.empty()) have_subwords = false;
    for (const auto& span : sentence.spans) {
      ++stats.words;
      stats.subwords += span.size();
      if (span.size() >= 2) ++multi;
      if (!sentence.subwords.empty() && span.start < sentence.subwords.size() &&
          sentence.subwords[span.start] == start_symbol) {
        ++standalone;
      }
    }
  }
  if (stats.words == 0) throw Error("tokenization statistics need at least one word");
  const auto words = static_cast<double>(stats.words);
  stats.fertility = static_cast<double>(stats.subwords) / words;
  stats.multi_rate = static_cast<double>(multi) / words;
  if (have_subwords) stats.standalone_start_rate = static_cast<double>(standalone) / words;
  return stats;
}

std::string stats_csv_header() { return "corpus,fertility,multi_rate,standalone_start_rate\n"; }

std::string stats_csv_row(std::string_view corpus, const TokenizationStats& stats) {
  char buffer[128];
  std::snprintf(buffer, sizeof buffer, ",%.6f,%.6f,", stats.fertility, stats.multi_rate);
  std::string row(corpus);
  row += buffer;
  if (stats.standalone_start_rate) {
    std::snprintf(buffer, sizeof buffer, "%.6f", *stats.standalone_start_rate);
    row += buffer;
  }
  row += '\n';
  return row;
}

}  // namespace subpool
