#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace subpool {

using FeatureMap = std::map<std::string, std::string>;

/// One gold-tokenized sentence. Annotation vectors are either empty (absent)
/// or exactly as long as `tokens`.
struct RawSentence {
  std::vector<std::string> tokens;
  std::vector<std::string> upos;
  std::vector<FeatureMap> feats;
  std::vector<std::string> ner;

  friend bool operator==(const RawSentence&, const RawSentence&) = default;
};

// CoNLL-U: multiword ranges ("3-4") and empty nodes ("3.1") are skipped.
std::vector<RawSentence> parse_conllu(std::string_view text);
std::string serialize_conllu(std::span<const RawSentence> sentences);

// "token<TAB>tag" lines, blank-line separated. A WikiAnn "xx:" language
// prefix on the token is stripped and orphan I-X tags are promoted to B-X.
std::vector<RawSentence> parse_bio_tsv(std::string_view text);
std::string serialize_bio_tsv(std::span<const RawSentence> sentences);

std::vector<std::string> repair_bio(std::vector<std::string> tags);
bool is_well_formed_bio(std::span<const std::string> tags);

std::string lowercase_utf8(std::string_view text);
std::size_t utf8_length(std::string_view text);

/// A <language, tag, POS> probing task. `classes` may be left empty, in which
/// case the sampler discovers the label set from the corpus.
struct MorphTaskSpec {
  std::string language;
  std::string tag;
  std::string pos;
  std::vector<std::string> classes;
  std::size_t expected_classes = 0;

  std::string name() const;  // "Language_Tag_POS"
};

std::vector<MorphTaskSpec> parse_task_specs(std::string_view csv);
const MorphTaskSpec& find_task(std::span<const MorphTaskSpec> specs, std::string_view name);

struct ProbeExample {
  std::vector<std::string> tokens;
  std::optional<std::size_t> target_index;  // morphology only
  std::string label;                        // morphology only
  std::vector<std::string> labels;          // tagging only

  bool is_tagging() const noexcept { return !target_index.has_value(); }
  friend bool operator==(const ProbeExample&, const ProbeExample&) = default;
};

struct SplitSizes {
  std::size_t train = 0;
  std::size_t dev = 0;
  std::size_t test = 0;
};

struct ProbeDataset {
  std::vector<ProbeExample> train;
  std::vector<ProbeExample> dev;
  std::vector<ProbeExample> test;
  std::vector<std::string> classes;

  const std::vector<ProbeExample>& split(std::string_view name) const;
  friend bool operator==(const ProbeDataset&, const ProbeDataset&) = default;
};

inline constexpr std::size_t kMaxImbalance = 3;

/// Picks per-class counts summing to `total` such that the largest count is at
/// most kMaxImbalance times the smallest. Classes too rare to meet the bound
/// are dropped; the plan keeps as many classes as possible. Returns nullopt
/// when no plan with at least two classes exists.
std::optional<std::map<std::string, std::size_t>> plan_class_counts(
    const std::map<std::string, std::size_t>& available, std::size_t total);

ProbeDataset sample_morph(std::span<const RawSentence> sentences, const MorphTaskSpec& spec,
                          SplitSizes sizes, std::uint64_t seed);

enum class TagSource { Upos, Ner };

struct TaggingOptions {
  TagSource source = TagSource::Upos;
  std::size_t max_len = 40;
  std::size_t max_train = 10000;
  std::size_t dev = 2000;
  std::size_t test = 2000;
  bool dedup = false;
  std::optional<std::size_t> max_chars;
  std::uint64_t seed = 0;
};

ProbeDataset sample_tagging(std::span<const RawSentence> sentences, const TaggingOptions& options);

std::string examples_to_jsonl(std::span<const ProbeExample> examples);
std::vector<ProbeExample> examples_from_jsonl(std::string_view text);

// Writes train.jsonl, dev.jsonl, test.jsonl under `dir`.
void write_dataset(const std::string& dir, const ProbeDataset& dataset);
ProbeDataset read_dataset(const std::string& dir);

}  // namespace subpool
