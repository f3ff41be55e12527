#include "subpool/corpus.hpp"

#include <algorithm>
#include <array>
#include <filesystem>
#include <numeric>
#include <set>
#include <sstream>
#include <unordered_map>
#include <unordered_set>

#include <json.hpp>

#include "subpool/binary_io.hpp"
#include "subpool/errors.hpp"
#include "subpool/rng.hpp"

namespace subpool {

namespace {

std::vector<std::string_view> split_on(std::string_view text, char sep) {
  std::vector<std::string_view> parts;
  std::size_t start = 0;
  while (true) {
    const auto pos = text.find(sep, start);
    if (pos == std::string_view::npos) {
      parts.push_back(text.substr(start));
      return parts;
    }
    parts.push_back(text.substr(start, pos - start));
    start = pos + 1;
  }
}

std::string_view strip_cr(std::string_view line) {
  if (!line.empty() && line.back() == '\r') line.remove_suffix(1);
  return line;
}

bool is_blank(std::string_view line) {
  return line.find_first_not_of(" \t") == std::string_view::npos;
}

// Iterates lines with 1-based numbers; the final line need not end in '\n'.
template <typename Fn>
void for_each_line(std::string_view text, Fn&& fn) {
  std::size_t line_no = 0;
  std::size_t start = 0;
  while (start < text.size()) {
    auto end = text.find('\n', start);
    if (end == std::string_view::npos) end = text.size();
    fn(++line_no, strip_cr(text.substr(start, end - start)));
    start = end + 1;
  }
}

FeatureMap parse_feats(std::string_view column, std::size_t line_no) {
  FeatureMap feats;
  if (column == "_") return feats;
  for (auto item : split_on(column, '|')) {
    const auto eq = item.find('=');
    if (eq == std::string_view::npos || eq == 0) {
      throw ParseError(line_no, "malformed FEATS entry '" + std::string(item) + "'");
    }
    feats.emplace(std::string(item.substr(0, eq)), std::string(item.substr(eq + 1)));
  }
  return feats;
}

std::string format_feats(const FeatureMap& feats) {
  if (feats.empty()) return "_";
  std::string out;
  for (const auto& [key, value] : feats) {
    if (!out.empty()) out += '|';
    out += key;
    out += '=';
    out += value;
  }
  return out;
}

bool is_plain_token_id(std::string_view id) {
  return !id.empty() &&
         std::all_of(id.begin(), id.end(), [](char c) { return c >= '0' && c <= '9'; });
}

// WikiAnn prefixes every token with its language code, e.g. "en:Paris".
std::string_view strip_language_prefix(std::string_view token) {
  const auto colon = token.find(':');
  if (colon < 2 || colon > 3 || colon + 1 >= token.size()) return token;
  for (std::size_t i = 0; i < colon; ++i) {
    if (token[i] < 'a' || token[i] > 'z') return token;
  }
  return token.substr(colon + 1);
}

std::string_view entity_type(std::string_view tag) { return tag.size() > 2 ? tag.substr(2) : ""; }

void append_codepoint(std::string& out, char32_t cp) {
  if (cp < 0x80) {
    out.push_back(static_cast<char>(cp));
  } else if (cp < 0x800) {
    out.push_back(static_cast<char>(0xc0 | (cp >> 6)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  } else if (cp < 0x10000) {
    out.push_back(static_cast<char>(0xe0 | (cp >> 12)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  } else {
    out.push_back(static_cast<char>(0xf0 | (cp >> 18)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 12) & 0x3f)));
    out.push_back(static_cast<char>(0x80 | ((cp >> 6) & 0x3f)));
    out.push_back(static_cast<char>(0x80 | (cp & 0x3f)));
  }
}

// Decodes one code point starting at text[i]; nullopt for an invalid sequence,
// in which case a single byte is consumed.
std::optional<char32_t> decode_at(std::string_view text, std::size_t& i) {
  const auto lead = static_cast<unsigned char>(text[i]);
  std::size_t extra = 0;
  char32_t cp = lead;
  if (lead < 0x80) {
    ++i;
    return cp;
  } else if (lead >= 0xf0 && lead < 0xf8) {
    extra = 3;
    cp = lead & 0x07;
  } else if (lead >= 0xe0 && lead < 0xf0) {
    extra = 2;
    cp = lead & 0x0f;
  } else if (lead >= 0xc0 && lead < 0xe0) {
    extra = 1;
    cp = lead & 0x1f;
  }
  if (extra == 0 || i + extra >= text.size()) {
    ++i;
    return std::nullopt;
  }
  for (std::size_t k = 1; k <= extra; ++k) {
    const auto byte = static_cast<unsigned char>(text[i + k]);
    if ((byte & 0xc0) != 0x80) {
      ++i;
      return std::nullopt;
    }
    cp = (cp << 6) | (byte & 0x3f);
  }
  i += extra + 1;
  return cp;
}

char32_t to_lower(char32_t cp) {
  if (cp >= 'A' && cp <= 'Z') return cp + 32;
  if (cp < 0x80) return cp;
  if (cp >= 0xc0 && cp <= 0xde && cp != 0xd7) return cp + 32;
  if (cp >= 0x100 && cp <= 0x137) return cp | 1;
  if (cp >= 0x139 && cp <= 0x148) return (cp % 2 == 1) ? cp + 1 : cp;
  if (cp >= 0x14a && cp <= 0x177) return cp | 1;
  if (cp == 0x178) return 0xff;
  if (cp >= 0x179 && cp <= 0x17e) return (cp % 2 == 1) ? cp + 1 : cp;
  if (cp >= 0x391 && cp <= 0x3a9 && cp != 0x3a2) return cp + 32;
  if (cp == 0x386) return 0x3ac;
  if (cp >= 0x388 && cp <= 0x38a) return cp + 37;
  if (cp == 0x38c) return 0x3cc;
  if (cp == 0x38e || cp == 0x38f) return cp + 63;
  if (cp == 0x3aa || cp == 0x3ab) return cp + 32;
  if (cp >= 0x400 && cp <= 0x40f) return cp + 80;
  if (cp >= 0x410 && cp <= 0x42f) return cp + 32;
  return cp;
}

struct Candidate {
  std::size_t sentence;
  std::size_t token;
  std::string label;
};

std::string describe_counts(const std::map<std::string, std::size_t>& counts) {
  std::string out;
  for (const auto& [label, count] : counts) {
    if (!out.empty()) out += ' ';
    out += label + "=" + std::to_string(count);
  }
  return out;
}

constexpr std::array<const char*, 3> kSplitNames = {"train", "dev", "test"};

}  // namespace

// ---------------------------------------------------------------- CoNLL-U

std::vector<RawSentence> parse_conllu(std::string_view text) {
  std::vector<RawSentence> sentences;
  RawSentence current;
  auto flush = [&] {
    if (!current.tokens.empty()) sentences.push_back(std::move(current));
    current = RawSentence{};
  };
  for_each_line(text, [&](std::size_t line_no, std::string_view line) {
    if (is_blank(line)) {
      flush();
      return;
    }
    if (line.front() == '#') return;
    const auto columns = split_on(line, '\t');
    if (columns.size() != 10) {
      throw ParseError(line_no, "expected 10 tab-separated columns, found " +
                                    std::to_string(columns.size()));
    }
    if (!is_plain_token_id(columns[0])) return;  // "3-4" ranges, "3.1" empty nodes
    current.tokens.emplace_back(columns[1]);
    current.upos.emplace_back(columns[3]);
    current.feats.push_back(parse_feats(columns[5], line_no));
  });
  flush();
  return sentences;
}

std::string serialize_conllu(std::span<const RawSentence> sentences) {
  std::ostringstream out;
  for (const auto& sentence : sentences) {
    for (std::size_t i = 0; i < sentence.tokens.size(); ++i) {
      const std::string upos = sentence.upos.empty() ? "_" : sentence.upos[i];
      const std::string feats = sentence.feats.empty() ? "_" : format_feats(sentence.feats[i]);
      out << (i + 1) << '\t' << sentence.tokens[i] << "\t_\t" << upos << "\t_\t" << feats
          << "\t_\t_\t_\t_\n";
    }
    out << '\n';
  }
  return out.str();
}

// ---------------------------------------------------------------- BIO TSV

bool is_well_formed_bio(std::span<const std::string> tags) {
  std::string_view previous = "O";
  for (const auto& tag : tags) {
    if (tag.rfind("I-", 0) == 0) {
      if (previous == "O" || entity_type(previous) != entity_type(tag)) return false;
    }
    previous = tag;
  }
  return true;
}

std::vector<std::string> repair_bio(std::vector<std::string> tags) {
  std::string previous = "O";
  for (auto& tag : tags) {
    if (tag.rfind("I-", 0) == 0 &&
        (previous == "O" || entity_type(previous) != entity_type(tag))) {
      tag[0] = 'B';
    }
    previous = tag;
  }
  return tags;
}

std::vector<RawSentence> parse_bio_tsv(std::string_view text) {
  std::vector<RawSentence> sentences;
  RawSentence current;
  auto flush = [&] {
    if (!current.tokens.empty()) {
      current.ner = repair_bio(std::move(current.ner));
      sentences.push_back(std::move(current));
    }
    current = RawSentence{};
  };
  for_each_line(text, [&](std::size_t line_no, std::string_view line) {
    if (is_blank(line)) {
      flush();
      return;
    }
    const auto tab = line.find('\t');
    if (tab == std::string_view::npos) throw ParseError(line_no, "missing tab separator");
    current.tokens.emplace_back(strip_language_prefix(line.substr(0, tab)));
    current.ner.emplace_back(line.substr(tab + 1));
  });
  flush();
  return sentences;
}

std::string serialize_bio_tsv(std::span<const RawSentence> sentences) {
  std::string out;
  for (const auto& sentence : sentences) {
    for (std::size_t i = 0; i < sentence.tokens.size(); ++i) {
      out += sentence.tokens[i];
      out += '\t';
      out += sentence.ner.empty() ? std::string("O") : sentence.ner[i];
      out += '\n';
    }
    out += '\n';
  }
  return out;
}

// ---------------------------------------------------------------- text

std::string lowercase_utf8(std::string_view text) {
  std::string out;
  out.reserve(text.size());
  std::size_t i = 0;
  while (i < text.size()) {
    const std::size_t start = i;
    if (const auto cp = decode_at(text, i)) {
      append_codepoint(out, to_lower(*cp));
    } else {
      out.push_back(text[start]);
    }
  }
  return out;
}

std::size_t utf8_length(std::string_view text) {
  return static_cast<std::size_t>(std::count_if(text.begin(), text.end(), [](char c) {
    return (static_cast<unsigned char>(c) & 0xc0) != 0x80;
  }));
}

// ---------------------------------------------------------------- tasks

std::string MorphTaskSpec::name() const { return language + "_" + tag + "_" + pos; }

std::vector<MorphTaskSpec> parse_task_specs(std::string_view csv) {
  std::vector<MorphTaskSpec> specs;
  bool header = true;
  for_each_line(csv, [&](std::size_t line_no, std::string_view line) {
    if (is_blank(line)) return;
    if (header) {
      header = false;
      return;
    }
    const auto columns = split_on(line, ',');
    if (columns.size() < 4) throw ParseError(line_no, "task spec needs language,tag,pos,classes");
    MorphTaskSpec spec{std::string(columns[0]), std::string(columns[1]), std::string(columns[2]),
                       {}, 0};
    spec.expected_classes = std::stoul(std::string(columns[3]));
    if (spec.expected_classes < 2) throw ParseError(line_no, "a task needs at least two classes");
    specs.push_back(std::move(spec));
  });
  return specs;
}

const MorphTaskSpec& find_task(std::span<const MorphTaskSpec> specs, std::string_view name) {
  const auto wanted = lowercase_utf8(name);
  for (const auto& spec : specs) {
    if (lowercase_utf8(spec.name()) == wanted) return spec;
  }
  throw Error("unknown task '" + std::string(name) + "'");
}

const std::vector<ProbeExample>& ProbeDataset::split(std::string_view name) const {
  if (name == "train") return train;
  if (name == "dev") return dev;
  if (name == "test") return test;
  throw Error("unknown split '" + std::string(name) + "'");
}

// ---------------------------------------------------------------- sampling

std::optional<std::map<std::string, std::size_t>> plan_class_counts(
    const std::map<std::string, std::size_t>& available, std::size_t total) {
  std::size_t best_classes = 0;
  std::size_t best_floor = 0;
  for (std::size_t floor = 1; floor <= total; ++floor) {
    std::size_t kept = 0;
    std::size_t capacity = 0;
    for (const auto& [label, count] : available) {
      if (count < floor) continue;
      ++kept;
      capacity += std::min(count, kMaxImbalance * floor);
    }
    if (kept < 2) break;  // kept only shrinks as the floor rises
    if (kept * floor > total || capacity < total) continue;
    if (kept >= best_classes) {  // prefer more classes, then a higher floor
      best_classes = kept;
      best_floor = floor;
    }
  }
  if (best_classes < 2) return std::nullopt;

  std::map<std::string, std::size_t> plan;
  std::size_t assigned = 0;
  for (const auto& [label, count] : available) {
    if (count >= best_floor) {
      plan[label] = best_floor;
      assigned += best_floor;
    }
  }
  // Round-robin top-up keeps the counts as even as availability allows.
  while (assigned < total) {
    bool progressed = false;
    for (auto& [label, count] : plan) {
      if (assigned == total) break;
      if (count < std::min(available.at(label), kMaxImbalance * best_floor)) {
        ++count;
        ++assigned;
        progressed = true;
      }
    }
    if (!progressed) return std::nullopt;
  }
  return plan;
}

ProbeDataset sample_morph(std::span<const RawSentence> sentences, const MorphTaskSpec& spec,
                          SplitSizes sizes, std::uint64_t seed) {
  const std::array<std::size_t, 3> wanted = {sizes.train, sizes.dev, sizes.test};
  const std::size_t total_wanted = sizes.train + sizes.dev + sizes.test;
  const std::set<std::string> allowed(spec.classes.begin(), spec.classes.end());

  // One candidate target per sentence.
  Rng pick_rng(seed, 1);
  std::vector<Candidate> candidates;
  for (std::size_t s = 0; s < sentences.size(); ++s) {
    const auto& sentence = sentences[s];
    if (sentence.upos.size() != sentence.tokens.size() ||
        sentence.feats.size() != sentence.tokens.size()) {
      continue;
    }
    std::vector<std::size_t> eligible;
    for (std::size_t t = 0; t < sentence.tokens.size(); ++t) {
      if (sentence.upos[t] != spec.pos) continue;
      const auto it = sentence.feats[t].find(spec.tag);
      if (it == sentence.feats[t].end()) continue;
      if (!allowed.empty() && !allowed.contains(it->second)) continue;
      eligible.push_back(t);
    }
    if (eligible.empty()) continue;
    const auto t = eligible[pick_rng.below(eligible.size())];
    candidates.push_back({s, t, sentence.feats[t].at(spec.tag)});
  }

  const std::string task = spec.name();
  if (candidates.size() < total_wanted) {
    throw SamplingError("cannot satisfy sizes for " + task + ": binding constraint is corpus size (" +
                        std::to_string(candidates.size()) + " sentences with a " + spec.pos +
                        " carrying " + spec.tag + ", " + std::to_string(total_wanted) +
                        " requested)");
  }

  std::map<std::string, std::size_t> global_counts;
  for (const auto& c : candidates) ++global_counts[c.label];
  const auto global_plan = plan_class_counts(global_counts, total_wanted);
  if (!global_plan) {
    throw SamplingError("cannot satisfy sizes for " + task +
                        ": binding constraint is the 3:1 class imbalance cap (" +
                        describe_counts(global_counts) + ")");
  }
  std::vector<std::string> classes;
  for (const auto& [label, count] : *global_plan) classes.push_back(label);

  // Group surviving candidates by lowercased target form.
  std::vector<std::string> form_order;
  std::unordered_map<std::string, std::vector<std::size_t>> by_form;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (!global_plan->contains(candidates[i].label)) continue;
    auto form = lowercase_utf8(sentences[candidates[i].sentence].tokens[candidates[i].token]);
    auto [it, inserted] = by_form.try_emplace(form);
    if (inserted) form_order.push_back(form);
    it->second.push_back(i);
  }
  Rng form_rng(seed, 2);
  form_rng.shuffle(std::span<std::string>(form_order));

  // Each split fills toward an even per-class quota; forms go to the split
  // whose quota for the form's labels is least filled, train winning ties.
  // Dev and test stop claiming once filled; the surplus goes to train.
  std::array<std::size_t, 3> per_class_need{};
  for (std::size_t s = 0; s < 3; ++s) {
    per_class_need[s] = (wanted[s] + classes.size() - 1) / classes.size();
  }
  std::array<std::map<std::string, std::size_t>, 3> pool_counts;
  std::array<std::vector<std::size_t>, 3> pools;
  for (const auto& form : form_order) {
    const auto& members = by_form.at(form);
    std::set<std::string> labels;
    for (auto i : members) labels.insert(candidates[i].label);

    std::size_t chosen = 0;
    double best_fill = 1.0;
    bool found = false;
    for (std::size_t s = 0; s < 3; ++s) {
      if (per_class_need[s] == 0) continue;
      double fill = 1.0;
      for (const auto& label : labels) {
        fill = std::min(fill, static_cast<double>(pool_counts[s][label]) /
                                  static_cast<double>(per_class_need[s]));
      }
      if (fill < best_fill) {
        best_fill = fill;
        chosen = s;
        found = true;
      }
    }
    if (!found) chosen = 0;
    for (auto i : members) {
      pools[chosen].push_back(i);
      ++pool_counts[chosen][candidates[i].label];
    }
  }

  ProbeDataset dataset;
  dataset.classes = classes;
  std::array<std::vector<ProbeExample>*, 3> outputs = {&dataset.train, &dataset.dev, &dataset.test};
  for (std::size_t s = 0; s < 3; ++s) {
    if (wanted[s] == 0) continue;
    const std::string split = kSplitNames[s];
    if (pools[s].size() < wanted[s]) {
      throw SamplingError("cannot satisfy sizes for " + task +
                          ": binding constraint is target-word disjointness (split " + split +
                          " has " + std::to_string(pools[s].size()) + " candidates, needs " +
                          std::to_string(wanted[s]) + ")");
    }
    const auto plan = plan_class_counts(pool_counts[s], wanted[s]);
    if (!plan) {
      throw SamplingError("cannot satisfy sizes for " + task +
                          ": binding constraint is the 3:1 class imbalance cap in split " + split +
                          " (" + describe_counts(pool_counts[s]) + ")");
    }
    std::map<std::string, std::vector<std::size_t>> by_label;
    for (auto i : pools[s]) by_label[candidates[i].label].push_back(i);
    Rng split_rng(seed, 10 + s);
    std::vector<std::size_t> selected;
    for (auto& [label, members] : by_label) {
      const auto it = plan->find(label);
      if (it == plan->end()) continue;
      split_rng.shuffle(std::span<std::size_t>(members));
      selected.insert(selected.end(), members.begin(), members.begin() + it->second);
    }
    std::sort(selected.begin(), selected.end());
    for (auto i : selected) {
      const auto& c = candidates[i];
      outputs[s]->push_back({sentences[c.sentence].tokens, c.token, c.label, {}});
    }
  }
  return dataset;
}

ProbeDataset sample_tagging(std::span<const RawSentence> sentences, const TaggingOptions& options) {
  std::vector<std::size_t> kept;
  std::set<std::vector<std::string>> seen;
  std::size_t too_long = 0;
  std::size_t duplicates = 0;
  for (std::size_t s = 0; s < sentences.size(); ++s) {
    const auto& sentence = sentences[s];
    const auto& labels = options.source == TagSource::Upos ? sentence.upos : sentence.ner;
    if (sentence.tokens.empty() || labels.size() != sentence.tokens.size()) continue;
    bool over = sentence.tokens.size() > options.max_len;
    if (options.max_chars) {
      std::size_t chars = 0;
      for (const auto& token : sentence.tokens) chars += utf8_length(token);
      over = over || chars > *options.max_chars;
    }
    if (over) {
      ++too_long;
      continue;
    }
    if (options.dedup && !seen.insert(sentence.tokens).second) {
      ++duplicates;
      continue;
    }
    kept.push_back(s);
  }

  const std::size_t held_out = options.dev + options.test;
  if (kept.size() <= held_out || (options.max_train == 0)) {
    std::string why = "length filter removed " + std::to_string(too_long);
    if (options.dedup) why += ", dedup removed " + std::to_string(duplicates);
    throw SamplingError("cannot satisfy sizes: binding constraint is corpus size after filtering (" +
                        std::to_string(kept.size()) + " sentences left, " + why + "; dev+test need " +
                        std::to_string(held_out) + " plus at least one train sentence)");
  }

  Rng rng(options.seed, 3);
  rng.shuffle(std::span<std::size_t>(kept));
  const std::size_t train_size = std::min(options.max_train, kept.size() - held_out);

  ProbeDataset dataset;
  std::set<std::string> classes;
  auto take = [&](std::size_t begin, std::size_t count, std::vector<ProbeExample>& out) {
    std::vector<std::size_t> chosen(kept.begin() + begin, kept.begin() + begin + count);
    std::sort(chosen.begin(), chosen.end());
    for (auto s : chosen) {
      const auto& sentence = sentences[s];
      const auto& labels = options.source == TagSource::Upos ? sentence.upos : sentence.ner;
      classes.insert(labels.begin(), labels.end());
      out.push_back({sentence.tokens, std::nullopt, {}, labels});
    }
  };
  take(0, options.dev, dataset.dev);
  take(options.dev, options.test, dataset.test);
  take(held_out, train_size, dataset.train);
  dataset.classes.assign(classes.begin(), classes.end());
  return dataset;
}

// ---------------------------------------------------------------- JSON lines

std::string examples_to_jsonl(std::span<const ProbeExample> examples) {
  std::string out;
  for (const auto& example : examples) {
    nlohmann::json record;
    record["tokens"] = example.tokens;
    if (example.target_index) {
      record["target_index"] = *example.target_index;
      record["label"] = example.label;
    } else {
      record["labels"] = example.labels;
    }
    out += record.dump();
    out += '\n';
  }
  return out;
}

std::vector<ProbeExample> examples_from_jsonl(std::string_view text) {
  std::vector<ProbeExample> examples;
  for_each_line(text, [&](std::size_t line_no, std::string_view line) {
    if (is_blank(line)) return;
    try {
      const auto record = nlohmann::json::parse(line);
      ProbeExample example;
      example.tokens = record.at("tokens").get<std::vector<std::string>>();
      if (record.contains("target_index")) {
        example.target_index = record.at("target_index").get<std::size_t>();
        example.label = record.at("label").get<std::string>();
        if (*example.target_index >= example.tokens.size()) {
          throw ParseError(line_no, "target_index out of range");
        }
      } else {
        example.labels = record.at("labels").get<std::vector<std::string>>();
        if (example.labels.size() != example.tokens.size()) {
          throw ParseError(line_no, "labels and tokens differ in length");
        }
      }
      examples.push_back(std::move(example));
    } catch (const nlohmann::json::exception& e) {
      throw ParseError(line_no, e.what());
    }
  });
  return examples;
}

void write_dataset(const std::string& dir, const ProbeDataset& dataset) {
  std::filesystem::create_directories(dir);
  for (const char* split : kSplitNames) {
    binio::write_file(dir + "/" + split + ".jsonl", examples_to_jsonl(dataset.split(split)));
  }
}

ProbeDataset read_dataset(const std::string& dir) {
  ProbeDataset dataset;
  dataset.train = examples_from_jsonl(binio::read_file(dir + "/train.jsonl"));
  dataset.dev = examples_from_jsonl(binio::read_file(dir + "/dev.jsonl"));
  dataset.test = examples_from_jsonl(binio::read_file(dir + "/test.jsonl"));
  std::set<std::string> classes;
  for (const auto* split : {&dataset.train, &dataset.dev, &dataset.test}) {
    for (const auto& example : *split) {
      if (example.target_index) {
        classes.insert(example.label);
      } else {
        classes.insert(example.labels.begin(), example.labels.end());
      }
    }
  }
  dataset.classes.assign(classes.begin(), classes.end());
  return dataset;
}

}  // namespace subpool
