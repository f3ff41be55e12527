// Command-line front end: sample, stats, synth, train, analyze, verify-fixtures.

#include <algorithm>
#include <atomic>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "subpool/align.hpp"
#include "subpool/analysis.hpp"
#include "subpool/binary_io.hpp"
#include "subpool/corpus.hpp"
#include "subpool/embed.hpp"
#include "subpool/errors.hpp"
#include "subpool/pool.hpp"
#include "subpool/probe.hpp"

#ifndef SUBPOOL_FIXTURE_DIR
#define SUBPOOL_FIXTURE_DIR "fixtures"
#endif

namespace fs = std::filesystem;
using json = nlohmann::json;
using namespace subpool;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kDataError = 2, kVerificationFailed = 3 };

struct UsageError : Error {
  using Error::Error;
};

void fail_line(std::string_view kind, std::string_view message) {
  std::cerr << json{{"error", kind}, {"message", message}}.dump() << '\n';
}

void append_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::app);
  if (!out) throw IoError("cannot open " + path + " for appending");
  out << text;
  if (!out) throw IoError("cannot write " + path);
}

Layer parse_layer_flag(const std::string& text) {
  const auto layer = Layer::parse(text);
  if (!layer.is_sum() && layer.value() > 12) throw UsageError("--layer must be 0..12 or sum, got " + text);
  return layer;
}

// ------------------------------------------------------------- sample

struct SampleArgs {
  std::string kind = "morph";
  std::string input;
  std::string task;
  std::string tasks_file = std::string(SUBPOOL_FIXTURE_DIR) + "/morph_tasks.csv";
  std::size_t train = 2000;
  std::size_t dev = 200;
  std::size_t test = 200;
  std::size_t max_len = 40;
  std::size_t max_train = 10000;
  std::size_t max_chars = 0;
  bool dedup = false;
  std::uint64_t seed = 0;
  std::string out;
};

void run_sample(const SampleArgs& a) {
  const auto text = binio::read_file(a.input);
  ProbeDataset dataset;
  if (a.kind == "morph") {
    if (a.task.empty()) throw UsageError("sample morph needs --task");
    const auto specs = parse_task_specs(binio::read_file(a.tasks_file));
    const auto sentences = parse_conllu(text);
    dataset = sample_morph(sentences, find_task(specs, a.task), {a.train, a.dev, a.test}, a.seed);
  } else {
    TaggingOptions options;
    options.source = a.kind == "ner" ? TagSource::Ner : TagSource::Upos;
    options.max_len = a.max_len;
    options.max_train = a.max_train;
    options.dev = a.dev;
    options.test = a.test;
    options.dedup = a.dedup;
    if (a.max_chars > 0) options.max_chars = a.max_chars;
    options.seed = a.seed;
    const auto sentences = a.kind == "ner" ? parse_bio_tsv(text) : parse_conllu(text);
    dataset = sample_tagging(sentences, options);
  }
  write_dataset(a.out, dataset);
  std::cout << json{{"train", dataset.train.size()},
                    {"dev", dataset.dev.size()},
                    {"test", dataset.test.size()},
                    {"classes", dataset.classes}}
                   .dump()
            << '\n';
}

// ------------------------------------------------------------- stats

struct StatsArgs {
  std::vector<std::string> stores;
  std::string conllu;
  std::string vocab;
  std::string name;
  std::string start_symbol = "\xe2\x96\x81";
  std::string out;
};

void run_stats(const StatsArgs& a) {
  std::vector<AlignedSentence> aligned;
  if (!a.conllu.empty()) {
    if (a.vocab.empty()) throw UsageError("stats --conllu needs --vocab");
    const auto vocab = parse_vocab(binio::read_file(a.vocab));
    for (const auto& sentence : parse_conllu(binio::read_file(a.conllu))) {
      aligned.push_back(align_words(sentence.tokens, vocab));
    }
  } else if (!a.stores.empty()) {
    for (const auto& path : a.stores) {
      const auto store = read_store(path);
      for (const auto& sentence : store.sentences) {
        AlignedSentence s;
        s.spans = sentence.spans;
        s.words.resize(sentence.spans.size());
        aligned.push_back(std::move(s));
      }
    }
  } else {
    throw UsageError("stats needs --store or --conllu");
  }
  const auto stats = tokenization_stats(aligned, a.start_symbol);
  const std::string name = a.name.empty() ? (a.conllu.empty() ? a.stores.front() : a.conllu) : a.name;
  if (a.out.empty()) {
    std::cout << stats_csv_header() << stats_csv_row(name, stats);
  } else {
    if (!fs::exists(a.out)) append_text(a.out, stats_csv_header());
    append_text(a.out, stats_csv_row(name, stats));
  }
}

// ------------------------------------------------------------- synth

struct SynthArgs {
  SynthConfig config;
  std::string fertility = "2:0.5,3:0.3,4:0.2";
  std::string signal = "last";
  std::size_t train = 600;
  std::size_t dev = 100;
  std::size_t test = 100;
  std::string out;
};

void run_synth(SynthArgs a) {
  a.config.fertility = parse_fertility(a.fertility);
  a.config.signal.position = parse_signal_position(a.signal);
  const auto corpus = synth_corpus(a.config, {a.train, a.dev, a.test});
  write_dataset(a.out, corpus.dataset);
  write_store((fs::path(a.out) / "train.swpe").string(), corpus.train);
  write_store((fs::path(a.out) / "dev.swpe").string(), corpus.dev);
  write_store((fs::path(a.out) / "test.swpe").string(), corpus.test);
}

// ------------------------------------------------------------- train

struct ManifestTask {
  std::string name;
  std::string model_store;
  std::string dataset_dir;
  std::string store_dir;
};

struct Manifest {
  std::vector<ManifestTask> tasks;
  std::vector<Layer> layers;
  std::vector<PoolingMethod> poolings;
  std::vector<std::uint64_t> seeds;
  TrainingConfig training;
  std::size_t attn_hidden = 50;
  std::size_t lstm_hidden = 50;
};

Manifest load_manifest(const std::string& path) {
  const auto base = fs::path(path).parent_path();
  auto resolve = [&](const std::string& p) { return fs::path(p).is_absolute() ? p : (base / p).string(); };
  json j;
  try {
    j = json::parse(binio::read_file(path));
  } catch (const json::exception& e) {
    throw ParseError(0, std::string("manifest: ") + e.what());
  }
  Manifest m;
  try {
    for (const auto& t : j.at("tasks")) {
      ManifestTask task;
      task.name = t.at("name").get<std::string>();
      task.model_store = t.value("model_store", std::string("store"));
      task.dataset_dir = resolve(t.at("dataset").get<std::string>());
      task.store_dir = resolve(t.at("store").get<std::string>());
      for (const auto& file : {"train.jsonl", "dev.jsonl", "test.jsonl"}) {
        if (!fs::exists(fs::path(task.dataset_dir) / file)) throw IoError("missing " + (fs::path(task.dataset_dir) / file).string());
      }
      for (const auto& file : {"train.swpe", "dev.swpe", "test.swpe"}) {
        if (!fs::exists(fs::path(task.store_dir) / file)) throw IoError("missing " + (fs::path(task.store_dir) / file).string());
      }
      m.tasks.push_back(std::move(task));
    }
    for (const auto& l : j.value("layers", json::array({6}))) {
      m.layers.push_back(parse_layer_flag(l.is_string() ? l.get<std::string>() : std::to_string(l.get<int>())));
    }
    for (const auto& p : j.at("poolings")) m.poolings.push_back(parse_pooling(p.get<std::string>()));
    m.seeds = j.value("seeds", std::vector<std::uint64_t>{0, 1, 2});
    if (j.contains("training")) {
      const auto& t = j["training"];
      m.training.batch_size = t.value("batch_size", m.training.batch_size);
      m.training.max_epochs = t.value("max_epochs", m.training.max_epochs);
      m.training.patience = t.value("patience", m.training.patience);
      m.training.mlp_hidden = t.value("mlp_hidden", m.training.mlp_hidden);
    }
    m.attn_hidden = j.value("attn_hidden", m.attn_hidden);
    m.lstm_hidden = j.value("lstm_hidden", m.lstm_hidden);
  } catch (const json::exception& e) {
    throw ParseError(0, std::string("manifest: ") + e.what());
  }
  if (m.tasks.empty() || m.layers.empty() || m.poolings.empty() || m.seeds.empty()) {
    throw Error("manifest grid is empty");
  }
  return m;
}

struct TrainArgs {
  std::string manifest;
  std::string results;
  std::string checkpoints;
  unsigned jobs = 1;
  bool resume = false;
};

struct Job {
  std::size_t task = 0;
  Layer layer = Layer::index(6);
  PoolingMethod pooling = PoolingMethod::Last;
  std::uint64_t seed = 0;
};

void run_train(const TrainArgs& a) {
  const auto manifest = load_manifest(a.manifest);
  std::set<std::string> done;
  if (a.resume && fs::exists(a.results)) {
    for (const auto& record : parse_results(binio::read_file(a.results))) done.insert(record.key());
  }

  struct LoadedTask {
    ProbeDataset dataset;
    EmbeddingStore train, dev, test;
  };
  std::vector<LoadedTask> loaded;
  for (const auto& task : manifest.tasks) {
    LoadedTask l;
    l.dataset = read_dataset(task.dataset_dir);
    l.train = read_store((fs::path(task.store_dir) / "train.swpe").string());
    l.dev = read_store((fs::path(task.store_dir) / "dev.swpe").string());
    l.test = read_store((fs::path(task.store_dir) / "test.swpe").string());
    loaded.push_back(std::move(l));
  }

  std::vector<Job> jobs;
  for (std::size_t t = 0; t < manifest.tasks.size(); ++t) {
    for (auto layer : manifest.layers) {
      for (auto pooling : manifest.poolings) {
        for (auto seed : manifest.seeds) {
          ResultRecord probe_key{manifest.tasks[t].name, manifest.tasks[t].model_store, layer.to_string(),
                                 std::string(pooling_name(pooling)), seed};
          if (!done.count(probe_key.key())) jobs.push_back({t, layer, pooling, seed});
        }
      }
    }
  }

  // Instances depend on (task, layer) only; build each once, lazily.
  std::mutex cache_mutex;
  std::map<std::pair<std::size_t, std::string>, std::shared_ptr<const ProbeSplits>> cache;
  auto splits_for = [&](std::size_t task, Layer layer) {
    const auto key = std::make_pair(task, layer.to_string());
    std::lock_guard lock(cache_mutex);
    auto& slot = cache[key];
    if (!slot) {
      const auto& l = loaded[task];
      slot = std::make_shared<const ProbeSplits>(build_instances(l.dataset, l.train, l.dev, l.test, layer));
    }
    return slot;
  };

  if (!a.checkpoints.empty()) fs::create_directories(a.checkpoints);
  std::mutex writer_mutex;
  std::atomic<std::size_t> next{0};
  std::exception_ptr failure;
  auto worker = [&] {
    while (true) {
      const std::size_t i = next.fetch_add(1);
      if (i >= jobs.size()) return;
      {
        std::lock_guard lock(writer_mutex);
        if (failure) return;
      }
      try {
        const auto& job = jobs[i];
        const auto splits = splits_for(job.task, job.layer);
        PoolingSpec spec{job.pooling, splits->input_dim, manifest.attn_hidden, manifest.lstm_hidden};
        const auto trained = train_probe(*splits, spec, manifest.training, job.seed);
        ResultRecord record{manifest.tasks[job.task].name,
                            manifest.tasks[job.task].model_store,
                            job.layer.to_string(),
                            std::string(pooling_name(job.pooling)),
                            job.seed,
                            trained.result.dev_acc,
                            trained.result.test_acc,
                            trained.model.param_count(),
                            trained.result.seconds};
        std::lock_guard lock(writer_mutex);
        append_text(a.results, to_jsonl(record));
        if (!a.checkpoints.empty()) {
          auto file = record.key();
          std::replace(file.begin(), file.end(), '|', '_');
          std::replace(file.begin(), file.end(), '+', 'p');
          binio::write_file((fs::path(a.checkpoints) / (file + ".swpk")).string(),
                            encode_checkpoint(trained.model, splits->classes));
        }
      } catch (...) {
        std::lock_guard lock(writer_mutex);
        if (!failure) failure = std::current_exception();
      }
    }
  };
  const unsigned workers = std::max(1u, std::min<unsigned>(a.jobs, static_cast<unsigned>(jobs.size())));
  {
    std::vector<std::jthread> pool;
    for (unsigned w = 0; w < workers; ++w) pool.emplace_back(worker);
  }
  if (failure) std::rethrow_exception(failure);
  std::cout << json{{"ran", jobs.size()}, {"skipped", done.size()}}.dump() << '\n';
}

// ------------------------------------------------------------- analyze

struct AnalyzeArgs {
  std::string results;
  std::string table;
  std::string layer = "6";
  std::string out;
};

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void write_table_reports(const ResultTable& table, const fs::path& out, std::ostringstream& summary) {
  std::ostringstream macro;
  macro << "model,all_cells,best_per_task\n";
  summary << "## Macro averages\n\n| model | all cells | best per task |\n|---|---|---|\n";
  for (const auto& model : table.models()) {
    const double all = macro_average(table, model, MacroGrouping::AllCells);
    const double best = macro_average(table, model, MacroGrouping::BestPerTask);
    macro << model << ',' << fmt(all) << ',' << fmt(best) << '\n';
    summary << "| " << model << " | " << fmt(all, 2) << " | " << fmt(best, 2) << " |\n";
  }
  binio::write_file((out / "macro.csv").string(), macro.str());
  summary << '\n';
  for (const auto& model : table.models()) {
    if (table.tasks(model).size() < 2) continue;
    const auto matrix = pairwise_matrix(table, model);
    auto file = "pairwise_" + model + ".csv";
    std::replace_if(file.begin(), file.end(), [](char c) { return c == '/' || c == ' '; }, '_');
    binio::write_file((out / file).string(), matrix.to_csv());
    summary << "Pairwise ratios for " << model << ": " << file << "\n";
  }
}

void run_analyze(const AnalyzeArgs& a) {
  fs::create_directories(a.out);
  const fs::path out(a.out);
  std::ostringstream summary;
  summary << "# Analysis\n\n";
  if (!a.table.empty()) {
    write_table_reports(ResultTable::load(a.table), out, summary);
  } else if (!a.results.empty()) {
    const auto records = parse_results(binio::read_file(a.results));
    // Mean test accuracy per (task, store, pooling, layer index).
    std::map<std::tuple<std::string, std::string, std::string>, std::map<std::uint32_t, std::pair<double, int>>> curves;
    for (const auto& r : records) {
      const auto layer = Layer::parse(r.layer);
      if (layer.is_sum()) continue;
      auto& cell = curves[{r.task, r.model_store, r.pooling}][layer.value()];
      cell.first += r.test_acc;
      ++cell.second;
    }
    auto mean_curve = [](const std::map<std::uint32_t, std::pair<double, int>>& points) {
      std::vector<double> acc(points.rbegin()->first + 1, 0.0);
      for (const auto& [layer, sum] : points) acc[layer] = sum.first / sum.second;
      return acc;
    };
    std::ostringstream expected;
    expected << "task,model_store,pooling,layers,expected_layer\n";
    std::ostringstream ratios;
    ratios << "task,model_store,layer,last_first_ratio\n";
    for (const auto& [key, points] : curves) {
      const auto& [task, store, pooling] = key;
      if (points.size() < 2 || points.begin()->first != 0) continue;
      const auto acc = mean_curve(points);
      if (acc.size() != points.size()) continue;  // only contiguous 0..L profiles
      expected << task << ',' << store << ',' << pooling << ',' << acc.size() << ',' << fmt(expected_layer(acc)) << '\n';
      if (pooling == "last") {
        const auto first_it = curves.find({task, store, "first"});
        if (first_it == curves.end()) continue;
        for (const auto& [layer, last_sum] : points) {
          const auto f = first_it->second.find(layer);
          if (f == first_it->second.end()) continue;
          const double l_acc = last_sum.first / last_sum.second;
          const double f_acc = f->second.first / f->second.second;
          const auto r = last_first_ratio(std::vector<double>{l_acc}, std::vector<double>{f_acc});
          ratios << task << ',' << store << ',' << layer << ',' << (r[0].ratio ? fmt(*r[0].ratio) : "flagged") << '\n';
        }
      }
    }
    binio::write_file((out / "expected_layer.csv").string(), expected.str());
    binio::write_file((out / "last_first_ratio.csv").string(), ratios.str());
    summary << "Expected layer per task and pooling: expected_layer.csv\n";
    summary << "Last/first ratio per layer: last_first_ratio.csv\n\n";
    const auto table = ResultTable::from_results(records, a.layer);
    if (!table.rows().empty()) write_table_reports(table, out, summary);
  } else {
    throw UsageError("analyze needs --results or --table");
  }
  binio::write_file((out / "summary.md").string(), summary.str());
  std::cout << summary.str();
}

// ------------------------------------------------------------- verify-fixtures

int run_verify(const std::string& dir) {
  const fs::path base(dir);
  const auto report = verify_fixture_claims(ResultTable::load((base / "morph_results.csv").string()),
                                            ResultTable::load((base / "pos_results.csv").string()),
                                            ResultTable::load((base / "ner_results.csv").string()));
  std::cout << report.to_text();
  if (!report.passed()) {
    fail_line("verification", "one or more fixture claims failed");
    return kVerificationFailed;
  }
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Subword pooling probes"};
  app.require_subcommand(1);

  SampleArgs sample;
  auto* sample_cmd = app.add_subcommand("sample", "Build a probing dataset from a corpus");
  sample_cmd->add_option("--kind", sample.kind, "morph, pos or ner")->check(CLI::IsMember({"morph", "pos", "ner"}));
  sample_cmd->add_option("--input", sample.input, "CoNLL-U (morph, pos) or BIO TSV (ner)")->required();
  sample_cmd->add_option("--task", sample.task, "Task name such as Finnish_Case_NOUN");
  sample_cmd->add_option("--tasks-file", sample.tasks_file, "Task spec CSV");
  sample_cmd->add_option("--train", sample.train, "Train size (morph)");
  sample_cmd->add_option("--dev", sample.dev, "Dev size");
  sample_cmd->add_option("--test", sample.test, "Test size");
  sample_cmd->add_option("--max-len", sample.max_len, "Longest sentence kept (tagging)");
  sample_cmd->add_option("--max-train", sample.max_train, "Train cap (tagging)");
  sample_cmd->add_option("--max-chars", sample.max_chars, "Character cap per sentence, 0 = off (tagging)");
  sample_cmd->add_flag("--dedup", sample.dedup, "Drop repeated sentences (tagging)");
  sample_cmd->add_option("--seed", sample.seed);
  sample_cmd->add_option("--out", sample.out, "Output directory")->required();

  StatsArgs stats;
  auto* stats_cmd = app.add_subcommand("stats", "Tokenization statistics");
  stats_cmd->add_option("--store", stats.stores, "Embedding store(s)");
  stats_cmd->add_option("--conllu", stats.conllu, "CoNLL-U corpus to tokenize");
  stats_cmd->add_option("--vocab", stats.vocab, "WordPiece vocabulary, one piece per line");
  stats_cmd->add_option("--name", stats.name, "Corpus name for the CSV row");
  stats_cmd->add_option("--start-symbol", stats.start_symbol);
  stats_cmd->add_option("--out", stats.out, "CSV file to append to (default stdout)");

  SynthArgs synth;
  auto* synth_cmd = app.add_subcommand("synth", "Write a synthetic dataset and stores");
  synth_cmd->add_option("--seed", synth.config.seed);
  synth_cmd->add_option("--train", synth.train, "Train sentences");
  synth_cmd->add_option("--dev", synth.dev, "Dev sentences");
  synth_cmd->add_option("--test", synth.test, "Test sentences");
  synth_cmd->add_option("--words", synth.config.words_per_sentence, "Words per sentence");
  synth_cmd->add_option("--fertility", synth.fertility, "Piece-count distribution, e.g. 2:0.5,3:0.5");
  synth_cmd->add_option("--layers", synth.config.num_layers);
  synth_cmd->add_option("--hidden", synth.config.hidden);
  synth_cmd->add_option("--classes", synth.config.num_classes);
  synth_cmd->add_option("--noise", synth.config.noise);
  synth_cmd->add_option("--signal", synth.signal, "first, last or all");
  synth_cmd->add_option("--strength", synth.config.signal.strength);
  synth_cmd->add_option("--out", synth.out, "Output directory")->required();

  TrainArgs train;
  auto* train_cmd = app.add_subcommand("train", "Run a manifest grid of probing experiments");
  train_cmd->add_option("--manifest", train.manifest)->required();
  train_cmd->add_option("--results", train.results, "JSON-lines results file (appended)")->required();
  train_cmd->add_option("--checkpoints", train.checkpoints, "Directory for probe checkpoints");
  train_cmd->add_option("--jobs", train.jobs)->check(CLI::PositiveNumber);
  train_cmd->add_flag("--resume", train.resume, "Skip experiments already in the results file");

  AnalyzeArgs analyze;
  auto* analyze_cmd = app.add_subcommand("analyze", "Expected layer, ratios, pairwise and macro reports");
  analyze_cmd->add_option("--results", analyze.results, "JSON-lines results file");
  analyze_cmd->add_option("--table", analyze.table, "Wide result table CSV");
  analyze_cmd->add_option("--layer", analyze.layer, "Layer for the pairwise and macro reports");
  analyze_cmd->add_option("--out", analyze.out, "Output directory")->required();

  std::string fixture_dir = SUBPOOL_FIXTURE_DIR;
  auto* verify_cmd = app.add_subcommand("verify-fixtures", "Check the published result tables");
  verify_cmd->add_option("--fixtures", fixture_dir, "Directory holding the table CSVs");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail_line("usage", e.what());
    return kUsage;
  }

  try {
    if (*sample_cmd) run_sample(sample);
    if (*stats_cmd) run_stats(stats);
    if (*synth_cmd) run_synth(synth);
    if (*train_cmd) run_train(train);
    if (*analyze_cmd) {
      (void)parse_layer_flag(analyze.layer);
      run_analyze(analyze);
    }
    if (*verify_cmd) return run_verify(fixture_dir);
  } catch (const UsageError& e) {
    fail_line("usage", e.what());
    return kUsage;
  } catch (const std::exception& e) {
    fail_line("data", e.what());
    return kDataError;
  }
  return kOk;
}
