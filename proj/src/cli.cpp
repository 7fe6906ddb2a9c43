#include "dknn/cli.hpp"

#include "dknn/config.hpp"
#include "dknn/error.hpp"
#include "dknn/experiment.hpp"
#include "dknn/random.hpp"
#include "dknn/synthetic.hpp"

#include <CLI11.hpp>
#include <fmt/chrono.h>
#include <fmt/format.h>
#include <fmt/ostream.h>
#include <nlohmann/json.hpp>

#include <chrono>
#include <cstdlib>
#include <fstream>
#include <optional>

namespace dknn {

namespace {

namespace fs = std::filesystem;
using nlohmann::json;

struct Overrides {
  std::optional<std::string> config;
  std::optional<std::string> corpus, train, test;
  std::optional<std::string> backend, base_url, model, mock_rules;
  std::optional<double> temperature;
  std::optional<int> max_inflight;
  std::optional<std::string> embeddings, embedding_cache, embed_url, embed_model;
  std::optional<std::string> tmpl, probe_tmpl;
  std::optional<std::string> strategy;
  std::optional<int> n_shot, k, runs;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> output, matrix;
  bool balance = false, no_balance = false, cone_unnormalized = false;
  bool dry_run = false;

  // sweep
  std::string kind = "k";
  std::optional<int> k_min, k_max, folds;
  std::vector<int> n_values;

  // make-mock
  std::string mock_dir = "mock";
  std::size_t train_per_label = 10, test_per_label = 10;
};

void add_common(CLI::App& app, Overrides& o) {
  app.add_option("-c,--config", o.config, "TOML run configuration");
  app.add_option("--corpus", o.corpus, "Corpus file (JSONL or CSV) with a split column");
  app.add_option("--train", o.train, "Training corpus file");
  app.add_option("--test", o.test, "Test corpus file");
  app.add_option("--backend", o.backend, "mock or http")->check(CLI::IsMember({"mock", "http"}));
  app.add_option("--base-url", o.base_url, "Chat endpoint base URL");
  app.add_option("--model", o.model, "Model name sent to the backend");
  app.add_option("--mock-rules", o.mock_rules, "Mock backend rule file");
  app.add_option("--temperature", o.temperature, "Sampling temperature");
  app.add_option("--max-inflight", o.max_inflight, "Concurrent backend requests")->check(CLI::PositiveNumber);
  app.add_option("--embeddings", o.embeddings, "Embedding file (JSONL)");
  app.add_option("--embedding-cache", o.embedding_cache, "Embedding cache directory");
  app.add_option("--embed-url", o.embed_url, "Embedding endpoint base URL");
  app.add_option("--embed-model", o.embed_model, "Embedding model name");
  app.add_option("--template", o.tmpl, "Prompt template: grid row 1-7, none, or comma-separated components");
  app.add_option("--probe-template", o.probe_tmpl, "Template used while probing the matrix");
  app.add_option("--strategy", o.strategy, "zero_shot, random, top_k, delta_knn or cone");
  app.add_option("--n-shot", o.n_shot, "Demonstrations per prompt")->check(CLI::NonNegativeNumber);
  app.add_flag("--balance", o.balance, "Equal demonstrations per label");
  app.add_flag("--no-balance", o.no_balance, "Ignore labels when picking demonstrations");
  app.add_option("--k", o.k, "Neighbours used by delta_knn")->check(CLI::PositiveNumber);
  app.add_option("--runs", o.runs, "Repeated runs")->check(CLI::PositiveNumber);
  app.add_option("--seed", o.seed, "Top-level seed");
  app.add_option("-o,--output", o.output, "Output directory");
  app.add_option("--matrix", o.matrix, "Delta matrix file");
  app.add_flag("--cone-unnormalized", o.cone_unnormalized, "Score ConE by summed rather than mean logprob");
  app.add_flag("--dry-run", o.dry_run, "Print the backend call count and exit");
}

RunConfig resolve_config(const Overrides& o) {
  RunConfig c = o.config ? load_run_config(*o.config) : RunConfig{};
  auto set_path = [](fs::path& target, const std::optional<std::string>& v) {
    if (v) target = *v;
  };
  set_path(c.corpus, o.corpus);
  set_path(c.train, o.train);
  set_path(c.test, o.test);
  if (o.corpus) {
    c.train.clear();
    c.test.clear();
  } else if (o.train || o.test) {
    c.corpus.clear();
  }
  if (o.backend) c.backend.kind = *o.backend == "mock" ? BackendKind::Mock : BackendKind::Http;
  if (o.base_url) c.backend.base_url = *o.base_url;
  if (o.model) c.backend.model_name = *o.model;
  set_path(c.backend.mock_rules_path, o.mock_rules);
  if (o.temperature) c.backend.temperature = *o.temperature;
  if (o.max_inflight) c.backend.max_inflight = *o.max_inflight;
  set_path(c.embeddings, o.embeddings);
  set_path(c.embedding_cache, o.embedding_cache);
  if (o.embed_url) c.embedder.base_url = *o.embed_url;
  if (o.embed_model) c.embedder.model_name = *o.embed_model;
  if (o.tmpl) {
    auto texts = c.prompt.texts;
    c.prompt = parse_template(*o.tmpl);
    c.prompt.texts = texts;
  }
  if (o.probe_tmpl) {
    c.probe_prompt = parse_template(*o.probe_tmpl);
    c.probe_prompt->texts = c.prompt.texts;
  }
  if (o.strategy) c.selection.strategy = parse_strategy(*o.strategy);
  if (o.n_shot) c.selection.n_shot = *o.n_shot;
  if (o.balance && o.no_balance) throw Error(ErrorCode::ConfigError, "--balance and --no-balance are exclusive");
  if (o.balance) c.selection.balance = true;
  if (o.no_balance) c.selection.balance = false;
  if (o.k) c.selection.k_neighbors = *o.k;
  if (o.cone_unnormalized) c.selection.cone_normalized = false;
  if (o.runs) c.runs = *o.runs;
  if (o.seed) c.seed = *o.seed;
  set_path(c.output_dir, o.output);
  set_path(c.matrix, o.matrix);
  if (o.k_min) c.k_min = *o.k_min;
  if (o.k_max) c.k_max = *o.k_max;
  if (o.folds) c.n_folds = *o.folds;
  if (!o.n_values.empty()) c.n_values = o.n_values;
  c.selection.seed = c.seed;
  return c;
}

struct Splits {
  Corpus train;
  Corpus test;
};

Corpus load_input(const fs::path& path) {
  if (!fs::exists(path)) throw Error(ErrorCode::ConfigError, "corpus file not found: " + path.string());
  return load_corpus(path);
}

Splits load_splits(const RunConfig& c, bool need_test) {
  Splits s;
  if (!c.corpus.empty()) {
    const auto all = load_input(c.corpus);
    s.train = all.with_split(Split::Train);
    s.test = all.with_split(Split::Test);
  } else if (!c.train.empty()) {
    s.train = load_input(c.train);
    if (!c.test.empty()) s.test = load_input(c.test);
  } else {
    throw Error(ErrorCode::ConfigError, "no corpus given: pass --corpus (or --train/--test) or set [corpus] in the config");
  }
  if (s.train.empty()) throw Error(ErrorCode::ConfigError, "the corpus has no training documents");
  if (need_test && s.test.empty()) throw Error(ErrorCode::ConfigError, "the corpus has no test documents");
  return s;
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << text;
}

void archive_config(const RunConfig& c) {
  RunConfig a = c;
  for (fs::path* p : {&a.corpus, &a.train, &a.test, &a.backend.mock_rules_path, &a.embeddings, &a.embedding_cache,
                      &a.matrix, &a.output_dir}) {
    if (!p->empty()) *p = fs::absolute(*p).lexically_normal();
  }
  write_text(c.output_dir / "run_config.toml", to_toml(a));
}

std::string matrix_timestamp(const RunConfig& c) {
  if (const char* epoch = std::getenv("SOURCE_DATE_EPOCH"); epoch && *epoch) {
    return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(static_cast<std::time_t>(std::strtoll(epoch, nullptr, 10))));
  }
  if (c.backend.kind == BackendKind::Mock) return "1970-01-01T00:00:00Z";
  return fmt::format("{:%Y-%m-%dT%H:%M:%SZ}", fmt::gmtime(std::time(nullptr)));
}

DeltaMatrix require_matrix(const RunConfig& c) {
  const auto path = c.matrix_path();
  if (!fs::exists(path)) {
    throw Error(ErrorCode::MissingArtifact, "delta matrix not found at " + path.string() + "; produce it with `dknn build-matrix`");
  }
  return load_matrix(path);
}

EmbeddingStore require_embeddings(const RunConfig& c) {
  const auto path = c.embeddings_path();
  if (!fs::exists(path)) {
    throw Error(ErrorCode::MissingArtifact, "embeddings not found at " + path.string() + "; produce them with `dknn embed`");
  }
  return load_embeddings(path);
}

int cmd_build_matrix(const RunConfig& c, bool dry_run, std::ostream& out) {
  const auto splits = load_splits(c, false);
  const auto d = splits.train.size();
  const auto zero_calls = zero_shot_call_count(d, c.runs);
  const auto one_calls = one_shot_call_count(d, c.runs);
  if (dry_run) {
    fmt::print(out, "zero-shot calls: {}\none-shot calls: {}\ntotal calls: {}\n", zero_calls, one_calls,
               zero_calls + one_calls);
    return 0;
  }
  Gateway gateway(c.backend);
  const auto& tmpl = c.probing_prompt();
  const auto start = std::chrono::steady_clock::now();
  const auto zero = zero_shot_pass(splits.train, tmpl, gateway, c.runs);
  const auto one = one_shot_pass(splits.train, tmpl, gateway, c.runs);
  const auto matrix = build_delta_matrix(zero, one, matrix_timestamp(c));
  const auto path = c.matrix_path();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_matrix(matrix, path);
  save_raw_records(zero, one, raw_records_path(path));
  archive_config(c);
  const std::chrono::duration<double> elapsed = std::chrono::steady_clock::now() - start;
  fmt::print(out, "wrote {} (d={}, runs={}, {} off-diagonal entries)\n", path.string(), d, c.runs, d * (d - 1));
  fmt::print(out, "backend calls: {} (zero-shot {}, one-shot {}, planned {})\n", gateway.calls(), zero_calls, one_calls,
             zero_calls + one_calls);
  fmt::print(out, "elapsed: {:.2f} s\n", elapsed.count());
  return 0;
}

int cmd_embed(const RunConfig& c, bool dry_run, std::ostream& out) {
  const auto splits = load_splits(c, false);
  std::vector<Document> docs(splits.train.begin(), splits.train.end());
  docs.insert(docs.end(), splits.test.begin(), splits.test.end());
  const Corpus all("all", docs);
  const auto cache_dir = c.embedding_cache.empty() ? c.output_dir / "embedding_cache" : c.embedding_cache;
  if (dry_run) {
    const EmbeddingCache cache(cache_dir);
    std::size_t misses = 0;
    for (const auto& d : all) misses += cache.get(c.embedder.model_name, d.text) ? 0 : 1;
    const auto batch = std::max<std::size_t>(1, c.embedder.batch_size);
    fmt::print(out, "texts: {}\ncached: {}\nrequests: {}\n", all.size(), all.size() - misses, (misses + batch - 1) / batch);
    return 0;
  }
  if (c.embedder.base_url.empty()) throw Error(ErrorCode::ConfigError, "no embedding endpoint: pass --embed-url or set [embeddings] base_url");
  RemoteEmbedder embedder(c.embedder, cache_dir);
  const auto store = embedder.embed_corpus(all);
  const auto path = c.embeddings_path();
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  save_embeddings(store, path);
  archive_config(c);
  fmt::print(out, "wrote {} ({} vectors, {} requests)\n", path.string(), all.size(), embedder.network_calls());
  return 0;
}

struct Artifacts {
  std::optional<DeltaMatrix> matrix;
  std::optional<EmbeddingStore> embeddings;
};

Artifacts load_artifacts(const RunConfig& c, bool matrix, bool embeddings) {
  Artifacts a;
  if (matrix) a.matrix = require_matrix(c);
  if (embeddings) a.embeddings = require_embeddings(c);
  return a;
}

ExperimentSetup make_setup(const RunConfig& c, const Splits& s, Gateway& gateway, const Artifacts& a) {
  ExperimentSetup setup;
  setup.demo_pool = &s.train;
  setup.targets = &s.test;
  setup.prompt = c.prompt;
  setup.gateway = &gateway;
  setup.matrix = a.matrix ? &*a.matrix : nullptr;
  setup.embeddings = a.embeddings ? &*a.embeddings : nullptr;
  setup.selection = c.selection;
  setup.runs = c.runs;
  return setup;
}

bool uses_demos(const SelectionConfig& s) { return s.strategy != Strategy::ZeroShot && s.n_shot > 0; }

int cmd_eval(const RunConfig& c, bool dry_run, std::ostream& out) {
  const auto splits = load_splits(c, true);
  c.selection.validate();
  if (dry_run) {
    fmt::print(out, "eval calls: {}\n", splits.test.size() * static_cast<std::size_t>(c.runs));
    if (c.selection.strategy == Strategy::Cone && uses_demos(c.selection)) {
      fmt::print(out, "cone scoring calls: {}\n", splits.test.size() * splits.train.size());
    }
    return 0;
  }
  const bool demos = uses_demos(c.selection);
  const auto artifacts = load_artifacts(c, demos && strategy_needs_matrix(c.selection.strategy),
                                        demos && strategy_needs_embeddings(c.selection.strategy));
  Gateway gateway(c.backend);
  const auto setup = make_setup(c, splits, gateway, artifacts);
  const auto result = run_experiment(setup);
  const std::string label(strategy_name(c.selection.strategy));
  const auto dir = c.output_dir / ("eval_" + label);
  fs::create_directories(dir);
  const auto table = report_table({{label, result.report}});
  write_text(dir / "report.json", report_json(result.report, label));
  write_text(dir / "report.txt", table);
  write_predictions(result.predictions, dir / "predictions.jsonl");
  archive_config(c);
  out << table;
  fmt::print(out, "wrote {}\n", (dir / "report.json").string());
  return 0;
}

std::size_t sweep_call_count(const RunConfig& c, const Splits& s, const std::string& kind) {
  const auto runs = static_cast<std::size_t>(c.runs);
  if (kind == "k") return s.train.size() * runs * static_cast<std::size_t>(std::max(0, c.k_max - c.k_min + 1));
  if (kind == "nshot") return s.test.size() * runs * c.n_values.size();
  if (kind == "prompt_grid") return s.test.size() * runs * 7;
  return s.test.size() * runs * 24;
}

void write_sweep_summary(const fs::path& dir, const std::vector<std::pair<std::string, EvalReport>>& rows,
                         json summary, std::ostream& out) {
  const auto table = report_table(rows);
  write_text(dir / "summary.txt", table);
  write_text(dir / "summary.json", summary.dump(2) + "\n");
  out << table;
}

int cmd_sweep(const RunConfig& c, const std::string& kind, bool dry_run, std::ostream& out) {
  const bool needs_test = kind != "k";
  const auto splits = load_splits(c, needs_test);
  if (dry_run) {
    fmt::print(out, "{} sweep calls: {}\n", kind, sweep_call_count(c, splits, kind));
    return 0;
  }
  const auto dir = c.output_dir / ("sweep_" + kind);
  fs::create_directories(dir);
  Gateway gateway(c.backend);
  std::vector<std::pair<std::string, EvalReport>> rows;
  json summary = {{"kind", kind}, {"points", json::array()}};

  if (kind == "k") {
    if (c.k_min < 1 || c.k_max < c.k_min) throw Error(ErrorCode::ConfigError, "need 1 <= k_min <= k_max");
    const auto artifacts = load_artifacts(c, true, true);
    std::vector<int> ks;
    for (int k = c.k_min; k <= c.k_max; ++k) ks.push_back(k);
    auto selection = c.selection;
    selection.strategy = Strategy::DeltaKnn;
    const auto result = sweep_k(splits.train, *artifacts.matrix, *artifacts.embeddings, c.prompt, gateway, ks, c.n_folds,
                                c.seed, selection, c.runs);
    for (const auto& [k, report] : result.reports) {
      const auto label = fmt::format("k={}", k);
      write_text(dir / fmt::format("k_{}.json", k), report_json(report, label));
      rows.emplace_back(label, report);
      summary["points"].push_back({{"k", k}, {"acc", report.acc.mean}});
    }
    summary["best_k"] = result.best_k;
    write_sweep_summary(dir, rows, summary, out);
    fmt::print(out, "best_k: {}\n", result.best_k);
  } else if (kind == "nshot") {
    const bool demos = std::any_of(c.n_values.begin(), c.n_values.end(), [](int n) { return n > 0; });
    const auto artifacts = load_artifacts(c, demos && strategy_needs_matrix(c.selection.strategy),
                                          demos && strategy_needs_embeddings(c.selection.strategy));
    const auto setup = make_setup(c, splits, gateway, artifacts);
    for (const auto& [n, result] : sweep_nshot(setup, c.n_values)) {
      const auto label = fmt::format("n={}", n);
      write_text(dir / fmt::format("n_{}.json", n), report_json(result.report, label));
      rows.emplace_back(label, result.report);
      summary["points"].push_back({{"n_shot", n}, {"acc", result.report.acc.mean}});
    }
    write_sweep_summary(dir, rows, summary, out);
  } else if (kind == "prompt_grid") {
    const bool demos = uses_demos(c.selection);
    const auto artifacts = load_artifacts(c, demos && strategy_needs_matrix(c.selection.strategy),
                                          demos && strategy_needs_embeddings(c.selection.strategy));
    const auto setup = make_setup(c, splits, gateway, artifacts);
    int row = 0;
    for (const auto& [tmpl, result] : sweep_prompt_grid(setup)) {
      ++row;
      const auto label = fmt::format("{}. {}", row, tmpl.describe());
      write_text(dir / fmt::format("row_{}.json", row), report_json(result.report, label));
      rows.emplace_back(label, result.report);
      summary["points"].push_back({{"row", row}, {"template", tmpl.describe()}, {"acc", result.report.acc.mean}});
    }
    write_sweep_summary(dir, rows, summary, out);
  } else {
    const auto artifacts = load_artifacts(c, strategy_needs_matrix(c.selection.strategy),
                                          strategy_needs_embeddings(c.selection.strategy));
    const auto setup = make_setup(c, splits, gateway, artifacts);
    const auto study = ordering_study(setup);
    std::string listing;
    for (std::size_t i = 0; i < study.permutations.size(); ++i) {
      const auto& p = study.permutations[i];
      listing += fmt::format("{:2}  {}  {:.1f}\n", i + 1, fmt::join(p, ""), 100.0 * study.accuracies[i]);
      summary["points"].push_back({{"order", p}, {"acc", study.accuracies[i]}});
    }
    listing += fmt::format("min {:.1f}  mean {:.1f}  std {:.1f}  max {:.1f}\n", 100.0 * study.min, 100.0 * study.mean,
                           100.0 * study.std, 100.0 * study.max);
    summary["min"] = study.min;
    summary["mean"] = study.mean;
    summary["std"] = study.std;
    summary["max"] = study.max;
    write_text(dir / "summary.txt", listing);
    write_text(dir / "summary.json", summary.dump(2) + "\n");
    out << listing;
  }
  archive_config(c);
  return 0;
}

int cmd_inspect(const RunConfig& c, std::ostream& out) {
  const auto matrix = require_matrix(c);
  const auto d = matrix.size();
  fmt::print(out, "documents: {}\nruns: {}\nmodel: {}\nprompt fingerprint: {}\ntimestamp: {}\n", d, matrix.runs(),
             matrix.metadata().backend_model, matrix.metadata().prompt_fingerprint, matrix.metadata().timestamp);
  if (d < 2) return 0;
  double lo = 1.0, hi = -1.0, sum = 0.0;
  std::size_t positive = 0;
  std::vector<ScoredCandidate> rows;
  for (std::size_t i = 0; i < d; ++i) {
    double row = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      if (i == j) continue;
      const double v = matrix.at(i, j);
      lo = std::min(lo, v);
      hi = std::max(hi, v);
      sum += v;
      row += v;
      positive += v > 0.0 ? 1 : 0;
    }
    rows.push_back({matrix.doc_ids()[i], Label::Control, row / static_cast<double>(d - 1)});
  }
  const auto entries = d * (d - 1);
  fmt::print(out, "delta min {:.4f}  mean {:.4f}  max {:.4f}  positive {}/{}\n", lo, sum / static_cast<double>(entries),
             hi, positive, entries);
  std::sort(rows.begin(), rows.end(), candidate_before);
  fmt::print(out, "most helpful demonstrations (mean delta over targets):\n");
  for (std::size_t i = 0; i < std::min<std::size_t>(5, rows.size()); ++i) {
    fmt::print(out, "  {}  {:+.4f}\n", rows[i].doc_id, rows[i].score);
  }
  return 0;
}

int cmd_make_mock(const Overrides& o, std::ostream& out) {
  SyntheticSpec spec;
  spec.seed = o.seed.value_or(0);
  spec.train_per_label = o.train_per_label;
  spec.test_per_label = o.test_per_label;
  write_synthetic(make_synthetic(spec), o.mock_dir);
  fmt::print(out, "wrote synthetic mock experiment to {}\n", o.mock_dir);
  return 0;
}

int exit_code_for(ErrorCode code) {
  switch (code) {
    case ErrorCode::ConfigError:
    case ErrorCode::InvalidArgument:
    case ErrorCode::MissingArtifact:
    case ErrorCode::InvalidTemplate:
      return 2;
    default:
      return 1;
  }
}

}  // namespace

int run_cli(int argc, const char* const* argv, std::ostream& out, std::ostream& err) {
  CLI::App app{"Demonstration selection by delta-KNN for LLM text classification", "dknn"};
  app.require_subcommand(1);
  Overrides o;

  auto* build = app.add_subcommand("build-matrix", "Probe the backend and write the delta matrix");
  auto* embed = app.add_subcommand("embed", "Embed the corpus through the embeddings endpoint");
  auto* eval = app.add_subcommand("eval", "Classify the test split and write reports");
  auto* sweep = app.add_subcommand("sweep", "Run a k, n-shot, prompt-grid or ordering sweep");
  auto* inspect = app.add_subcommand("inspect-matrix", "Summarize a delta matrix file");
  auto* mock = app.add_subcommand("make-mock", "Write a synthetic corpus, embeddings and mock rules");
  for (auto* sub : {build, embed, eval, sweep, inspect}) add_common(*sub, o);

  sweep->add_option("--kind", o.kind, "k, nshot, prompt_grid or ordering")
      ->check(CLI::IsMember({"k", "nshot", "prompt_grid", "ordering"}));
  sweep->add_option("--k-min", o.k_min, "Smallest k");
  sweep->add_option("--k-max", o.k_max, "Largest k");
  sweep->add_option("--folds", o.folds, "Cross-validation folds");
  sweep->add_option("--n-values", o.n_values, "Shot counts for the n-shot sweep")->delimiter(',');

  mock->add_option("--dir", o.mock_dir, "Output directory");
  mock->add_option("--seed", o.seed, "Generator seed");
  mock->add_option("--train-per-label", o.train_per_label, "Training documents per label");
  mock->add_option("--test-per-label", o.test_per_label, "Test documents per label");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? 0 : 2;
  }

  try {
    if (mock->parsed()) return cmd_make_mock(o, out);
    const auto config = resolve_config(o);
    if (build->parsed()) return cmd_build_matrix(config, o.dry_run, out);
    if (embed->parsed()) return cmd_embed(config, o.dry_run, out);
    if (eval->parsed()) return cmd_eval(config, o.dry_run, out);
    if (sweep->parsed()) return cmd_sweep(config, o.kind, o.dry_run, out);
    return cmd_inspect(config, out);
  } catch (const Error& e) {
    const int code = exit_code_for(e.code());
    err << "dknn: " << e.what() << '\n';
    if (code == 2) err << "run `dknn --help` for usage\n";
    return code;
  } catch (const std::exception& e) {
    err << "dknn: " << e.what() << '\n';
    return 1;
  }
}

}  // namespace dknn
