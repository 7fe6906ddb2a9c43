#include "dknn/config.hpp"

#include "dknn/error.hpp"

#include <toml.hpp>

#include <fstream>
#include <sstream>

namespace dknn {

namespace {

using Path = std::filesystem::path;

class Reader {
 public:
  Reader(const toml::table& root, Path base) : root_(root), base_(std::move(base)) {}

  template <class T>
  void read(std::string_view section, std::string_view key, T& out) const {
    const auto node = lookup(section, key);
    if (!node) return;
    if constexpr (std::is_same_v<T, bool>) {
      out = require(node.value<bool>(), section, key, "boolean");
    } else if constexpr (std::is_integral_v<T>) {
      out = static_cast<T>(require(node.value<std::int64_t>(), section, key, "integer"));
    } else if constexpr (std::is_floating_point_v<T>) {
      out = static_cast<T>(require(node.value<double>(), section, key, "number"));
    } else {
      out = require(node.value<std::string>(), section, key, "string");
    }
  }

  void read_path(std::string_view section, std::string_view key, Path& out) const {
    std::string raw;
    read(section, key, raw);
    if (raw.empty()) return;
    const Path p(raw);
    out = p.is_absolute() ? p : (base_ / p).lexically_normal();
  }

  toml::node_view<const toml::node> lookup(std::string_view section, std::string_view key) const {
    return section.empty() ? root_[key] : root_[section][key];
  }

 private:
  template <class T>
  static T require(std::optional<T> v, std::string_view section, std::string_view key, const char* type) {
    if (!v) {
      throw Error(ErrorCode::ConfigError, std::string(section.empty() ? "" : std::string(section) + ".") +
                                              std::string(key) + " must be a " + type);
    }
    return *v;
  }

  const toml::table& root_;
  Path base_;
};

std::string path_string(const Path& p) { return p.generic_string(); }

}  // namespace

RunConfig parse_run_config(const std::string& toml_text, const std::filesystem::path& base_dir) {
  toml::table root;
  try {
    root = toml::parse(toml_text);
  } catch (const toml::parse_error& e) {
    std::ostringstream msg;
    msg << e.description() << " at line " << e.source().begin.line;
    throw Error(ErrorCode::ConfigError, msg.str());
  }
  static const char* kSections[] = {"corpus", "backend", "embeddings", "prompt", "selection", "matrix", "sweep"};
  for (const auto& [key, node] : root) {
    if (node.is_table() && std::find(std::begin(kSections), std::end(kSections), key.str()) == std::end(kSections)) {
      throw Error(ErrorCode::ConfigError, "unknown config section [" + std::string(key.str()) + "]");
    }
  }

  const Reader r(root, base_dir);
  RunConfig c;
  r.read("", "seed", c.seed);
  r.read("", "runs", c.runs);
  r.read_path("", "output_dir", c.output_dir);

  r.read_path("corpus", "path", c.corpus);
  r.read_path("corpus", "train", c.train);
  r.read_path("corpus", "test", c.test);

  std::string kind = c.backend.kind == BackendKind::Mock ? "mock" : "http";
  r.read("backend", "kind", kind);
  if (kind == "mock") {
    c.backend.kind = BackendKind::Mock;
  } else if (kind == "http") {
    c.backend.kind = BackendKind::Http;
  } else {
    throw Error(ErrorCode::ConfigError, "backend.kind must be \"mock\" or \"http\"");
  }
  r.read("backend", "base_url", c.backend.base_url);
  r.read("backend", "model", c.backend.model_name);
  r.read("backend", "temperature", c.backend.temperature);
  r.read("backend", "top_k", c.backend.top_k_sampling);
  r.read("backend", "send_top_k", c.backend.send_top_k);
  r.read("backend", "max_retries", c.backend.max_retries);
  std::int64_t timeout_ms = c.backend.timeout.count();
  r.read("backend", "timeout_ms", timeout_ms);
  c.backend.timeout = std::chrono::milliseconds(timeout_ms);
  std::int64_t backoff_ms = c.backend.retry_backoff.count();
  r.read("backend", "retry_backoff_ms", backoff_ms);
  c.backend.retry_backoff = std::chrono::milliseconds(backoff_ms);
  r.read("backend", "api_key_env", c.backend.api_key_env);
  r.read("backend", "max_inflight", c.backend.max_inflight);
  r.read_path("backend", "mock_rules", c.backend.mock_rules_path);

  r.read_path("embeddings", "path", c.embeddings);
  r.read("embeddings", "base_url", c.embedder.base_url);
  r.read("embeddings", "model", c.embedder.model_name);
  r.read("embeddings", "api_key_env", c.embedder.api_key_env);
  r.read("embeddings", "batch_size", c.embedder.batch_size);
  r.read_path("embeddings", "cache_dir", c.embedding_cache);

  std::string tmpl;
  r.read("prompt", "template", tmpl);
  if (!tmpl.empty()) c.prompt = parse_template(tmpl);
  if (const auto* components = root["prompt"]["components"].as_table()) {
    for (const auto& [key, node] : *components) {
      const auto text = node.value<std::string>();
      if (!text) throw Error(ErrorCode::ConfigError, "prompt.components." + std::string(key.str()) + " must be a string");
      c.prompt.texts.set(key.str(), *text);
    }
  }
  std::string probe;
  r.read("prompt", "probe_template", probe);
  if (!probe.empty()) {
    auto p = parse_template(probe);
    p.texts = c.prompt.texts;
    c.probe_prompt = p;
  }

  std::string strategy(strategy_name(c.selection.strategy));
  r.read("selection", "strategy", strategy);
  c.selection.strategy = parse_strategy(strategy);
  r.read("selection", "n_shot", c.selection.n_shot);
  r.read("selection", "balance", c.selection.balance);
  r.read("selection", "k_neighbors", c.selection.k_neighbors);
  r.read("selection", "cone_normalized", c.selection.cone_normalized);

  r.read_path("matrix", "path", c.matrix);

  r.read("sweep", "k_min", c.k_min);
  r.read("sweep", "k_max", c.k_max);
  r.read("sweep", "n_folds", c.n_folds);
  if (const auto node = r.lookup("sweep", "n_values")) {
    const auto* array = node.as_array();
    if (!array) throw Error(ErrorCode::ConfigError, "sweep.n_values must be an array of integers");
    c.n_values.clear();
    for (const auto& item : *array) {
      const auto v = item.value<std::int64_t>();
      if (!v) throw Error(ErrorCode::ConfigError, "sweep.n_values must be an array of integers");
      c.n_values.push_back(static_cast<int>(*v));
    }
  }
  if (c.runs < 1) throw Error(ErrorCode::ConfigError, "runs must be at least 1");
  return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::ConfigError, "cannot open config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  return parse_run_config(text.str(), path.parent_path().empty() ? Path(".") : path.parent_path());
}

std::string to_toml(const RunConfig& c) {
  toml::table root;
  root.insert("seed", static_cast<std::int64_t>(c.seed));
  root.insert("runs", c.runs);
  root.insert("output_dir", path_string(c.output_dir));

  toml::table corpus;
  if (!c.corpus.empty()) corpus.insert("path", path_string(c.corpus));
  if (!c.train.empty()) corpus.insert("train", path_string(c.train));
  if (!c.test.empty()) corpus.insert("test", path_string(c.test));
  root.insert("corpus", std::move(corpus));

  toml::table backend;
  backend.insert("kind", c.backend.kind == BackendKind::Mock ? "mock" : "http");
  if (!c.backend.base_url.empty()) backend.insert("base_url", c.backend.base_url);
  backend.insert("model", c.backend.model_name);
  backend.insert("temperature", c.backend.temperature);
  backend.insert("top_k", c.backend.top_k_sampling);
  backend.insert("send_top_k", c.backend.send_top_k);
  backend.insert("max_retries", c.backend.max_retries);
  backend.insert("timeout_ms", static_cast<std::int64_t>(c.backend.timeout.count()));
  backend.insert("retry_backoff_ms", static_cast<std::int64_t>(c.backend.retry_backoff.count()));
  backend.insert("api_key_env", c.backend.api_key_env);
  backend.insert("max_inflight", c.backend.max_inflight);
  if (!c.backend.mock_rules_path.empty()) backend.insert("mock_rules", path_string(c.backend.mock_rules_path));
  root.insert("backend", std::move(backend));

  toml::table embeddings;
  if (!c.embeddings.empty()) embeddings.insert("path", path_string(c.embeddings));
  if (!c.embedder.base_url.empty()) embeddings.insert("base_url", c.embedder.base_url);
  embeddings.insert("model", c.embedder.model_name);
  embeddings.insert("api_key_env", c.embedder.api_key_env);
  embeddings.insert("batch_size", static_cast<std::int64_t>(c.embedder.batch_size));
  if (!c.embedding_cache.empty()) embeddings.insert("cache_dir", path_string(c.embedding_cache));
  root.insert("embeddings", std::move(embeddings));

  toml::table prompt;
  prompt.insert("template", c.prompt.flags());
  if (c.probe_prompt) prompt.insert("probe_template", c.probe_prompt->flags());
  const auto defaults = ComponentTexts::defaults();
  toml::table components;
  auto add_override = [&](const char* key, const std::string& value, const std::string& fallback) {
    if (value != fallback) components.insert(key, value);
  };
  add_override("role", c.prompt.texts.role, defaults.role);
  add_override("context", c.prompt.texts.context, defaults.context);
  add_override("linguistic", c.prompt.texts.linguistic, defaults.linguistic);
  add_override("question", c.prompt.texts.question, defaults.question);
  add_override("cot", c.prompt.texts.cot, defaults.cot);
  add_override("guided_cot", c.prompt.texts.guided_cot, defaults.guided_cot);
  add_override("demonstration_header", c.prompt.texts.demonstration_header, defaults.demonstration_header);
  if (!components.empty()) prompt.insert("components", std::move(components));
  root.insert("prompt", std::move(prompt));

  toml::table selection;
  selection.insert("strategy", std::string(strategy_name(c.selection.strategy)));
  selection.insert("n_shot", c.selection.n_shot);
  selection.insert("balance", c.selection.balance);
  selection.insert("k_neighbors", c.selection.k_neighbors);
  selection.insert("cone_normalized", c.selection.cone_normalized);
  root.insert("selection", std::move(selection));

  if (!c.matrix.empty()) root.insert("matrix", toml::table{{"path", path_string(c.matrix)}});

  toml::array n_values;
  for (const int n : c.n_values) n_values.push_back(n);
  root.insert("sweep", toml::table{{"k_min", c.k_min}, {"k_max", c.k_max}, {"n_folds", c.n_folds}, {"n_values", n_values}});

  std::ostringstream out;
  out << root << '\n';
  return out.str();
}

}  // namespace dknn
