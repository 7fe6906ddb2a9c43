#pragma once

#include "dknn/embedding_store.hpp"
#include "dknn/llm_gateway.hpp"
#include "dknn/prompt_builder.hpp"
#include "dknn/selector.hpp"

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

namespace dknn {

/// Everything an experiment needs, loadable from TOML. Command-line flags
/// are applied on top of the file by the CLI.
struct RunConfig {
  std::filesystem::path corpus;  // one file with a split column
  std::filesystem::path train;   // or separate split files
  std::filesystem::path test;

  BackendConfig backend;

  std::filesystem::path embeddings;  // JSONL vectors
  RemoteEmbedderConfig embedder;
  std::filesystem::path embedding_cache;

  PromptTemplate prompt = full_template();
  std::optional<PromptTemplate> probe_prompt;

  SelectionConfig selection;
  int runs = 3;
  std::uint64_t seed = 0;
  std::filesystem::path output_dir = "out";
  std::filesystem::path matrix;

  int k_min = 1;
  int k_max = 20;
  int n_folds = 5;
  std::vector<int> n_values{0, 2, 4, 6, 8, 10, 12};

  std::filesystem::path matrix_path() const { return matrix.empty() ? output_dir / "delta_matrix.json" : matrix; }
  std::filesystem::path embeddings_path() const {
    return embeddings.empty() ? output_dir / "embeddings.jsonl" : embeddings;
  }
  const PromptTemplate& probing_prompt() const { return probe_prompt ? *probe_prompt : prompt; }
};

/// Relative paths in the file resolve against the file's directory.
/// Throws Error{ConfigError}.
RunConfig load_run_config(const std::filesystem::path& path);
RunConfig parse_run_config(const std::string& toml_text, const std::filesystem::path& base_dir);

/// TOML rendering; parse_run_config(to_toml(c)) reproduces c.
std::string to_toml(const RunConfig& config);

}  // namespace dknn
