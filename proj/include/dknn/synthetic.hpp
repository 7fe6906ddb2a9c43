#pragma once

// Synthetic corpora with a known answer: two well-separated embedding
// clusters (one per label) and a table-driven mock model in which a
// same-label demonstration shifts the correct-label probability by
// `same_label_gain` and a cross-label one by `cross_label_gain`.

#include "dknn/corpus.hpp"
#include "dknn/embedding_store.hpp"
#include "dknn/llm_gateway.hpp"

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <random>

namespace dknn {

struct SyntheticSpec {
  std::size_t train_per_label = 10;
  std::size_t test_per_label = 10;
  std::size_t dimension = 16;
  double zero_shot_p_correct = 0.3;
  double same_label_gain = 0.4;
  double cross_label_gain = -0.2;
  double cluster_noise = 0.15;
  std::uint64_t seed = 0;
};

struct SyntheticBundle {
  Corpus corpus;  // train and test splits, texts carry mock sentinels
  EmbeddingStore embeddings;
  MockRule rule;
};

/// Mock answer whose correct-label probability for `gold` is `p_correct`.
MockAnswer answer_with_correct_probability(Label gold, double p_correct);

/// Portable standard-normal draw (Box-Muller).
double standard_normal(std::mt19937_64& rng);

SyntheticBundle make_synthetic(const SyntheticSpec& spec);

/// Writes corpus.jsonl, embeddings.jsonl, mock_rules.json and config.toml
/// into `directory`.
void write_synthetic(const SyntheticBundle& bundle, const std::filesystem::path& directory);

}  // namespace dknn
