#pragma once

#include "dknn/corpus.hpp"
#include "dknn/delta_engine.hpp"
#include "dknn/embedding_store.hpp"
#include "dknn/llm_gateway.hpp"
#include "dknn/prompt_builder.hpp"

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace dknn {

enum class Strategy { ZeroShot, Random, TopK, DeltaKnn, Cone };

std::string_view strategy_name(Strategy strategy) noexcept;
/// Accepts zero_shot, random, top_k, delta_knn, cone.
Strategy parse_strategy(std::string_view name);
bool strategy_needs_matrix(Strategy strategy) noexcept;
bool strategy_needs_embeddings(Strategy strategy) noexcept;

struct SelectionConfig {
  Strategy strategy = Strategy::DeltaKnn;
  int n_shot = 4;
  bool balance = true;
  int k_neighbors = 13;
  std::uint64_t seed = 0;
  // ConE score divides the summed target logprob by the target token count.
  bool cone_normalized = true;

  /// Throws Error{InvalidArgument} for negative n_shot, odd n_shot under
  /// balance, or k_neighbors < 1.
  void validate() const;
};

struct SelectionResult {
  std::string target_id;
  std::vector<std::string> demo_ids;
  std::vector<double> scores;  // parallel to demo_ids; NaN for random
  Strategy strategy = Strategy::ZeroShot;
  std::vector<std::string> neighbor_ids;  // delta_knn only
};

struct ScoredCandidate {
  std::string doc_id;
  Label label = Label::Control;
  double score = 0.0;
};

/// Candidate ordering used by every scored strategy: score descending,
/// then doc_id ascending.
bool candidate_before(const ScoredCandidate& a, const ScoredCandidate& b) noexcept;

/// Picks `n_shot` candidates: the top n_shot/2 per label when `balance`,
/// otherwise the overall top n_shot; the result is sorted by
/// candidate_before. Throws Error{InsufficientPerLabel}.
std::vector<ScoredCandidate> pick_top(std::vector<ScoredCandidate> candidates, int n_shot, bool balance);

/// Mean of delta(demo, n) over `neighbor_ids`.
/// Throws Error{SelfPairing} if demo_id is listed, Error{UnknownDocId}.
double average_delta(const DeltaMatrix& matrix, const std::string& demo_id, std::span<const std::string> neighbor_ids);

/// Delta-KNN: find the target's k nearest neighbours in `pool`, score each
/// pool document by its average delta over those neighbours (skipping
/// itself when it is one of them), then keep the best n_shot.
/// A candidate whose only neighbour is itself (k = 1) scores 0.
SelectionResult select_delta_knn(const DeltaMatrix& matrix, const EmbeddingStore& embeddings,
                                 const std::string& target_id, const Corpus& pool, const SelectionConfig& config);

/// Nearest pool documents by cosine to the target.
SelectionResult select_top_k_similarity(const EmbeddingStore& embeddings, const std::string& target_id,
                                        const Corpus& pool, const SelectionConfig& config);

/// Uniform sample without replacement, seeded by (config.seed, target_id).
SelectionResult select_random(const Corpus& pool, const std::string& target_id, const SelectionConfig& config);

/// Average target-token logprob given one demonstration (the negated
/// conditional entropy). With normalization off, the plain sum.
double cone_score(std::span<const TokenLogprob> target_logprobs, bool normalized);

/// Context whose continuation (the target text) is scored for ConE: the
/// demonstration block as it would appear in the prompt, followed by the
/// target's "## Text: " prefix.
std::string cone_context(const PromptTemplate& tmpl, const Document& demo);

/// ConE baseline: rank demonstrations by how well they let the model
/// predict the target text. Throws Error{LogprobsUnsupported}.
SelectionResult select_cone(Gateway& gateway, const PromptTemplate& tmpl, const Document& target,
                            const Corpus& pool, const SelectionConfig& config);

}  // namespace dknn
