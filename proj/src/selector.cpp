#include "dknn/selector.hpp"

#include "dknn/error.hpp"
#include "dknn/random.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>

namespace dknn {

namespace {

std::vector<const Document*> candidates_excluding(const Corpus& pool, const std::string& target_id) {
  std::vector<const Document*> out;
  out.reserve(pool.size());
  for (const auto& d : pool) {
    if (d.id != target_id) out.push_back(&d);
  }
  return out;
}

SelectionResult to_result(const std::string& target_id, Strategy strategy, const std::vector<ScoredCandidate>& picked) {
  SelectionResult out;
  out.target_id = target_id;
  out.strategy = strategy;
  for (const auto& c : picked) {
    out.demo_ids.push_back(c.doc_id);
    out.scores.push_back(c.score);
  }
  return out;
}

}  // namespace

std::string_view strategy_name(Strategy strategy) noexcept {
  switch (strategy) {
    case Strategy::ZeroShot: return "zero_shot";
    case Strategy::Random: return "random";
    case Strategy::TopK: return "top_k";
    case Strategy::DeltaKnn: return "delta_knn";
    case Strategy::Cone: return "cone";
  }
  return "zero_shot";
}

Strategy parse_strategy(std::string_view name) {
  for (auto s : {Strategy::ZeroShot, Strategy::Random, Strategy::TopK, Strategy::DeltaKnn, Strategy::Cone}) {
    if (strategy_name(s) == name) return s;
  }
  throw Error(ErrorCode::ConfigError, "unknown strategy \"" + std::string(name) +
                                          "\" (expected zero_shot, random, top_k, delta_knn, cone)");
}

bool strategy_needs_matrix(Strategy strategy) noexcept { return strategy == Strategy::DeltaKnn; }

bool strategy_needs_embeddings(Strategy strategy) noexcept {
  return strategy == Strategy::DeltaKnn || strategy == Strategy::TopK;
}

void SelectionConfig::validate() const {
  if (n_shot < 0) throw Error(ErrorCode::InvalidArgument, "n_shot must be non-negative");
  if (balance && n_shot % 2 != 0) throw Error(ErrorCode::InvalidArgument, "balanced selection needs an even n_shot");
  if (k_neighbors < 1) throw Error(ErrorCode::InvalidArgument, "k_neighbors must be positive");
}

bool candidate_before(const ScoredCandidate& a, const ScoredCandidate& b) noexcept {
  if (a.score != b.score) return a.score > b.score;
  return a.doc_id < b.doc_id;
}

std::vector<ScoredCandidate> pick_top(std::vector<ScoredCandidate> candidates, int n_shot, bool balance) {
  std::sort(candidates.begin(), candidates.end(), candidate_before);
  std::vector<ScoredCandidate> picked;
  const auto n = static_cast<std::size_t>(n_shot);
  if (!balance) {
    if (candidates.size() < n) {
      throw Error(ErrorCode::InsufficientPerLabel, "pool has " + std::to_string(candidates.size()) +
                                                       " candidates for " + std::to_string(n_shot) + " shots");
    }
    picked.assign(candidates.begin(), candidates.begin() + static_cast<std::ptrdiff_t>(n));
    return picked;
  }
  const auto per_label = n / 2;
  for (const Label label : {Label::Patient, Label::Control}) {
    std::size_t taken = 0;
    for (const auto& c : candidates) {
      if (taken == per_label) break;
      if (c.label == label) {
        picked.push_back(c);
        ++taken;
      }
    }
    if (taken < per_label) {
      throw Error(ErrorCode::InsufficientPerLabel, "need " + std::to_string(per_label) + " " +
                                                       std::string(label_token(label)) + " demonstrations, pool has " +
                                                       std::to_string(taken));
    }
  }
  std::sort(picked.begin(), picked.end(), candidate_before);
  return picked;
}

double average_delta(const DeltaMatrix& matrix, const std::string& demo_id, std::span<const std::string> neighbor_ids) {
  if (neighbor_ids.empty()) throw Error(ErrorCode::InvalidArgument, "average over no neighbours");
  double sum = 0.0;
  for (const auto& n : neighbor_ids) sum += matrix.at(demo_id, n);
  return sum / static_cast<double>(neighbor_ids.size());
}

SelectionResult select_delta_knn(const DeltaMatrix& matrix, const EmbeddingStore& embeddings,
                                 const std::string& target_id, const Corpus& pool, const SelectionConfig& config) {
  config.validate();
  const auto candidates = candidates_excluding(pool, target_id);
  std::vector<std::string> pool_ids;
  pool_ids.reserve(candidates.size());
  for (const auto* d : candidates) pool_ids.push_back(d->id);
  if (static_cast<std::size_t>(config.k_neighbors) > pool_ids.size()) {
    throw Error(ErrorCode::KTooLarge, "k=" + std::to_string(config.k_neighbors) + " exceeds pool size " +
                                          std::to_string(pool_ids.size()));
  }
  const auto neighbors = embeddings.nearest_neighbors(target_id, pool_ids, static_cast<std::size_t>(config.k_neighbors)).ids();

  std::vector<ScoredCandidate> scored;
  scored.reserve(candidates.size());
  std::vector<std::string> others;
  for (const auto* demo : candidates) {
    others.clear();
    for (const auto& n : neighbors) {
      if (n != demo->id) others.push_back(n);
    }
    const double score = others.empty() ? 0.0 : average_delta(matrix, demo->id, others);
    scored.push_back({demo->id, demo->label, score});
  }
  auto result = to_result(target_id, Strategy::DeltaKnn, pick_top(std::move(scored), config.n_shot, config.balance));
  result.neighbor_ids = neighbors;
  return result;
}

SelectionResult select_top_k_similarity(const EmbeddingStore& embeddings, const std::string& target_id,
                                        const Corpus& pool, const SelectionConfig& config) {
  config.validate();
  const auto& target = embeddings.at(target_id).values;
  std::vector<ScoredCandidate> scored;
  for (const auto* demo : candidates_excluding(pool, target_id)) {
    scored.push_back({demo->id, demo->label, cosine(embeddings.at(demo->id).values, target)});
  }
  return to_result(target_id, Strategy::TopK, pick_top(std::move(scored), config.n_shot, config.balance));
}

SelectionResult select_random(const Corpus& pool, const std::string& target_id, const SelectionConfig& config) {
  config.validate();
  auto candidates = candidates_excluding(pool, target_id);
  std::sort(candidates.begin(), candidates.end(), [](const Document* a, const Document* b) { return a->id < b->id; });
  std::mt19937_64 rng(derive_seed(config.seed, target_id));

  SelectionResult out;
  out.target_id = target_id;
  out.strategy = Strategy::Random;
  auto draw = [&](std::vector<const Document*> group, std::size_t count, std::string_view what) {
    if (group.size() < count) {
      throw Error(ErrorCode::InsufficientPerLabel, "need " + std::to_string(count) + " " + std::string(what) +
                                                       " demonstrations, pool has " + std::to_string(group.size()));
    }
    // Partial Fisher-Yates: the first `count` slots are the sample.
    for (std::size_t i = 0; i < count; ++i) {
      const auto j = i + static_cast<std::size_t>(uniform_below(rng, group.size() - i));
      std::swap(group[i], group[j]);
      out.demo_ids.push_back(group[i]->id);
      out.scores.push_back(std::numeric_limits<double>::quiet_NaN());
    }
  };

  const auto n = static_cast<std::size_t>(config.n_shot);
  if (!config.balance) {
    draw(candidates, n, "");
    return out;
  }
  for (const Label label : {Label::Patient, Label::Control}) {
    std::vector<const Document*> group;
    for (const auto* d : candidates) {
      if (d->label == label) group.push_back(d);
    }
    draw(std::move(group), n / 2, label_token(label));
  }
  // Interleave labels in a seeded order so position carries no label cue.
  std::vector<std::size_t> order(out.demo_ids.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  portable_shuffle(std::span<std::size_t>(order), rng);
  SelectionResult shuffled = out;
  for (std::size_t i = 0; i < order.size(); ++i) {
    shuffled.demo_ids[i] = out.demo_ids[order[i]];
    shuffled.scores[i] = out.scores[order[i]];
  }
  return shuffled;
}

double cone_score(std::span<const TokenLogprob> target_logprobs, bool normalized) {
  if (target_logprobs.empty()) throw Error(ErrorCode::LogprobsUnsupported, "no target tokens were scored");
  double sum = 0.0;
  for (const auto& t : target_logprobs) sum += t.logprob;
  return normalized ? sum / static_cast<double>(target_logprobs.size()) : sum;
}

std::string cone_context(const PromptTemplate& tmpl, const Document& demo) {
  std::string context = tmpl.texts.demonstration_header;
  if (!context.empty()) context += "\n";
  return context + format_demonstration(demo) + "\n\n## Text: ";
}

SelectionResult select_cone(Gateway& gateway, const PromptTemplate& tmpl, const Document& target,
                            const Corpus& pool, const SelectionConfig& config) {
  config.validate();
  const auto candidates = candidates_excluding(pool, target.id);
  std::vector<ScoredCandidate> scored(candidates.size());
  gateway.parallel_for(candidates.size(), [&](std::size_t i) {
    const auto logprobs = gateway.score_continuation(cone_context(tmpl, *candidates[i]), target.text);
    scored[i] = {candidates[i]->id, candidates[i]->label, cone_score(logprobs, config.cone_normalized)};
  });
  return to_result(target.id, Strategy::Cone, pick_top(std::move(scored), config.n_shot, config.balance));
}

}  // namespace dknn
