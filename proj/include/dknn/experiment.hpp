#pragma once

// Experiment drivers: end-to-end evaluation runs, the n-shot / prompt-grid /
// ordering studies, and the cross-validated sweep over the neighbour count.

#include "dknn/corpus.hpp"
#include "dknn/delta_engine.hpp"
#include "dknn/embedding_store.hpp"
#include "dknn/evaluator.hpp"
#include "dknn/llm_gateway.hpp"
#include "dknn/prompt_builder.hpp"
#include "dknn/selector.hpp"

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <utility>
#include <vector>

namespace dknn {

struct ExperimentSetup {
  const Corpus* demo_pool = nullptr;  // demonstrations are drawn from here
  const Corpus* targets = nullptr;    // documents to classify
  PromptTemplate prompt;
  Gateway* gateway = nullptr;
  const DeltaMatrix* matrix = nullptr;        // delta_knn
  const EmbeddingStore* embeddings = nullptr;  // delta_knn, top_k
  SelectionConfig selection;
  int runs = 3;

  /// Throws Error{MissingArtifact} / Error{InvalidArgument}.
  void validate() const;
};

struct PredictionRecord {
  int run = 0;
  std::string id;
  Label gold = Label::Control;
  Label predicted = Label::Control;
  double p_patient = 0.5;
  std::vector<std::string> demos;
  std::string raw;
  ParseStatus parse_status = ParseStatus::Clean;
};

struct ExperimentResult {
  EvalReport report;
  std::vector<PredictionRecord> predictions;  // ordered by run, then target
};

/// Demonstrations for every target in run `run`. Random selection draws a
/// fresh sub-seed per run; the other strategies are run-independent.
std::vector<SelectionResult> select_demonstrations(const ExperimentSetup& setup, int run);

/// Classifies every target with the given demonstrations.
std::vector<PredictionRecord> classify_targets(const ExperimentSetup& setup, std::span<const SelectionResult> selections,
                                               int run);

ExperimentResult run_experiment(const ExperimentSetup& setup);

/// Backend calls run_experiment will issue for classification, excluding
/// the ConE scoring calls.
std::size_t eval_call_count(const ExperimentSetup& setup) noexcept;

/// One report per n; n = 0 routes through the zero-shot path.
std::vector<std::pair<int, ExperimentResult>> sweep_nshot(const ExperimentSetup& setup, std::span<const int> n_values);

/// One report per row of the prompt ablation grid, in row order.
std::vector<std::pair<PromptTemplate, ExperimentResult>> sweep_prompt_grid(const ExperimentSetup& setup);

struct OrderingStudy {
  std::vector<std::vector<int>> permutations;  // lexicographic
  std::vector<double> accuracies;              // mean accuracy over runs
  double min = 0.0;
  double mean = 0.0;
  double std = 0.0;  // sample
  double max = 0.0;
};

/// Fixes each target's selected demonstration set and evaluates every
/// ordering of it, the same permutation applied to all targets.
/// Requires n_shot = 4 (24 orderings).
OrderingStudy ordering_study(const ExperimentSetup& setup);

struct KSweepResult {
  std::vector<std::pair<int, EvalReport>> reports;
  int best_k = 0;  // highest mean accuracy, ties to the smaller k
};

/// Cross-validated choice of k_neighbors on the training set. Each held-out
/// document is classified with delta-KNN demonstrations drawn from the
/// other folds. Throws Error{KTooLarge} if any k exceeds the smallest
/// in-fold pool.
KSweepResult sweep_k(const Corpus& train, const DeltaMatrix& matrix, const EmbeddingStore& embeddings,
                     const PromptTemplate& prompt, Gateway& gateway, std::span<const int> k_values, int n_folds,
                     std::uint64_t seed, const SelectionConfig& selection, int runs);

// Report output.
std::string report_json(const EvalReport& report, const std::string& label);
std::string report_table(const std::vector<std::pair<std::string, EvalReport>>& rows);
void write_predictions(const std::vector<PredictionRecord>& predictions, const std::filesystem::path& path);

}  // namespace dknn
