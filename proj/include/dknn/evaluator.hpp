#pragma once

#include "dknn/corpus.hpp"

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace dknn {

struct ScoredExample {
  std::string doc_id;
  Label gold = Label::Control;
  Label predicted = Label::Control;
  double p_patient = 0.5;  // confidence if predicted Patient, else 1 - confidence
};

struct RunMetrics {
  double acc = 0.0;
  double auc = 0.0;
  double sen = 0.0;
  double spe = 0.0;
};

/// Mann-Whitney AUC of `p_patient`: the fraction of (Patient, Control)
/// pairs where the Patient example scores higher, ties counting one half.
/// Throws Error{DegenerateLabels} unless both classes are present.
double auc_mann_whitney(std::span<const ScoredExample> examples);

/// Accuracy, AUC, sensitivity (over gold Patient) and specificity (over
/// gold Control). Throws Error{DegenerateLabels}.
RunMetrics score_run(std::span<const ScoredExample> examples);

struct MetricSummary {
  double mean = 0.0;
  double std = 0.0;  // sample (n-1); 0 for a single run
  std::vector<double> per_run;
};

struct EvalReport {
  std::size_t n = 0;  // examples per run
  MetricSummary acc;
  MetricSummary auc;
  MetricSummary sen;
  MetricSummary spe;
  std::size_t runs = 0;
  std::size_t fallback_parse_count = 0;
  std::string std_kind = "sample";
  bool single_run = false;
};

/// Mean and sample standard deviation of each metric over runs.
EvalReport aggregate(std::span<const RunMetrics> runs, std::size_t n = 0, std::size_t fallback_parse_count = 0);

MetricSummary summarize(std::span<const double> values);

}  // namespace dknn
