#include "dknn/evaluator.hpp"

#include "dknn/error.hpp"

#include <algorithm>
#include <cmath>

namespace dknn {

double auc_mann_whitney(std::span<const ScoredExample> examples) {
  std::vector<double> controls;
  std::vector<double> patients;
  for (const auto& e : examples) (e.gold == Label::Patient ? patients : controls).push_back(e.p_patient);
  if (patients.empty() || controls.empty()) {
    throw Error(ErrorCode::DegenerateLabels, "AUC needs both Patient and Control examples");
  }
  std::sort(controls.begin(), controls.end());
  // Doubled counts keep everything integral: 2 per win, 1 per tie.
  double doubled_wins = 0.0;
  for (const double p : patients) {
    const auto below = std::lower_bound(controls.begin(), controls.end(), p) - controls.begin();
    const auto not_above = std::upper_bound(controls.begin(), controls.end(), p) - controls.begin();
    doubled_wins += 2.0 * static_cast<double>(below) + static_cast<double>(not_above - below);
  }
  const double pairs = static_cast<double>(patients.size()) * static_cast<double>(controls.size());
  return doubled_wins / (2.0 * pairs);
}

RunMetrics score_run(std::span<const ScoredExample> examples) {
  std::size_t correct = 0;
  std::size_t tp = 0;
  std::size_t fn = 0;
  std::size_t tn = 0;
  std::size_t fp = 0;
  for (const auto& e : examples) {
    if (e.predicted == e.gold) ++correct;
    if (e.gold == Label::Patient) {
      (e.predicted == Label::Patient ? tp : fn)++;
    } else {
      (e.predicted == Label::Control ? tn : fp)++;
    }
  }
  RunMetrics m;
  m.auc = auc_mann_whitney(examples);
  m.acc = static_cast<double>(correct) / static_cast<double>(examples.size());
  m.sen = static_cast<double>(tp) / static_cast<double>(tp + fn);
  m.spe = static_cast<double>(tn) / static_cast<double>(tn + fp);
  return m;
}

MetricSummary summarize(std::span<const double> values) {
  MetricSummary s;
  s.per_run.assign(values.begin(), values.end());
  if (values.empty()) return s;
  long double sum = 0.0L;
  for (double v : values) sum += v;
  const long double mean = sum / values.size();
  s.mean = static_cast<double>(mean);
  if (values.size() > 1) {
    long double sq = 0.0L;
    for (double v : values) sq += (v - mean) * (v - mean);
    s.std = static_cast<double>(std::sqrt(sq / (values.size() - 1)));
  }
  return s;
}

EvalReport aggregate(std::span<const RunMetrics> runs, std::size_t n, std::size_t fallback_parse_count) {
  if (runs.empty()) throw Error(ErrorCode::InvalidArgument, "aggregate needs at least one run");
  auto column = [&](double RunMetrics::*field) {
    std::vector<double> values;
    values.reserve(runs.size());
    for (const auto& r : runs) values.push_back(r.*field);
    return summarize(values);
  };
  EvalReport report;
  report.n = n;
  report.acc = column(&RunMetrics::acc);
  report.auc = column(&RunMetrics::auc);
  report.sen = column(&RunMetrics::sen);
  report.spe = column(&RunMetrics::spe);
  report.runs = runs.size();
  report.fallback_parse_count = fallback_parse_count;
  report.single_run = runs.size() == 1;
  return report;
}

}  // namespace dknn
