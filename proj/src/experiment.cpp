#include "dknn/experiment.hpp"

#include "dknn/error.hpp"
#include "dknn/random.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <fstream>
#include <numeric>

namespace dknn {

namespace {

using nlohmann::json;

bool is_zero_shot(const SelectionConfig& s) { return s.strategy == Strategy::ZeroShot || s.n_shot == 0; }

std::vector<ScoredExample> to_scored(std::span<const PredictionRecord> records) {
  std::vector<ScoredExample> out;
  out.reserve(records.size());
  for (const auto& r : records) out.push_back({r.id, r.gold, r.predicted, r.p_patient});
  return out;
}

std::size_t count_fallbacks(std::span<const PredictionRecord> records) {
  return static_cast<std::size_t>(std::count_if(records.begin(), records.end(), [](const PredictionRecord& r) {
    return r.parse_status == ParseStatus::Fallback;
  }));
}

json summary_json(const MetricSummary& s) { return json{{"mean", s.mean}, {"std", s.std}, {"per_run", s.per_run}}; }

std::string cell(const MetricSummary& s) { return fmt::format("{:.1f} ({:.1f})", 100.0 * s.mean, 100.0 * s.std); }

}  // namespace

void ExperimentSetup::validate() const {
  if (!demo_pool || !targets || !gateway) throw Error(ErrorCode::InvalidArgument, "experiment needs pool, targets and gateway");
  if (runs < 1) throw Error(ErrorCode::InvalidArgument, "runs must be at least 1");
  selection.validate();
  prompt.validate();
  if (is_zero_shot(selection)) return;
  if (strategy_needs_matrix(selection.strategy) && !matrix) {
    throw Error(ErrorCode::MissingArtifact, "strategy " + std::string(strategy_name(selection.strategy)) +
                                                " needs a delta matrix (produce one with `dknn build-matrix`)");
  }
  if (strategy_needs_embeddings(selection.strategy) && !embeddings) {
    throw Error(ErrorCode::MissingArtifact, "strategy " + std::string(strategy_name(selection.strategy)) +
                                                " needs document embeddings (produce them with `dknn embed`)");
  }
}

std::vector<SelectionResult> select_demonstrations(const ExperimentSetup& setup, int run) {
  const auto& targets = *setup.targets;
  std::vector<SelectionResult> out(targets.size());
  if (is_zero_shot(setup.selection)) {
    for (std::size_t t = 0; t < targets.size(); ++t) {
      out[t].target_id = targets[t].id;
      out[t].strategy = Strategy::ZeroShot;
    }
    return out;
  }
  auto config = setup.selection;
  switch (config.strategy) {
    case Strategy::Random:
      config.seed = derive_seed(setup.selection.seed, "random-selection", static_cast<std::uint64_t>(run));
      for (std::size_t t = 0; t < targets.size(); ++t) out[t] = select_random(*setup.demo_pool, targets[t].id, config);
      break;
    case Strategy::TopK:
      for (std::size_t t = 0; t < targets.size(); ++t) {
        out[t] = select_top_k_similarity(*setup.embeddings, targets[t].id, *setup.demo_pool, config);
      }
      break;
    case Strategy::DeltaKnn:
      for (std::size_t t = 0; t < targets.size(); ++t) {
        out[t] = select_delta_knn(*setup.matrix, *setup.embeddings, targets[t].id, *setup.demo_pool, config);
      }
      break;
    case Strategy::Cone:
      // ConE fans out over candidates internally; targets stay sequential.
      for (std::size_t t = 0; t < targets.size(); ++t) {
        out[t] = select_cone(*setup.gateway, setup.prompt, targets[t], *setup.demo_pool, config);
      }
      break;
    case Strategy::ZeroShot:
      break;
  }
  return out;
}

std::vector<PredictionRecord> classify_targets(const ExperimentSetup& setup, std::span<const SelectionResult> selections,
                                               int run) {
  const auto& targets = *setup.targets;
  if (selections.size() != targets.size()) throw Error(ErrorCode::InvalidArgument, "one selection per target expected");
  std::vector<PredictionRecord> out(targets.size());
  setup.gateway->parallel_for(targets.size(), [&](std::size_t t) {
    const auto& target = targets[t];
    std::vector<Document> demos;
    demos.reserve(selections[t].demo_ids.size());
    for (const auto& id : selections[t].demo_ids) demos.push_back(setup.demo_pool->at(id));
    const auto prompt = build_prompt(setup.prompt, demos, target);
    const auto prediction = setup.gateway->classify(prompt.chat());

    auto& record = out[t];
    record.run = run;
    record.id = target.id;
    record.gold = target.label;
    record.predicted = prediction.label;
    record.p_patient = prediction.label == Label::Patient ? prediction.confidence : 1.0 - prediction.confidence;
    record.demos = selections[t].demo_ids;
    record.raw = prediction.raw.text;
    record.parse_status = prediction.parse_status;
  });
  return out;
}

ExperimentResult run_experiment(const ExperimentSetup& setup) {
  setup.validate();
  ExperimentResult result;
  std::vector<RunMetrics> metrics;
  std::vector<SelectionResult> fixed;
  const bool per_run = !is_zero_shot(setup.selection) && setup.selection.strategy == Strategy::Random;
  for (int run = 0; run < setup.runs; ++run) {
    if (run == 0 || per_run) fixed = select_demonstrations(setup, run);
    auto records = classify_targets(setup, fixed, run);
    metrics.push_back(score_run(to_scored(records)));
    result.predictions.insert(result.predictions.end(), records.begin(), records.end());
  }
  result.report = aggregate(metrics, setup.targets->size(), count_fallbacks(result.predictions));
  return result;
}

std::size_t eval_call_count(const ExperimentSetup& setup) noexcept {
  return setup.targets ? setup.targets->size() * static_cast<std::size_t>(std::max(setup.runs, 0)) : 0;
}

std::vector<std::pair<int, ExperimentResult>> sweep_nshot(const ExperimentSetup& setup, std::span<const int> n_values) {
  std::vector<std::pair<int, ExperimentResult>> out;
  for (const int n : n_values) {
    auto point = setup;
    point.selection.n_shot = n;
    if (n == 0) point.selection.strategy = Strategy::ZeroShot;
    out.emplace_back(n, run_experiment(point));
  }
  return out;
}

std::vector<std::pair<PromptTemplate, ExperimentResult>> sweep_prompt_grid(const ExperimentSetup& setup) {
  std::vector<std::pair<PromptTemplate, ExperimentResult>> out;
  for (const auto& row : ablation_grid(setup.prompt.texts)) {
    auto point = setup;
    point.prompt = row;
    out.emplace_back(row, run_experiment(point));
  }
  return out;
}

OrderingStudy ordering_study(const ExperimentSetup& setup) {
  setup.validate();
  if (setup.selection.n_shot != 4 || is_zero_shot(setup.selection)) {
    throw Error(ErrorCode::InvalidArgument, "ordering study needs a 4-shot strategy");
  }
  const auto base = select_demonstrations(setup, 0);
  OrderingStudy study;
  std::vector<int> perm{0, 1, 2, 3};
  do {
    std::vector<SelectionResult> reordered = base;
    for (std::size_t t = 0; t < base.size(); ++t) {
      for (std::size_t i = 0; i < perm.size(); ++i) {
        reordered[t].demo_ids[i] = base[t].demo_ids[static_cast<std::size_t>(perm[i])];
        reordered[t].scores[i] = base[t].scores[static_cast<std::size_t>(perm[i])];
      }
    }
    double acc = 0.0;
    for (int run = 0; run < setup.runs; ++run) acc += score_run(to_scored(classify_targets(setup, reordered, run))).acc;
    study.permutations.push_back(perm);
    study.accuracies.push_back(acc / setup.runs);
  } while (std::next_permutation(perm.begin(), perm.end()));

  const auto summary = summarize(study.accuracies);
  study.mean = summary.mean;
  study.std = summary.std;
  study.min = *std::min_element(study.accuracies.begin(), study.accuracies.end());
  study.max = *std::max_element(study.accuracies.begin(), study.accuracies.end());
  return study;
}

KSweepResult sweep_k(const Corpus& train, const DeltaMatrix& matrix, const EmbeddingStore& embeddings,
                     const PromptTemplate& prompt, Gateway& gateway, std::span<const int> k_values, int n_folds,
                     std::uint64_t seed, const SelectionConfig& selection, int runs) {
  if (k_values.empty()) throw Error(ErrorCode::InvalidArgument, "empty k range");
  const auto folds = make_folds(train, n_folds, derive_seed(seed, "folds"));

  std::vector<Corpus> held_out;
  std::vector<Corpus> pools;
  std::size_t smallest_pool = train.size();
  for (int f = 0; f < n_folds; ++f) {
    std::vector<std::string> in_fold;
    std::vector<std::string> out_of_fold;
    for (const auto& d : train) (folds.fold_of(d.id) == f ? in_fold : out_of_fold).push_back(d.id);
    held_out.push_back(train.subset(in_fold, train.name() + ":fold" + std::to_string(f)));
    pools.push_back(train.subset(out_of_fold, train.name() + ":pool" + std::to_string(f)));
    smallest_pool = std::min(smallest_pool, out_of_fold.size());
  }
  for (const int k : k_values) {
    if (k < 1 || static_cast<std::size_t>(k) > smallest_pool) {
      throw Error(ErrorCode::KTooLarge, "k=" + std::to_string(k) + " outside [1, " + std::to_string(smallest_pool) + "]");
    }
  }

  KSweepResult result;
  double best_acc = -1.0;
  for (const int k : k_values) {
    std::vector<RunMetrics> metrics;
    std::size_t fallbacks = 0;
    for (int run = 0; run < runs; ++run) {
      std::vector<PredictionRecord> all;
      for (int f = 0; f < n_folds; ++f) {
        ExperimentSetup setup;
        setup.demo_pool = &pools[static_cast<std::size_t>(f)];
        setup.targets = &held_out[static_cast<std::size_t>(f)];
        setup.prompt = prompt;
        setup.gateway = &gateway;
        setup.matrix = &matrix;
        setup.embeddings = &embeddings;
        setup.selection = selection;
        setup.selection.strategy = Strategy::DeltaKnn;
        setup.selection.k_neighbors = k;
        setup.runs = runs;
        const auto selections = select_demonstrations(setup, run);
        auto records = classify_targets(setup, selections, run);
        all.insert(all.end(), records.begin(), records.end());
      }
      fallbacks += count_fallbacks(all);
      metrics.push_back(score_run(to_scored(all)));
    }
    auto report = aggregate(metrics, train.size(), fallbacks);
    if (report.acc.mean > best_acc) {
      best_acc = report.acc.mean;
      result.best_k = k;
    }
    result.reports.emplace_back(k, std::move(report));
  }
  // Ties go to the smaller k even when k_values is not ascending.
  for (const auto& [k, report] : result.reports) {
    if (report.acc.mean == best_acc && k < result.best_k) result.best_k = k;
  }
  return result;
}

std::string report_json(const EvalReport& report, const std::string& label) {
  const json j = {{"label", label},
                  {"n", report.n},
                  {"runs", report.runs},
                  {"std_kind", report.std_kind},
                  {"single_run", report.single_run},
                  {"fallback_parse_count", report.fallback_parse_count},
                  {"metrics",
                   {{"acc", summary_json(report.acc)},
                    {"auc", summary_json(report.auc)},
                    {"sen", summary_json(report.sen)},
                    {"spe", summary_json(report.spe)}}}};
  return j.dump(2) + "\n";
}

std::string report_table(const std::vector<std::pair<std::string, EvalReport>>& rows) {
  std::size_t width = 6;
  for (const auto& [label, _] : rows) width = std::max(width, label.size());
  std::string out = fmt::format("{:<{}}  {:>12}  {:>12}  {:>12}  {:>12}  {:>5}\n", "Method", width, "ACC", "AUC", "SEN",
                                "SPE", "runs");
  for (const auto& [label, r] : rows) {
    out += fmt::format("{:<{}}  {:>12}  {:>12}  {:>12}  {:>12}  {:>5}\n", label, width, cell(r.acc), cell(r.auc),
                       cell(r.sen), cell(r.spe), r.runs);
  }
  out += "values: mean (sample std) over runs, in percent\n";
  return out;
}

void write_predictions(const std::vector<PredictionRecord>& predictions, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  for (const auto& p : predictions) {
    const json j = {{"id", p.id},
                    {"run", p.run},
                    {"gold", std::string(label_token(p.gold))},
                    {"pred", std::string(label_token(p.predicted))},
                    {"p_patient", p.p_patient},
                    {"demos", p.demos},
                    {"parse_status", std::string(parse_status_name(p.parse_status))},
                    {"raw", p.raw}};
    out << j.dump() << '\n';
  }
}

}  // namespace dknn
