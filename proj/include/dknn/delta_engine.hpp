#pragma once

#include "dknn/corpus.hpp"
#include "dknn/llm_gateway.hpp"
#include "dknn/prompt_builder.hpp"

#include <cstddef>
#include <filesystem>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

namespace dknn {

inline constexpr int kMatrixSchemaVersion = 1;

struct RunProbe {
  LabeledPrediction prediction;
  double p_correct = 0.0;
};

struct ZeroShotRecord {
  std::string doc_id;
  std::vector<RunProbe> runs;
  double mean_p0 = 0.0;
};

/// Identifies the model and prompt a probing pass ran against.
struct ProbeProvenance {
  std::string backend_model;
  std::string prompt_fingerprint;

  friend bool operator==(const ProbeProvenance&, const ProbeProvenance&) = default;
};

struct ZeroShotPass {
  ProbeProvenance provenance;
  int runs = 0;
  std::vector<ZeroShotRecord> records;  // corpus order

  /// p_correct of `doc_index` in run `run`.
  double p0(int run, std::size_t doc_index) const { return records[doc_index].runs[static_cast<std::size_t>(run)].p_correct; }
};

/// Raw one-shot probabilities p1[run][demo][target]; the diagonal is NaN.
struct OneShotPass {
  ProbeProvenance provenance;
  int runs = 0;
  std::vector<std::string> doc_ids;
  std::vector<std::optional<RunProbe>> probes;  // flat [run][demo][target]

  std::size_t size() const noexcept { return doc_ids.size(); }
  std::size_t flat_index(int run, std::size_t demo, std::size_t target) const noexcept {
    return (static_cast<std::size_t>(run) * size() + demo) * size() + target;
  }
  double p1(int run, std::size_t demo, std::size_t target) const;
};

/// Backend calls a full matrix build issues: d*runs zero-shot plus
/// d*(d-1)*runs one-shot.
std::size_t zero_shot_call_count(std::size_t d, int runs) noexcept;
std::size_t one_shot_call_count(std::size_t d, int runs) noexcept;

/// Classifies every document `runs` times with no demonstration. Any
/// failed call aborts the pass.
ZeroShotPass zero_shot_pass(const Corpus& train, const PromptTemplate& tmpl, Gateway& gateway, int runs);

/// Classifies every ordered pair (demo i, target j), i != j, `runs` times
/// with the single demonstration i preceding j.
OneShotPass one_shot_pass(const Corpus& train, const PromptTemplate& tmpl, Gateway& gateway, int runs);

struct MatrixMetadata {
  std::string backend_model;
  std::string prompt_fingerprint;
  std::string timestamp;

  friend bool operator==(const MatrixMetadata&, const MatrixMetadata&) = default;
};

/// d x d table of run-averaged one-shot gains. Entry (demo, target) is the
/// mean over runs of p1(demo, target) - p0(target). The diagonal is
/// undefined and never read.
class DeltaMatrix {
 public:
  DeltaMatrix() = default;
  /// `values` is row-major d*d with NaN on the diagonal; off-diagonal
  /// entries must lie in [-1, 1].
  DeltaMatrix(std::vector<std::string> doc_ids, int runs, std::vector<double> values, MatrixMetadata metadata);

  std::size_t size() const noexcept { return doc_ids_.size(); }
  int runs() const noexcept { return runs_; }
  const std::vector<std::string>& doc_ids() const noexcept { return doc_ids_; }
  const MatrixMetadata& metadata() const noexcept { return metadata_; }
  const std::vector<double>& values() const noexcept { return values_; }

  std::optional<std::size_t> index_of(const std::string& id) const;
  bool contains(const std::string& id) const { return index_of(id).has_value(); }

  /// Throws Error{SelfPairing} when demo == target.
  double at(std::size_t demo, std::size_t target) const;
  /// Throws Error{UnknownDocId} or Error{SelfPairing}.
  double at(const std::string& demo, const std::string& target) const;

  /// Same entries multiplied by `factor`. Test helper for scale invariance.
  DeltaMatrix scaled(double factor) const;

  friend bool operator==(const DeltaMatrix& a, const DeltaMatrix& b);

 private:
  std::vector<std::string> doc_ids_;
  int runs_ = 0;
  std::vector<double> values_;
  MatrixMetadata metadata_;
  std::unordered_map<std::string, std::size_t> index_;
};

/// Throws Error{FingerprintMismatch} if the passes disagree on backend,
/// prompt fingerprint, runs, or document order.
DeltaMatrix build_delta_matrix(const ZeroShotPass& zero, const OneShotPass& one, std::string timestamp = {});

void save_matrix(const DeltaMatrix& matrix, const std::filesystem::path& path);
/// Throws Error{Io}, Error{SchemaVersionMismatch}, Error{MalformedRecord}.
DeltaMatrix load_matrix(const std::filesystem::path& path);

/// Per-run raw probe records, one JSON object per line.
void save_raw_records(const ZeroShotPass& zero, const OneShotPass& one, const std::filesystem::path& path);
std::pair<ZeroShotPass, OneShotPass> load_raw_records(const std::filesystem::path& path);

/// Conventional sibling path for the raw records of a matrix file.
std::filesystem::path raw_records_path(const std::filesystem::path& matrix_path);

}  // namespace dknn
