#include "dknn/delta_engine.hpp"

#include "dknn/error.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <cstring>
#include <fstream>
#include <limits>

namespace dknn {

namespace {

using nlohmann::json;

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

void check_runs(int runs) {
  if (runs < 1) throw Error(ErrorCode::InvalidArgument, "runs must be at least 1");
}

ProbeProvenance provenance_of(const PromptTemplate& tmpl, Gateway& gateway) {
  return ProbeProvenance{gateway.config().model_name, tmpl.fingerprint()};
}

RunProbe probe(Gateway& gateway, const PromptInstance& prompt, Label gold) {
  auto prediction = gateway.classify(prompt.chat());
  const double p = correct_label_probability(prediction, gold);
  return RunProbe{std::move(prediction), p};
}

json probe_to_json(const RunProbe& p) {
  return json{{"label", std::string(label_token(p.prediction.label))},
              {"confidence", p.prediction.confidence},
              {"p_correct", p.p_correct},
              {"parse_status", std::string(parse_status_name(p.prediction.parse_status))},
              {"raw", p.prediction.raw.text}};
}

RunProbe probe_from_json(const json& j) {
  RunProbe p;
  p.prediction.label = parse_label_token(j.at("label").get<std::string>());
  p.prediction.confidence = j.at("confidence").get<double>();
  p.prediction.parse_status =
      j.at("parse_status").get<std::string>() == "fallback" ? ParseStatus::Fallback : ParseStatus::Clean;
  p.prediction.raw.text = j.at("raw").get<std::string>();
  p.p_correct = j.at("p_correct").get<double>();
  return p;
}

bool same_bits(double a, double b) {
  if (std::isnan(a) && std::isnan(b)) return true;
  return std::memcmp(&a, &b, sizeof a) == 0;
}

}  // namespace

double OneShotPass::p1(int run, std::size_t demo, std::size_t target) const {
  const auto& slot = probes[flat_index(run, demo, target)];
  return slot ? slot->p_correct : kNaN;
}

std::size_t zero_shot_call_count(std::size_t d, int runs) noexcept { return d * static_cast<std::size_t>(runs); }

std::size_t one_shot_call_count(std::size_t d, int runs) noexcept {
  return d < 2 ? 0 : d * (d - 1) * static_cast<std::size_t>(runs);
}

ZeroShotPass zero_shot_pass(const Corpus& train, const PromptTemplate& tmpl, Gateway& gateway, int runs) {
  check_runs(runs);
  const auto d = train.size();
  ZeroShotPass pass;
  pass.provenance = provenance_of(tmpl, gateway);
  pass.runs = runs;
  pass.records.resize(d);
  std::vector<PromptInstance> prompts;
  prompts.reserve(d);
  for (std::size_t j = 0; j < d; ++j) {
    pass.records[j].doc_id = train[j].id;
    pass.records[j].runs.resize(static_cast<std::size_t>(runs));
    prompts.push_back(build_prompt(tmpl, {}, train[j]));
  }

  gateway.parallel_for(d * static_cast<std::size_t>(runs), [&](std::size_t task) {
    const auto run = task / d;
    const auto j = task % d;
    pass.records[j].runs[run] = probe(gateway, prompts[j], train[j].label);
  });

  for (auto& record : pass.records) {
    long double sum = 0.0L;
    for (const auto& r : record.runs) sum += r.p_correct;
    record.mean_p0 = static_cast<double>(sum / runs);
  }
  return pass;
}

OneShotPass one_shot_pass(const Corpus& train, const PromptTemplate& tmpl, Gateway& gateway, int runs) {
  check_runs(runs);
  const auto d = train.size();
  if (d < 2) throw Error(ErrorCode::TooFewDocuments, "one-shot probing needs at least two documents");
  OneShotPass pass;
  pass.provenance = provenance_of(tmpl, gateway);
  pass.runs = runs;
  pass.doc_ids = train.ids();
  pass.probes.resize(static_cast<std::size_t>(runs) * d * d);

  const auto pairs = d * (d - 1);
  gateway.parallel_for(pairs * static_cast<std::size_t>(runs), [&](std::size_t task) {
    const auto run = static_cast<int>(task / pairs);
    const auto pair = task % pairs;
    const auto demo = pair / (d - 1);
    auto target = pair % (d - 1);
    if (target >= demo) ++target;
    const auto prompt = build_prompt(tmpl, std::span<const Document>(&train[demo], 1), train[target]);
    pass.probes[pass.flat_index(run, demo, target)] = probe(gateway, prompt, train[target].label);
  });
  return pass;
}

// ---------------------------------------------------------------------------

DeltaMatrix::DeltaMatrix(std::vector<std::string> doc_ids, int runs, std::vector<double> values, MatrixMetadata metadata)
    : doc_ids_(std::move(doc_ids)), runs_(runs), values_(std::move(values)), metadata_(std::move(metadata)) {
  const auto d = doc_ids_.size();
  if (values_.size() != d * d) {
    throw Error(ErrorCode::MalformedRecord, "matrix needs " + std::to_string(d * d) + " values, got " +
                                                std::to_string(values_.size()));
  }
  for (std::size_t i = 0; i < d; ++i) {
    if (!index_.emplace(doc_ids_[i], i).second) {
      throw Error(ErrorCode::DuplicateId, "matrix lists \"" + doc_ids_[i] + "\" twice");
    }
    for (std::size_t j = 0; j < d; ++j) {
      double& v = values_[i * d + j];
      if (i == j) {
        v = kNaN;
      } else if (!(v >= -1.0 && v <= 1.0)) {
        throw Error(ErrorCode::MalformedRecord, "delta(" + doc_ids_[i] + ", " + doc_ids_[j] + ") outside [-1, 1]");
      }
    }
  }
}

std::optional<std::size_t> DeltaMatrix::index_of(const std::string& id) const {
  const auto it = index_.find(id);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

double DeltaMatrix::at(std::size_t demo, std::size_t target) const {
  if (demo == target) throw Error(ErrorCode::SelfPairing, "delta of \"" + doc_ids_[demo] + "\" with itself is undefined");
  return values_[demo * size() + target];
}

double DeltaMatrix::at(const std::string& demo, const std::string& target) const {
  const auto i = index_of(demo);
  if (!i) throw Error(ErrorCode::UnknownDocId, "\"" + demo + "\" not in delta matrix");
  const auto j = index_of(target);
  if (!j) throw Error(ErrorCode::UnknownDocId, "\"" + target + "\" not in delta matrix");
  return at(*i, *j);
}

DeltaMatrix DeltaMatrix::scaled(double factor) const {
  auto values = values_;
  for (auto& v : values) v *= factor;
  return DeltaMatrix(doc_ids_, runs_, std::move(values), metadata_);
}

bool operator==(const DeltaMatrix& a, const DeltaMatrix& b) {
  if (a.doc_ids_ != b.doc_ids_ || a.runs_ != b.runs_ || !(a.metadata_ == b.metadata_)) return false;
  for (std::size_t i = 0; i < a.values_.size(); ++i) {
    if (!same_bits(a.values_[i], b.values_[i])) return false;
  }
  return true;
}

DeltaMatrix build_delta_matrix(const ZeroShotPass& zero, const OneShotPass& one, std::string timestamp) {
  if (!(zero.provenance == one.provenance)) {
    throw Error(ErrorCode::FingerprintMismatch, "zero-shot and one-shot passes used different backends or templates");
  }
  if (zero.runs != one.runs) {
    throw Error(ErrorCode::FingerprintMismatch, "zero-shot and one-shot passes ran a different number of times");
  }
  const auto d = one.size();
  if (zero.records.size() != d) throw Error(ErrorCode::FingerprintMismatch, "passes cover different documents");
  for (std::size_t j = 0; j < d; ++j) {
    if (zero.records[j].doc_id != one.doc_ids[j]) {
      throw Error(ErrorCode::FingerprintMismatch, "passes list documents in a different order");
    }
  }

  std::vector<double> values(d * d, kNaN);
  for (std::size_t i = 0; i < d; ++i) {
    for (std::size_t j = 0; j < d; ++j) {
      if (i == j) continue;
      // Extended precision keeps constant-per-run inputs exact.
      long double sum = 0.0L;
      for (int r = 0; r < one.runs; ++r) sum += static_cast<long double>(one.p1(r, i, j)) - zero.p0(r, j);
      values[i * d + j] = static_cast<double>(sum / one.runs);
    }
  }
  return DeltaMatrix(one.doc_ids, one.runs, std::move(values),
                     MatrixMetadata{one.provenance.backend_model, one.provenance.prompt_fingerprint, std::move(timestamp)});
}

void save_matrix(const DeltaMatrix& matrix, const std::filesystem::path& path) {
  json values = json::array();
  for (const double v : matrix.values()) {
    if (std::isnan(v)) {
      values.push_back(nullptr);
    } else {
      values.push_back(v);
    }
  }
  const json j = {{"schema", kMatrixSchemaVersion},
                  {"doc_ids", matrix.doc_ids()},
                  {"runs", matrix.runs()},
                  {"values", std::move(values)},
                  {"metadata",
                   {{"backend_model", matrix.metadata().backend_model},
                    {"prompt_fingerprint", matrix.metadata().prompt_fingerprint},
                    {"timestamp", matrix.metadata().timestamp}}}};
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << j.dump() << '\n';
  if (!out) throw Error(ErrorCode::Io, "failed writing " + path.string());
}

DeltaMatrix load_matrix(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open matrix " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, path.string() + ": " + e.what());
  }
  if (!j.is_object() || !j.contains("schema") || !j["schema"].is_number_integer()) {
    throw Error(ErrorCode::SchemaVersionMismatch, path.string() + " has no schema version");
  }
  if (j["schema"].get<int>() != kMatrixSchemaVersion) {
    throw Error(ErrorCode::SchemaVersionMismatch, path.string() + " has schema " + j["schema"].dump() +
                                                      ", expected " + std::to_string(kMatrixSchemaVersion));
  }
  try {
    auto ids = j.at("doc_ids").get<std::vector<std::string>>();
    const auto d = ids.size();
    std::vector<double> values;
    values.reserve(d * d);
    const auto& raw = j.at("values");
    for (std::size_t k = 0; k < raw.size(); ++k) {
      if (raw[k].is_null()) {
        if (k / (d ? d : 1) != k % (d ? d : 1)) {
          throw Error(ErrorCode::MalformedRecord, "null off-diagonal entry at index " + std::to_string(k));
        }
        values.push_back(kNaN);
      } else {
        values.push_back(raw[k].get<double>());
      }
    }
    MatrixMetadata meta;
    if (j.contains("metadata")) {
      const auto& m = j["metadata"];
      meta.backend_model = m.value("backend_model", std::string());
      meta.prompt_fingerprint = m.value("prompt_fingerprint", std::string());
      meta.timestamp = m.value("timestamp", std::string());
    }
    return DeltaMatrix(std::move(ids), j.at("runs").get<int>(), std::move(values), std::move(meta));
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, path.string() + ": " + e.what());
  }
}

std::filesystem::path raw_records_path(const std::filesystem::path& matrix_path) {
  auto p = matrix_path;
  p.replace_extension(".raw.jsonl");
  return p;
}

void save_raw_records(const ZeroShotPass& zero, const OneShotPass& one, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  const json header = {{"kind", "header"},
                       {"schema", kMatrixSchemaVersion},
                       {"runs", one.runs},
                       {"doc_ids", one.doc_ids},
                       {"backend_model", one.provenance.backend_model},
                       {"prompt_fingerprint", one.provenance.prompt_fingerprint}};
  out << header.dump() << '\n';
  for (int r = 0; r < zero.runs; ++r) {
    for (const auto& record : zero.records) {
      auto j = probe_to_json(record.runs[static_cast<std::size_t>(r)]);
      j["kind"] = "zero_shot";
      j["run"] = r;
      j["target"] = record.doc_id;
      out << j.dump() << '\n';
    }
  }
  const auto d = one.size();
  for (int r = 0; r < one.runs; ++r) {
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t t = 0; t < d; ++t) {
        const auto& slot = one.probes[one.flat_index(r, i, t)];
        if (!slot) continue;
        auto j = probe_to_json(*slot);
        j["kind"] = "one_shot";
        j["run"] = r;
        j["demo"] = one.doc_ids[i];
        j["target"] = one.doc_ids[t];
        out << j.dump() << '\n';
      }
    }
  }
  if (!out) throw Error(ErrorCode::Io, "failed writing " + path.string());
}

std::pair<ZeroShotPass, OneShotPass> load_raw_records(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open raw records " + path.string());
  ZeroShotPass zero;
  OneShotPass one;
  std::unordered_map<std::string, std::size_t> index;
  std::string line;
  std::size_t line_no = 0;
  try {
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const auto j = json::parse(line);
      const auto kind = j.at("kind").get<std::string>();
      if (kind == "header") {
        if (j.at("schema").get<int>() != kMatrixSchemaVersion) {
          throw Error(ErrorCode::SchemaVersionMismatch, path.string() + ": unsupported raw-record schema");
        }
        one.runs = zero.runs = j.at("runs").get<int>();
        one.doc_ids = j.at("doc_ids").get<std::vector<std::string>>();
        one.provenance = {j.at("backend_model").get<std::string>(), j.at("prompt_fingerprint").get<std::string>()};
        zero.provenance = one.provenance;
        const auto d = one.doc_ids.size();
        one.probes.assign(static_cast<std::size_t>(one.runs) * d * d, std::nullopt);
        zero.records.resize(d);
        for (std::size_t i = 0; i < d; ++i) {
          index[one.doc_ids[i]] = i;
          zero.records[i].doc_id = one.doc_ids[i];
          zero.records[i].runs.resize(static_cast<std::size_t>(one.runs));
        }
        continue;
      }
      if (one.runs == 0) throw Error(ErrorCode::MalformedRecord, "raw records start without a header");
      const auto run = j.at("run").get<int>();
      if (run < 0 || run >= one.runs) throw Error(ErrorCode::MalformedRecord, "run index out of range");
      const auto target = index.at(j.at("target").get<std::string>());
      if (kind == "zero_shot") {
        zero.records[target].runs[static_cast<std::size_t>(run)] = probe_from_json(j);
      } else if (kind == "one_shot") {
        const auto demo = index.at(j.at("demo").get<std::string>());
        one.probes[one.flat_index(run, demo, target)] = probe_from_json(j);
      } else {
        throw Error(ErrorCode::MalformedRecord, "unknown record kind \"" + kind + "\"");
      }
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::MalformedRecord, path.string() + " line " + std::to_string(line_no) + ": " + e.what());
  } catch (const std::out_of_range&) {
    throw Error(ErrorCode::UnknownDocId, path.string() + " line " + std::to_string(line_no) + ": id not in header");
  }
  for (auto& record : zero.records) {
    double sum = 0.0;
    for (const auto& r : record.runs) sum += r.p_correct;
    record.mean_p0 = zero.runs > 0 ? sum / zero.runs : 0.0;
  }
  return {std::move(zero), std::move(one)};
}

}  // namespace dknn
