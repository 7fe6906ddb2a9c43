#include "dknn/corpus.hpp"

#include "dknn/error.hpp"
#include "dknn/random.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cctype>
#include <fstream>
#include <random>
#include <sstream>

namespace dknn {

namespace {

using nlohmann::json;

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

bool blank(std::string_view s) {
  return std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isspace(c); });
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::Io, "cannot open " + path.string());
  std::ostringstream buf;
  buf << in.rdbuf();
  return buf.str();
}

[[noreturn]] void malformed(std::size_t line, const std::string& reason) {
  throw Error(ErrorCode::MalformedRecord, "line " + std::to_string(line) + ": " + reason);
}

Document document_from_fields(std::size_t line, std::string id, std::string text,
                              std::string_view label, std::string_view split) {
  if (id.empty()) malformed(line, "empty id");
  Document doc;
  doc.id = std::move(id);
  doc.text = std::move(text);
  try {
    doc.label = parse_label_token(label);
    doc.split = split.empty() ? Split::Train : parse_split_token(split);
  } catch (const Error& e) {
    malformed(line, e.what());
  }
  return doc;
}

std::vector<std::pair<std::size_t, Document>> parse_jsonl(std::string_view content) {
  std::vector<std::pair<std::size_t, Document>> out;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= content.size()) {
    const auto nl = content.find('\n', pos);
    const auto line = content.substr(pos, nl == std::string_view::npos ? content.npos : nl - pos);
    ++line_no;
    pos = nl == std::string_view::npos ? content.size() + 1 : nl + 1;
    if (blank(line)) continue;

    json record;
    try {
      record = json::parse(line);
    } catch (const json::parse_error& e) {
      malformed(line_no, std::string("invalid JSON: ") + e.what());
    }
    if (!record.is_object()) malformed(line_no, "record is not an object");
    for (const char* key : {"id", "text", "label"}) {
      if (!record.contains(key) || !record[key].is_string()) {
        malformed(line_no, std::string("missing string field '") + key + "'");
      }
    }
    std::string split;
    if (record.contains("split")) {
      if (!record["split"].is_string()) malformed(line_no, "'split' must be a string");
      split = record["split"].get<std::string>();
    }
    out.emplace_back(line_no, document_from_fields(line_no, record["id"].get<std::string>(),
                                                   record["text"].get<std::string>(),
                                                   record["label"].get<std::string>(), split));
  }
  return out;
}

struct CsvRow {
  std::size_t line = 0;
  std::vector<std::string> fields;
};

// RFC 4180: quoted fields may hold commas, doubled quotes and newlines.
std::vector<CsvRow> split_csv(std::string_view content) {
  std::vector<CsvRow> rows;
  CsvRow row;
  std::string field;
  std::size_t line = 1;
  row.line = 1;
  bool quoted = false;
  bool any = false;
  for (std::size_t i = 0; i < content.size(); ++i) {
    const char c = content[i];
    if (quoted) {
      if (c == '"') {
        if (i + 1 < content.size() && content[i + 1] == '"') {
          field.push_back('"');
          ++i;
        } else {
          quoted = false;
        }
      } else {
        if (c == '\n') ++line;
        field.push_back(c);
      }
      continue;
    }
    switch (c) {
      case '"':
        quoted = true;
        any = true;
        break;
      case ',':
        row.fields.push_back(std::move(field));
        field.clear();
        any = true;
        break;
      case '\r':
        break;
      case '\n':
        if (any || !field.empty()) {
          row.fields.push_back(std::move(field));
          rows.push_back(std::move(row));
        }
        field.clear();
        row = CsvRow{};
        row.line = ++line;
        any = false;
        break;
      default:
        field.push_back(c);
        any = true;
    }
  }
  if (quoted) malformed(row.line, "unterminated quoted field");
  if (any || !field.empty()) {
    row.fields.push_back(std::move(field));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::vector<std::pair<std::size_t, Document>> parse_csv(std::string_view content) {
  auto rows = split_csv(content);
  if (rows.empty()) malformed(1, "missing header");
  const auto& header = rows.front().fields;
  std::array<int, 4> column{-1, -1, -1, -1};
  static constexpr std::array<std::string_view, 4> kNames{"id", "text", "label", "split"};
  for (std::size_t c = 0; c < header.size(); ++c) {
    for (std::size_t k = 0; k < kNames.size(); ++k) {
      if (lower(header[c]) == kNames[k]) column[k] = static_cast<int>(c);
    }
  }
  for (std::size_t k = 0; k < 3; ++k) {
    if (column[k] < 0) malformed(1, "header lacks column '" + std::string(kNames[k]) + "'");
  }

  std::vector<std::pair<std::size_t, Document>> out;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    auto& fields = rows[r].fields;
    if (fields.size() != header.size()) {
      malformed(rows[r].line, "expected " + std::to_string(header.size()) + " fields, found " +
                                  std::to_string(fields.size()));
    }
    const std::string split = column[3] >= 0 ? fields[column[3]] : std::string();
    out.emplace_back(rows[r].line,
                     document_from_fields(rows[r].line, fields[column[0]], fields[column[1]],
                                          fields[column[2]], split));
  }
  return out;
}

std::string csv_quote(std::string_view s) {
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out.push_back('"');
    out.push_back(c);
  }
  out.push_back('"');
  return out;
}

}  // namespace

std::string_view label_token(Label label) noexcept {
  return label == Label::Patient ? "P" : "H";
}

Label parse_label_token(std::string_view token) {
  const auto t = lower(token);
  if (t == "p") return Label::Patient;
  if (t == "h") return Label::Control;
  throw Error(ErrorCode::MalformedRecord, "label must be \"P\" or \"H\", got \"" + std::string(token) + "\"");
}

std::string_view split_token(Split split) noexcept {
  switch (split) {
    case Split::Train: return "train";
    case Split::Test: return "test";
    case Split::Unassigned: return "unassigned";
  }
  return "unassigned";
}

Split parse_split_token(std::string_view token) {
  const auto t = lower(token);
  if (t == "train") return Split::Train;
  if (t == "test") return Split::Test;
  if (t == "unassigned") return Split::Unassigned;
  throw Error(ErrorCode::MalformedRecord, "unknown split \"" + std::string(token) + "\"");
}

Corpus::Corpus(std::string name, std::vector<Document> documents)
    : name_(std::move(name)), documents_(std::move(documents)) {
  index_.reserve(documents_.size());
  for (std::size_t i = 0; i < documents_.size(); ++i) {
    const auto& doc = documents_[i];
    if (blank(doc.text)) throw Error(ErrorCode::EmptyText, "document \"" + doc.id + "\" has empty text");
    if (!index_.emplace(doc.id, i).second) {
      throw Error(ErrorCode::DuplicateId, "duplicate document id \"" + doc.id + "\"");
    }
  }
}

bool Corpus::contains(std::string_view id) const { return find(id) != nullptr; }

const Document* Corpus::find(std::string_view id) const {
  const auto it = index_.find(std::string(id));
  return it == index_.end() ? nullptr : &documents_[it->second];
}

const Document& Corpus::at(std::string_view id) const {
  if (const auto* doc = find(id)) return *doc;
  throw Error(ErrorCode::UnknownDocId, "document \"" + std::string(id) + "\" not in corpus " + name_);
}

std::size_t Corpus::count(Label label) const noexcept {
  return static_cast<std::size_t>(std::count_if(
      documents_.begin(), documents_.end(), [label](const Document& d) { return d.label == label; }));
}

std::vector<std::string> Corpus::ids() const {
  std::vector<std::string> out;
  out.reserve(documents_.size());
  for (const auto& d : documents_) out.push_back(d.id);
  return out;
}

Corpus Corpus::with_split(Split split) const {
  std::vector<Document> docs;
  for (const auto& d : documents_) {
    if (d.split == split) docs.push_back(d);
  }
  return Corpus(name_ + ":" + std::string(split_token(split)), std::move(docs));
}

Corpus Corpus::subset(const std::vector<std::string>& ids, std::string name) const {
  std::unordered_map<std::string, bool> wanted;
  for (const auto& id : ids) {
    at(id);
    wanted.emplace(id, true);
  }
  std::vector<Document> docs;
  for (const auto& d : documents_) {
    if (wanted.count(d.id)) docs.push_back(d);
  }
  return Corpus(name.empty() ? name_ : std::move(name), std::move(docs));
}

Corpus Corpus::without(std::string_view id) const {
  std::vector<Document> docs;
  docs.reserve(documents_.size());
  for (const auto& d : documents_) {
    if (d.id != id) docs.push_back(d);
  }
  return Corpus(name_, std::move(docs));
}

CorpusFormat format_for_path(const std::filesystem::path& path) {
  return lower(path.extension().string()) == ".csv" ? CorpusFormat::Csv : CorpusFormat::Jsonl;
}

Corpus parse_corpus(std::string_view content, CorpusFormat format, std::string name) {
  auto records = format == CorpusFormat::Jsonl ? parse_jsonl(content) : parse_csv(content);
  std::vector<Document> docs;
  std::unordered_map<std::string, std::size_t> seen;
  docs.reserve(records.size());
  for (auto& [line, doc] : records) {
    if (blank(doc.text)) {
      throw Error(ErrorCode::EmptyText, "line " + std::to_string(line) + ": document \"" + doc.id +
                                            "\" has empty text");
    }
    if (const auto [it, inserted] = seen.emplace(doc.id, line); !inserted) {
      throw Error(ErrorCode::DuplicateId, "line " + std::to_string(line) + ": id \"" + doc.id +
                                              "\" already used on line " + std::to_string(it->second));
    }
    docs.push_back(std::move(doc));
  }
  return Corpus(std::move(name), std::move(docs));
}

Corpus load_corpus(const std::filesystem::path& path, CorpusFormat format) {
  return parse_corpus(read_file(path), format, path.stem().string());
}

Corpus load_corpus(const std::filesystem::path& path) { return load_corpus(path, format_for_path(path)); }

void save_corpus(const Corpus& corpus, const std::filesystem::path& path, CorpusFormat format) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  if (format == CorpusFormat::Jsonl) {
    for (const auto& d : corpus) {
      json record = {{"id", d.id},
                     {"text", d.text},
                     {"label", std::string(label_token(d.label))},
                     {"split", std::string(split_token(d.split))}};
      out << record.dump() << '\n';
    }
  } else {
    out << "id,text,label,split\n";
    for (const auto& d : corpus) {
      out << csv_quote(d.id) << ',' << csv_quote(d.text) << ',' << label_token(d.label) << ','
          << split_token(d.split) << '\n';
    }
  }
  if (!out) throw Error(ErrorCode::Io, "failed writing " + path.string());
}

int FoldAssignment::fold_of(std::string_view id) const {
  const auto it = assignment.find(std::string(id));
  if (it == assignment.end()) throw Error(ErrorCode::UnknownDocId, "no fold for \"" + std::string(id) + "\"");
  return it->second;
}

std::vector<std::string> FoldAssignment::members(int fold) const {
  std::vector<std::string> out;
  for (const auto& [id, f] : assignment) {
    if (f == fold) out.push_back(id);
  }
  return out;
}

FoldAssignment make_folds(const Corpus& corpus, int n_folds, std::uint64_t seed) {
  if (n_folds < 2) throw Error(ErrorCode::TooFewDocuments, "n_folds must be at least 2");
  const auto min_label = std::min(corpus.count(Label::Patient), corpus.count(Label::Control));
  if (static_cast<std::size_t>(n_folds) > min_label) {
    throw Error(ErrorCode::TooFewDocuments, std::to_string(n_folds) + " folds need at least that many documents of each label; smallest label has " +
                                                std::to_string(min_label));
  }

  FoldAssignment folds;
  folds.n_folds = n_folds;
  folds.seed = seed;
  std::size_t deal = 0;
  for (const Label label : {Label::Patient, Label::Control}) {
    // Sorting first makes the result independent of file order.
    std::vector<std::string> ids;
    for (const auto& d : corpus) {
      if (d.label == label) ids.push_back(d.id);
    }
    std::sort(ids.begin(), ids.end());
    std::mt19937_64 rng(derive_seed(seed, label_token(label)));
    portable_shuffle(std::span<std::string>(ids), rng);
    for (const auto& id : ids) {
      folds.assignment[id] = static_cast<int>(deal % static_cast<std::size_t>(n_folds));
      ++deal;
    }
  }
  return folds;
}

}  // namespace dknn
