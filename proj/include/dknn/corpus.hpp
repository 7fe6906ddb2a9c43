#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace dknn {

enum class Label { Patient, Control };
enum class Split { Train, Test, Unassigned };

/// Wire token for a label: "P" or "H".
std::string_view label_token(Label label) noexcept;
/// Accepts "P"/"H" (case-insensitive). Throws Error{MalformedRecord} otherwise.
Label parse_label_token(std::string_view token);
constexpr Label opposite(Label label) noexcept {
  return label == Label::Patient ? Label::Control : Label::Patient;
}

std::string_view split_token(Split split) noexcept;
Split parse_split_token(std::string_view token);

struct Document {
  std::string id;
  std::string text;
  Label label = Label::Control;
  Split split = Split::Train;

  friend bool operator==(const Document&, const Document&) = default;
};

/// An ordered, id-unique collection of documents. Immutable once built;
/// all accessors are const and safe to share between threads.
class Corpus {
 public:
  Corpus() = default;
  /// Validates id uniqueness and non-empty text.
  Corpus(std::string name, std::vector<Document> documents);

  const std::string& name() const noexcept { return name_; }
  const std::vector<Document>& documents() const noexcept { return documents_; }
  std::size_t size() const noexcept { return documents_.size(); }
  bool empty() const noexcept { return documents_.empty(); }

  auto begin() const noexcept { return documents_.begin(); }
  auto end() const noexcept { return documents_.end(); }
  const Document& operator[](std::size_t i) const { return documents_[i]; }

  bool contains(std::string_view id) const;
  /// Throws Error{UnknownDocId}.
  const Document& at(std::string_view id) const;
  const Document* find(std::string_view id) const;

  std::size_t count(Label label) const noexcept;
  std::vector<std::string> ids() const;

  Corpus with_split(Split split) const;
  /// Documents whose id is in `ids`, in corpus order.
  Corpus subset(const std::vector<std::string>& ids, std::string name = {}) const;
  /// All documents except `id`, in corpus order.
  Corpus without(std::string_view id) const;

  friend bool operator==(const Corpus& a, const Corpus& b) {
    return a.name_ == b.name_ && a.documents_ == b.documents_;
  }

 private:
  std::string name_;
  std::vector<Document> documents_;
  std::unordered_map<std::string, std::size_t> index_;
};

enum class CorpusFormat { Jsonl, Csv };

/// Picks the format from the file extension (.csv -> Csv, else Jsonl).
CorpusFormat format_for_path(const std::filesystem::path& path);

Corpus load_corpus(const std::filesystem::path& path, CorpusFormat format);
Corpus load_corpus(const std::filesystem::path& path);
Corpus parse_corpus(std::string_view content, CorpusFormat format, std::string name);
void save_corpus(const Corpus& corpus, const std::filesystem::path& path, CorpusFormat format);

struct FoldAssignment {
  int n_folds = 0;
  std::uint64_t seed = 0;
  std::map<std::string, int> assignment;

  int fold_of(std::string_view id) const;
  /// Ids assigned to `fold`, in lexicographic order.
  std::vector<std::string> members(int fold) const;

  friend bool operator==(const FoldAssignment&, const FoldAssignment&) = default;
};

/// Stratified fold split: each label's documents are shuffled with a seeded
/// generator and dealt round-robin, continuing the deal across labels so
/// total fold sizes stay within one of each other.
FoldAssignment make_folds(const Corpus& corpus, int n_folds, std::uint64_t seed);

}  // namespace dknn
