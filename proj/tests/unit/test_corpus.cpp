#include "dknn/corpus.hpp"
#include "dknn/error.hpp"
#include "support/test_support.hpp"

#include <gtest/gtest.h>

#include <set>

using namespace dknn;
using dknn::testing::TempDir;

namespace {

Corpus balanced(std::size_t patients, std::size_t controls) {
  std::vector<Document> docs;
  for (std::size_t i = 0; i < patients; ++i) docs.push_back({"p" + std::to_string(i), "text p", Label::Patient, Split::Train});
  for (std::size_t i = 0; i < controls; ++i) docs.push_back({"c" + std::to_string(i), "text c", Label::Control, Split::Train});
  return Corpus("c", docs);
}

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::Io;
}

}  // namespace

TEST(Corpus, ParsesTwoLineJsonl) {
  const auto c = parse_corpus(R"({"id":"a","text":"hello","label":"P"}
{"id":"b","text":"there","label":"H","split":"test"}
)",
                              CorpusFormat::Jsonl, "x");
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c.at("a").label, Label::Patient);
  EXPECT_EQ(c.at("a").split, Split::Train);
  EXPECT_EQ(c.at("b").label, Label::Control);
  EXPECT_EQ(c.at("b").split, Split::Test);
}

TEST(Corpus, DuplicateIdRejected) {
  EXPECT_EQ(code_of([] {
              parse_corpus("{\"id\":\"d1\",\"text\":\"x\",\"label\":\"P\"}\n{\"id\":\"d1\",\"text\":\"y\",\"label\":\"H\"}\n",
                           CorpusFormat::Jsonl, "x");
            }),
            ErrorCode::DuplicateId);
}

TEST(Corpus, EmptyTextAndMalformedLines) {
  EXPECT_EQ(code_of([] { parse_corpus("{\"id\":\"a\",\"text\":\"   \",\"label\":\"P\"}\n", CorpusFormat::Jsonl, "x"); }),
            ErrorCode::EmptyText);
  EXPECT_EQ(code_of([] { parse_corpus("{\"id\":\"a\",\"text\":\"t\"}\n", CorpusFormat::Jsonl, "x"); }),
            ErrorCode::MalformedRecord);
  EXPECT_EQ(code_of([] { parse_corpus("{\"id\":\"a\",\"text\":\"t\",\"label\":\"X\"}\n", CorpusFormat::Jsonl, "x"); }),
            ErrorCode::MalformedRecord);
  try {
    parse_corpus("{\"id\":\"a\",\"text\":\"t\",\"label\":\"P\"}\nnot json\n", CorpusFormat::Jsonl, "x");
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos) << e.what();
  }
}

TEST(Corpus, CsvWithQuotedFields) {
  const auto c = parse_corpus("id,text,label,split\n"
                              "a,\"the boy, on the stool\",P,train\n"
                              "b,\"she said \"\"hi\"\"\nthen left\",H,test\n",
                              CorpusFormat::Csv, "x");
  ASSERT_EQ(c.size(), 2u);
  EXPECT_EQ(c.at("a").text, "the boy, on the stool");
  EXPECT_EQ(c.at("b").text, "she said \"hi\"\nthen left");
  EXPECT_EQ(c.at("b").split, Split::Test);
}

TEST(Corpus, CountsOfLargerCorpus) {
  const auto c = balanced(63, 67);
  EXPECT_EQ(c.size(), 130u);
  EXPECT_EQ(c.count(Label::Patient), 63u);
  EXPECT_EQ(c.count(Label::Control), 67u);
}

TEST(Corpus, SubsetWithoutAndSplit) {
  const auto c = parse_corpus(R"({"id":"a","text":"1","label":"P"}
{"id":"b","text":"2","label":"H","split":"test"}
{"id":"c","text":"3","label":"H"}
)",
                              CorpusFormat::Jsonl, "x");
  EXPECT_EQ(c.with_split(Split::Train).ids(), (std::vector<std::string>{"a", "c"}));
  EXPECT_EQ(c.without("a").ids(), (std::vector<std::string>{"b", "c"}));
  EXPECT_EQ(c.subset({"c", "a"}).ids(), (std::vector<std::string>{"a", "c"}));
  EXPECT_EQ(code_of([&] { (void)c.at("zz"); }), ErrorCode::UnknownDocId);
}

// Property: save then load reproduces every field, for both formats.
TEST(CorpusProperty, RoundTrip) {
  TempDir dir;
  std::mt19937_64 rng(7);
  const std::vector<std::string> alphabet = {"a", "b", " ", ",", "\"", "\n", "\t", "c", "\u00e9"};
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<Document> docs;
    const auto n = 1 + rng() % 12;
    for (std::size_t i = 0; i < n; ++i) {
      std::string text = "w";
      for (auto len = rng() % 20; len > 0; --len) text += alphabet[rng() % alphabet.size()];
      docs.push_back({"id" + std::to_string(i), text, rng() % 2 ? Label::Patient : Label::Control,
                      static_cast<Split>(rng() % 3)});
    }
    const Corpus c("rt", docs);
    for (const auto format : {CorpusFormat::Jsonl, CorpusFormat::Csv}) {
      const auto path = dir / (format == CorpusFormat::Csv ? "c.csv" : "c.jsonl");
      save_corpus(c, path, format);
      EXPECT_EQ(load_corpus(path, format).documents(), c.documents()) << "trial " << trial;
    }
  }
}

TEST(Folds, TenDocsFiveFoldsOnePerLabel) {
  const auto folds = make_folds(balanced(5, 5), 5, 0);
  for (int f = 0; f < 5; ++f) {
    const auto members = folds.members(f);
    ASSERT_EQ(members.size(), 2u);
    EXPECT_NE(members[0][0], members[1][0]) << "fold " << f << " should hold one p and one c";
  }
}

TEST(Folds, SizesAndDeterminism) {
  const auto c = balanced(63, 67);
  const auto a = make_folds(c, 5, 42);
  for (int f = 0; f < 5; ++f) EXPECT_EQ(a.members(f).size(), 26u);
  EXPECT_EQ(a, make_folds(c, 5, 42));
  EXPECT_NE(a, make_folds(c, 5, 43));
}

TEST(Folds, Errors) {
  EXPECT_EQ(code_of([] { make_folds(balanced(3, 3), 1, 0); }), ErrorCode::TooFewDocuments);
  EXPECT_EQ(code_of([] { make_folds(balanced(2, 5), 3, 0); }), ErrorCode::TooFewDocuments);
}

// Property: folds partition the corpus, stay stratified, and depend only
// on (ids, labels, n_folds, seed), not on document order.
TEST(FoldsProperty, PartitionAndPurity) {
  std::mt19937_64 rng(3);
  for (int trial = 0; trial < 100; ++trial) {
    const auto p = 2 + rng() % 15;
    const auto h = 2 + rng() % 15;
    auto c = balanced(p, h);
    const int k = 2 + static_cast<int>(rng() % (std::min(p, h) - 1));
    const auto seed = rng();
    const auto folds = make_folds(c, k, seed);

    std::set<std::string> seen;
    std::size_t min_size = SIZE_MAX, max_size = 0;
    for (int f = 0; f < k; ++f) {
      const auto m = folds.members(f);
      min_size = std::min(min_size, m.size());
      max_size = std::max(max_size, m.size());
      std::size_t fp = 0;
      for (const auto& id : m) {
        EXPECT_TRUE(seen.insert(id).second);
        fp += id[0] == 'p';
      }
      EXPECT_TRUE(fp == p / k || fp == (p + k - 1) / k);
    }
    EXPECT_EQ(seen.size(), c.size());
    EXPECT_LE(max_size - min_size, 1u);

    auto docs = c.documents();
    std::reverse(docs.begin(), docs.end());
    EXPECT_EQ(make_folds(Corpus("other", docs), k, seed), folds);
  }
}
