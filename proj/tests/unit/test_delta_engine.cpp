#include "dknn/delta_engine.hpp"
#include "dknn/error.hpp"
#include "dknn/synthetic.hpp"
#include "support/test_support.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

using namespace dknn;
using namespace dknn::testing;

namespace {

ErrorCode code_of(const std::function<void()>& fn) {
  try {
    fn();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "no error thrown";
  return ErrorCode::Io;
}

BackendConfig serial() {
  BackendConfig c;
  c.max_inflight = 1;
  return c;
}

Corpus five() {
  return sentinel_corpus({{"a", Label::Patient}, {"b", Label::Control}, {"c", Label::Patient}, {"d", Label::Control},
                          {"e", Label::Patient}});
}

/// p0 = 0.5 for every target; one-shot p_correct 0.9 for same-label pairs and
/// 0.3 across labels.
MockRule same_label_rule(const Corpus& c) {
  MockRule rule;
  for (const auto& t : c) {
    rule.zero_shot_table[t.id] = {Label::Patient, 0.5};
    for (const auto& d : c) {
      if (d.id == t.id) continue;
      rule.one_shot_table[{d.id, t.id}] = answer_with_correct_probability(t.label, d.label == t.label ? 0.9 : 0.3);
    }
  }
  return rule;
}

}  // namespace

TEST(ZeroShotPass, MeanOfRunsAndTableValues) {
  const auto c = five();
  MockRule rule;
  rule.zero_shot_table["a"] = {Label::Patient, 0.8};
  rule.zero_shot_table["b"] = {Label::Patient, 0.8};
  Gateway g(serial(), std::make_shared<MockBackend>(rule));
  const auto pass = zero_shot_pass(c, full_template(), g, 3);
  EXPECT_EQ(pass.records[0].mean_p0, 0.8);
  EXPECT_NEAR(pass.records[1].mean_p0, 0.2, 1e-15);

  const auto one = zero_shot_pass(c, full_template(), g, 1);
  EXPECT_EQ(one.records[0].mean_p0, one.records[0].runs[0].p_correct);
}

TEST(ZeroShotPass, StochasticStubAverages) {
  std::atomic<int> n{0};
  auto stub = std::make_shared<FnBackend<std::function<std::string(const ChatPrompt&)>>>([&](const ChatPrompt&) {
    static const char* kAnswers[] = {"(P) 0.4", "(P) 0.5", "(P) 0.6"};
    return std::string(kAnswers[n++ % 3]);
  });
  Gateway g(serial(), stub);
  const auto c = sentinel_corpus({{"a", Label::Patient}});
  const auto pass = zero_shot_pass(c, full_template(), g, 3);
  EXPECT_NEAR(pass.records[0].mean_p0, 0.5, 1e-15);
}

TEST(OneShotPass, PairsAndTableLookup) {
  const auto c = sentinel_corpus({{"a", Label::Patient}, {"b", Label::Control}, {"x", Label::Patient}});
  MockRule rule;
  rule.one_shot_table[{"a", "x"}] = {Label::Patient, 0.9};
  Gateway g(serial(), std::make_shared<MockBackend>(rule));
  const auto pass = one_shot_pass(c, full_template(), g, 2);
  EXPECT_EQ(g.calls(), 12u);
  EXPECT_EQ(one_shot_call_count(3, 1), 6u);
  for (int r = 0; r < 2; ++r) {
    EXPECT_EQ(pass.p1(r, 0, 2), 0.9);
    EXPECT_TRUE(std::isnan(pass.p1(r, 1, 1)));
  }
}

TEST(OneShotPass, FullPassEqualsMockTable) {
  const auto c = five();
  const auto rule = same_label_rule(c);
  Gateway g(serial(), std::make_shared<MockBackend>(rule));
  const auto pass = one_shot_pass(c, full_template(), g, 1);
  for (std::size_t i = 0; i < c.size(); ++i) {
    for (std::size_t j = 0; j < c.size(); ++j) {
      if (i == j) continue;
      const auto& a = rule.one_shot_table.at({c[i].id, c[j].id});
      const double expected = a.label == c[j].label ? a.confidence : 1.0 - a.confidence;
      EXPECT_EQ(pass.p1(0, i, j), expected);
    }
  }
}

TEST(DeltaMatrix, NullCaseIsExactlyZero) {
  const auto c = five();
  MockRule rule;
  for (const auto& t : c) {
    rule.zero_shot_table[t.id] = {t.label, 0.7};
    for (const auto& d : c) rule.one_shot_table[{d.id, t.id}] = {t.label, 0.7};
  }
  Gateway g(BackendConfig{}, std::make_shared<MockBackend>(rule));
  const auto m = build_delta_matrix(zero_shot_pass(c, full_template(), g, 3), one_shot_pass(c, full_template(), g, 3));
  for (std::size_t i = 0; i < c.size(); ++i) {
    for (std::size_t j = 0; j < c.size(); ++j) {
      if (i != j) EXPECT_EQ(m.at(i, j), 0.0);
    }
  }
}

TEST(DeltaMatrix, SameLabelGainAndCrossLabelLoss) {
  const auto c = five();
  Gateway g(BackendConfig{}, std::make_shared<MockBackend>(same_label_rule(c)));
  const auto m = build_delta_matrix(zero_shot_pass(c, full_template(), g, 1), one_shot_pass(c, full_template(), g, 1));
  EXPECT_EQ(m.size(), 5u);
  EXPECT_NEAR(m.at("a", "c"), 0.4, 1e-12);
  EXPECT_NEAR(m.at("a", "b"), -0.2, 1e-12);
  EXPECT_NEAR(m.at("b", "d"), 0.4, 1e-12);
  EXPECT_EQ(code_of([&] { m.at("a", "a"); }), ErrorCode::SelfPairing);
  EXPECT_EQ(code_of([&] { m.at("a", "zz"); }), ErrorCode::UnknownDocId);
}

// Property: the cost contract and entrywise recomputation from raw records
// hold for random corpora, run counts and concurrency levels.
TEST(DeltaMatrixProperty, CallCountAndRecomputation) {
  std::mt19937_64 rng(9);
  for (int trial = 0; trial < 20; ++trial) {
    const auto d = 2 + rng() % 5;
    const int runs = 1 + static_cast<int>(rng() % 3);
    std::vector<std::pair<std::string, Label>> items;
    for (std::size_t i = 0; i < d; ++i) items.emplace_back("doc" + std::to_string(i), rng() % 2 ? Label::Patient : Label::Control);
    const auto c = sentinel_corpus(items);
    MockRule rule;
    for (const auto& t : c) {
      rule.zero_shot_table[t.id] = {rng() % 2 ? Label::Patient : Label::Control, (rng() % 1001) / 1000.0};
      for (const auto& x : c) rule.one_shot_table[{x.id, t.id}] = {rng() % 2 ? Label::Patient : Label::Control, (rng() % 1001) / 1000.0};
    }
    BackendConfig config;
    config.max_inflight = 1 + static_cast<int>(rng() % 8);
    Gateway g(config, std::make_shared<MockBackend>(rule));
    const auto zero = zero_shot_pass(c, full_template(), g, runs);
    const auto one = one_shot_pass(c, full_template(), g, runs);
    EXPECT_EQ(g.calls(), d * runs + d * (d - 1) * runs);
    const auto m = build_delta_matrix(zero, one);
    for (std::size_t i = 0; i < d; ++i) {
      for (std::size_t j = 0; j < d; ++j) {
        if (i == j) continue;
        long double sum = 0;
        for (int r = 0; r < runs; ++r) {
          sum += static_cast<long double>(one.probes[one.flat_index(r, i, j)]->p_correct) -
                 zero.records[j].runs[static_cast<std::size_t>(r)].p_correct;
        }
        EXPECT_EQ(m.at(i, j), static_cast<double>(sum / runs));
        EXPECT_GE(m.at(i, j), -1.0);
        EXPECT_LE(m.at(i, j), 1.0);
      }
    }
  }
}

TEST(DeltaMatrix, FingerprintMismatch) {
  const auto c = five();
  Gateway g(BackendConfig{}, std::make_shared<MockBackend>(same_label_rule(c)));
  const auto zero = zero_shot_pass(c, parse_template("1"), g, 1);
  const auto one = one_shot_pass(c, full_template(), g, 1);
  EXPECT_EQ(code_of([&] { build_delta_matrix(zero, one); }), ErrorCode::FingerprintMismatch);
  const auto zero3 = zero_shot_pass(c, full_template(), g, 3);
  EXPECT_EQ(code_of([&] { build_delta_matrix(zero3, one); }), ErrorCode::FingerprintMismatch);
}

TEST(DeltaMatrix, SaveLoadRoundTripAndErrors) {
  TempDir dir;
  const auto c = five();
  Gateway g(BackendConfig{}, std::make_shared<MockBackend>(same_label_rule(c)));
  const auto zero = zero_shot_pass(c, full_template(), g, 2);
  const auto one = one_shot_pass(c, full_template(), g, 2);
  const auto m = build_delta_matrix(zero, one, "2024-01-01T00:00:00Z");
  const auto path = dir / "m.json";
  save_matrix(m, path);
  const auto back = load_matrix(path);
  EXPECT_EQ(back, m);
  EXPECT_EQ(back.metadata().prompt_fingerprint, full_template().fingerprint());
  EXPECT_EQ(back.metadata().backend_model, "mock");

  const auto raw = raw_records_path(path);
  EXPECT_EQ(raw.filename(), "m.raw.jsonl");
  save_raw_records(zero, one, raw);
  const auto [z2, o2] = load_raw_records(raw);
  EXPECT_EQ(build_delta_matrix(z2, o2, "2024-01-01T00:00:00Z"), m);

  auto j = nlohmann::json::parse(read_file(path));
  j["schema"] = 99;
  write_file(dir / "v99.json", j.dump());
  EXPECT_EQ(code_of([&] { load_matrix(dir / "v99.json"); }), ErrorCode::SchemaVersionMismatch);
  j["schema"] = 1;
  j["values"][1] = nullptr;
  write_file(dir / "hole.json", j.dump());
  EXPECT_EQ(code_of([&] { load_matrix(dir / "hole.json"); }), ErrorCode::MalformedRecord);
  j["values"][1] = 1.5;
  write_file(dir / "range.json", j.dump());
  EXPECT_EQ(code_of([&] { load_matrix(dir / "range.json"); }), ErrorCode::MalformedRecord);
}

TEST(DeltaMatrix, ScaledKeepsStructure) {
  DeltaMatrix m({"a", "b"}, 1, {0, 0.5, -0.25, 0}, {});
  const auto s = m.scaled(2.0);
  EXPECT_EQ(s.at(0, 1), 1.0);
  EXPECT_EQ(s.at(1, 0), -0.5);
  EXPECT_TRUE(std::isnan(s.values()[0]));
  EXPECT_EQ(code_of([&] { m.scaled(3.0); }), ErrorCode::MalformedRecord);
}
