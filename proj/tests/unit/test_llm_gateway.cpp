#include "dknn/error.hpp"
#include "dknn/llm_gateway.hpp"
#include "support/local_server.hpp"
#include "support/test_support.hpp"

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include <cstdlib>

using namespace dknn;
using namespace dknn::testing;
using nlohmann::json;

namespace {

BackendConfig fast_config() {
  BackendConfig c;
  c.retry_backoff = std::chrono::milliseconds(1);
  c.timeout = std::chrono::milliseconds(2000);
  return c;
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

TEST(ParsePrediction, SpecExamples) {
  const auto a = parse_prediction("Based on the analysis, my prediction: dementia patient (P) with a probability of 0.7");
  EXPECT_EQ(a.label, Label::Patient);
  EXPECT_DOUBLE_EQ(a.confidence, 0.7);
  EXPECT_EQ(a.status, ParseStatus::Clean);

  const auto b = parse_prediction("healthy control (H)");
  EXPECT_EQ(b.label, Label::Control);
  EXPECT_DOUBLE_EQ(b.confidence, 0.5);
  EXPECT_EQ(b.status, ParseStatus::Fallback);

  EXPECT_EQ(code_of([] { parse_prediction("I cannot decide."); }), ErrorCode::UnparsableCompletion);
}

TEST(ParsePrediction, FormsAndLastWins) {
  EXPECT_DOUBLE_EQ(parse_prediction("(H) 85%").confidence, 0.85);
  EXPECT_DOUBLE_EQ(parse_prediction("Prediction: (P), probability .62").confidence, 0.62);
  EXPECT_EQ(code_of([] { parse_prediction("Prediction: P"); }), ErrorCode::UnparsableCompletion);
  // Reasoning enumerations are not probabilities.
  const auto r = parse_prediction("(1) vocabulary is rich (2) syntax fine. Answer: healthy control (H)");
  EXPECT_EQ(r.status, ParseStatus::Fallback);
  // The final verdict overrides earlier mentions.
  const auto f = parse_prediction("Not a dementia patient (P) at 0.2; rather healthy control (H), probability 0.8");
  EXPECT_EQ(f.label, Label::Control);
  EXPECT_DOUBLE_EQ(f.confidence, 0.8);
  EXPECT_DOUBLE_EQ(parse_prediction("dementia patient (P) 140%").confidence, 1.0);
}

// Property: confidence always lies in [0,1] for any text with a marker.
TEST(ParsePredictionProperty, ConfidenceBounded) {
  std::mt19937_64 rng(11);
  const std::vector<std::string> pieces = {"(P)", "(H)", "healthy control", "dementia patient", " 0.", "5", "9",
                                           "%", ".", "12", " ", "prob", "1", "99.5%", "-0.3", "7e2"};
  for (int i = 0; i < 2000; ++i) {
    std::string text = i % 2 ? "(P) " : "(H) ";
    for (auto n = rng() % 10; n > 0; --n) text += pieces[rng() % pieces.size()];
    const auto p = parse_prediction(text);
    EXPECT_GE(p.confidence, 0.0) << text;
    EXPECT_LE(p.confidence, 1.0) << text;
  }
}

TEST(CorrectLabelProbability, SpecExamples) {
  LabeledPrediction p{Label::Patient, 0.9, {}, ParseStatus::Clean};
  EXPECT_DOUBLE_EQ(correct_label_probability(p, Label::Patient), 0.9);
  EXPECT_DOUBLE_EQ(correct_label_probability(p, Label::Control), 1.0 - 0.9);
  LabeledPrediction c{Label::Control, 0.5, {}, ParseStatus::Fallback};
  EXPECT_DOUBLE_EQ(correct_label_probability(c, Label::Patient), 0.5);
}

TEST(CorrectLabelProbabilityProperty, ComplementSumsToOne) {
  std::mt19937_64 rng(5);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int i = 0; i < 1000; ++i) {
    LabeledPrediction p{rng() % 2 ? Label::Patient : Label::Control, u(rng), {}, ParseStatus::Clean};
    EXPECT_NEAR(correct_label_probability(p, Label::Patient) + correct_label_probability(p, Label::Control), 1.0,
                1e-15);
  }
}

TEST(MockBackend, TableLookupAndPurity) {
  MockRule rule;
  rule.zero_shot_table["d3"] = {Label::Patient, 0.9};
  rule.one_shot_table[{"d1", "d3"}] = {Label::Control, 0.8};
  MockBackend mock(rule);
  const ChatPrompt zero{"sys", "Question " + doc_sentinel("d3") + " words"};
  EXPECT_EQ(mock.complete(zero, false).text, "dementia patient (P) with probability 0.9");
  EXPECT_EQ(mock.complete(zero, false), mock.complete(zero, false));
  const ChatPrompt one{"", doc_sentinel("d1") + " demo\n" + doc_sentinel("d3")};
  EXPECT_EQ(mock.complete(one, false).text, "healthy control (H) with probability 0.8");
  EXPECT_EQ(mock.complete(ChatPrompt{"", "no ids"}, false).text, render_answer(Label::Patient, 0.5));
}

TEST(MockBackend, MultiShotRules) {
  MockRule rule;
  rule.one_shot_table[{"a", "t"}] = {Label::Patient, 0.9};  // p_patient 0.9
  rule.one_shot_table[{"b", "t"}] = {Label::Control, 0.7};  // p_patient 0.3
  rule.one_shot_table[{"c", "t"}] = {Label::Control, 0.9};  // p_patient 0.1
  MockBackend mean(rule);
  const auto m = mean.answer_for({"a", "b", "c"}, "t");
  EXPECT_EQ(m.label, Label::Control);
  EXPECT_NEAR(m.confidence, 1.0 - (0.9 + 0.3 + 0.1) / 3.0, 1e-12);
  rule.multi_shot = MultiShotRule::Last;
  MockBackend last(rule);
  EXPECT_EQ(last.answer_for({"c", "b", "a"}, "t").label, Label::Patient);
}

TEST(MockBackend, RuleFileRoundTrip) {
  TempDir dir;
  MockRule rule;
  rule.default_answer = {Label::Control, 0.6};
  rule.multi_shot = MultiShotRule::Last;
  rule.zero_shot_table["x"] = {Label::Patient, 0.25};
  rule.one_shot_table[{"y", "x"}] = {Label::Control, 1.0};
  rule.logprob_table[{"y", "x"}] = {-1.5, -0.25};
  save_mock_rule(rule, dir / "r.json");
  const auto back = load_mock_rule(dir / "r.json");
  EXPECT_EQ(back.default_answer.label, Label::Control);
  EXPECT_EQ(back.multi_shot, MultiShotRule::Last);
  EXPECT_DOUBLE_EQ(back.zero_shot_table.at("x").confidence, 0.25);
  EXPECT_EQ(back.one_shot_table.at({"y", "x"}).label, Label::Control);
  EXPECT_EQ(back.logprob_table.at({"y", "x"}), (std::vector<double>{-1.5, -0.25}));
}

TEST(Gateway, ClassifyMock) {
  MockRule rule;
  rule.zero_shot_table["t"] = {Label::Patient, 0.9};
  Gateway g(fast_config(), std::make_shared<MockBackend>(rule));
  const auto p = g.classify(doc_sentinel("t"));
  EXPECT_EQ(p.label, Label::Patient);
  EXPECT_DOUBLE_EQ(p.confidence, 0.9);
  EXPECT_EQ(p.parse_status, ParseStatus::Clean);
  EXPECT_EQ(g.calls(), 1u);
}

TEST(Gateway, FallbackWhenProbabilityMissing) {
  auto stub = std::make_shared<FnBackend<std::function<std::string(const ChatPrompt&)>>>(
      [](const ChatPrompt&) { return std::string("Answer: healthy control (H)."); });
  Gateway g(fast_config(), stub);
  const auto p = g.classify("x");
  EXPECT_EQ(p.label, Label::Control);
  EXPECT_DOUBLE_EQ(p.confidence, 0.5);
  EXPECT_EQ(p.parse_status, ParseStatus::Fallback);
}

TEST(Gateway, UnparsableAfterRetries) {
  auto stub = std::make_shared<FnBackend<std::function<std::string(const ChatPrompt&)>>>(
      [](const ChatPrompt&) { return std::string("hmm"); });
  auto config = fast_config();
  config.max_retries = 2;
  Gateway g(config, stub);
  EXPECT_EQ(code_of([&] { g.classify("x"); }), ErrorCode::UnparsableCompletion);
  EXPECT_EQ(stub->calls.load(), 3);
}

namespace {

class FlakyBackend final : public Backend {
 public:
  FlakyBackend(int failures, ErrorCode code) : failures_(failures), code_(code) {}
  RawCompletion complete(const ChatPrompt&, bool) override {
    if (attempts++ < failures_) throw Error(code_, "injected");
    return RawCompletion{"(P) 0.8", std::nullopt};
  }
  std::string describe() const override { return "flaky"; }
  std::atomic<int> attempts{0};

 private:
  int failures_;
  ErrorCode code_;
};

}  // namespace

TEST(Gateway, RetriesTransportErrors) {
  auto ok = std::make_shared<FlakyBackend>(2, ErrorCode::TransportError);
  Gateway g(fast_config(), ok);
  EXPECT_EQ(g.classify("x").label, Label::Patient);
  EXPECT_EQ(ok->attempts.load(), 3);

  auto dead = std::make_shared<FlakyBackend>(5, ErrorCode::TransportError);
  Gateway g2(fast_config(), dead);
  EXPECT_EQ(code_of([&] { g2.complete("x"); }), ErrorCode::TransportError);
  EXPECT_EQ(dead->attempts.load(), 3);

  auto refused = std::make_shared<FlakyBackend>(1, ErrorCode::BackendRefused);
  Gateway g3(fast_config(), refused);
  EXPECT_EQ(code_of([&] { g3.complete("x"); }), ErrorCode::BackendRefused);
  EXPECT_EQ(refused->attempts.load(), 1);
}

TEST(Gateway, InflightBoundHolds) {
  std::atomic<int> current{0}, peak{0};
  auto stub = std::make_shared<FnBackend<std::function<std::string(const ChatPrompt&)>>>([&](const ChatPrompt&) {
    const int now = ++current;
    int seen = peak.load();
    while (now > seen && !peak.compare_exchange_weak(seen, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(2));
    --current;
    return std::string("(P) 0.9");
  });
  auto config = fast_config();
  config.max_inflight = 3;
  Gateway g(config, stub);
  std::vector<int> seen(40, 0);
  g.parallel_for(seen.size(), [&](std::size_t i) {
    g.classify("x");
    seen[i] = 1;
  });
  EXPECT_LE(peak.load(), 3);
  EXPECT_EQ(std::count(seen.begin(), seen.end(), 1), 40);
  EXPECT_EQ(g.calls(), 40u);
}

TEST(Gateway, ParallelForRethrows) {
  auto config = fast_config();
  config.max_inflight = 4;
  Gateway g(config, std::make_shared<MockBackend>(MockRule{}));
  EXPECT_EQ(code_of([&] {
              g.parallel_for(100, [](std::size_t i) {
                if (i == 17) throw Error(ErrorCode::Io, "boom");
              });
            }),
            ErrorCode::Io);
}

TEST(HttpBackend, UnreachableHostIsTransportError) {
  auto config = fast_config();
  config.kind = BackendKind::Http;
  config.base_url = "http://127.0.0.1:1";
  config.max_retries = 1;
  Gateway g(config);
  EXPECT_EQ(code_of([&] { g.complete("hello"); }), ErrorCode::TransportError);
  EXPECT_EQ(g.calls(), 2u);
}

TEST(HttpBackend, ChatCompletionRoundTrip) {
  LocalServer local;
  json last_request;
  std::string auth;
  local.server.Post("/v1/chat/completions", [&](const httplib::Request& req, httplib::Response& res) {
    last_request = json::parse(req.body);
    auth = req.get_header_value("Authorization");
    json reply = {{"choices",
                   {{{"message", {{"role", "assistant"}, {"content", "dementia patient (P) with probability 0.75"}}},
                     {"logprobs", {{"content", {{{"token", "dementia"}, {"logprob", -0.1}}}}}}}}}};
    res.set_content(reply.dump(), "application/json");
  });
  local.start();
  ::setenv("DKNN_TEST_KEY", "secret", 1);
  auto config = fast_config();
  config.kind = BackendKind::Http;
  config.base_url = local.url();
  config.model_name = "llama";
  config.api_key_env = "DKNN_TEST_KEY";
  Gateway g(config);
  const auto p = g.classify(ChatPrompt{"system text", "user text"});
  EXPECT_EQ(p.label, Label::Patient);
  EXPECT_DOUBLE_EQ(p.confidence, 0.75);
  EXPECT_EQ(auth, "Bearer secret");
  EXPECT_EQ(last_request["model"], "llama");
  EXPECT_EQ(last_request["messages"][0]["role"], "system");
  EXPECT_EQ(last_request["messages"][1]["content"], "user text");
  EXPECT_DOUBLE_EQ(last_request["temperature"].get<double>(), 0.01);
  EXPECT_EQ(last_request["top_k"], 50);

  const auto raw = g.complete(ChatPrompt{"", "x"}, true);
  ASSERT_TRUE(raw.token_logprobs.has_value());
  EXPECT_EQ(raw.token_logprobs->at(0).token, "dementia");
}

TEST(HttpBackend, StatusPolicy) {
  LocalServer local;
  std::atomic<int> hits{0};
  local.server.Post("/v1/chat/completions", [&](const httplib::Request&, httplib::Response& res) {
    const int n = hits++;
    if (n == 0) {
      res.status = 503;
      return;
    }
    res.set_content(R"({"choices":[{"message":{"content":"(H) 0.6"}}]})", "application/json");
  });
  local.server.Post("/v1/refuse/v1/chat/completions",
                    [&](const httplib::Request&, httplib::Response& res) { res.status = 400; });
  local.start();
  auto config = fast_config();
  config.kind = BackendKind::Http;
  config.base_url = local.url();
  Gateway g(config);
  EXPECT_EQ(g.classify("x").label, Label::Control);
  EXPECT_EQ(hits.load(), 2);

  config.base_url = local.url() + "/v1/refuse";
  Gateway refused(config);
  EXPECT_EQ(code_of([&] { refused.complete("x"); }), ErrorCode::BackendRefused);
  EXPECT_EQ(refused.calls(), 1u);
}

TEST(HttpBackend, ContinuationScoringSelectsTargetTokens) {
  LocalServer local;
  local.server.Post("/v1/completions", [&](const httplib::Request& req, httplib::Response& res) {
    const auto body = json::parse(req.body);
    EXPECT_TRUE(body["echo"].get<bool>());
    EXPECT_EQ(body["prompt"], "ctx: target");
    json reply = {{"choices",
                   {{{"logprobs",
                      {{"tokens", {"ctx", ":", " target", "!"}},
                       {"token_logprobs", {nullptr, -0.5, -1.25, -3.0}},
                       {"text_offset", {0, 3, 4, 11}}}}}}}};
    res.set_content(reply.dump(), "application/json");
  });
  local.server.Post("/plain/v1/completions", [](const httplib::Request&, httplib::Response& res) {
    res.set_content(R"({"choices":[{"text":"x","logprobs":null}]})", "application/json");
  });
  local.start();
  auto config = fast_config();
  config.kind = BackendKind::Http;
  config.base_url = local.url();
  Gateway g(config);
  const auto tokens = g.score_continuation("ctx:", " target");
  ASSERT_EQ(tokens.size(), 1u);
  EXPECT_EQ(tokens[0].token, " target");
  EXPECT_DOUBLE_EQ(tokens[0].logprob, -1.25);

  config.base_url = local.url() + "/plain";
  Gateway plain(config);
  EXPECT_EQ(code_of([&] { plain.score_continuation("a", "b"); }), ErrorCode::LogprobsUnsupported);
}
