#pragma once

#include "dknn/corpus.hpp"

#include <atomic>
#include <chrono>
#include <cstddef>
#include <exception>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <semaphore>
#include <string>
#include <string_view>
#include <thread>
#include <utility>
#include <vector>

namespace dknn {

enum class BackendKind { Http, Mock };

struct BackendConfig {
  BackendKind kind = BackendKind::Mock;
  std::string base_url;
  std::string model_name = "mock";
  double temperature = 0.01;
  int top_k_sampling = 50;
  // Some OpenAI-compatible servers reject unknown fields; top_k is omitted
  // from requests when this is false.
  bool send_top_k = true;
  int max_retries = 2;
  std::chrono::milliseconds timeout{60'000};
  std::chrono::milliseconds retry_backoff{500};
  std::string api_key_env = "LLM_API_KEY";
  int max_inflight = 8;
  std::filesystem::path mock_rules_path;
};

struct ChatPrompt {
  std::string system;
  std::string user;
};

struct TokenLogprob {
  std::string token;
  double logprob = 0.0;
};

struct RawCompletion {
  std::string text;
  std::optional<std::vector<TokenLogprob>> token_logprobs;

  friend bool operator==(const RawCompletion& a, const RawCompletion& b) {
    if (a.text != b.text || a.token_logprobs.has_value() != b.token_logprobs.has_value()) return false;
    if (!a.token_logprobs) return true;
    const auto& x = *a.token_logprobs;
    const auto& y = *b.token_logprobs;
    if (x.size() != y.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i].token != y[i].token || x[i].logprob != y[i].logprob) return false;
    }
    return true;
  }
};

enum class ParseStatus { Clean, Fallback };
std::string_view parse_status_name(ParseStatus status) noexcept;

struct ParsedPrediction {
  Label label = Label::Control;
  double confidence = 0.5;
  ParseStatus status = ParseStatus::Clean;
};

struct LabeledPrediction {
  Label label = Label::Control;
  double confidence = 0.5;
  RawCompletion raw;
  ParseStatus parse_status = ParseStatus::Clean;
};

/// Extracts the final label marker ("(P)", "dementia patient", "(H)",
/// "healthy control") and the final probability ("0.85", ".85", "85%").
/// Probabilities outside [0,1] are clamped. A label without a probability
/// yields confidence 0.5 with ParseStatus::Fallback.
/// Throws Error{UnparsableCompletion} when no label marker is present.
ParsedPrediction parse_prediction(std::string_view text);

/// Probability the prediction assigns to `gold`, using the two-class
/// complement when the predicted label is wrong.
double correct_label_probability(const LabeledPrediction& prediction, Label gold) noexcept;

/// Completion text in the canonical answer phrasing, e.g.
/// "dementia patient (P) with probability 0.9".
std::string render_answer(Label label, double confidence);

/// A chat-completion provider. Implementations must be safe to call from
/// several threads at once.
class Backend {
 public:
  virtual ~Backend() = default;
  virtual RawCompletion complete(const ChatPrompt& prompt, bool want_logprobs) = 0;
  /// Log-probabilities of the tokens of `continuation` when appended to
  /// `context`. Throws Error{LogprobsUnsupported} when unavailable.
  virtual std::vector<TokenLogprob> score_continuation(const std::string& context,
                                                       const std::string& continuation);
  virtual std::string describe() const = 0;
};

/// Marker embedded in mock-corpus texts so the mock backend can tell which
/// documents a prompt contains without depending on template wording.
std::string doc_sentinel(std::string_view id);
/// All sentinel ids in order of appearance.
std::vector<std::string> find_sentinels(std::string_view text);

struct MockAnswer {
  Label label = Label::Patient;
  double confidence = 0.5;
};

enum class MultiShotRule {
  Mean,  // average the one-shot Patient probabilities of every demonstration
  Last,  // only the demonstration nearest the target counts
};

struct MockRule {
  std::map<std::string, MockAnswer> zero_shot_table;
  std::map<std::pair<std::string, std::string>, MockAnswer> one_shot_table;  // (demo, target)
  MockAnswer default_answer{};
  MultiShotRule multi_shot = MultiShotRule::Mean;
  // (demo, target) -> per-token logprobs of the target text.
  std::map<std::pair<std::string, std::string>, std::vector<double>> logprob_table;

  void validate() const;
};

MockRule load_mock_rule(const std::filesystem::path& path);
void save_mock_rule(const MockRule& rule, const std::filesystem::path& path);

/// Deterministic table-driven backend. The last sentinel in the user
/// message is the target; earlier sentinels are demonstrations.
class MockBackend final : public Backend {
 public:
  explicit MockBackend(MockRule rule);

  RawCompletion complete(const ChatPrompt& prompt, bool want_logprobs) override;
  std::vector<TokenLogprob> score_continuation(const std::string& context,
                                               const std::string& continuation) override;
  std::string describe() const override { return "mock"; }

  const MockRule& rule() const noexcept { return rule_; }
  /// Answer the rule yields for the given demonstrations and target.
  MockAnswer answer_for(const std::vector<std::string>& demo_ids, const std::string& target_id) const;

 private:
  MockRule rule_;
};

/// OpenAI-compatible HTTP backend (`/v1/chat/completions`, and
/// `/v1/completions` with echo for continuation scoring).
class HttpBackend final : public Backend {
 public:
  explicit HttpBackend(BackendConfig config);

  RawCompletion complete(const ChatPrompt& prompt, bool want_logprobs) override;
  std::vector<TokenLogprob> score_continuation(const std::string& context,
                                               const std::string& continuation) override;
  std::string describe() const override;

 private:
  BackendConfig config_;
};

std::shared_ptr<Backend> make_backend(const BackendConfig& config);

/// Retrying, concurrency-bounded front end over a Backend.
class Gateway {
 public:
  Gateway(BackendConfig config, std::shared_ptr<Backend> backend);
  explicit Gateway(BackendConfig config);

  const BackendConfig& config() const noexcept { return config_; }
  Backend& backend() noexcept { return *backend_; }

  /// Retries TransportError with exponential backoff; BackendRefused is
  /// surfaced immediately.
  RawCompletion complete(const ChatPrompt& prompt, bool want_logprobs = false);
  RawCompletion complete(const std::string& prompt, bool want_logprobs = false);

  /// complete + parse_prediction, re-querying on UnparsableCompletion up
  /// to max_retries times.
  LabeledPrediction classify(const ChatPrompt& prompt);
  LabeledPrediction classify(const std::string& prompt);

  std::vector<TokenLogprob> score_continuation(const std::string& context, const std::string& continuation);

  /// Number of backend requests issued (including retries).
  std::size_t calls() const noexcept { return calls_.load(); }
  void reset_calls() noexcept { calls_.store(0); }

  /// Runs fn(i) for i in [0, count) on up to max_inflight worker threads.
  /// The first exception stops remaining work and is rethrown.
  template <class Fn>
  void parallel_for(std::size_t count, Fn&& fn);

 private:
  template <class Call>
  auto with_retries(Call&& call);

  BackendConfig config_;
  std::shared_ptr<Backend> backend_;
  std::unique_ptr<std::counting_semaphore<>> inflight_;
  std::atomic<std::size_t> calls_{0};
};

template <class Fn>
void Gateway::parallel_for(std::size_t count, Fn&& fn) {
  const auto workers = std::min<std::size_t>(static_cast<std::size_t>(std::max(1, config_.max_inflight)), count);
  if (workers <= 1) {
    for (std::size_t i = 0; i < count; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::atomic<bool> failed{false};
  std::exception_ptr error;
  std::mutex error_mutex;
  {
    std::vector<std::jthread> pool;
    pool.reserve(workers);
    for (std::size_t w = 0; w < workers; ++w) {
      pool.emplace_back([&] {
        while (!failed.load()) {
          const auto i = next.fetch_add(1);
          if (i >= count) break;
          try {
            fn(i);
          } catch (...) {
            std::lock_guard lock(error_mutex);
            if (!error) error = std::current_exception();
            failed.store(true);
          }
        }
      });
    }
  }
  if (error) std::rethrow_exception(error);
}

}  // namespace dknn
