#include "dknn/llm_gateway.hpp"

#include "dknn/error.hpp"
#include "http_json.hpp"

#include <fmt/format.h>
#include <nlohmann/json.hpp>

#include <algorithm>
#include <cctype>
#include <cmath>
#include <fstream>
#include <regex>

namespace dknn {

namespace {

using nlohmann::json;

constexpr std::string_view kSentinelOpen = "[[doc:";
constexpr std::string_view kSentinelClose = "]]";

std::string lower(std::string_view s) {
  std::string out(s);
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

// Position of the last occurrence of `needle`, or npos.
std::size_t last_of(const std::string& hay, std::string_view needle) { return hay.rfind(needle); }

json answer_to_json(const MockAnswer& a) {
  return json{{"label", std::string(label_token(a.label))}, {"confidence", a.confidence}};
}

MockAnswer answer_from_json(const json& j) {
  if (!j.is_object() || !j.contains("label") || !j.contains("confidence")) {
    throw Error(ErrorCode::ConfigError, "mock answer needs \"label\" and \"confidence\": " + j.dump());
  }
  return MockAnswer{parse_label_token(j.at("label").get<std::string>()), j.at("confidence").get<double>()};
}

double patient_probability(const MockAnswer& a) {
  return a.label == Label::Patient ? a.confidence : 1.0 - a.confidence;
}

}  // namespace

std::string_view parse_status_name(ParseStatus status) noexcept {
  return status == ParseStatus::Clean ? "clean" : "fallback";
}

ParsedPrediction parse_prediction(std::string_view text) {
  const auto haystack = lower(text);

  struct Marker {
    std::string_view needle;
    Label label;
  };
  static constexpr Marker kMarkers[] = {
      {"(p)", Label::Patient},
      {"dementia patient", Label::Patient},
      {"(h)", Label::Control},
      {"healthy control", Label::Control},
  };
  std::size_t best_pos = std::string::npos;
  Label label = Label::Control;
  for (const auto& m : kMarkers) {
    const auto pos = last_of(haystack, m.needle);
    if (pos == std::string::npos) continue;
    if (best_pos == std::string::npos || pos > best_pos) {
      best_pos = pos;
      label = m.label;
    }
  }
  if (best_pos == std::string::npos) {
    throw Error(ErrorCode::UnparsableCompletion, "no label marker in completion: \"" +
                                                     std::string(text.substr(0, 200)) + "\"");
  }

  // "85%" / "85.5 %" and decimals with at most one leading digit ("0.7",
  // ".7", "1.0"). Bare integers such as "(1)" are ignored.
  static const std::regex kPercent(R"((\d{1,3}(?:\.\d+)?)\s*%)");
  static const std::regex kDecimal(R"((?:^|[^\d.])(\d?\.\d+)(?![\d%]))");
  std::ptrdiff_t prob_pos = -1;
  double probability = 0.0;
  for (auto it = std::sregex_iterator(haystack.begin(), haystack.end(), kPercent); it != std::sregex_iterator(); ++it) {
    if (it->position(1) > prob_pos) {
      prob_pos = it->position(1);
      probability = std::stod((*it)[1].str()) / 100.0;
    }
  }
  for (auto it = std::sregex_iterator(haystack.begin(), haystack.end(), kDecimal); it != std::sregex_iterator(); ++it) {
    if (it->position(1) > prob_pos) {
      prob_pos = it->position(1);
      probability = std::stod((*it)[1].str());
    }
  }

  ParsedPrediction out;
  out.label = label;
  if (prob_pos < 0) {
    out.confidence = 0.5;
    out.status = ParseStatus::Fallback;
  } else {
    out.confidence = std::clamp(probability, 0.0, 1.0);
    out.status = ParseStatus::Clean;
  }
  return out;
}

double correct_label_probability(const LabeledPrediction& prediction, Label gold) noexcept {
  return prediction.label == gold ? prediction.confidence : 1.0 - prediction.confidence;
}

std::string render_answer(Label label, double confidence) {
  return fmt::format("{} with probability {}",
                     label == Label::Patient ? "dementia patient (P)" : "healthy control (H)", confidence);
}

std::vector<TokenLogprob> Backend::score_continuation(const std::string&, const std::string&) {
  throw Error(ErrorCode::LogprobsUnsupported, describe() + " cannot score continuations");
}

// ---------------------------------------------------------------------------
// Mock

std::string doc_sentinel(std::string_view id) {
  return std::string(kSentinelOpen) + std::string(id) + std::string(kSentinelClose);
}

std::vector<std::string> find_sentinels(std::string_view text) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while ((pos = text.find(kSentinelOpen, pos)) != std::string_view::npos) {
    const auto start = pos + kSentinelOpen.size();
    const auto end = text.find(kSentinelClose, start);
    if (end == std::string_view::npos) break;
    out.emplace_back(text.substr(start, end - start));
    pos = end + kSentinelClose.size();
  }
  return out;
}

void MockRule::validate() const {
  auto check = [](const MockAnswer& a, const std::string& where) {
    if (!(a.confidence >= 0.0 && a.confidence <= 1.0)) {
      throw Error(ErrorCode::ConfigError, "mock confidence outside [0,1] at " + where);
    }
  };
  check(default_answer, "default");
  for (const auto& [id, a] : zero_shot_table) check(a, "zero_shot." + id);
  for (const auto& [key, a] : one_shot_table) check(a, "one_shot." + key.first + "." + key.second);
}

MockRule load_mock_rule(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::Io, "cannot open mock rules " + path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw Error(ErrorCode::ConfigError, path.string() + ": " + e.what());
  }
  MockRule rule;
  if (j.contains("default")) rule.default_answer = answer_from_json(j["default"]);
  if (j.contains("zero_shot")) {
    for (const auto& [id, a] : j["zero_shot"].items()) rule.zero_shot_table[id] = answer_from_json(a);
  }
  if (j.contains("one_shot")) {
    for (const auto& [demo, targets] : j["one_shot"].items()) {
      for (const auto& [target, a] : targets.items()) rule.one_shot_table[{demo, target}] = answer_from_json(a);
    }
  }
  if (j.contains("multi_shot")) {
    const auto mode = j["multi_shot"].get<std::string>();
    if (mode == "mean") {
      rule.multi_shot = MultiShotRule::Mean;
    } else if (mode == "last") {
      rule.multi_shot = MultiShotRule::Last;
    } else {
      throw Error(ErrorCode::ConfigError, "multi_shot must be \"mean\" or \"last\"");
    }
  }
  if (j.contains("logprobs")) {
    for (const auto& [demo, targets] : j["logprobs"].items()) {
      for (const auto& [target, values] : targets.items()) {
        rule.logprob_table[{demo, target}] = values.get<std::vector<double>>();
      }
    }
  }
  rule.validate();
  return rule;
}

void save_mock_rule(const MockRule& rule, const std::filesystem::path& path) {
  json j;
  j["default"] = answer_to_json(rule.default_answer);
  j["multi_shot"] = rule.multi_shot == MultiShotRule::Mean ? "mean" : "last";
  j["zero_shot"] = json::object();
  for (const auto& [id, a] : rule.zero_shot_table) j["zero_shot"][id] = answer_to_json(a);
  j["one_shot"] = json::object();
  for (const auto& [key, a] : rule.one_shot_table) j["one_shot"][key.first][key.second] = answer_to_json(a);
  if (!rule.logprob_table.empty()) {
    for (const auto& [key, values] : rule.logprob_table) j["logprobs"][key.first][key.second] = values;
  }
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw Error(ErrorCode::Io, "cannot write " + path.string());
  out << j.dump(1) << '\n';
}

MockBackend::MockBackend(MockRule rule) : rule_(std::move(rule)) { rule_.validate(); }

MockAnswer MockBackend::answer_for(const std::vector<std::string>& demo_ids, const std::string& target_id) const {
  if (demo_ids.empty()) {
    const auto it = rule_.zero_shot_table.find(target_id);
    return it == rule_.zero_shot_table.end() ? rule_.default_answer : it->second;
  }
  auto one_shot = [&](const std::string& demo) {
    const auto it = rule_.one_shot_table.find({demo, target_id});
    return it == rule_.one_shot_table.end() ? rule_.default_answer : it->second;
  };
  if (demo_ids.size() == 1 || rule_.multi_shot == MultiShotRule::Last) return one_shot(demo_ids.back());

  double p_patient = 0.0;
  for (const auto& demo : demo_ids) p_patient += patient_probability(one_shot(demo));
  p_patient /= static_cast<double>(demo_ids.size());
  return p_patient >= 0.5 ? MockAnswer{Label::Patient, p_patient} : MockAnswer{Label::Control, 1.0 - p_patient};
}

RawCompletion MockBackend::complete(const ChatPrompt& prompt, bool want_logprobs) {
  auto ids = find_sentinels(prompt.user);
  MockAnswer answer = rule_.default_answer;
  if (!ids.empty()) {
    const std::string target = ids.back();
    ids.pop_back();
    answer = answer_for(ids, target);
  }
  RawCompletion out;
  out.text = render_answer(answer.label, answer.confidence);
  if (want_logprobs) {
    std::vector<TokenLogprob> tokens;
    std::size_t pos = 0;
    while (pos < out.text.size()) {
      const auto space = out.text.find(' ', pos);
      const auto end = space == std::string::npos ? out.text.size() : space + 1;
      tokens.push_back({out.text.substr(pos, end - pos), 0.0});
      pos = end;
    }
    out.token_logprobs = std::move(tokens);
  }
  return out;
}

std::vector<TokenLogprob> MockBackend::score_continuation(const std::string& context, const std::string& continuation) {
  if (rule_.logprob_table.empty()) {
    throw Error(ErrorCode::LogprobsUnsupported, "mock rules carry no logprob table");
  }
  const auto demos = find_sentinels(context);
  const auto targets = find_sentinels(continuation);
  if (demos.empty() || targets.empty()) {
    throw Error(ErrorCode::LogprobsUnsupported, "mock continuation scoring needs sentinels in context and continuation");
  }
  const auto it = rule_.logprob_table.find({demos.back(), targets.front()});
  if (it == rule_.logprob_table.end()) {
    throw Error(ErrorCode::LogprobsUnsupported,
                "mock has no logprobs for (" + demos.back() + ", " + targets.front() + ")");
  }
  std::vector<TokenLogprob> out;
  out.reserve(it->second.size());
  for (std::size_t i = 0; i < it->second.size(); ++i) out.push_back({"t" + std::to_string(i), it->second[i]});
  return out;
}

// ---------------------------------------------------------------------------
// HTTP

HttpBackend::HttpBackend(BackendConfig config) : config_(std::move(config)) {
  if (config_.base_url.empty()) throw Error(ErrorCode::ConfigError, "http backend requires base_url");
}

std::string HttpBackend::describe() const { return config_.model_name + "@" + config_.base_url; }

RawCompletion HttpBackend::complete(const ChatPrompt& prompt, bool want_logprobs) {
  json messages = json::array();
  if (!prompt.system.empty()) messages.push_back({{"role", "system"}, {"content", prompt.system}});
  messages.push_back({{"role", "user"}, {"content", prompt.user}});
  json body = {{"model", config_.model_name}, {"messages", messages}, {"temperature", config_.temperature}};
  if (config_.send_top_k) body["top_k"] = config_.top_k_sampling;
  if (want_logprobs) body["logprobs"] = true;

  const auto response = detail::post_json(config_.base_url, "/v1/chat/completions", body.dump(),
                                          detail::env_or_empty(config_.api_key_env), config_.timeout);
  detail::check_status(response, "chat completion");

  RawCompletion out;
  try {
    const auto j = json::parse(response.body);
    const auto& choice = j.at("choices").at(0);
    out.text = choice.at("message").at("content").get<std::string>();
    if (want_logprobs && choice.contains("logprobs") && choice["logprobs"].is_object() &&
        choice["logprobs"].contains("content") && choice["logprobs"]["content"].is_array()) {
      std::vector<TokenLogprob> tokens;
      for (const auto& t : choice["logprobs"]["content"]) {
        tokens.push_back({t.value("token", std::string()), t.at("logprob").get<double>()});
      }
      out.token_logprobs = std::move(tokens);
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::TransportError, std::string("malformed chat completion response: ") + e.what());
  }
  return out;
}

std::vector<TokenLogprob> HttpBackend::score_continuation(const std::string& context, const std::string& continuation) {
  const std::string prompt = context + continuation;
  json body = {{"model", config_.model_name}, {"prompt", prompt}, {"max_tokens", 1},
               {"echo", true},                {"logprobs", 1},     {"temperature", 0.0}};
  const auto response = detail::post_json(config_.base_url, "/v1/completions", body.dump(),
                                          detail::env_or_empty(config_.api_key_env), config_.timeout);
  if (response.status == 400 || response.status == 404 || response.status == 501) {
    throw Error(ErrorCode::LogprobsUnsupported, "endpoint refused prompt echo: " + response.body);
  }
  detail::check_status(response, "completion");

  std::vector<TokenLogprob> out;
  try {
    const auto j = json::parse(response.body);
    const auto& lp = j.at("choices").at(0).at("logprobs");
    if (!lp.is_object() || !lp.contains("text_offset") || !lp.contains("token_logprobs")) {
      throw Error(ErrorCode::LogprobsUnsupported, "response lacks echoed prompt logprobs");
    }
    const auto& tokens = lp.at("tokens");
    const auto& values = lp.at("token_logprobs");
    const auto& offsets = lp.at("text_offset");
    for (std::size_t i = 0; i < offsets.size(); ++i) {
      const auto offset = offsets[i].get<std::size_t>();
      if (offset < context.size() || offset >= prompt.size()) continue;
      if (values[i].is_null()) continue;
      out.push_back({tokens[i].get<std::string>(), values[i].get<double>()});
    }
  } catch (const json::exception& e) {
    throw Error(ErrorCode::TransportError, std::string("malformed completion response: ") + e.what());
  }
  if (out.empty()) throw Error(ErrorCode::LogprobsUnsupported, "no continuation tokens were scored");
  return out;
}

std::shared_ptr<Backend> make_backend(const BackendConfig& config) {
  if (config.kind == BackendKind::Http) return std::make_shared<HttpBackend>(config);
  if (config.mock_rules_path.empty()) return std::make_shared<MockBackend>(MockRule{});
  return std::make_shared<MockBackend>(load_mock_rule(config.mock_rules_path));
}

// ---------------------------------------------------------------------------
// Gateway

Gateway::Gateway(BackendConfig config, std::shared_ptr<Backend> backend)
    : config_(std::move(config)),
      backend_(std::move(backend)),
      inflight_(std::make_unique<std::counting_semaphore<>>(std::max(1, config_.max_inflight))) {
  if (!backend_) throw Error(ErrorCode::InvalidArgument, "gateway needs a backend");
  if (config_.max_retries < 0) throw Error(ErrorCode::ConfigError, "max_retries must be non-negative");
}

Gateway::Gateway(BackendConfig config) : Gateway(config, make_backend(config)) {}

template <class Call>
auto Gateway::with_retries(Call&& call) {
  for (int attempt = 0;; ++attempt) {
    try {
      inflight_->acquire();
      struct Release {
        std::counting_semaphore<>& s;
        ~Release() { s.release(); }
      } release{*inflight_};
      calls_.fetch_add(1);
      return call();
    } catch (const Error& e) {
      if (e.code() != ErrorCode::TransportError || attempt >= config_.max_retries) throw;
    }
    std::this_thread::sleep_for(config_.retry_backoff * (1LL << std::min(attempt, 16)));
  }
}

RawCompletion Gateway::complete(const ChatPrompt& prompt, bool want_logprobs) {
  return with_retries([&] { return backend_->complete(prompt, want_logprobs); });
}

RawCompletion Gateway::complete(const std::string& prompt, bool want_logprobs) {
  return complete(ChatPrompt{{}, prompt}, want_logprobs);
}

LabeledPrediction Gateway::classify(const ChatPrompt& prompt) {
  if (prompt.user.empty() && prompt.system.empty()) throw Error(ErrorCode::InvalidArgument, "empty prompt");
  for (int attempt = 0;; ++attempt) {
    auto raw = complete(prompt, false);
    try {
      const auto parsed = parse_prediction(raw.text);
      return LabeledPrediction{parsed.label, parsed.confidence, std::move(raw), parsed.status};
    } catch (const Error& e) {
      if (e.code() != ErrorCode::UnparsableCompletion || attempt >= config_.max_retries) throw;
    }
  }
}

LabeledPrediction Gateway::classify(const std::string& prompt) { return classify(ChatPrompt{{}, prompt}); }

std::vector<TokenLogprob> Gateway::score_continuation(const std::string& context, const std::string& continuation) {
  return with_retries([&] { return backend_->score_continuation(context, continuation); });
}

}  // namespace dknn
