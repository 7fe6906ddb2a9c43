#define CPPHTTPLIB_OPENSSL_SUPPORT
#include "http_json.hpp"

#include "dknn/error.hpp"

#include <httplib.h>

#include <cstdlib>

namespace dknn::detail {

namespace {

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string prefix;  // path component, no trailing slash
};

SplitUrl split_url(const std::string& base_url) {
  const auto scheme_end = base_url.find("://");
  if (scheme_end == std::string::npos) {
    throw Error(ErrorCode::ConfigError, "base_url must include a scheme: \"" + base_url + "\"");
  }
  const auto path_start = base_url.find('/', scheme_end + 3);
  SplitUrl out;
  out.origin = base_url.substr(0, path_start);
  if (path_start != std::string::npos) out.prefix = base_url.substr(path_start);
  while (!out.prefix.empty() && out.prefix.back() == '/') out.prefix.pop_back();
  return out;
}

}  // namespace

HttpResponse post_json(const std::string& base_url, const std::string& path, const std::string& body,
                       const std::string& bearer_token, std::chrono::milliseconds timeout) {
  const auto url = split_url(base_url);
  httplib::Client client(url.origin);
  const auto seconds = timeout.count() / 1000;
  const auto micros = (timeout.count() % 1000) * 1000;
  client.set_connection_timeout(seconds, micros);
  client.set_read_timeout(seconds, micros);
  client.set_write_timeout(seconds, micros);

  httplib::Headers headers;
  if (!bearer_token.empty()) headers.emplace("Authorization", "Bearer " + bearer_token);

  auto result = client.Post(url.prefix + path, headers, body, "application/json");
  if (!result) {
    throw Error(ErrorCode::TransportError,
                "POST " + base_url + path + " failed: " + httplib::to_string(result.error()));
  }
  return HttpResponse{result->status, result->body};
}

std::string env_or_empty(const std::string& name) {
  if (name.empty()) return {};
  const char* value = std::getenv(name.c_str());
  return value ? std::string(value) : std::string();
}

void check_status(const HttpResponse& response, const std::string& what) {
  if (response.status >= 200 && response.status < 300) return;
  const auto detail = what + " returned HTTP " + std::to_string(response.status) + ": " + response.body;
  if (response.status == 408 || response.status == 429 || response.status >= 500) {
    throw Error(ErrorCode::TransportError, detail);
  }
  throw Error(ErrorCode::BackendRefused, detail);
}

}  // namespace dknn::detail
