#pragma once

#include <chrono>
#include <string>

namespace dknn::detail {

struct HttpResponse {
  int status = 0;
  std::string body;
};

/// POSTs a JSON body to `{base_url}{path}`. Throws Error{TransportError}
/// when no HTTP response is obtained.
HttpResponse post_json(const std::string& base_url, const std::string& path, const std::string& body,
                       const std::string& bearer_token, std::chrono::milliseconds timeout);

/// Value of the environment variable `name`, or empty.
std::string env_or_empty(const std::string& name);

/// Failure policy shared by the chat and embedding clients: 2xx returns,
/// 408/429/5xx become TransportError (retryable), other 4xx BackendRefused.
void check_status(const HttpResponse& response, const std::string& what);

}  // namespace dknn::detail
