#pragma once

// Live completion endpoint for the labeler, over cpp-httplib.

#include <memory>
#include <string>

#include "httplib.h"
#include "json.hpp"
#include "sparse_rag/auto_labeler.hpp"

namespace sparse_rag {

namespace detail {

struct SplitUrl {
  std::string origin;  // scheme://host[:port]
  std::string path;    // without trailing slash
};

inline SplitUrl split_base_url(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw InvalidArgument("base URL needs a scheme: " + url);
  const auto slash = url.find('/', scheme + 3);
  SplitUrl s;
  s.origin = url.substr(0, slash);
  s.path = slash == std::string::npos ? "" : url.substr(slash);
  while (!s.path.empty() && s.path.back() == '/') s.path.pop_back();
  return s;
}

}  // namespace detail

class HttpBackend : public RaterBackend {
 public:
  explicit HttpBackend(HttpBackendConfig config) : config_(std::move(config)), url_(detail::split_base_url(config_.base_url)) {}

  // A client per call keeps the backend safe to share between worker threads.
  std::string complete(const std::string& prompt) override {
    httplib::Client client(url_.origin);
    client.set_connection_timeout(config_.timeout_seconds, 0);
    client.set_read_timeout(config_.timeout_seconds, 0);
    httplib::Headers headers;
    if (!config_.auth_token.empty()) headers.emplace("Authorization", "Bearer " + config_.auth_token);
    const nlohmann::json body{{"model", config_.model}, {"prompt", prompt}};
    auto res = client.Post(url_.path + "/complete", headers, body.dump(), "application/json");
    if (!res) throw BackendError("request failed: " + httplib::to_string(res.error()));
    if (res->status != 200) throw BackendError("HTTP status " + std::to_string(res->status));
    try {
      return nlohmann::json::parse(res->body).at("completion").get<std::string>();
    } catch (const nlohmann::json::exception& e) {
      throw BackendError(std::string("malformed response: ") + e.what());
    }
  }

  std::string name() const override { return config_.model.empty() ? "http" : config_.model; }

 private:
  HttpBackendConfig config_;
  detail::SplitUrl url_;
};

inline std::unique_ptr<RaterBackend> make_http_backend(const HttpBackendConfig& config) {
  return std::make_unique<HttpBackend>(config);
}

}  // namespace sparse_rag
