#pragma once

// HTTP backend for users hosting real compile/judge services.
//
//   POST {base}/syntax       {"question": ..., "statement": ...}
//   POST {base}/consistency  {"question": ..., "statement": ...}
//   POST {base}/critique     {"question": ..., "statement": ..., "critique": ...}
//   -> 200 {"pass": true|false, "detail": "..."}
//
// Non-200 responses, transport errors and malformed bodies are retried with
// exponential backoff; after the last retry the call raises
// VerifierUnavailable. Failures are never mapped to a zero reward.

#include <chrono>
#include <string>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "pbso/common.hpp"
#include "pbso/verifiers.hpp"

namespace pbso {

struct RemoteConfig {
  std::string base_url;  // http://host:port[/prefix]
  std::chrono::milliseconds timeout{30000};
  std::size_t retries = 3;
  std::chrono::milliseconds backoff{250};  // doubles after every failed attempt
  std::size_t max_in_flight = 8;
};

class RemoteBackend final : public VerifierBackend {
 public:
  explicit RemoteBackend(RemoteConfig cfg) : cfg_(std::move(cfg)) {
    const std::string& url = cfg_.base_url;
    const std::string scheme = "http://";
    if (url.rfind(scheme, 0) != 0)
      throw InvalidConfig("verifier.base_url must start with http://");
    std::size_t slash = url.find('/', scheme.size());
    host_ = url.substr(0, slash);
    prefix_ = slash == std::string::npos ? "" : url.substr(slash);
    while (!prefix_.empty() && prefix_.back() == '/') prefix_.pop_back();
  }

  std::string id() const override { return "remote:" + cfg_.base_url; }
  std::size_t max_in_flight() const override { return cfg_.max_in_flight; }

  CheckResult syntax(const Question& q, std::string_view statement) const override {
    return post("/syntax", {{"question", q.text}, {"statement", statement}});
  }
  CheckResult consistency(const Question& q, std::string_view statement) const override {
    return post("/consistency", {{"question", q.text}, {"statement", statement}});
  }
  CheckResult critique(const Question& q, std::string_view statement,
                       std::string_view critique) const override {
    return post("/critique",
                {{"question", q.text}, {"statement", statement}, {"critique", critique}});
  }

 private:
  CheckResult post(const std::string& route, const nlohmann::json& body) const {
    const std::string payload = body.dump();
    std::string last_error;
    auto delay = cfg_.backoff;
    for (std::size_t attempt = 0; attempt <= cfg_.retries; ++attempt) {
      if (attempt > 0) {
        std::this_thread::sleep_for(delay);
        delay *= 2;
      }
      httplib::Client client(host_);
      const auto secs = std::chrono::duration_cast<std::chrono::seconds>(cfg_.timeout);
      const auto usecs =
          std::chrono::duration_cast<std::chrono::microseconds>(cfg_.timeout - secs);
      client.set_connection_timeout(secs.count(), usecs.count());
      client.set_read_timeout(secs.count(), usecs.count());
      client.set_write_timeout(secs.count(), usecs.count());
      auto res = client.Post(prefix_ + route, payload, "application/json");
      if (!res) {
        last_error = "transport error: " + httplib::to_string(res.error());
        continue;
      }
      if (res->status != 200) {
        last_error = "HTTP " + std::to_string(res->status);
        continue;
      }
      try {
        auto j = nlohmann::json::parse(res->body);
        return {j.at("pass").get<bool>(), j.value("detail", std::string())};
      } catch (const nlohmann::json::exception& e) {
        last_error = std::string("malformed response: ") + e.what();
      }
    }
    throw VerifierUnavailable(id(), route + " failed after " + std::to_string(cfg_.retries + 1) +
                                        " attempts: " + last_error);
  }

  RemoteConfig cfg_;
  std::string host_;
  std::string prefix_;
};

}  // namespace pbso
