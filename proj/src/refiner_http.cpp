#include <chrono>
#include <cstdlib>
#include <regex>
#include <set>
#include <thread>

#include "httplib.h"
#include "json.hpp"
#include "toxitrace/cusa.hpp"

namespace toxitrace::cusa {

using json = nlohmann::ordered_json;

void HttpConfig::validate() const {
  if (endpoint.empty()) throw ContractViolation("refiner endpoint is empty");
  if (!(timeout_seconds > 0.0)) throw ContractViolation("refiner timeout must be positive");
  if (parallelism < 1) throw ContractViolation("refiner parallelism must be at least 1");
  if (response_path.empty() || response_path.front() != '/') {
    throw ContractViolation("response_path must be a JSON pointer starting with /");
  }
  if (!json::accept(request_template)) throw ContractViolation("request_template is not valid JSON");
}

HttpConfig http_config_from_json(const std::string& text, HttpConfig base) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::parse_error& e) {
    throw DataError(std::string("malformed refiner config: ") + e.what());
  }
  if (!j.is_object()) throw DataError("refiner config must be a JSON object");
  const std::set<std::string> known = {"endpoint",      "token_env",       "request_template", "response_path",
                                       "timeout_seconds", "retries",       "parallelism"};
  for (const auto& [key, value] : j.items()) {
    if (!known.count(key)) throw DataError("unknown refiner config field " + key);
  }
  try {
    if (j.contains("endpoint")) base.endpoint = j["endpoint"].get<std::string>();
    if (j.contains("token_env")) base.token_env = j["token_env"].get<std::string>();
    if (j.contains("request_template")) {
      const auto& t = j["request_template"];
      base.request_template = t.is_string() ? t.get<std::string>() : t.dump();
    }
    if (j.contains("response_path")) base.response_path = j["response_path"].get<std::string>();
    if (j.contains("timeout_seconds")) base.timeout_seconds = j["timeout_seconds"].get<double>();
    if (j.contains("retries")) base.retries = j["retries"].get<std::size_t>();
    if (j.contains("parallelism")) base.parallelism = j["parallelism"].get<std::size_t>();
  } catch (const json::exception& e) {
    throw DataError(std::string("refiner config field has the wrong type: ") + e.what());
  }
  return base;
}

namespace {

void replace_all(std::string& s, const std::string& from, const std::string& to) {
  for (std::size_t pos = 0; (pos = s.find(from, pos)) != std::string::npos; pos += to.size()) {
    s.replace(pos, from.size(), to);
  }
}

void substitute(json& node, const std::map<std::string, std::string>& values) {
  if (node.is_string()) {
    auto s = node.get<std::string>();
    for (const auto& [key, value] : values) replace_all(s, "{{" + key + "}}", value);
    node = s;
  } else if (node.is_structured()) {
    for (auto& child : node) substitute(child, values);
  }
}

bool retryable(int status) { return status == 408 || status == 429 || status >= 500; }

}  // namespace

std::string render_request_body(const HttpConfig& config, const Request& request) {
  auto body = json::parse(config.request_template);
  substitute(body, {{"system", request.prompt.system},
                    {"user", request.prompt.user},
                    {"prompt", prompt_text(request.prompt)},
                    {"id", request.id}});
  return body.dump();
}

std::string select_response_text(const HttpConfig& config, const std::string& body) {
  try {
    const auto j = json::parse(body);
    const auto& node = j.at(json::json_pointer(config.response_path));
    if (!node.is_string()) throw TransportError("response field " + config.response_path + " is not a string");
    return node.get<std::string>();
  } catch (const json::exception&) {
    throw TransportError("response lacks a string at " + config.response_path);
  }
}

HttpClient::HttpClient(HttpConfig config) : config_(std::move(config)) {
  config_.validate();
  static const std::regex url(R"(^(https?://[^/]+)(/.*)?$)");
  std::smatch m;
  if (!std::regex_match(config_.endpoint, m, url)) throw ContractViolation("endpoint is not an http(s) URL");
  base_ = m[1].str();
  path_ = m[2].matched ? m[2].str() : "/";
  if (const char* token = std::getenv(config_.token_env.c_str()); token && *token) token_ = token;
}

std::string HttpClient::complete(const Request& request) {
  const auto body = render_request_body(config_, request);
  httplib::Headers headers;
  if (token_) headers.emplace("Authorization", "Bearer " + *token_);
  const auto secs = static_cast<time_t>(config_.timeout_seconds);
  const auto usecs = static_cast<time_t>((config_.timeout_seconds - static_cast<double>(secs)) * 1e6);

  std::string last_error;
  for (std::size_t attempt = 0; attempt <= config_.retries; ++attempt) {
    if (attempt) std::this_thread::sleep_for(std::chrono::milliseconds(100 << std::min<std::size_t>(attempt, 5)));
    httplib::Client client(base_);
    client.set_connection_timeout(secs, usecs);
    client.set_read_timeout(secs, usecs);
    client.set_write_timeout(secs, usecs);
    auto res = client.Post(path_, headers, body, "application/json");
    if (!res) {
      last_error = "request to " + config_.endpoint + " failed: " + httplib::to_string(res.error());
      continue;
    }
    if (res->status == 200) return select_response_text(config_, res->body);
    last_error = "request to " + config_.endpoint + " returned status " + std::to_string(res->status);
    if (!retryable(res->status)) break;
  }
  throw TransportError(last_error + " (request " + request.id + ")");
}

}  // namespace toxitrace::cusa
