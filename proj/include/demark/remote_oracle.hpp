#pragma once

// HTTP oracle for OpenAI-compatible completion APIs that return per-token
// log-probabilities. Token ids map to text through an optional table (one
// string per id); without one, ids render as their decimal spelling.

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <semaphore>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "demark/core.hpp"
#include "demark/oracle.hpp"

namespace demark {

/// The probe instruction; [x], [T_i], [T_j] are substituted verbatim.
inline constexpr std::string_view kProbePromptTemplate =
    "I need you to randomly choose a phrase without exact meaning. "
    "Randomly start your answer with: \"[x] [T_i]\" or \"[x] [T_j]\"";

enum class ApiStyle { completions, chat };

struct RemoteConfig {
  std::string base_url;
  std::string model;
  std::string api_key_env = "OPENAI_API_KEY";
  std::size_t top_k = 20;
  int timeout_ms = 30000;
  int max_concurrency = 4;

  ApiStyle api = ApiStyle::completions;
  ProbeMode mode = ProbeMode::exact;
  int n_samples = 10;
  int max_retries = 5;
  int initial_backoff_ms = 250;
  int max_backoff_ms = 8000;
  /// Probability assigned to a candidate missing from the returned top-k.
  double min_prob = 1e-6;
  std::size_t vocab_size = 0;
  std::vector<TokenId> special_tokens = {kPadToken};
  /// Optional JSON array of token strings indexed by id.
  std::string token_texts_file;

  static RemoteConfig from_json(const nlohmann::json& j) {
    RemoteConfig c;
    c.base_url = detail::required<std::string>(j, "base_url", "");
    c.model = detail::required<std::string>(j, "model", "");
    c.api_key_env = detail::optional<std::string>(j, "api_key_env", c.api_key_env, "");
    const auto k = detail::optional<long long>(j, "top_k", 20, "");
    if (k < 1) throw ConfigError("top_k", "must be >= 1");
    c.top_k = static_cast<std::size_t>(k);
    c.timeout_ms = detail::optional<int>(j, "timeout_ms", c.timeout_ms, "");
    c.max_concurrency = detail::optional<int>(j, "max_concurrency", c.max_concurrency, "");
    if (c.max_concurrency < 1 || c.max_concurrency > 1024) throw ConfigError("max_concurrency", "must lie in [1, 1024]");
    const auto api = detail::optional<std::string>(j, "api", "completions", "");
    if (api == "completions") {
      c.api = ApiStyle::completions;
    } else if (api == "chat") {
      c.api = ApiStyle::chat;
    } else {
      throw ConfigError("api", "expected completions or chat");
    }
    c.mode = probe_mode_from_string(detail::optional<std::string>(j, "mode", "L1", ""));
    c.n_samples = detail::optional<int>(j, "n_samples", c.n_samples, "");
    c.max_retries = detail::optional<int>(j, "max_retries", c.max_retries, "");
    c.initial_backoff_ms = detail::optional<int>(j, "initial_backoff_ms", c.initial_backoff_ms, "");
    c.max_backoff_ms = detail::optional<int>(j, "max_backoff_ms", c.max_backoff_ms, "");
    c.min_prob = detail::optional<double>(j, "min_prob", c.min_prob, "");
    if (!(c.min_prob > 0.0 && c.min_prob < 1.0)) throw ConfigError("min_prob", "must lie in (0, 1)");
    const auto vs = detail::required<long long>(j, "vocab_size", "");
    if (vs < 2) throw ConfigError("vocab_size", "must be >= 2");
    c.vocab_size = static_cast<std::size_t>(vs);
    c.special_tokens = detail::optional<std::vector<TokenId>>(j, "special_tokens", c.special_tokens, "");
    c.token_texts_file = detail::optional<std::string>(j, "token_texts", "", "");
    return c;
  }
};

struct UrlParts {
  std::string origin;  // scheme://host[:port]
  std::string path;    // leading '/', no trailing '/'
};

inline UrlParts split_url(const std::string& url) {
  const auto scheme = url.find("://");
  if (scheme == std::string::npos) throw ConfigError("base_url", "missing scheme");
  const auto slash = url.find('/', scheme + 3);
  UrlParts parts{url.substr(0, slash), slash == std::string::npos ? "" : url.substr(slash)};
  while (!parts.path.empty() && parts.path.back() == '/') parts.path.pop_back();
  return parts;
}

/// Thread-safe; at most `max_concurrency` requests are in flight at once.
/// Transient failures (connection errors, 408, 429, 5xx) are retried with
/// capped exponential backoff; 401/403 fail immediately.
class RemoteOracle final : public Oracle {
 public:
  explicit RemoteOracle(RemoteConfig config)
      : config_(std::move(config)),
        vocab_(config_.vocab_size, std::set<TokenId>(config_.special_tokens.begin(), config_.special_tokens.end())),
        url_(split_url(config_.base_url)),
        slots_(config_.max_concurrency) {
    const char* key = std::getenv(config_.api_key_env.c_str());
    if (key == nullptr || *key == '\0') {
      throw ConfigError("api_key_env", "environment variable " + config_.api_key_env + " is not set");
    }
    api_key_ = key;
    load_token_texts();
  }

  ProbeMode mode() const override { return config_.mode; }
  int sample_count() const override { return config_.n_samples; }
  const Vocabulary& vocabulary() const override { return vocab_; }
  std::string_view source_name() const override { return "remote"; }
  std::uint64_t low_confidence_count() const noexcept { return low_confidence_.load(); }

  std::string token_text(TokenId t) const { return t < texts_.size() ? texts_[t] : std::to_string(t); }

  std::string context_text(std::span<const TokenId> context) const {
    std::string out;
    for (std::size_t i = 0; i < context.size(); ++i) {
      if (i > 0) out += ' ';
      out += token_text(context[i]);
    }
    return out;
  }

  /// The probe instruction for one presentation order.
  std::string render_probe_prompt(const ProbeQuery& q) const {
    std::string prompt(kProbePromptTemplate);
    replace_all(prompt, "[x]", context_text(q.context));
    replace_all(prompt, "[T_i]", token_text(q.listed_first()));
    replace_all(prompt, "[T_j]", token_text(q.listed_second()));
    return prompt;
  }

  /// Request body for the first answer token of a probe. In completions
  /// style the answer is prefilled with x so the next token is a candidate.
  nlohmann::json probe_request(const ProbeQuery& q, int n) const {
    const std::string instruction = render_probe_prompt(q);
    const std::string answer_prefix = q.context.empty() ? "" : context_text(q.context) + " ";
    return request_body(instruction + "\n" + answer_prefix, instruction, n);
  }

  RawPair probe_exact(const ProbeQuery& q) const override {
    if (config_.mode != ProbeMode::exact) throw CapabilityError("remote oracle configured for sampled (L0) probing");
    validate_probe(vocab_, q.first, q.second);
    const auto top = parse_top_logprobs(post(probe_request(q, 1)));
    RawPair out{config_.min_prob, config_.min_prob};
    bool seen_first = false;
    bool seen_second = false;
    for (const auto& [text, logprob] : top) {
      const std::string tok = trim(text);
      if (!seen_first && tok == trim(token_text(q.first))) {
        out.p_first = std::exp(logprob);
        seen_first = true;
      } else if (!seen_second && tok == trim(token_text(q.second))) {
        out.p_second = std::exp(logprob);
        seen_second = true;
      }
    }
    out.p_first = std::max(out.p_first, config_.min_prob);
    out.p_second = std::max(out.p_second, config_.min_prob);
    out.low_confidence = !(seen_first && seen_second);
    if (out.low_confidence) low_confidence_.fetch_add(1);
    return out;
  }

  ProbeCounts probe_sample(const ProbeQuery& q) const override {
    validate_probe(vocab_, q.first, q.second);
    const auto body = post(probe_request(q, config_.n_samples));
    ProbeCounts counts{0, 0, config_.n_samples};
    const std::string a = trim(token_text(q.first));
    const std::string b = trim(token_text(q.second));
    for (const auto& choice : body.value("choices", nlohmann::json::array())) {
      std::string text;
      if (choice.contains("text")) {
        text = choice["text"].get<std::string>();
      } else if (choice.contains("message")) {
        text = choice["message"].value("content", "");
      }
      const std::string first_word = first_token_of(text);
      if (first_word == a) {
        ++counts.first;
      } else if (first_word == b) {
        ++counts.second;
      }
    }
    return counts;
  }

  TokenDistribution top_k(std::span<const TokenId> context, std::size_t k) const override {
    if (k < 1) throw Error("top_k needs k >= 1");
    const std::string text = context_text(context);
    nlohmann::json body = request_body(text, text, 1);
    set_top_logprobs(body, k);
    const auto top = parse_top_logprobs(post(body));
    std::vector<TokenProb> entries;
    std::unordered_map<TokenId, bool> seen;
    for (const auto& [tok, logprob] : top) {
      const auto it = ids_.find(trim(tok));
      if (it == ids_.end() || seen[it->second]) continue;
      seen[it->second] = true;
      entries.push_back({it->second, std::exp(logprob)});
      if (entries.size() == k) break;
    }
    if (entries.empty()) throw CapabilityError("no returned token maps to a vocabulary id");
    return TokenDistribution(std::move(entries), true);
  }

  /// (token text, logprob) pairs for the first generated position.
  static std::vector<std::pair<std::string, double>> parse_top_logprobs(const nlohmann::json& body) {
    const auto& choices = body.value("choices", nlohmann::json::array());
    if (choices.empty()) throw CapabilityError("response has no choices");
    const auto& lp = choices[0].contains("logprobs") ? choices[0]["logprobs"] : nlohmann::json();
    std::vector<std::pair<std::string, double>> out;
    if (lp.is_object() && lp.contains("content") && lp["content"].is_array() && !lp["content"].empty()) {
      for (const auto& e : lp["content"][0].value("top_logprobs", nlohmann::json::array())) {
        out.emplace_back(e.at("token").get<std::string>(), e.at("logprob").get<double>());
      }
    } else if (lp.is_object() && lp.contains("top_logprobs") && lp["top_logprobs"].is_array() &&
               !lp["top_logprobs"].empty()) {
      for (const auto& [tok, value] : lp["top_logprobs"][0].items()) out.emplace_back(tok, value.get<double>());
    } else {
      throw CapabilityError("response carries no per-token log-probabilities");
    }
    std::stable_sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.second > b.second; });
    return out;
  }

 private:
  nlohmann::json request_body(const std::string& completion_prompt, const std::string& chat_prompt, int n) const {
    nlohmann::json body = {{"model", config_.model}, {"max_tokens", 1}};
    if (n > 1) body["n"] = n;
    if (config_.api == ApiStyle::chat) {
      body["messages"] = nlohmann::json::array({{{"role", "user"}, {"content", chat_prompt}}});
    } else {
      body["prompt"] = completion_prompt;
    }
    if (n == 1) set_top_logprobs(body, config_.top_k);
    return body;
  }

  void set_top_logprobs(nlohmann::json& body, std::size_t k) const {
    if (config_.api == ApiStyle::chat) {
      body["logprobs"] = true;
      body["top_logprobs"] = k;
    } else {
      body["logprobs"] = k;
    }
  }

  nlohmann::json post(const nlohmann::json& body) const {
    const std::string path = url_.path + (config_.api == ApiStyle::chat ? "/chat/completions" : "/completions");
    const std::string payload = body.dump();
    int backoff = config_.initial_backoff_ms;
    for (int attempt = 0;; ++attempt) {
      count_query();
      std::string failure;
      {
        SlotGuard guard(slots_);
        httplib::Client client(url_.origin);
        client.set_connection_timeout(std::chrono::milliseconds(config_.timeout_ms));
        client.set_read_timeout(std::chrono::milliseconds(config_.timeout_ms));
        client.set_write_timeout(std::chrono::milliseconds(config_.timeout_ms));
        const httplib::Headers headers = {{"Authorization", "Bearer " + api_key_}};
        const auto res = client.Post(path, headers, payload, "application/json");
        if (!res) {
          failure = "transport error: " + httplib::to_string(res.error());
        } else if (res->status == 401 || res->status == 403) {
          throw AuthError("endpoint rejected credentials (HTTP " + std::to_string(res->status) + ")");
        } else if (res->status == 408 || res->status == 429 || res->status >= 500) {
          failure = "HTTP " + std::to_string(res->status);
        } else if (res->status >= 400) {
          throw Error("endpoint returned HTTP " + std::to_string(res->status) + ": " + res->body);
        } else {
          try {
            return nlohmann::json::parse(res->body);
          } catch (const nlohmann::json::exception& e) {
            throw Error(std::string("malformed response body: ") + e.what());
          }
        }
      }
      if (attempt >= config_.max_retries) {
        throw TransientError(failure + " (gave up after " + std::to_string(attempt + 1) + " attempts)");
      }
      std::this_thread::sleep_for(std::chrono::milliseconds(backoff));
      backoff = std::min(backoff * 2, config_.max_backoff_ms);
    }
  }

  void load_token_texts() {
    if (!config_.token_texts_file.empty()) {
      std::ifstream in(config_.token_texts_file);
      if (!in) throw ConfigError("token_texts", "cannot open " + config_.token_texts_file);
      try {
        texts_ = nlohmann::json::parse(in).get<std::vector<std::string>>();
      } catch (const nlohmann::json::exception& e) {
        throw ConfigError("token_texts", e.what());
      }
    }
    for (TokenId t = 0; t < vocab_.size(); ++t) {
      if (!vocab_.is_special(t)) ids_.emplace(trim(token_text(t)), t);
    }
  }

  static void replace_all(std::string& s, std::string_view from, const std::string& to) {
    for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
      s.replace(pos, from.size(), to);
    }
  }

  static std::string trim(std::string_view s) {
    const auto b = s.find_first_not_of(" \t\n\r");
    if (b == std::string_view::npos) return {};
    const auto e = s.find_last_not_of(" \t\n\r");
    return std::string(s.substr(b, e - b + 1));
  }

  static std::string first_token_of(std::string_view s) {
    const std::string t = trim(s);
    return t.substr(0, t.find_first_of(" \t\n\r"));
  }

  struct SlotGuard {
    explicit SlotGuard(std::counting_semaphore<1024>& s) : sem(s) { sem.acquire(); }
    ~SlotGuard() { sem.release(); }
    std::counting_semaphore<1024>& sem;
  };

  RemoteConfig config_;
  Vocabulary vocab_;
  UrlParts url_;
  std::string api_key_;
  std::vector<std::string> texts_;
  std::unordered_map<std::string, TokenId> ids_;
  mutable std::counting_semaphore<1024> slots_;
  mutable std::atomic<std::uint64_t> low_confidence_{0};
};

}  // namespace demark
