#pragma once

// Experiment driver: configuration, the steal -> remove/exploit -> detect
// pipelines against the synthetic oracle, and TPR@FPR / median p reporting.

#include <algorithm>
#include <cstdio>
#include <functional>
#include <iomanip>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "demark/core.hpp"
#include "demark/oracle.hpp"
#include "demark/removal.hpp"
#include "demark/stats.hpp"
#include "demark/steal.hpp"
#include "demark/watermark.hpp"

namespace demark {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct ExperimentConfig {
  std::uint64_t seed = 0;
  std::size_t vocab_size = 1000;
  std::set<TokenId> special_tokens = {kPadToken, 1};
  TokenId eos = 1;
  WatermarkSpec watermark{"demark-secret", 3, 2.0, 0.5};

  // Oracle.
  ProbeMode mode = ProbeMode::exact;
  int n_samples = 10;
  double noise_max = 0.0;
  std::size_t support_size = 16;
  double floor_mass = 0.02;

  StealHyper steal;
  std::size_t h_max = 8;
  std::size_t h_repeats = 1;
  RemovalConfig removal;
  std::vector<double> eta_sweep;

  std::size_t n_prompts = 100;
  std::size_t tokens_per_generation = 300;
  std::size_t prompt_len = 10;
  std::vector<double> fpr_grid = {1e-3, 1e-4, 1e-5};
  bool suppress_eos = true;
  std::size_t workers = 1;

  // Stealing evaluation.
  std::size_t eval_tokens = 500;
  std::vector<std::size_t> h_sweep = {1, 3, 5, 7};

  Vocabulary vocabulary() const { return Vocabulary(vocab_size, special_tokens, eos); }

  SyntheticLMConfig oracle_config(std::uint64_t base_seed) const {
    SyntheticLMConfig c;
    c.vocab = vocabulary();
    c.spec = watermark;
    c.noise_max = noise_max;
    c.base_seed = base_seed;
    c.mode = mode;
    c.n_samples = n_samples;
    c.support_size = support_size;
    c.floor_mass = floor_mass;
    return c;
  }

  GenerateOptions generate_options() const { return {suppress_eos, eos}; }

  void validate() const {
    (void)vocabulary();
    oracle_config(0).validate();
    steal.validate();
    removal.validate();
    if (h_max < 1) throw ConfigError("steal.h_max", "must be >= 1");
    if (h_repeats < 1) throw ConfigError("steal.h_repeats", "must be >= 1");
    if (n_prompts < 1) throw ConfigError("n_prompts", "must be >= 1");
    if (tokens_per_generation <= watermark.prefix_len()) {
      throw ConfigError("tokens_per_generation", "must exceed watermark.prefix_len");
    }
    if (workers < 1) throw ConfigError("workers", "must be >= 1");
    if (steal.m > vocabulary().probe_pool().size()) throw ConfigError("steal.m", "exceeds probeable vocabulary");
    for (double f : fpr_grid) {
      if (!(f > 0.0 && f < 1.0)) throw ConfigError("fpr_grid", "entries must lie in (0, 1)");
    }
    for (double e : eta_sweep) {
      if (!(e >= 0.0)) throw ConfigError("removal.eta_sweep", "entries must be >= 0");
    }
    for (std::size_t h : h_sweep) {
      if (h < 1) throw ConfigError("steal_eval.h_sweep", "entries must be >= 1");
    }
  }
};

inline ExperimentConfig experiment_config_from_json(const nlohmann::json& j) {
  using detail::optional;
  if (!j.is_object()) throw ConfigError("config", "must be a JSON object");
  static const std::set<std::string> known = {"seed",      "vocab_size",  "special_tokens",
                                              "eos",       "watermark",   "oracle",
                                              "steal",     "removal",     "n_prompts",
                                              "tokens_per_generation",    "prompt_len",
                                              "fpr_grid",  "suppress_eos", "workers",
                                              "steal_eval"};
  for (const auto& [k, v] : j.items()) {
    if (!known.contains(k)) throw ConfigError(k, "unknown field");
  }
  ExperimentConfig c;
  c.seed = optional<std::uint64_t>(j, "seed", c.seed, "");
  const auto vs = optional<long long>(j, "vocab_size", static_cast<long long>(c.vocab_size), "");
  if (vs < 2) throw ConfigError("vocab_size", "must be >= 2");
  c.vocab_size = static_cast<std::size_t>(vs);
  c.special_tokens = optional<std::set<TokenId>>(j, "special_tokens", c.special_tokens, "");
  c.eos = optional<TokenId>(j, "eos", c.eos, "");
  if (j.contains("watermark")) c.watermark = watermark_spec_from_json(j["watermark"], "watermark");

  const nlohmann::json oracle = j.value("oracle", nlohmann::json::object());
  c.mode = probe_mode_from_string(optional<std::string>(oracle, "mode", "L1", "oracle"));
  c.n_samples = optional<int>(oracle, "n_samples", c.n_samples, "oracle");
  c.noise_max = optional<double>(oracle, "noise_max", c.noise_max, "oracle");
  c.support_size = optional<std::size_t>(oracle, "support_size", c.support_size, "oracle");
  c.floor_mass = optional<double>(oracle, "floor_mass", c.floor_mass, "oracle");

  const nlohmann::json steal = j.value("steal", nlohmann::json::object());
  c.steal = steal_hyper_from_json(steal, "steal");
  const auto h_max = optional<long long>(steal, "h_max", 8, "steal");
  if (h_max < 1) throw ConfigError("steal.h_max", "must be >= 1");
  c.h_max = static_cast<std::size_t>(h_max);
  c.h_repeats = optional<std::size_t>(steal, "h_repeats", c.h_repeats, "steal");

  const nlohmann::json removal = j.value("removal", nlohmann::json::object());
  c.removal.eta = optional<double>(removal, "eta", c.removal.eta, "removal");
  const auto top_k = optional<long long>(removal, "top_k", 20, "removal");
  if (top_k < 1) throw ConfigError("removal.top_k", "must be >= 1");
  c.removal.top_k = static_cast<std::size_t>(top_k);
  c.eta_sweep = optional<std::vector<double>>(removal, "eta_sweep", c.eta_sweep, "removal");

  auto positive = [&](const char* key, std::size_t fallback) {
    const auto v = optional<long long>(j, key, static_cast<long long>(fallback), "");
    if (v < 1) throw ConfigError(key, "must be >= 1");
    return static_cast<std::size_t>(v);
  };
  c.n_prompts = positive("n_prompts", c.n_prompts);
  c.tokens_per_generation = positive("tokens_per_generation", c.tokens_per_generation);
  c.prompt_len = positive("prompt_len", c.prompt_len);
  c.workers = positive("workers", c.workers);
  c.fpr_grid = optional<std::vector<double>>(j, "fpr_grid", c.fpr_grid, "");
  c.suppress_eos = optional<bool>(j, "suppress_eos", c.suppress_eos, "");

  const nlohmann::json eval = j.value("steal_eval", nlohmann::json::object());
  c.eval_tokens = optional<std::size_t>(eval, "tokens", c.eval_tokens, "steal_eval");
  c.h_sweep = optional<std::vector<std::size_t>>(eval, "h_sweep", c.h_sweep, "steal_eval");

  try {
    c.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    throw ConfigError("config", e.what());
  }
  return c;
}

inline nlohmann::json to_json(const ExperimentConfig& c) {
  return {{"seed", c.seed},
          {"vocab_size", c.vocab_size},
          {"special_tokens", c.special_tokens},
          {"eos", c.eos},
          {"watermark", to_json(c.watermark)},
          {"oracle",
           {{"mode", to_string(c.mode)},
            {"n_samples", c.n_samples},
            {"noise_max", c.noise_max},
            {"support_size", c.support_size},
            {"floor_mass", c.floor_mass}}},
          {"steal", [&] {
             auto s = to_json(c.steal);
             s["h_max"] = c.h_max;
             s["h_repeats"] = c.h_repeats;
             return s;
           }()},
          {"removal", {{"eta", c.removal.eta}, {"top_k", c.removal.top_k}, {"eta_sweep", c.eta_sweep}}},
          {"n_prompts", c.n_prompts},
          {"tokens_per_generation", c.tokens_per_generation},
          {"prompt_len", c.prompt_len},
          {"fpr_grid", c.fpr_grid},
          {"suppress_eos", c.suppress_eos},
          {"workers", c.workers},
          {"steal_eval", {{"tokens", c.eval_tokens}, {"h_sweep", c.h_sweep}}}};
}

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

struct BenchRow {
  std::string condition;
  std::map<double, double> tpr_at_fpr;
  double median_p = 1.0;
  std::size_t n_runs = 0;
  std::uint64_t query_count = 0;
  std::vector<double> z_scores;
  std::vector<double> p_values;
  std::optional<std::string> error;
};

struct BenchReport {
  std::vector<BenchRow> rows;
  std::optional<std::size_t> h_hat;
  std::optional<double> delta_hat;

  bool ok() const {
    return std::none_of(rows.begin(), rows.end(), [](const BenchRow& r) { return r.error.has_value(); });
  }
};

inline std::string format_fpr(double f) {
  std::ostringstream s;
  s << std::setprecision(6) << f;
  return s.str();
}

inline nlohmann::json to_json(const BenchRow& r) {
  nlohmann::json tpr = nlohmann::json::object();
  for (const auto& [f, v] : r.tpr_at_fpr) tpr[format_fpr(f)] = v;
  nlohmann::json j = {{"condition", r.condition}, {"tpr_at_fpr", tpr},          {"median_p", r.median_p},
                      {"n_runs", r.n_runs},       {"query_count", r.query_count}};
  if (r.error) j["error"] = *r.error;
  return j;
}

/// One JSON object per line, rows in canonical (condition) order.
inline std::string to_jsonl(const BenchReport& report) {
  std::vector<const BenchRow*> rows;
  for (const auto& r : report.rows) rows.push_back(&r);
  std::stable_sort(rows.begin(), rows.end(), [](auto* a, auto* b) { return a->condition < b->condition; });
  std::string out;
  for (const auto* r : rows) out += to_json(*r).dump() + '\n';
  return out;
}

inline std::string to_table(const BenchReport& report) {
  std::ostringstream s;
  char buf[64];
  if (report.h_hat) s << "h_hat=" << *report.h_hat << "  ";
  if (report.delta_hat) {
    std::snprintf(buf, sizeof buf, "%.4f", *report.delta_hat);
    s << "delta_hat=" << buf;
  }
  if (report.h_hat || report.delta_hat) s << '\n';
  std::vector<double> fprs;
  for (const auto& r : report.rows) {
    for (const auto& [f, v] : r.tpr_at_fpr) {
      if (std::find(fprs.begin(), fprs.end(), f) == fprs.end()) fprs.push_back(f);
    }
  }
  std::sort(fprs.rbegin(), fprs.rend());
  s << std::left << std::setw(24) << "condition";
  for (double f : fprs) s << std::setw(12) << ("TPR@" + format_fpr(f));
  s << std::setw(12) << "median_p" << std::setw(8) << "runs" << "queries\n";
  for (const auto& r : report.rows) {
    s << std::setw(24) << r.condition;
    for (double f : fprs) {
      const auto it = r.tpr_at_fpr.find(f);
      std::snprintf(buf, sizeof buf, "%.3f", it == r.tpr_at_fpr.end() ? 0.0 : it->second);
      s << std::setw(12) << buf;
    }
    std::snprintf(buf, sizeof buf, "%.3e", r.median_p);
    s << std::setw(12) << buf << std::setw(8) << r.n_runs << r.query_count;
    if (r.error) s << "  ERROR: " << *r.error;
    s << '\n';
  }
  return s.str();
}

// ---------------------------------------------------------------------------
// Experiment
// ---------------------------------------------------------------------------

/// Runs `fn(i)` for i in [0, n) on up to `workers` threads.
inline void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(n);
  std::vector<std::jthread> pool;
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) {
        try {
          fn(i);
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  pool.clear();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

/// Owns the watermarked service, the attacker's own model and the prompt set
/// for one configuration. Every output is a pure function of the config.
class Experiment {
 public:
  explicit Experiment(ExperimentConfig config)
      : config_((config.validate(), std::move(config))),
        oracle_(config_.oracle_config(hash::mix64(config_.seed ^ 0x6F7261636C65ULL))),
        attacker_(attacker_config(config_)) {}

  const ExperimentConfig& config() const noexcept { return config_; }
  const SyntheticLM& oracle() const noexcept { return oracle_; }
  const SyntheticLM& attacker() const noexcept { return attacker_; }

  /// Seeded random token prefixes.
  std::vector<TokenSeq> prompts() const {
    Rng rng = seeded_rng(config_.seed, "prompts");
    std::vector<TokenSeq> out(config_.n_prompts);
    for (auto& p : out) p = sample_tokens(oracle_.vocabulary().probe_pool(), config_.prompt_len, rng);
    return out;
  }

  DetectionReport detect(std::span<const TokenId> tokens) const {
    return demark::detect(tokens, DetectorKey::from(config_.watermark));
  }

  /// Estimates h and delta from probes (the color cache starts empty).
  StolenParams steal() const {
    StolenParams p;
    p.hyper = config_.steal;
    Rng rng_h = seeded_rng(config_.seed, "steal-h");
    p.h_hat = identify_h(oracle_, config_.h_max, config_.steal, rng_h, config_.h_repeats);
    Rng rng_d = seeded_rng(config_.seed, "steal-delta");
    p.delta_hat = identify_delta(oracle_, p.h_hat, config_.steal, rng_d);
    return p;
  }

  /// The ground truth an attacker would ideally recover.
  StolenParams perfect_params() const {
    StolenParams p;
    p.hyper = config_.steal;
    p.h_hat = config_.watermark.prefix_len();
    p.delta_hat = config_.watermark.delta();
    return p;
  }

  BenchRow watermarked_row() const {
    return run_row("watermarked", [&](std::size_t, const TokenSeq& prompt, Rng& rng, ColorCache&) {
      return generate(BaseModel(oracle_), config_.watermark, prompt, config_.tokens_per_generation, rng,
                      config_.generate_options());
    });
  }

  BenchRow removal_row(const StolenParams& stolen, double eta, ColorCache* merge_into = nullptr) const {
    RemovalConfig rc = config_.removal;
    rc.eta = eta;
    std::ostringstream name;
    name << "demark-removal(eta=" << eta << ")";
    return run_row(
        name.str(),
        [&](std::size_t, const TokenSeq& prompt, Rng& rng, ColorCache& local) {
          ColorClassifier classifier(oracle_, stolen, local, &stolen.color_cache, config_.seed);
          return remove_generate(oracle_, stolen, classifier, rc, prompt, config_.tokens_per_generation, rng,
                                 config_.generate_options());
        },
        merge_into, "gen:demark-removal");
  }

  BenchRow exploit_row(const StolenParams& stolen, std::string condition = "demark-exploit",
                       ColorCache* merge_into = nullptr) const {
    return run_row(
        std::move(condition),
        [&](std::size_t, const TokenSeq& prompt, Rng& rng, ColorCache& local) {
          ColorClassifier classifier(oracle_, stolen, local, &stolen.color_cache, config_.seed);
          return exploit_generate(BaseModel(attacker_), stolen, classifier, prompt, config_.tokens_per_generation,
                                  rng, config_.removal.top_k, config_.generate_options());
        },
        merge_into);
  }

  /// Attacker model with no watermark at all (delta_hat = 0).
  BenchRow attacker_baseline_row() const {
    StolenParams none = perfect_params();
    none.delta_hat = 0.0;
    return exploit_row(none, "attacker-no-watermark");
  }

  /// Removal rows: watermarked, then removal at eta and every eta_sweep value.
  BenchReport run_removal_bench() const {
    BenchReport report;
    report.rows.push_back(guarded("watermarked", [&] { return watermarked_row(); }));
    std::optional<StolenParams> stolen;
    std::vector<double> etas = {config_.removal.eta};
    for (double e : config_.eta_sweep) {
      if (std::find(etas.begin(), etas.end(), e) == etas.end()) etas.push_back(e);
    }
    std::uint64_t steal_queries = 0;
    try {
      const auto before = oracle_.query_count();
      stolen = steal();
      steal_queries = oracle_.query_count() - before;
      report.h_hat = stolen->h_hat;
      report.delta_hat = stolen->delta_hat;
    } catch (const std::exception& e) {
      for (double eta : etas) {
        BenchRow failed;
        std::ostringstream name;
        name << "demark-removal(eta=" << eta << ")";
        failed.condition = name.str();
        failed.error = std::string("steal failed: ") + e.what();
        report.rows.push_back(failed);
      }
      return report;
    }
    for (double eta : etas) {
      std::ostringstream name;
      name << "demark-removal(eta=" << eta << ")";
      BenchRow row = guarded(name.str(), [&] { return removal_row(*stolen, eta); });
      row.query_count += steal_queries;
      report.rows.push_back(std::move(row));
    }
    return report;
  }

  BenchReport run_exploit_bench() const {
    BenchReport report;
    report.rows.push_back(guarded("attacker-no-watermark", [&] { return attacker_baseline_row(); }));
    try {
      const auto before = oracle_.query_count();
      const StolenParams stolen = steal();
      const auto steal_queries = oracle_.query_count() - before;
      report.h_hat = stolen.h_hat;
      report.delta_hat = stolen.delta_hat;
      BenchRow row = guarded("demark-exploit", [&] { return exploit_row(stolen); });
      row.query_count += steal_queries;
      report.rows.push_back(std::move(row));
    } catch (const std::exception& e) {
      BenchRow failed;
      failed.condition = "demark-exploit";
      failed.error = std::string("steal failed: ") + e.what();
      report.rows.push_back(failed);
    }
    return report;
  }

  /// Removal and exploitation in one report.
  BenchReport run_bench() const {
    BenchReport report = run_removal_bench();
    BenchReport exploit = run_exploit_bench();
    for (auto& r : exploit.rows) report.rows.push_back(std::move(r));
    return report;
  }

  /// Wraps a row-producing step so a failure annotates the row.
  static BenchRow guarded(const std::string& condition, const std::function<BenchRow()>& fn) {
    try {
      return fn();
    } catch (const std::exception& e) {
      BenchRow r;
      r.condition = condition;
      r.error = e.what();
      return r;
    }
  }

  /// Generates one sequence per prompt with `gen(i, prompt, rng, local_cache)`,
  /// scores it with the true detector and summarizes. Each prompt gets its own
  /// random stream and color-cache overlay, so results do not depend on
  /// scheduling; overlays are merged into `merge_into` in prompt order.
  /// Rows sharing a `stream` label draw identical random numbers.
  using Generator = std::function<TokenSeq(std::size_t, const TokenSeq&, Rng&, ColorCache&)>;

  BenchRow run_row(std::string condition, const Generator& gen, ColorCache* merge_into = nullptr,
                   std::string stream = {}) const {
    if (stream.empty()) stream = "gen:" + condition;
    const auto prompts = this->prompts();
    std::vector<TokenSeq> outputs(prompts.size());
    std::vector<ColorCache> caches(prompts.size());
    const auto before = oracle_.query_count();
    parallel_for(prompts.size(), config_.workers, [&](std::size_t i) {
      Rng rng = seeded_rng(config_.seed, stream, i);
      outputs[i] = gen(i, prompts[i], rng, caches[i]);
    });
    BenchRow row;
    row.condition = std::move(condition);
    row.query_count = oracle_.query_count() - before;
    for (const auto& out : outputs) {
      const auto r = detect(out);
      row.z_scores.push_back(r.z_score);
      row.p_values.push_back(r.p_value);
    }
    summarize(row);
    if (merge_into != nullptr) {
      for (const auto& c : caches) merge_into->merge(c);
    }
    return row;
  }

  void summarize(BenchRow& row) const {
    row.n_runs = row.z_scores.size();
    for (double f : config_.fpr_grid) row.tpr_at_fpr[f] = tpr_at_fpr(row.z_scores, f);
    row.median_p = stats::lower_median(row.p_values);
  }

 private:
  static SyntheticLMConfig attacker_config(const ExperimentConfig& c) {
    SyntheticLMConfig a = c.oracle_config(hash::mix64(c.seed ^ 0x61747461636BULL));
    a.spec = c.watermark.with_delta(0.0);
    a.mode = ProbeMode::exact;
    return a;
  }

  ExperimentConfig config_;
  SyntheticLM oracle_;
  SyntheticLM attacker_;
};

// ---------------------------------------------------------------------------
// Stealing accuracy
// ---------------------------------------------------------------------------

struct ClassificationStats {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::size_t total() const { return tp + fp + tn + fn; }
  double accuracy() const { return total() ? static_cast<double>(tp + tn) / static_cast<double>(total()) : 0.0; }
  double precision() const { return tp + fp ? static_cast<double>(tp) / static_cast<double>(tp + fp) : 0.0; }
  double recall() const { return tp + fn ? static_cast<double>(tp) / static_cast<double>(tp + fn) : 0.0; }
  double f1() const {
    const double p = precision(), r = recall();
    return p + r > 0.0 ? 2.0 * p * r / (p + r) : 0.0;
  }
  void add(Color predicted, Color truth) {
    if (predicted == Color::green) {
      (truth == Color::green ? tp : fp)++;
    } else {
      (truth == Color::red ? tn : fn)++;
    }
  }
};

struct StealEvalReport {
  std::size_t h_true = 0;
  std::size_t h_hat = 0;
  double delta_true = 0.0;
  double delta_hat = 0.0;
  ClassificationStats green;
  std::vector<std::pair<std::size_t, std::size_t>> h_sweep;  // (true h, estimated h)
  std::uint64_t query_count = 0;
  std::optional<std::string> error;

  std::size_t h_sweep_correct() const {
    return static_cast<std::size_t>(
        std::count_if(h_sweep.begin(), h_sweep.end(), [](const auto& p) { return p.first == p.second; }));
  }
};

/// Green-list accuracy of classifying `n_tokens` targets (rounds of m under
/// fresh random contexts of length h_hat) against the true partition.
inline ClassificationStats evaluate_green_list(const Oracle& oracle, const WatermarkSpec& truth, std::size_t h_hat,
                                               double delta_hat, const StealHyper& hyper, std::size_t n_tokens,
                                               Rng& rng) {
  ClassificationStats stats;
  const auto pool = oracle.vocabulary().probe_pool();
  while (stats.total() < n_tokens) {
    const TokenSeq x = sample_tokens(pool, h_hat, rng);
    const TokenSeq targets = sample_distinct(pool, hyper.m, rng);
    const auto colors = classify_targets(relative_ratios(oracle, x, targets), delta_hat);
    const GreenList greens(truth, NGramContext::from_history(x, truth));
    for (std::size_t i = 0; i < targets.size() && stats.total() < n_tokens; ++i) {
      stats.add(colors[i], greens.color(targets[i]));
    }
  }
  return stats;
}

inline StealEvalReport run_steal_eval(const ExperimentConfig& cfg) {
  const Experiment exp(cfg);
  StealEvalReport report;
  report.h_true = cfg.watermark.prefix_len();
  report.delta_true = cfg.watermark.delta();
  const auto before = exp.oracle().query_count();
  try {
    const StolenParams stolen = exp.steal();
    report.h_hat = stolen.h_hat;
    report.delta_hat = stolen.delta_hat;
    Rng rng = seeded_rng(cfg.seed, "steal-eval-green");
    report.green = evaluate_green_list(exp.oracle(), cfg.watermark, stolen.h_hat, stolen.delta_hat, cfg.steal,
                                       cfg.eval_tokens, rng);
  } catch (const std::exception& e) {
    report.error = e.what();
  }
  report.query_count = exp.oracle().query_count() - before;
  for (std::size_t h : cfg.h_sweep) {
    ExperimentConfig c = cfg;
    c.watermark = WatermarkSpec(cfg.watermark.secret_key(), h, cfg.watermark.delta(), cfg.watermark.green_fraction());
    const Experiment sweep(c);
    Rng rng = seeded_rng(cfg.seed, "steal-eval-h", h);
    report.h_sweep.emplace_back(h, identify_h(sweep.oracle(), cfg.h_max, cfg.steal, rng, cfg.h_repeats));
  }
  return report;
}

inline nlohmann::json to_json(const StealEvalReport& r) {
  nlohmann::json sweep = nlohmann::json::array();
  for (const auto& [h, est] : r.h_sweep) sweep.push_back({{"h", h}, {"h_hat", est}});
  nlohmann::json j = {{"h_true", r.h_true},
                      {"h_hat", r.h_hat},
                      {"h_correct", r.h_true == r.h_hat},
                      {"delta_true", r.delta_true},
                      {"delta_hat", r.delta_hat},
                      {"delta_error", std::abs(r.delta_hat - r.delta_true)},
                      {"precision", r.green.precision()},
                      {"recall", r.green.recall()},
                      {"f1", r.green.f1()},
                      {"accuracy", r.green.accuracy()},
                      {"n_classified", r.green.total()},
                      {"h_sweep", sweep},
                      {"h_sweep_correct", r.h_sweep_correct()},
                      {"query_count", r.query_count}};
  if (r.error) j["error"] = *r.error;
  return j;
}

}  // namespace demark
