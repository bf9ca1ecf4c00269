// demark: steal, remove, exploit, detect, bench, steal-eval.

#include <cstdio>
#include <fstream>
#include <iostream>
#include <memory>
#include <optional>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "demark/core.hpp"
#include "demark/harness.hpp"
#include "demark/oracle.hpp"
#include "demark/remote_oracle.hpp"
#include "demark/removal.hpp"
#include "demark/steal.hpp"
#include "demark/watermark.hpp"

namespace {

using namespace demark;
using nlohmann::json;

json read_json_file(const std::string& path, const std::string& field) {
  std::ifstream in(path);
  if (!in) throw ConfigError(field, "cannot open " + path);
  try {
    return json::parse(in);
  } catch (const json::exception& e) {
    throw ConfigError(field, std::string("invalid JSON: ") + e.what());
  }
}

/// Options shared by the subcommands that build an experiment.
struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::string oracle = "synthetic";
  std::string endpoint;
  std::optional<std::size_t> workers;
  std::optional<std::size_t> n_prompts;
  std::string transcript;

  void add(CLI::App* app, bool oracle_flags) {
    app->add_option("--config", config_path, "Experiment config JSON");
    app->add_option("--seed", seed, "Random seed");
    app->add_option("--workers", workers, "Parallel prompts");
    app->add_option("--n-prompts", n_prompts, "Number of prompts");
    if (oracle_flags) {
      app->add_option("--oracle", oracle, "synthetic or remote")->check(CLI::IsMember({"synthetic", "remote"}));
      app->add_option("--endpoint", endpoint, "Remote endpoint config JSON (with --oracle remote)");
      app->add_option("--transcript", transcript, "Append probe transcript JSONL here");
    }
  }

  ExperimentConfig config() const {
    ExperimentConfig c;
    if (!config_path.empty()) c = experiment_config_from_json(read_json_file(config_path, "config"));
    if (seed) c.seed = *seed;
    if (workers) c.workers = *workers;
    if (n_prompts) c.n_prompts = *n_prompts;
    return c;
  }
};

struct StealFlags {
  std::optional<double> alpha1, alpha2, beta, gamma;
  std::optional<std::size_t> m, c, h_max;

  void add(CLI::App* app) {
    app->add_option("--h-max", h_max, "Largest n-gram length tried (default 8)");
    app->add_option("--alpha1", alpha1, "Score window lower edge (default 0.2)");
    app->add_option("--alpha2", alpha2, "Score window upper edge (default 10)");
    app->add_option("--beta", beta, "Consistency threshold (default 0.8)");
    app->add_option("--gamma", gamma, "Extreme score fraction (default 0.1)");
    app->add_option("--m", m, "Targets per round (default 50)");
    app->add_option("--c", c, "Rounds for delta estimation (default 5)");
  }

  void apply(ExperimentConfig& cfg) const {
    if (alpha1) cfg.steal.alpha1 = *alpha1;
    if (alpha2) cfg.steal.alpha2 = *alpha2;
    if (beta) cfg.steal.beta = *beta;
    if (gamma) cfg.steal.gamma = *gamma;
    if (m) cfg.steal.m = *m;
    if (c) cfg.steal.c = *c;
    if (h_max) cfg.h_max = *h_max;
  }
};

struct GenFlags {
  std::string stolen_dir;
  std::optional<double> eta;
  std::optional<std::size_t> top_k, n_tokens;
  std::string out;

  void add(CLI::App* app, bool with_eta) {
    app->add_option("--stolen-dir", stolen_dir, "Directory written by steal")->required();
    if (with_eta) app->add_option("--eta", eta, "Removal strength (default 1)");
    app->add_option("--top-k", top_k, "Candidate window (default 20)");
    app->add_option("--n-tokens", n_tokens, "Tokens per generation (default 300)");
    app->add_option("--out", out, "Output JSONL {prompt_id, tokens, z, p}")->required();
  }

  void apply(ExperimentConfig& cfg) const {
    if (eta) cfg.removal.eta = *eta;
    if (top_k) cfg.removal.top_k = *top_k;
    if (n_tokens) cfg.tokens_per_generation = *n_tokens;
  }
};

/// The oracle a subcommand talks to, plus the optional transcript wrapper.
struct OracleHandle {
  std::unique_ptr<Experiment> experiment;
  std::unique_ptr<RemoteOracle> remote;
  std::unique_ptr<std::ofstream> transcript_file;
  std::unique_ptr<TranscriptOracle> transcript;

  const Oracle& get() const {
    if (transcript) return *transcript;
    if (remote) return *remote;
    return experiment->oracle();
  }
};

OracleHandle make_oracle(const Common& common, const ExperimentConfig& cfg) {
  OracleHandle h;
  h.experiment = std::make_unique<Experiment>(cfg);
  if (common.oracle == "remote") {
    if (common.endpoint.empty()) throw ConfigError("endpoint", "required with --oracle remote");
    h.remote = std::make_unique<RemoteOracle>(RemoteConfig::from_json(read_json_file(common.endpoint, "endpoint")));
  }
  if (!common.transcript.empty()) {
    h.transcript_file = std::make_unique<std::ofstream>(common.transcript, std::ios::app);
    if (!*h.transcript_file) throw Error("cannot open " + common.transcript);
    const Oracle& inner = h.remote ? static_cast<const Oracle&>(*h.remote) : h.experiment->oracle();
    h.transcript = std::make_unique<TranscriptOracle>(inner, *h.transcript_file);
  }
  return h;
}

void log_queries(const char* stage, std::uint64_t n) {
  std::fprintf(stderr, "[demark] %s: %llu oracle queries\n", stage, static_cast<unsigned long long>(n));
}

int run_steal(const Common& common, const StealFlags& flags, const std::string& out_dir) {
  ExperimentConfig cfg = common.config();
  flags.apply(cfg);
  cfg.validate();
  const OracleHandle h = make_oracle(common, cfg);
  const Oracle& oracle = h.get();
  StolenParams stolen;
  stolen.hyper = cfg.steal;
  Rng rng_h = seeded_rng(cfg.seed, "steal-h");
  stolen.h_hat = identify_h(oracle, cfg.h_max, cfg.steal, rng_h, cfg.h_repeats);
  Rng rng_d = seeded_rng(cfg.seed, "steal-delta");
  stolen.delta_hat = identify_delta(oracle, stolen.h_hat, cfg.steal, rng_d);
  stolen.save(out_dir);
  std::printf("h_hat=%zu delta_hat=%.6f\n", stolen.h_hat, stolen.delta_hat);
  log_queries("steal", oracle.query_count());
  return 0;
}

enum class GenKind { remove, exploit };

int run_generate(GenKind kind, const Common& common, const GenFlags& flags) {
  ExperimentConfig cfg = common.config();
  flags.apply(cfg);
  cfg.validate();
  const OracleHandle h = make_oracle(common, cfg);
  const Oracle& oracle = h.get();
  const Experiment& exp = *h.experiment;
  const StolenParams stolen = StolenParams::load(flags.stolen_dir);
  // Detection needs the secret rule, which only the synthetic service has.
  const bool can_detect = common.oracle == "synthetic";

  const auto prompts = exp.prompts();
  std::vector<TokenSeq> outputs(prompts.size());
  std::vector<ColorCache> caches(prompts.size());
  const char* label = kind == GenKind::remove ? "remove" : "exploit";
  parallel_for(prompts.size(), cfg.workers, [&](std::size_t i) {
    Rng rng = seeded_rng(cfg.seed, label, i);
    ColorClassifier classifier(oracle, stolen, caches[i], &stolen.color_cache, cfg.seed);
    if (kind == GenKind::remove) {
      outputs[i] = remove_generate(oracle, stolen, classifier, cfg.removal, prompts[i], cfg.tokens_per_generation, rng,
                                   cfg.generate_options());
    } else {
      outputs[i] = exploit_generate(BaseModel(exp.attacker()), stolen, classifier, prompts[i],
                                    cfg.tokens_per_generation, rng, cfg.removal.top_k, cfg.generate_options());
    }
  });

  std::ofstream out(flags.out);
  if (!out) throw Error("cannot write " + flags.out);
  for (std::size_t i = 0; i < outputs.size(); ++i) {
    json line = {{"prompt_id", i}, {"tokens", outputs[i]}, {"z", nullptr}, {"p", nullptr}};
    if (can_detect) {
      const auto r = exp.detect(outputs[i]);
      line["z"] = r.z_score;
      line["p"] = r.p_value;
    }
    out << line.dump() << '\n';
  }
  StolenParams updated = stolen;
  for (const auto& c : caches) updated.color_cache.merge(c);
  updated.save(flags.stolen_dir);
  log_queries(label, oracle.query_count());
  return 0;
}

int run_detect(const std::string& key_path, const std::string& in_path) {
  const json key_json = read_json_file(key_path, "key");
  const WatermarkSpec spec =
      watermark_spec_from_json(key_json.contains("watermark") ? key_json["watermark"] : key_json,
                               key_json.contains("watermark") ? "watermark" : "");
  const DetectorKey key = DetectorKey::from(spec);
  std::ifstream file;
  std::istream* in = &std::cin;
  if (!in_path.empty() && in_path != "-") {
    file.open(in_path);
    if (!file) throw Error("cannot open " + in_path);
    in = &file;
  }
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(*in, line)) {
    ++lineno;
    if (line.empty()) continue;
    TokenSeq tokens;
    try {
      tokens = json::parse(line).at("tokens").get<TokenSeq>();
    } catch (const json::exception& e) {
      throw ConfigError("input line " + std::to_string(lineno), e.what());
    }
    const auto r = detect(tokens, key);
    std::cout << json{{"n_scored", r.n_scored}, {"n_green", r.n_green}, {"z", r.z_score}, {"p", r.p_value}}.dump()
              << '\n';
  }
  return 0;
}

int run_bench(const Common& common, const std::string& which, const std::string& out_path) {
  const ExperimentConfig cfg = common.config();
  const Experiment exp(cfg);
  BenchReport report;
  if (which == "removal") {
    report = exp.run_removal_bench();
  } else if (which == "exploit") {
    report = exp.run_exploit_bench();
  } else {
    report = exp.run_bench();
  }
  std::cout << to_table(report);
  if (!out_path.empty()) {
    std::ofstream out(out_path);
    if (!out) throw Error("cannot write " + out_path);
    out << to_jsonl(report);
  }
  log_queries("bench", exp.oracle().query_count());
  if (!report.ok()) {
    std::fprintf(stderr, "[demark] bench: at least one stage failed\n");
    return 2;
  }
  return 0;
}

int run_steal_eval_cmd(const Common& common, const StealFlags& flags) {
  ExperimentConfig cfg = common.config();
  flags.apply(cfg);
  cfg.validate();
  const StealEvalReport report = run_steal_eval(cfg);
  std::cout << to_json(report).dump(2) << '\n';
  log_queries("steal-eval", report.query_count);
  if (report.error) {
    std::fprintf(stderr, "[demark] steal-eval: %s\n", report.error->c_str());
    return 2;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Watermark stealing, removal and forging for n-gram red/green watermarks"};
  app.require_subcommand(1);

  Common steal_common, remove_common, exploit_common, bench_common, eval_common;
  StealFlags steal_flags, eval_flags;
  GenFlags remove_flags, exploit_flags;
  std::string stolen_out = "stolen";
  std::string key_path, detect_in;
  std::string bench_which = "all", bench_out;

  auto* steal = app.add_subcommand("steal", "Estimate h, delta from probes and save them");
  steal_common.add(steal, true);
  steal_flags.add(steal);
  steal->add_option("--out-dir", stolen_out, "Where to write params.json and cache.jsonl");

  auto* remove = app.add_subcommand("remove", "Generate from the service with the watermark removed");
  remove_common.add(remove, true);
  remove_flags.add(remove, true);

  auto* exploit = app.add_subcommand("exploit", "Generate watermarked text with the attacker model");
  exploit_common.add(exploit, true);
  exploit_flags.add(exploit, false);

  auto* detect_cmd = app.add_subcommand("detect", "Score JSONL token sequences with the true detector");
  detect_cmd->add_option("--key", key_path, "JSON with the watermark spec (or a config with a watermark field)")
      ->required();
  detect_cmd->add_option("--in", detect_in, "Input JSONL (default stdin)");

  auto* bench = app.add_subcommand("bench", "Removal/exploitation benchmark on the synthetic service");
  bench_common.add(bench, false);
  bench->get_option("--seed")->required();
  bench->add_option("--which", bench_which, "removal, exploit or all")
      ->check(CLI::IsMember({"removal", "exploit", "all"}));
  bench->add_option("--out", bench_out, "Report JSONL");

  auto* eval = app.add_subcommand("steal-eval", "Accuracy of the stolen parameters against ground truth");
  eval_common.add(eval, false);
  eval_flags.add(eval);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    std::fprintf(stderr, "demark: %s\n\n", e.what());
    std::cerr << app.help();
    return 64;
  }

  try {
    if (*steal) return run_steal(steal_common, steal_flags, stolen_out);
    if (*remove) return run_generate(GenKind::remove, remove_common, remove_flags);
    if (*exploit) return run_generate(GenKind::exploit, exploit_common, exploit_flags);
    if (*detect_cmd) return run_detect(key_path, detect_in);
    if (*bench) return run_bench(bench_common, bench_which, bench_out);
    if (*eval) return run_steal_eval_cmd(eval_common, eval_flags);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "demark: invalid configuration: %s\n", e.what());
    return 65;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "demark: %s\n", e.what());
    return 1;
  }
  return 0;
}
