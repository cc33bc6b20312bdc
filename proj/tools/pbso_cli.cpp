// pbso command-line front end.
//
//   pbso parse     transcript files   -> trajectory JSONL
//   pbso score     trajectory JSONL   -> reward JSONL
//   pbso returns   reward JSONL       -> returns/advantages JSONL
//   pbso train     config             -> metrics.jsonl, policy.json, curve CSVs
//   pbso compare   config             -> ablation report
//   pbso gradcheck                    -> max relative gradient error
//
// Failures exit nonzero after printing one JSON line to stderr:
//   {"error": "<Kind>", "message": "..."}

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "pbso/pbso.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw pbso::IoError("cannot read " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return ss.str();
}

std::vector<json> read_jsonl(const std::string& path) {
  std::ifstream file;
  std::istream* in = &std::cin;
  if (path != "-") {
    file.open(path);
    if (!file) throw pbso::IoError("cannot read " + path);
    in = &file;
  }
  std::vector<json> out;
  std::size_t lineno = 0;
  for (std::string line; std::getline(*in, line);) {
    ++lineno;
    if (pbso::detail::trim(line).empty()) continue;
    try {
      out.push_back(json::parse(line));
    } catch (const json::exception& e) {
      throw pbso::IoError(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

class Output {
 public:
  explicit Output(const std::string& path) {
    if (path != "-") {
      file_.open(path, std::ios::binary);
      if (!file_) throw pbso::IoError("cannot write " + path);
    }
  }
  std::ostream& stream() { return file_.is_open() ? file_ : std::cout; }

 private:
  std::ofstream file_;
};

struct EnvFlags {
  std::size_t alphabet = 4;
  std::size_t length = 3;
  double mask_prob = 1.0 / 3.0;
  std::uint64_t seed = 0;
  std::string variant = "revealing";

  void add(CLI::App* app) {
    app->add_option("--alphabet-size", alphabet, "Oracle: alphabet size");
    app->add_option("--statement-length", length, "Oracle: statement length");
    app->add_option("--mask-prob", mask_prob, "Oracle: clue mask probability");
    app->add_option("--env-seed", seed, "Oracle: environment seed");
  }
  pbso::EnvSpec spec() const {
    return {alphabet, length, mask_prob,
            variant == "blind" ? pbso::Variant::Blind : pbso::Variant::Revealing, seed};
  }
};

struct RunFlags {
  std::string config;
  std::vector<std::string> sets;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> steps;
  std::optional<std::string> output_dir;

  void add(CLI::App* app) {
    app->add_option("--config", config, "Key/value config file (default: $PBSO_CONFIG)");
    app->add_option("--set", sets, "Override a config key: key=value (repeatable)");
    app->add_option("--seed", seed, "Global seed");
    app->add_option("--steps", steps, "Training steps");
    app->add_option("--output-dir", output_dir, "Output directory");
  }

  pbso::RunConfig resolve() const {
    pbso::RunConfig cfg;
    std::string path = config;
    if (path.empty())
      if (const char* env = std::getenv("PBSO_CONFIG")) path = env;
    if (!path.empty()) pbso::apply(cfg, pbso::load_key_values(path));
    pbso::KeyValues overrides;
    for (const std::string& s : sets) {
      auto eq = s.find('=');
      if (eq == std::string::npos) throw pbso::InvalidConfig("--set expects key=value: " + s);
      overrides[std::string(pbso::detail::trim(s.substr(0, eq)))] =
          std::string(pbso::detail::trim(s.substr(eq + 1)));
    }
    pbso::apply(cfg, overrides);
    if (seed) cfg.seed = *seed;
    if (steps) cfg.steps = *steps;
    if (output_dir) cfg.output_dir = *output_dir;
    pbso::validate(cfg);
    return cfg;
  }
};

int cmd_parse(const std::vector<std::string>& files, const std::string& question_id,
              const std::string& out_path) {
  Output out(out_path);
  for (const std::string& f : files) {
    pbso::Trajectory t = pbso::parse_transcript(read_file(f));
    t.question_id = question_id.empty() ? fs::path(f).stem().string() : question_id;
    out.stream() << pbso::to_json(t).dump() << '\n';
  }
  return 0;
}

int cmd_score(const std::string& input, const std::string& backend, const std::string& fixtures,
              const std::string& base_url, std::size_t max_in_flight,
              const std::string& questions_path, const EnvFlags& env,
              const std::string& out_path) {
  std::shared_ptr<const pbso::VerifierBackend> impl;
  std::shared_ptr<const pbso::OracleBackend> oracle;
  if (backend == "oracle") {
    oracle = std::make_shared<pbso::OracleBackend>(env.spec());
    impl = oracle;
  } else if (backend == "mock") {
    if (fixtures.empty()) throw pbso::InvalidConfig("--fixtures is required for the mock backend");
    impl = std::make_shared<pbso::MockBackend>(json::parse(read_file(fixtures)));
  } else if (backend == "remote") {
    pbso::RemoteConfig rc;
    rc.base_url = base_url;
    rc.max_in_flight = max_in_flight;
    impl = std::make_shared<pbso::RemoteBackend>(rc);
  } else {
    throw pbso::InvalidConfig("--backend must be oracle, mock or remote");
  }
  const pbso::VerifierSet verifiers(impl);

  std::map<std::string, std::string> question_text;
  if (!questions_path.empty())
    for (const json& q : read_jsonl(questions_path))
      question_text[q.at("id").get<std::string>()] = q.value("text", "");

  Output out(out_path);
  for (const json& rec : read_jsonl(input)) {
    const pbso::Trajectory t = pbso::trajectory_from_json(rec);
    pbso::Question q{t.question_id, ""};
    if (oracle)
      q = oracle->task(q).question();
    else if (auto it = question_text.find(q.id); it != question_text.end())
      q.text = it->second;
    const pbso::RewardVector rv = pbso::score_trajectory(q, t, verifiers, true);
    json j = pbso::to_json(rv);
    j["question_id"] = t.question_id;
    out.stream() << j.dump() << '\n';
  }
  return 0;
}

int cmd_returns(const std::string& input, const pbso::ReturnConfig& rcfg,
                const std::string& out_path) {
  const auto records = read_jsonl(input);
  std::vector<std::string> keys;
  std::vector<std::vector<double>> returns;
  std::map<std::string, std::vector<std::size_t>> groups;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const pbso::RewardVector rv = pbso::reward_vector_from_json(records[i]);
    pbso::validate_binary(rv);
    keys.push_back(records[i].value("question_id", ""));
    returns.push_back(pbso::bounded_returns(rv, rcfg));
    groups[keys.back()].push_back(i);
  }
  std::vector<std::vector<double>> advantages(records.size());
  std::vector<bool> degenerate(records.size());
  for (const auto& [key, members] : groups) {
    std::vector<std::vector<double>> pool;
    for (std::size_t i : members) pool.push_back(returns[i]);
    const auto pooled = pbso::pooled_advantages(pool, rcfg.epsilon);
    for (std::size_t k = 0; k < members.size(); ++k) {
      advantages[members[k]] = pooled.advantages[k];
      degenerate[members[k]] = pooled.degenerate;
    }
  }
  Output out(out_path);
  for (std::size_t i = 0; i < records.size(); ++i)
    out.stream() << json{{"question_id", keys[i]},
                         {"returns", returns[i]},
                         {"advantages", advantages[i]},
                         {"degenerate", static_cast<bool>(degenerate[i])}}
                        .dump()
                 << '\n';
  return 0;
}

int cmd_train(const RunFlags& flags) {
  const pbso::RunConfig cfg = flags.resolve();
  const fs::path dir = cfg.output_dir;
  fs::create_directories(dir);
  std::ofstream metrics(dir / "metrics.jsonl", std::ios::binary);
  if (!metrics) throw pbso::IoError("cannot write " + (dir / "metrics.jsonl").string());
  const auto result = pbso::run_training(cfg, [&](const pbso::MetricsRecord& m) {
    metrics << pbso::to_json(m).dump() << '\n';
    metrics.flush();
  });
  pbso::save_policy(dir / "policy.json", result.policy);
  if (!result.metrics.empty()) pbso::emit_plots_data(result.metrics, dir);
  const pbso::EvalReport eval = pbso::evaluate(result.policy, cfg);
  std::ofstream(dir / "eval.json") << pbso::to_json(eval).dump(2) << '\n';
  std::cout << json{{"steps", cfg.steps}, {"output_dir", dir.string()}, {"eval", pbso::to_json(eval)}}
                   .dump()
            << '\n';
  return 0;
}

int cmd_compare(const RunFlags& flags, std::size_t seeds) {
  const pbso::RunConfig cfg = flags.resolve();
  const auto report = pbso::compare_ablations(
      cfg, seeds, [](const std::string& line) { std::cerr << line << '\n'; });
  fs::create_directories(cfg.output_dir);
  std::ofstream(fs::path(cfg.output_dir) / "ablations.json") << pbso::to_json(report).dump(2)
                                                               << '\n';
  std::cout << pbso::format_table(report);
  return 0;
}

int cmd_gradcheck(const std::string& kind, std::uint64_t seed, std::size_t tokens,
                  double threshold) {
  const pbso::PolicyKind k = kind == "linear" ? pbso::PolicyKind::Linear : pbso::PolicyKind::Tabular;
  if (kind != "linear" && kind != "tabular")
    throw pbso::InvalidConfig("--kind must be tabular or linear");
  const auto pr = pbso::make_gradcheck_problem(k, seed, tokens);
  const auto res = pbso::gradient_check(pr.policy, pr.batch, pr.opt);
  std::cout << json{{"kind", kind},
                    {"seed", seed},
                    {"params", pr.policy.num_params()},
                    {"max_relative_error", res.max_relative_error},
                    {"max_absolute_error", res.max_absolute_error}}
                   .dump()
            << '\n';
  return res.max_relative_error < threshold ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Prospective bounded sequence optimization toolkit"};
  app.require_subcommand(1);

  auto* parse = app.add_subcommand("parse", "Parse transcripts into trajectory JSONL");
  std::vector<std::string> parse_files;
  std::string parse_qid, parse_out = "-";
  parse->add_option("files", parse_files, "Transcript files")->required();
  parse->add_option("--question-id", parse_qid, "Question id (default: file stem)");
  parse->add_option("-o,--output", parse_out, "Output JSONL (default stdout)");

  auto* score = app.add_subcommand("score", "Score trajectories into reward JSONL");
  std::string score_in = "-", score_backend = "oracle", score_fixtures, score_url,
              score_questions, score_out = "-";
  std::size_t score_inflight = 8;
  EnvFlags env_flags;
  score->add_option("input", score_in, "Trajectory JSONL (default stdin)");
  score->add_option("--backend", score_backend, "oracle | mock | remote");
  score->add_option("--fixtures", score_fixtures, "Mock backend fixture JSON");
  score->add_option("--base-url", score_url, "Remote backend base URL");
  score->add_option("--max-in-flight", score_inflight, "Remote backend concurrency");
  score->add_option("--questions", score_questions, "Question JSONL {id, text}");
  score->add_option("-o,--output", score_out, "Output JSONL (default stdout)");
  env_flags.add(score);

  auto* returns = app.add_subcommand("returns", "Bounded returns and pooled advantages");
  std::string returns_in = "-", returns_out = "-";
  pbso::ReturnConfig rcfg;
  bool no_clip = false;
  returns->add_option("input", returns_in, "Reward JSONL (default stdin)");
  returns->add_option("--gamma", rcfg.gamma, "Discount factor in (0, 1]");
  returns->add_option("--r-min", rcfg.r_min, "Lower return bound");
  returns->add_option("--r-max", rcfg.r_max, "Upper return bound");
  returns->add_option("--epsilon", rcfg.epsilon, "Normalization stabilizer");
  returns->add_flag("--no-clip", no_clip, "Disable return clipping");
  returns->add_option("-o,--output", returns_out, "Output JSONL (default stdout)");

  auto* train = app.add_subcommand("train", "Run PBSO training on the synthetic environment");
  RunFlags train_flags;
  train_flags.add(train);

  auto* compare = app.add_subcommand("compare", "PBSO vs terminal-only vs no-clipping");
  RunFlags compare_flags;
  std::size_t compare_seeds = 5;
  compare_flags.add(compare);
  compare->add_option("--seeds", compare_seeds, "Number of matched seeds");

  auto* gradcheck = app.add_subcommand("gradcheck", "Finite-difference gradient check");
  std::string gc_kind = "tabular";
  std::uint64_t gc_seed = 0;
  std::size_t gc_tokens = 48;
  double gc_threshold = 1e-5;
  gradcheck->add_option("--kind", gc_kind, "tabular | linear");
  gradcheck->add_option("--seed", gc_seed, "Problem seed");
  gradcheck->add_option("--tokens", gc_tokens, "Batch size");
  gradcheck->add_option("--threshold", gc_threshold, "Fail above this relative error");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (*parse) return cmd_parse(parse_files, parse_qid, parse_out);
    if (*score)
      return cmd_score(score_in, score_backend, score_fixtures, score_url, score_inflight,
                       score_questions, env_flags, score_out);
    if (*returns) {
      rcfg.clipping = !no_clip;
      return cmd_returns(returns_in, rcfg, returns_out);
    }
    if (*train) return cmd_train(train_flags);
    if (*compare) return cmd_compare(compare_flags, compare_seeds);
    if (*gradcheck) return cmd_gradcheck(gc_kind, gc_seed, gc_tokens, gc_threshold);
  } catch (const pbso::Error& e) {
    std::cerr << json{{"error", e.kind()}, {"message", e.what()}}.dump() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << json{{"error", "Error"}, {"message", e.what()}}.dump() << '\n';
    return 1;
  }
  return 0;
}
