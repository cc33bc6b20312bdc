#pragma once

// Experiment runner: the full loop (sample N per question, score, bounded
// returns, pooled advantages, one policy step), held-out evaluation, the
// ablation comparison and the metric/curve writers.

#include <filesystem>
#include <fstream>
#include <functional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "pbso/common.hpp"
#include "pbso/config.hpp"
#include "pbso/credit.hpp"
#include "pbso/optimizer.hpp"
#include "pbso/policy.hpp"
#include "pbso/synthenv.hpp"
#include "pbso/transcript.hpp"
#include "pbso/verifiers.hpp"

namespace pbso {

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Each index is
/// handled by exactly one thread; callers write results by index.
inline void parallel_for(std::size_t n, std::size_t workers,
                         const std::function<void(std::size_t)>& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::exception_ptr> errors(workers);
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w)
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// Seed streams. Everything random in a run descends from RunConfig::seed.
namespace streams {
inline constexpr std::uint64_t kEnv = 0xe1;
inline constexpr std::uint64_t kTrainTask = 0x7a;
inline constexpr std::uint64_t kTrainEpisode = 0xe9;
inline constexpr std::uint64_t kEvalEpisode = 0xee;
inline constexpr std::uint64_t kEvalTaskBit = 1ULL << 62;
}  // namespace streams

inline EnvSpec effective_env(const RunConfig& cfg) {
  EnvSpec env = cfg.env;
  env.seed = derive_seed(cfg.seed, streams::kEnv);
  return env;
}

inline std::uint64_t train_task_index(const RunConfig& cfg, std::size_t step, std::size_t b) {
  return derive_seed(cfg.seed, streams::kTrainTask, step, b) & (streams::kEvalTaskBit - 1);
}

inline ReturnConfig effective_returns(const RunConfig& cfg) {
  ReturnConfig r = cfg.returns;
  r.clipping = cfg.clipping_on;
  return r;
}

/// Everything one step produces before the policy update.
struct GroupSample {
  SynthTask task;
  std::vector<Episode> episodes;
  std::vector<RewardVector> rewards;   // verifier output
  std::vector<RewardVector> credited;  // what the credit stage sees
  std::vector<std::vector<double>> returns;
  PooledAdvantages advantages;
};

struct MetricsRecord {
  std::size_t step = 0;
  std::size_t episodes = 0;
  double mean_reward = 0.0;   // mean over episodes of the mean reward-vector entry
  double task_success = 0.0;  // mean r_task
  double faithfulness = 0.0;  // sum of aux / number of iterations
  double mean_length = 0.0;   // transcript tokens
  double mean_iterations = 0.0;
  std::vector<std::size_t> iteration_histogram;  // [k] = episodes with k+1 iterations
  double loss = 0.0;
  double grad_norm = 0.0;
  double mean_abs_adv = 0.0;
  std::size_t returns_above_max = 0;
  std::size_t degenerate_groups = 0;
};

inline nlohmann::json to_json(const MetricsRecord& m) {
  return {{"step", m.step},
          {"episodes", m.episodes},
          {"mean_reward", m.mean_reward},
          {"task_success", m.task_success},
          {"faithfulness", m.faithfulness},
          {"mean_length", m.mean_length},
          {"mean_iterations", m.mean_iterations},
          {"iteration_histogram", m.iteration_histogram},
          {"loss", m.loss},
          {"grad_norm", m.grad_norm},
          {"mean_abs_adv", m.mean_abs_adv},
          {"returns_above_max", m.returns_above_max},
          {"degenerate_groups", m.degenerate_groups}};
}

/// Samples and scores one group of N trajectories for `task`, then computes
/// returns and pooled advantages. `seed_of(j)` gives member j's rng seed.
inline GroupSample sample_group(const PolicyModel& policy, const RunConfig& cfg,
                                const EnvSpec& env, const SynthTask& task,
                                const std::function<std::uint64_t(std::size_t)>& seed_of) {
  const std::size_t n = cfg.optim.group_size;
  GroupSample g;
  g.task = task;
  g.episodes.resize(n);
  g.rewards.resize(n);
  const VerifierSet verifiers = oracle_verifiers(env, task);
  const Question q = task.question();
  for (std::size_t j = 0; j < n; ++j) {
    std::mt19937_64 rng(seed_of(j));
    g.episodes[j] = sample_trajectory(policy, env, task, cfg.episode, rng);
    g.rewards[j] = score_trajectory(q, g.episodes[j].trajectory, verifiers);
  }
  const ReturnConfig rcfg = effective_returns(cfg);
  g.credited = g.rewards;
  for (std::size_t j = 0; j < n; ++j) {
    if (!cfg.aux_rewards_on) std::fill(g.credited[j].aux.begin(), g.credited[j].aux.end(), 0.0);
    g.returns.push_back(bounded_returns(g.credited[j], rcfg));
  }
  g.advantages = pooled_advantages(g.returns, rcfg.epsilon);
  return g;
}

inline std::vector<GroupSample> sample_step(const PolicyModel& policy, const RunConfig& cfg,
                                            std::size_t step) {
  const EnvSpec env = effective_env(cfg);
  std::vector<GroupSample> groups(cfg.tasks_per_batch);
  parallel_for(cfg.tasks_per_batch, cfg.workers, [&](std::size_t b) {
    const SynthTask task = make_task(env, train_task_index(cfg, step, b));
    groups[b] = sample_group(policy, cfg, env, task, [&](std::size_t j) {
      return derive_seed(cfg.seed, streams::kTrainEpisode, step, b, j);
    });
  });
  return groups;
}

/// Flattens every policy decision of every member, each carrying the
/// advantage broadcast onto its transcript token.
inline TrainBatch build_train_batch(const std::vector<GroupSample>& groups) {
  TrainBatch batch;
  for (const GroupSample& g : groups)
    for (std::size_t j = 0; j < g.episodes.size(); ++j) {
      const Episode& ep = g.episodes[j];
      const auto assignment = broadcast_advantages(ep.trajectory, g.advantages.advantages[j]);
      for (const Decision& d : ep.decisions)
        batch.push_back({d.state, d.action, d.log_prob, assignment.per_token[d.token]});
    }
  return batch;
}

inline MetricsRecord summarize(const std::vector<GroupSample>& groups, const RunConfig& cfg,
                               std::size_t step) {
  MetricsRecord m;
  m.step = step;
  m.iteration_histogram.assign(cfg.episode.max_iterations, 0);
  double reward = 0.0, task = 0.0, aux = 0.0, length = 0.0, iters = 0.0;
  for (const GroupSample& g : groups) {
    if (g.advantages.degenerate) ++m.degenerate_groups;
    for (std::size_t j = 0; j < g.episodes.size(); ++j) {
      const RewardVector& rv = g.rewards[j];
      const std::size_t t = rv.aux.size();
      double sum = rv.task;
      for (double a : rv.aux) sum += a;
      reward += sum / static_cast<double>(t + 1);
      task += rv.task;
      aux += sum - rv.task;
      iters += static_cast<double>(t);
      length += static_cast<double>(g.episodes[j].trajectory.token_count);
      ++m.iteration_histogram[t - 1];
      ++m.episodes;
      for (double r : g.returns[j])
        if (r > cfg.returns.r_max) ++m.returns_above_max;
    }
  }
  const auto n = static_cast<double>(m.episodes);
  m.mean_reward = reward / n;
  m.task_success = task / n;
  m.faithfulness = iters > 0 ? aux / iters : 0.0;
  m.mean_length = length / n;
  m.mean_iterations = iters / n;
  return m;
}

struct TrainingResult {
  std::vector<MetricsRecord> metrics;
  PolicyModel policy;
};

inline TrainingResult run_training(const RunConfig& cfg,
                                   const std::function<void(const MetricsRecord&)>& on_step = {}) {
  validate(cfg);
  TrainingResult res{{}, make_policy(effective_env(cfg))};
  OptimizerState opt_state;
  for (std::size_t step = 0; step < cfg.steps; ++step) {
    try {
      const auto groups = sample_step(res.policy, cfg, step);
      const TrainBatch batch = build_train_batch(groups);
      MetricsRecord m = summarize(groups, cfg, step);
      const StepStats stats = train_step(res.policy, batch, cfg.optim, &opt_state);
      m.loss = stats.loss;
      m.grad_norm = stats.grad_norm;
      m.mean_abs_adv = stats.mean_abs_adv;
      if (on_step) on_step(m);
      res.metrics.push_back(std::move(m));
    } catch (const Error& e) {
      throw Error(e.kind(), "step " + std::to_string(step) + ": " + e.what());
    }
  }
  return res;
}

// ---------------------------------------------------------------------------
// Held-out evaluation

struct EvalReport {
  std::size_t episodes = 0;
  double task_success = 0.0;
  double faithfulness = 0.0;
  double mean_iterations = 0.0;
  /// Among successful episodes, the fraction that used more than one iteration.
  double multi_iteration_success_fraction = 0.0;
  std::vector<std::size_t> iteration_histogram;
};

inline nlohmann::json to_json(const EvalReport& r) {
  return {{"episodes", r.episodes},
          {"task_success", r.task_success},
          {"faithfulness", r.faithfulness},
          {"mean_iterations", r.mean_iterations},
          {"multi_iteration_success_fraction", r.multi_iteration_success_fraction},
          {"iteration_histogram", r.iteration_histogram}};
}

/// Samples `eval_samples` episodes on each of `eval_tasks` held-out tasks
/// (task indices disjoint from any training draw).
inline EvalReport evaluate(const PolicyModel& policy, const RunConfig& cfg) {
  const EnvSpec env = effective_env(cfg);
  struct Tally {
    double task = 0, aux = 0, iters = 0, multi_success = 0;
    std::vector<std::size_t> hist;
  };
  std::vector<Tally> per_task(cfg.eval_tasks);
  parallel_for(cfg.eval_tasks, cfg.workers, [&](std::size_t k) {
    const SynthTask task = make_task(env, streams::kEvalTaskBit | k);
    const VerifierSet v = oracle_verifiers(env, task);
    Tally& t = per_task[k];
    t.hist.assign(cfg.episode.max_iterations, 0);
    for (std::size_t j = 0; j < cfg.eval_samples; ++j) {
      std::mt19937_64 rng(derive_seed(cfg.seed, streams::kEvalEpisode, k, j));
      const Episode ep = sample_trajectory(policy, env, task, cfg.episode, rng);
      const RewardVector rv = score_trajectory(task.question(), ep.trajectory, v);
      t.task += rv.task;
      for (double a : rv.aux) t.aux += a;
      t.iters += static_cast<double>(rv.aux.size());
      if (rv.task == 1.0 && rv.aux.size() > 1) t.multi_success += 1;
      ++t.hist[rv.aux.size() - 1];
    }
  });
  EvalReport r;
  r.iteration_histogram.assign(cfg.episode.max_iterations, 0);
  double task = 0, aux = 0, iters = 0, multi = 0;
  for (const Tally& t : per_task) {
    task += t.task;
    aux += t.aux;
    iters += t.iters;
    multi += t.multi_success;
    for (std::size_t i = 0; i < t.hist.size(); ++i) r.iteration_histogram[i] += t.hist[i];
  }
  r.episodes = cfg.eval_tasks * cfg.eval_samples;
  const auto n = static_cast<double>(r.episodes);
  r.task_success = n > 0 ? task / n : 0.0;
  r.faithfulness = iters > 0 ? aux / iters : 0.0;
  r.mean_iterations = n > 0 ? iters / n : 0.0;
  r.multi_iteration_success_fraction = task > 0 ? multi / task : 0.0;
  return r;
}

// ---------------------------------------------------------------------------
// Ablations

struct ArmSeedResult {
  std::uint64_t seed = 0;
  EvalReport final_eval;
  double first_window_reward = 0.0;  // mean training reward, first 50 steps
  double last_window_reward = 0.0;   // mean training reward, last 50 steps
  std::size_t returns_above_max = 0;
};

struct ArmReport {
  std::string name;
  bool aux_rewards_on = true;
  bool clipping_on = true;
  std::vector<ArmSeedResult> seeds;
  double mean_task_success = 0.0;
  double mean_faithfulness = 0.0;
  /// Set when some return exceeded r_max before normalization.
  bool unbounded_returns = false;
};

struct AblationReport {
  std::vector<ArmReport> arms;
  std::vector<EvalReport> untrained;  // per seed
  std::vector<std::uint64_t> seeds;
};

inline double window_mean(const std::vector<MetricsRecord>& m, std::size_t begin,
                          std::size_t end) {
  if (begin >= end) return 0.0;
  double s = 0.0;
  for (std::size_t i = begin; i < end; ++i) s += m[i].mean_reward;
  return s / static_cast<double>(end - begin);
}

/// Trains {full PBSO, terminal-only, no clipping} on matched seeds and
/// evaluates each final policy on the same held-out tasks.
inline AblationReport compare_ablations(const RunConfig& base, std::size_t num_seeds,
                                        const std::function<void(const std::string&)>& log = {}) {
  validate(base);
  AblationReport report;
  for (std::size_t s = 0; s < num_seeds; ++s) report.seeds.push_back(base.seed + s);

  for (std::uint64_t seed : report.seeds) {
    RunConfig c = base;
    c.seed = seed;
    report.untrained.push_back(evaluate(make_policy(effective_env(c)), c));
  }

  struct ArmSpec {
    const char* name;
    bool aux, clip;
  };
  for (const ArmSpec& spec : {ArmSpec{"pbso", true, true}, ArmSpec{"terminal_only", false, true},
                              ArmSpec{"no_clipping", true, false}}) {
    ArmReport arm;
    arm.name = spec.name;
    arm.aux_rewards_on = spec.aux;
    arm.clipping_on = spec.clip;
    for (std::uint64_t seed : report.seeds) {
      RunConfig c = base;
      c.seed = seed;
      c.aux_rewards_on = spec.aux;
      c.clipping_on = spec.clip;
      const TrainingResult tr = run_training(c);
      ArmSeedResult r;
      r.seed = seed;
      r.final_eval = evaluate(tr.policy, c);
      const std::size_t n = tr.metrics.size();
      const std::size_t w = std::min<std::size_t>(50, n);
      r.first_window_reward = window_mean(tr.metrics, 0, w);
      r.last_window_reward = window_mean(tr.metrics, n - w, n);
      for (const auto& m : tr.metrics) r.returns_above_max += m.returns_above_max;
      arm.unbounded_returns = arm.unbounded_returns || r.returns_above_max > 0;
      arm.mean_task_success += r.final_eval.task_success;
      arm.mean_faithfulness += r.final_eval.faithfulness;
      if (log)
        log(arm.name + " seed " + std::to_string(seed) + ": task " +
            std::to_string(r.final_eval.task_success) + " faithfulness " +
            std::to_string(r.final_eval.faithfulness));
      arm.seeds.push_back(std::move(r));
    }
    if (!arm.seeds.empty()) {
      arm.mean_task_success /= static_cast<double>(arm.seeds.size());
      arm.mean_faithfulness /= static_cast<double>(arm.seeds.size());
    }
    report.arms.push_back(std::move(arm));
  }
  return report;
}

inline const ArmReport& arm(const AblationReport& r, const std::string& name) {
  for (const auto& a : r.arms)
    if (a.name == name) return a;
  throw InvariantViolation("no arm named " + name);
}

inline nlohmann::json to_json(const AblationReport& r) {
  nlohmann::json arms = nlohmann::json::array();
  for (const ArmReport& a : r.arms) {
    nlohmann::json seeds = nlohmann::json::array();
    for (const ArmSeedResult& s : a.seeds)
      seeds.push_back({{"seed", s.seed},
                       {"final", to_json(s.final_eval)},
                       {"first_window_reward", s.first_window_reward},
                       {"last_window_reward", s.last_window_reward},
                       {"returns_above_max", s.returns_above_max}});
    arms.push_back({{"name", a.name},
                    {"aux_rewards_on", a.aux_rewards_on},
                    {"clipping_on", a.clipping_on},
                    {"mean_task_success", a.mean_task_success},
                    {"mean_faithfulness", a.mean_faithfulness},
                    {"unbounded_returns", a.unbounded_returns},
                    {"seeds", seeds}});
  }
  nlohmann::json untrained = nlohmann::json::array();
  for (const auto& e : r.untrained) untrained.push_back(to_json(e));
  return {{"seeds", r.seeds}, {"arms", arms}, {"untrained", untrained}};
}

inline std::string format_table(const AblationReport& r) {
  std::ostringstream out;
  out << "arm            seed  task_success  faithfulness  multi_iter_success  returns>r_max\n";
  auto row = [&](const std::string& name, const std::string& seed, double task, double faith,
                 double multi, const std::string& flag) {
    char buf[160];
    std::snprintf(buf, sizeof buf, "%-14s %4s  %12.4f  %12.4f  %18.4f  %s\n", name.c_str(),
                  seed.c_str(), task, faith, multi, flag.c_str());
    out << buf;
  };
  for (std::size_t i = 0; i < r.untrained.size(); ++i)
    row("untrained", std::to_string(r.seeds[i]), r.untrained[i].task_success,
        r.untrained[i].faithfulness, r.untrained[i].multi_iteration_success_fraction, "");
  for (const ArmReport& a : r.arms) {
    double multi = 0.0;
    for (const auto& s : a.seeds) {
      row(a.name, std::to_string(s.seed), s.final_eval.task_success, s.final_eval.faithfulness,
          s.final_eval.multi_iteration_success_fraction, std::to_string(s.returns_above_max));
      multi += s.final_eval.multi_iteration_success_fraction;
    }
    const double k = a.seeds.empty() ? 1.0 : static_cast<double>(a.seeds.size());
    row(a.name, "mean", a.mean_task_success, a.mean_faithfulness, multi / k,
        a.unbounded_returns ? "FLAGGED: returns exceeded r_max" : "");
  }
  return out.str();
}

// ---------------------------------------------------------------------------
// Output

inline void write_metrics_jsonl(const std::filesystem::path& path,
                                const std::vector<MetricsRecord>& metrics) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  for (const auto& m : metrics) f << to_json(m).dump() << '\n';
  if (!f) throw IoError("write failed for " + path.string());
}

/// reward.csv, length.csv and iterations.csv, one row per step.
inline void emit_plots_data(const std::vector<MetricsRecord>& metrics,
                            const std::filesystem::path& dir) {
  if (metrics.empty()) throw InvariantViolation("emit_plots_data: empty metrics log");
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create " + dir.string() + ": " + ec.message());

  auto open = [&](const char* name) {
    std::ofstream f(dir / name, std::ios::binary);
    if (!f) throw IoError("cannot write " + (dir / name).string());
    return f;
  };
  auto num = [](double v) { return nlohmann::json(v).dump(); };

  auto reward = open("reward.csv");
  reward << "step,mean_reward,task_success,faithfulness\n";
  for (const auto& m : metrics)
    reward << m.step << ',' << num(m.mean_reward) << ',' << num(m.task_success) << ','
           << num(m.faithfulness) << '\n';

  auto length = open("length.csv");
  length << "step,mean_length,mean_iterations\n";
  for (const auto& m : metrics)
    length << m.step << ',' << num(m.mean_length) << ',' << num(m.mean_iterations) << '\n';

  auto iters = open("iterations.csv");
  iters << "step";
  for (std::size_t k = 0; k < metrics.front().iteration_histogram.size(); ++k)
    iters << ",iter_" << k + 1;
  iters << '\n';
  for (const auto& m : metrics) {
    iters << m.step;
    for (std::size_t c : m.iteration_histogram) iters << ',' << c;
    iters << '\n';
  }
  if (!reward || !length || !iters) throw IoError("write failed under " + dir.string());
}

inline void save_policy(const std::filesystem::path& path, const PolicyModel& p) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot write " + path.string());
  f << to_json(p).dump() << '\n';
}

inline PolicyModel load_policy(const std::filesystem::path& path) {
  std::ifstream f(path);
  if (!f) throw IoError("cannot read " + path.string());
  try {
    return policy_from_json(nlohmann::json::parse(f));
  } catch (const nlohmann::json::exception& e) {
    throw IoError("bad policy file " + path.string() + ": " + e.what());
  }
}

}  // namespace pbso
