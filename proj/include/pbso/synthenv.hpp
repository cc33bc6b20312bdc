#pragma once

// Desk-scale reflective "formalization" environment with exact verifiers.
//
// A task hides a target string over an alphabet of A symbols. The question
// shows a clue per position: either the target symbol encoded by a fixed
// hidden substitution (learnable across tasks) or a mask. Each iteration the
// policy writes a statement (one symbol per position) and then a verdict.
// In the revealing variant the critique also lists which positions matched,
// so later iterations can repair masked positions from that history.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <unordered_map>
#include <vector>

#include "pbso/common.hpp"
#include "pbso/credit.hpp"
#include "pbso/policy.hpp"
#include "pbso/transcript.hpp"
#include "pbso/verifiers.hpp"

namespace pbso {

enum class Variant { Revealing, Blind };

struct EnvSpec {
  std::size_t alphabet_size = 4;
  std::size_t length = 3;
  double mask_prob = 1.0 / 3.0;
  Variant variant = Variant::Revealing;
  std::uint64_t seed = 0;
};

inline void validate(const EnvSpec& e) {
  if (e.alphabet_size < 2 || e.alphabet_size > 26)
    throw InvalidConfig("alphabet_size must lie in [2, 26]");
  if (e.length < 1) throw InvalidConfig("length must be at least 1");
  if (!(e.mask_prob >= 0.0 && e.mask_prob <= 1.0))
    throw InvalidConfig("mask_prob must lie in [0, 1]");
}

struct EpisodeConfig {
  std::size_t max_iterations = 5;
  double temperature = 1.0;
  double top_p = 0.95;
  std::uint64_t seed = 0;
};

inline void validate(const EpisodeConfig& c) {
  if (c.max_iterations < 1) throw InvalidConfig("max_iterations must be at least 1");
  if (!(c.temperature > 0.0)) throw InvalidConfig("temperature must be positive");
  if (!(c.top_p > 0.0 && c.top_p <= 1.0)) throw InvalidConfig("top_p must lie in (0, 1]");
}

using Symbols = std::vector<int>;

struct SynthTask {
  std::uint64_t index = 0;
  Symbols target;
  Symbols clue;  // -1 where masked

  std::string id() const { return "t" + std::to_string(index); }

  Question question() const {
    std::string text = "Decode the clue:";
    for (int c : clue) {
      text.push_back(' ');
      text.push_back(c < 0 ? '?' : static_cast<char>('A' + c));
    }
    return {id(), text};
  }
};

inline std::string render_symbols(const Symbols& s) {
  std::string out;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out.push_back(' ');
    out.push_back(static_cast<char>('a' + s[i]));
  }
  return out;
}

/// Hidden substitution: clue symbol c encodes target symbol cipher[c].
inline Symbols cipher(const EnvSpec& spec) {
  Symbols perm(spec.alphabet_size);
  for (std::size_t i = 0; i < perm.size(); ++i) perm[i] = static_cast<int>(i);
  std::mt19937_64 rng(derive_seed(spec.seed, 0x51u));
  for (std::size_t i = perm.size() - 1; i > 0; --i) {
    auto j = static_cast<std::size_t>(uniform01(rng) * static_cast<double>(i + 1));
    std::swap(perm[i], perm[j]);
  }
  return perm;
}

inline SynthTask make_task(const EnvSpec& spec, std::uint64_t index) {
  validate(spec);
  const Symbols perm = cipher(spec);
  Symbols inverse(perm.size());
  for (std::size_t c = 0; c < perm.size(); ++c) inverse[static_cast<std::size_t>(perm[c])] = static_cast<int>(c);

  std::mt19937_64 rng(derive_seed(spec.seed, 0x7a5cu, index));
  SynthTask task;
  task.index = index;
  const auto a = static_cast<double>(spec.alphabet_size);
  for (std::size_t i = 0; i < spec.length; ++i) {
    int sym = static_cast<int>(uniform01(rng) * a);
    bool masked = uniform01(rng) < spec.mask_prob;
    task.target.push_back(sym);
    task.clue.push_back(masked ? -1 : inverse[static_cast<std::size_t>(sym)]);
  }
  return task;
}

// ---------------------------------------------------------------------------
// Policy layout
//
// Head 0 (symbols, A actions), one-hot state per position:
//   [0, A)                       clue symbol c
//   A + fb*(A+1) + (prev+1)      masked; fb in {none, match, mismatch},
//                                prev = previous symbol here or -1
// Head 1 (verdict, actions {Incorrect, Correct}), summed indicators:
//   0                            bias
//   1 + c*A + e                  unmasked position with clue c, written e
//   1 + A*A + fb*2 + same        masked position; same = repeats prev symbol

inline constexpr std::uint32_t kSymbolHead = 0;
inline constexpr std::uint32_t kVerdictHead = 1;
inline constexpr std::size_t kActIncorrect = 0;
inline constexpr std::size_t kActCorrect = 1;

enum Feedback : int { kNoFeedback = 0, kMatch = 1, kMismatch = 2 };

inline PolicyModel make_policy(const EnvSpec& spec) {
  validate(spec);
  const std::size_t a = spec.alphabet_size;
  return PolicyModel({{a + 3 * (a + 1), a}, {1 + a * a + 6, 2}});
}

/// What the policy may condition on: its previous statement and the
/// per-position feedback carried by the previous critique.
struct History {
  bool has_prev = false;
  Symbols prev;
  std::vector<int> feedback;
};

inline std::vector<int> match_feedback(const SynthTask& task, const Symbols& statement) {
  std::vector<int> fb(statement.size());
  for (std::size_t i = 0; i < statement.size(); ++i)
    fb[i] = statement[i] == task.target[i] ? kMatch : kMismatch;
  return fb;
}

inline PolicyState symbol_state(const EnvSpec& spec, const SynthTask& task,
                                const History& h, std::size_t pos) {
  const auto a = static_cast<std::uint32_t>(spec.alphabet_size);
  if (task.clue[pos] >= 0) return {kSymbolHead, {{static_cast<std::uint32_t>(task.clue[pos]), 1.0}}};
  const int fb = h.has_prev ? h.feedback[pos] : kNoFeedback;
  const int prev = h.has_prev ? h.prev[pos] : -1;
  const auto idx = a + static_cast<std::uint32_t>(fb) * (a + 1) + static_cast<std::uint32_t>(prev + 1);
  return {kSymbolHead, {{idx, 1.0}}};
}

inline PolicyState verdict_state(const EnvSpec& spec, const SynthTask& task, const History& h,
                                 const Symbols& statement) {
  const std::size_t a = spec.alphabet_size;
  std::vector<double> dense(1 + a * a + 6, 0.0);
  dense[0] = 1.0;
  for (std::size_t i = 0; i < statement.size(); ++i) {
    if (task.clue[i] >= 0) {
      dense[1 + static_cast<std::size_t>(task.clue[i]) * a + static_cast<std::size_t>(statement[i])] += 1.0;
    } else {
      const int fb = h.has_prev ? h.feedback[i] : kNoFeedback;
      const bool same = h.has_prev && h.prev[i] == statement[i];
      dense[1 + a * a + static_cast<std::size_t>(fb) * 2 + (same ? 1 : 0)] += 1.0;
    }
  }
  PolicyState s{kVerdictHead, {}};
  for (std::size_t k = 0; k < dense.size(); ++k)
    if (dense[k] != 0.0) s.features.push_back({static_cast<std::uint32_t>(k), dense[k]});
  return s;
}

inline std::string critique_text(const EnvSpec& spec, const std::vector<int>& feedback,
                                 Verdict v) {
  std::string out;
  if (spec.variant == Variant::Revealing) {
    out = "check";
    for (int f : feedback) out += f == kMatch ? " ok" : " miss";
    out.push_back('\n');
  }
  out += to_string(v);
  return out;
}

inline void advance(History& h, const EnvSpec& spec, const SynthTask& task,
                    const Symbols& statement) {
  h.has_prev = true;
  h.prev = statement;
  if (spec.variant == Variant::Revealing)
    h.feedback = match_feedback(task, statement);
  else
    h.feedback.assign(statement.size(), kNoFeedback);
}

// ---------------------------------------------------------------------------
// Episodes

/// A policy decision and the transcript token it produced.
struct Decision {
  PolicyState state;
  std::size_t action = 0;
  double log_prob = 0.0;     // under the policy at the sampling temperature
  std::size_t token = 0;     // index into the canonical transcript tokens
  std::size_t position = 0;  // 1-based iteration
};

struct Episode {
  Trajectory trajectory;
  std::vector<Decision> decisions;
  std::vector<Symbols> statements;  // S_1..S_T
};

template <typename Rng>
Episode sample_trajectory(const PolicyModel& policy, const EnvSpec& spec,
                          const SynthTask& task, const EpisodeConfig& cfg, Rng& rng) {
  validate(cfg);
  Episode ep;
  Trajectory& traj = ep.trajectory;
  traj.question_id = task.id();
  History hist;
  std::vector<std::size_t> statement_decisions;

  auto decide = [&](PolicyState state, std::size_t position) {
    const auto q = sampling_distribution(policy, state, cfg.temperature, cfg.top_p);
    const std::size_t act = draw(q, uniform01(rng));
    const double lp = policy.log_prob(state, act, cfg.temperature);
    ep.decisions.push_back({std::move(state), act, lp, 0, position});
    return act;
  };

  for (std::size_t t = 1; t <= cfg.max_iterations; ++t) {
    Symbols stmt(spec.length);
    for (std::size_t i = 0; i < spec.length; ++i)
      stmt[i] = static_cast<int>(decide(symbol_state(spec, task, hist, i), t));
    const std::size_t v = decide(verdict_state(spec, task, hist, stmt), t);
    const Verdict verdict = v == kActCorrect ? Verdict::Correct : Verdict::Incorrect;

    Iteration it;
    it.index = t;
    it.statement = render_symbols(stmt);
    it.critique = critique_text(spec, match_feedback(task, stmt), verdict);
    it.verdict = verdict;
    traj.iterations.push_back(std::move(it));
    ep.statements.push_back(stmt);
    advance(hist, spec, task, stmt);
    if (verdict == Verdict::Correct) break;
  }
  // The final answer re-emits the last statement; it carries no decisions.
  traj.final_statement = traj.iterations.back().statement;
  traj = canonicalize(traj);

  // Canonical layout: <round> ```lean4 s_1 .. s_L ``` ... verdict </round>
  // and, after </think>, ```lean4 s_1 .. s_L ```.
  std::size_t k = 0;
  for (const Iteration& it : traj.iterations) {
    for (std::size_t i = 0; i < spec.length; ++i)
      ep.decisions[k++].token = it.statement_span.begin + 2 + i;
    ep.decisions[k++].token = it.critique_span.end - 2;
  }
  return ep;
}

// ---------------------------------------------------------------------------
// Exact verifiers

/// Syntax: L whitespace-separated symbols from the alphabet. Consistency:
/// equality with the hidden target. Critique: the verdict agrees with
/// consistency. Tasks are resolved by id, either from `known` or by
/// regenerating them from the environment seed.
class OracleBackend final : public VerifierBackend {
 public:
  explicit OracleBackend(EnvSpec spec, std::vector<SynthTask> known = {})
      : spec_(spec) {
    validate(spec_);
    for (auto& t : known) known_.emplace(t.id(), std::move(t));
  }

  std::string id() const override { return "oracle"; }

  CheckResult syntax(const Question&, std::string_view statement) const override {
    auto sym = parse(statement);
    if (!sym) return {false, "not " + std::to_string(spec_.length) + " alphabet symbols"};
    return {true, ""};
  }

  CheckResult consistency(const Question& q, std::string_view statement) const override {
    auto sym = parse(statement);
    if (!sym) return {false, "syntax"};
    bool eq = *sym == task(q).target;
    return {eq, eq ? "matches target" : "differs from target"};
  }

  CheckResult critique(const Question& q, std::string_view statement,
                       std::string_view critique) const override {
    auto v = find_verdict(critique);
    if (!v) return {false, "no verdict"};
    const bool truth = consistency(q, statement).pass;
    const bool says = *v == Verdict::Correct;
    if (says == truth) return {true, truth ? "true positive" : "true negative"};
    return {false, says ? "false positive (premature termination)" : "false negative"};
  }

  std::optional<Symbols> parse(std::string_view statement) const {
    Symbols out;
    for (const TokenRange& r : whitespace_tokenizer().tokenize(statement)) {
      if (r.end - r.begin != 1) return std::nullopt;
      int c = statement[r.begin] - 'a';
      if (c < 0 || c >= static_cast<int>(spec_.alphabet_size)) return std::nullopt;
      out.push_back(c);
    }
    if (out.size() != spec_.length) return std::nullopt;
    return out;
  }

  SynthTask task(const Question& q) const {
    if (auto it = known_.find(q.id); it != known_.end()) return it->second;
    if (q.id.size() < 2 || q.id[0] != 't' ||
        q.id.find_first_not_of("0123456789", 1) != std::string::npos)
      throw InvariantViolation("oracle: unknown question id '" + q.id + "'");
    return make_task(spec_, std::stoull(q.id.substr(1)));
  }

 private:
  EnvSpec spec_;
  std::unordered_map<std::string, SynthTask> known_;
};

inline VerifierSet oracle_verifiers(const EnvSpec& spec, const SynthTask& task) {
  return VerifierSet(std::make_shared<OracleBackend>(spec, std::vector<SynthTask>{task}));
}

// ---------------------------------------------------------------------------
// Exhaustive enumeration

struct ExpectedObjective {
  double expected_first_return = 0.0;  // E[G_1]
  double expected_task_reward = 0.0;
  std::size_t leaves = 0;
};

/// Exact expectations over every trajectory the sampler can produce,
/// weighting leaves by their sampling probabilities.
inline ExpectedObjective enumerate_expected_objective(const PolicyModel& policy,
                                                      const EnvSpec& spec,
                                                      const SynthTask& task,
                                                      const EpisodeConfig& cfg,
                                                      const ReturnConfig& rcfg,
                                                      double max_leaves = 1e6) {
  validate(cfg);
  validate(rcfg);
  const double statements = std::pow(static_cast<double>(spec.alphabet_size),
                                     static_cast<double>(spec.length));
  if (std::pow(2.0 * statements, static_cast<double>(cfg.max_iterations)) > max_leaves)
    throw TooLarge("enumeration would exceed " + std::to_string(max_leaves) + " leaves");

  // Calls fn(statement, probability) for every statement with nonzero mass.
  auto for_each_statement = [&](const History& hist, double prob, auto&& fn) {
    std::vector<std::vector<double>> q(spec.length);
    for (std::size_t i = 0; i < spec.length; ++i)
      q[i] = sampling_distribution(policy, symbol_state(spec, task, hist, i), cfg.temperature,
                                   cfg.top_p);
    Symbols stmt(spec.length, 0);
    auto rec = [&](auto&& self, std::size_t i, double p) -> void {
      if (p == 0.0) return;
      if (i == spec.length) return fn(stmt, p);
      for (std::size_t s = 0; s < spec.alphabet_size; ++s) {
        stmt[i] = static_cast<int>(s);
        self(self, i + 1, p * q[i][s]);
      }
    };
    rec(rec, 0, prob);
  };

  ExpectedObjective out;
  RewardVector rv;
  auto iteration = [&](auto&& self, const History& hist, std::size_t t, double prob) -> void {
    for_each_statement(hist, prob, [&](const Symbols& stmt, double p) {
      const bool right = stmt == task.target;
      const auto qv = sampling_distribution(policy, verdict_state(spec, task, hist, stmt),
                                            cfg.temperature, cfg.top_p);
      History next = hist;
      advance(next, spec, task, stmt);
      for (std::size_t v : {kActIncorrect, kActCorrect}) {
        const double pv = p * qv[v];
        if (pv == 0.0) continue;
        const bool says_correct = v == kActCorrect;
        rv.aux.push_back(says_correct == right ? 1.0 : 0.0);
        if (says_correct || t == cfg.max_iterations) {
          rv.task = right ? 1.0 : 0.0;
          out.expected_first_return += pv * bounded_returns(rv, rcfg).front();
          out.expected_task_reward += pv * rv.task;
          ++out.leaves;
        } else {
          self(self, next, t + 1, pv);
        }
        rv.aux.pop_back();
      }
    });
  };
  iteration(iteration, History{}, 1, 1.0);
  return out;
}

}  // namespace pbso
