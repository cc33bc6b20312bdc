#pragma once

// Clipped-surrogate policy gradient with analytic gradients, a plain
// gradient-descent (or Adam) step, and a central-difference gradient check.

#include <algorithm>
#include <cmath>
#include <limits>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "pbso/common.hpp"
#include "pbso/policy.hpp"

namespace pbso {

enum class OptimizerKind { Sgd, Adam };

struct OptimStep {
  double clip_eps = 0.2;
  double learning_rate = 5.0;
  double kl_coefficient = 0.0;
  double entropy_coefficient = 0.0;
  std::size_t group_size = 16;
  double temperature = 1.0;
  double top_p = 0.95;
  OptimizerKind optimizer = OptimizerKind::Sgd;
  double adam_beta1 = 0.9;
  double adam_beta2 = 0.999;
  double adam_eps = 1e-8;
};

inline void validate(const OptimStep& o) {
  if (!(o.clip_eps > 0.0)) throw InvalidConfig("clip_eps must be positive");
  if (!(o.learning_rate > 0.0)) throw InvalidConfig("learning_rate must be positive");
  if (o.group_size < 2) throw InvalidConfig("group_size must be at least 2");
  if (!(o.temperature > 0.0)) throw InvalidConfig("temperature must be positive");
  if (!(o.top_p > 0.0 && o.top_p <= 1.0)) throw InvalidConfig("top_p must lie in (0, 1]");
  if (o.kl_coefficient < 0.0 || o.entropy_coefficient < 0.0)
    throw InvalidConfig("regularizer coefficients must be non-negative");
}

/// One sampled policy decision.
struct TokenSample {
  PolicyState state;
  std::size_t action = 0;
  double old_log_prob = 0.0;
  double advantage = 0.0;
  /// Reference log-prob for the KL term; NaN means "same as old_log_prob".
  double ref_log_prob = std::numeric_limits<double>::quiet_NaN();
};

using TrainBatch = std::vector<TokenSample>;

struct LossResult {
  double loss = 0.0;
  std::vector<double> gradient;
  double clip_fraction = 0.0;
};

namespace detail {

inline double pairwise_sum(std::span<const double> v) {
  if (v.size() <= 8) {
    double s = 0.0;
    for (double x : v) s += x;
    return s;
  }
  std::size_t half = v.size() / 2;
  return pairwise_sum(v.first(half)) + pairwise_sum(v.subspan(half));
}

}  // namespace detail

/// loss = -mean_k min(rho_k A_k, clip(rho_k, 1-eps, 1+eps) A_k)
///        + kl_coefficient * mean_k KL_k - entropy_coefficient * mean_k H_k
/// with rho_k = exp(log pi(a_k|s_k) - old_log_prob_k). The KL term is the
/// non-negative estimator exp(d) - d - 1, d = ref_log_prob - log pi.
inline LossResult surrogate_loss(const PolicyModel& policy, const TrainBatch& batch,
                                 const OptimStep& opt, bool with_gradient = true) {
  if (batch.empty()) throw InvariantViolation("surrogate_loss: empty batch");
  const double tau = opt.temperature;
  const double inv_n = 1.0 / static_cast<double>(batch.size());

  LossResult out;
  if (with_gradient) out.gradient.assign(policy.num_params(), 0.0);
  std::vector<double> token_loss(batch.size());
  std::vector<double> logp, dz;
  std::size_t clipped = 0;

  for (std::size_t k = 0; k < batch.size(); ++k) {
    const TokenSample& tk = batch[k];
    policy.check_state(tk.state);
    const std::size_t na = policy.num_actions(tk.state);
    if (tk.action >= na) throw InvariantViolation("action out of range");
    if (!std::isfinite(tk.old_log_prob) || !std::isfinite(tk.advantage))
      throw NonFiniteLoss(k);

    logp = policy.log_probabilities(tk.state, tau);
    const double lp = logp[tk.action];
    const double rho = std::exp(lp - tk.old_log_prob);
    const double a = tk.advantage;
    const double unclipped = rho * a;
    const double clipped_term = std::clamp(rho, 1.0 - opt.clip_eps, 1.0 + opt.clip_eps) * a;
    const bool clip_active = clipped_term < unclipped;
    clipped += clip_active ? 1 : 0;

    double loss = -std::min(unclipped, clipped_term);
    // d loss / d log pi(a|s)
    double dlp = clip_active ? 0.0 : -unclipped;

    if (opt.kl_coefficient > 0.0) {
      const double ref = std::isnan(tk.ref_log_prob) ? tk.old_log_prob : tk.ref_log_prob;
      const double d = ref - lp;
      const double ed = std::exp(d);
      loss += opt.kl_coefficient * (ed - d - 1.0);
      dlp += opt.kl_coefficient * (1.0 - ed);
    }

    double entropy = 0.0;
    if (opt.entropy_coefficient > 0.0) {
      for (double l : logp) entropy -= std::exp(l) * l;
      loss -= opt.entropy_coefficient * entropy;
    }
    if (!std::isfinite(loss) || !std::isfinite(rho)) throw NonFiniteLoss(k);
    token_loss[k] = loss;

    if (!with_gradient) continue;
    // d loss / d z_b where z = logits / tau.
    dz.assign(na, 0.0);
    for (std::size_t b = 0; b < na; ++b) {
      const double p = std::exp(logp[b]);
      dz[b] = dlp * ((b == tk.action ? 1.0 : 0.0) - p);
      if (opt.entropy_coefficient > 0.0)
        dz[b] += opt.entropy_coefficient * p * (logp[b] + entropy);
    }
    for (std::size_t b = 0; b < na; ++b) {
      const double scale = dz[b] * inv_n / tau;
      if (scale == 0.0) continue;
      for (const Feature& f : tk.state.features)
        out.gradient[policy.param_index(tk.state.head, b, f.index)] += scale * f.value;
    }
  }
  out.loss = detail::pairwise_sum(token_loss) * inv_n;
  out.clip_fraction = static_cast<double>(clipped) * inv_n;
  if (!std::isfinite(out.loss)) throw NonFiniteLoss(batch.size());
  return out;
}

struct OptimizerState {
  std::vector<double> m, v;
  std::size_t t = 0;
};

struct StepStats {
  double mean_reward = 0.0;
  double mean_abs_adv = 0.0;
  double loss = 0.0;
  double grad_norm = 0.0;
  double clip_fraction = 0.0;
  std::size_t tokens = 0;
};

/// One descent step on the surrogate loss. `state` carries Adam moments and
/// may be null for plain gradient descent.
inline StepStats train_step(PolicyModel& policy, const TrainBatch& batch,
                            const OptimStep& opt, OptimizerState* state = nullptr) {
  validate(opt);
  LossResult lr = surrogate_loss(policy, batch, opt);
  StepStats stats;
  stats.loss = lr.loss;
  stats.clip_fraction = lr.clip_fraction;
  stats.tokens = batch.size();
  double sq = 0.0;
  for (double g : lr.gradient) sq += g * g;
  stats.grad_norm = std::sqrt(sq);
  double abs_adv = 0.0;
  for (const TokenSample& t : batch) abs_adv += std::abs(t.advantage);
  stats.mean_abs_adv = abs_adv / static_cast<double>(batch.size());

  auto params = policy.params();
  if (opt.optimizer == OptimizerKind::Sgd) {
    for (std::size_t i = 0; i < params.size(); ++i)
      params[i] -= opt.learning_rate * lr.gradient[i];
    return stats;
  }
  OptimizerState local;
  OptimizerState& s = state ? *state : local;
  if (s.m.size() != params.size()) {
    s.m.assign(params.size(), 0.0);
    s.v.assign(params.size(), 0.0);
    s.t = 0;
  }
  ++s.t;
  const double bc1 = 1.0 - std::pow(opt.adam_beta1, static_cast<double>(s.t));
  const double bc2 = 1.0 - std::pow(opt.adam_beta2, static_cast<double>(s.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    const double g = lr.gradient[i];
    s.m[i] = opt.adam_beta1 * s.m[i] + (1.0 - opt.adam_beta1) * g;
    s.v[i] = opt.adam_beta2 * s.v[i] + (1.0 - opt.adam_beta2) * g * g;
    params[i] -= opt.learning_rate * (s.m[i] / bc1) / (std::sqrt(s.v[i] / bc2) + opt.adam_eps);
  }
  return stats;
}

struct GradCheckResult {
  double max_relative_error = 0.0;
  double max_absolute_error = 0.0;
  std::size_t worst_param = 0;
};

/// Central differences over every parameter against the analytic gradient.
/// Relative error per parameter is |a - n| / max(|a|, |n|, floor); the
/// floor keeps round-off in the difference quotient (about 1e-11 for
/// O(1) losses and h = 1e-5) from dominating parameters whose true
/// gradient is essentially zero. Both gradients zero gives error 0.
inline GradCheckResult gradient_check(const PolicyModel& policy, const TrainBatch& batch,
                                      const OptimStep& opt, double h = 1e-5,
                                      double floor = 1e-6) {
  if (policy.num_params() > 10000)
    throw TooLarge("gradient_check is limited to 10^4 parameters");
  const auto analytic = surrogate_loss(policy, batch, opt).gradient;
  PolicyModel probe = policy;
  GradCheckResult res;
  for (std::size_t i = 0; i < probe.num_params(); ++i) {
    const double orig = probe.params()[i];
    probe.params()[i] = orig + h;
    const double up = surrogate_loss(probe, batch, opt, false).loss;
    probe.params()[i] = orig - h;
    const double down = surrogate_loss(probe, batch, opt, false).loss;
    probe.params()[i] = orig;
    const double numeric = (up - down) / (2.0 * h);
    const double diff = std::abs(analytic[i] - numeric);
    const double scale = std::max({std::abs(analytic[i]), std::abs(numeric), floor});
    const double rel = diff == 0.0 ? 0.0 : diff / scale;
    res.max_absolute_error = std::max(res.max_absolute_error, diff);
    if (rel > res.max_relative_error) {
      res.max_relative_error = rel;
      res.worst_param = i;
    }
  }
  return res;
}

enum class PolicyKind { Tabular, Linear };

struct GradCheckProblem {
  PolicyModel policy;
  TrainBatch batch;
  OptimStep opt;
};

/// Random desk-scale (policy, batch) pair for gradient verification:
/// tabular has 16 states x 4 actions (64 parameters), linear has 128 dense
/// features x 4 actions (512 parameters). Old log-probs are perturbed so
/// ratios straddle the clipping band; odd seeds enable KL and entropy terms.
inline GradCheckProblem make_gradcheck_problem(PolicyKind kind, std::uint64_t seed,
                                               std::size_t tokens = 48) {
  std::mt19937_64 rng(derive_seed(seed, 0x9c));
  std::normal_distribution<double> normal(0.0, 1.0);
  const std::size_t features = kind == PolicyKind::Tabular ? 16 : 128;
  GradCheckProblem pr{PolicyModel({{features, 4}}), {}, {}};
  for (double& w : pr.policy.params()) w = 0.5 * normal(rng);
  if (seed % 2 == 1) {
    pr.opt.kl_coefficient = 0.1;
    pr.opt.entropy_coefficient = 0.05;
  }
  pr.opt.temperature = kind == PolicyKind::Tabular ? 1.0 : 0.8;
  for (std::size_t k = 0; k < tokens; ++k) {
    PolicyState s;
    if (kind == PolicyKind::Tabular) {
      s = PolicyModel::tabular_state(static_cast<std::size_t>(uniform01(rng) * 16));
    } else {
      for (std::uint32_t f = 0; f < features; ++f)
        s.features.push_back({f, 0.3 * normal(rng)});
    }
    const auto p = pr.policy.probabilities(s, pr.opt.temperature);
    const std::size_t a = draw(p, uniform01(rng));
    const double lp = pr.policy.log_prob(s, a, pr.opt.temperature);
    TokenSample t{std::move(s), a, lp + 0.3 * normal(rng), normal(rng)};
    if (seed % 2 == 1) t.ref_log_prob = lp + 0.2 * normal(rng);
    pr.batch.push_back(std::move(t));
  }
  return pr;
}

}  // namespace pbso
