#pragma once

// Prospective bounded returns, group-pooled position advantages and their
// broadcast onto token spans.

#include <algorithm>
#include <cmath>
#include <limits>
#include <vector>

#include "pbso/common.hpp"
#include "pbso/transcript.hpp"
#include "pbso/verifiers.hpp"

namespace pbso {

struct ReturnConfig {
  double gamma = 1.0;
  double r_min = 0.0;
  double r_max = 1.0;
  double epsilon = 1e-8;
  /// When false the clip is the identity (ablation).
  bool clipping = true;
};

inline void validate(const ReturnConfig& cfg) {
  if (!(cfg.gamma > 0.0 && cfg.gamma <= 1.0))
    throw InvalidConfig("gamma must lie in (0, 1]");
  if (!std::isfinite(cfg.r_min) || !std::isfinite(cfg.r_max) || !(cfg.r_min < cfg.r_max))
    throw InvalidConfig("need finite r_min < r_max");
  if (!(cfg.epsilon > 0.0) || !std::isfinite(cfg.epsilon))
    throw InvalidConfig("epsilon must be positive");
}

/// G_t = clip(r_t + gamma * G_{t+1}, r_min, r_max) over positions 1..T+1,
/// where r_{T+1} is the task reward and G_{T+2} = 0.
inline std::vector<double> bounded_returns(const RewardVector& rv, const ReturnConfig& cfg) {
  validate(cfg);
  const std::size_t n = rv.positions();
  for (std::size_t t = 1; t <= n; ++t) {
    double r = rv.at(t);
    if (!(r >= cfg.r_min && r <= cfg.r_max))
      throw InvalidConfig("reward at position " + std::to_string(t) +
                          " lies outside [r_min, r_max]");
  }
  std::vector<double> g(n);
  double next = 0.0;
  for (std::size_t t = n; t >= 1; --t) {
    double acc = rv.at(t) + cfg.gamma * next;
    g[t - 1] = cfg.clipping ? std::clamp(acc, cfg.r_min, cfg.r_max) : acc;
    next = g[t - 1];
  }
  return g;
}

struct PooledAdvantages {
  std::vector<std::vector<double>> advantages;  // same shape as the input
  double mean = 0.0;
  double stddev = 0.0;  // population
  bool degenerate = false;
};

/// A_t^j = (G_t^j - mean(pool)) / (std(pool) + epsilon), where the pool is
/// every return of every member of one question group.
inline PooledAdvantages pooled_advantages(const std::vector<std::vector<double>>& group,
                                          double epsilon) {
  if (!(epsilon > 0.0)) throw InvalidConfig("epsilon must be positive");
  std::size_t count = 0;
  double sum = 0.0;
  bool all_equal = true;
  double first = 0.0;
  for (const auto& member : group)
    for (double g : member) {
      if (count == 0) first = g;
      all_equal = all_equal && g == first;
      sum += g;
      ++count;
    }
  if (count < 2) throw InvalidConfig("pooled advantages need at least 2 returns");

  PooledAdvantages out;
  out.mean = sum / static_cast<double>(count);
  double ss = 0.0;
  for (const auto& member : group)
    for (double g : member) ss += (g - out.mean) * (g - out.mean);
  out.stddev = std::sqrt(ss / static_cast<double>(count));
  // Rounding in the mean can leave a tiny stddev for an all-equal pool.
  out.degenerate = all_equal || out.stddev == 0.0;
  if (out.degenerate) out.stddev = 0.0;

  out.advantages.reserve(group.size());
  for (const auto& member : group) {
    std::vector<double> a(member.size(), 0.0);
    if (!out.degenerate)
      for (std::size_t t = 0; t < member.size(); ++t)
        a[t] = (member[t] - out.mean) / (out.stddev + epsilon);
    out.advantages.push_back(std::move(a));
  }
  return out;
}

struct AdvantageAssignment {
  std::vector<double> per_position;
  std::vector<double> per_token;  // zero on uncredited tokens
};

inline AdvantageAssignment broadcast_advantages(const Trajectory& traj,
                                                const std::vector<double>& per_position) {
  if (per_position.size() != traj.num_iterations() + 1)
    throw LengthMismatch(traj.num_iterations() + 1, per_position.size());
  AdvantageAssignment out{per_position, std::vector<double>(traj.token_count, 0.0)};
  for (const Segment& s : segment_spans(traj))
    std::fill(out.per_token.begin() + static_cast<std::ptrdiff_t>(s.span.begin),
              out.per_token.begin() + static_cast<std::ptrdiff_t>(s.span.end),
              per_position[s.position - 1]);
  return out;
}

}  // namespace pbso
