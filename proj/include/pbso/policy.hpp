#pragma once

// Small linear-softmax policies. A policy is a list of heads; each head maps
// a sparse feature vector to logits over its own action set. A tabular
// policy is the special case of one-hot features.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "pbso/common.hpp"

namespace pbso {

struct Feature {
  std::uint32_t index;
  double value;
  friend bool operator==(const Feature&, const Feature&) = default;
};

struct PolicyState {
  std::uint32_t head = 0;
  std::vector<Feature> features;
  friend bool operator==(const PolicyState&, const PolicyState&) = default;
};

struct HeadShape {
  std::size_t num_features;
  std::size_t num_actions;
  friend bool operator==(const HeadShape&, const HeadShape&) = default;
};

class PolicyModel {
 public:
  PolicyModel() = default;
  explicit PolicyModel(std::vector<HeadShape> heads) : heads_(std::move(heads)) {
    std::size_t total = 0;
    for (const HeadShape& h : heads_) {
      if (h.num_actions < 1 || h.num_features < 1)
        throw InvalidConfig("policy head needs at least one feature and one action");
      offsets_.push_back(total);
      total += h.num_features * h.num_actions;
    }
    params_.assign(total, 0.0);
  }

  static PolicyModel tabular(std::size_t num_states, std::size_t num_actions) {
    return PolicyModel({{num_states, num_actions}});
  }

  static PolicyState tabular_state(std::size_t state) {
    return {0, {{static_cast<std::uint32_t>(state), 1.0}}};
  }

  const std::vector<HeadShape>& heads() const { return heads_; }
  std::size_t num_params() const { return params_.size(); }
  std::span<double> params() { return params_; }
  std::span<const double> params() const { return params_; }

  std::size_t param_index(std::uint32_t head, std::size_t action, std::size_t feature) const {
    return offsets_[head] + action * heads_[head].num_features + feature;
  }

  std::size_t num_actions(const PolicyState& s) const { return heads_.at(s.head).num_actions; }

  void check_state(const PolicyState& s) const {
    if (s.head >= heads_.size()) throw InvariantViolation("state refers to unknown head");
    for (const Feature& f : s.features)
      if (f.index >= heads_[s.head].num_features)
        throw InvariantViolation("feature index out of range");
  }

  /// Raw logits (before temperature).
  void logits(const PolicyState& s, std::span<double> out) const {
    const HeadShape& h = heads_[s.head];
    for (std::size_t a = 0; a < h.num_actions; ++a) {
      const double* row = params_.data() + offsets_[s.head] + a * h.num_features;
      double z = 0.0;
      for (const Feature& f : s.features) z += row[f.index] * f.value;
      out[a] = z;
    }
  }

  /// Softmax of logits / temperature, computed stably.
  std::vector<double> probabilities(const PolicyState& s, double temperature = 1.0) const {
    std::vector<double> p(num_actions(s));
    logits(s, p);
    softmax_inplace(p, temperature);
    return p;
  }

  std::vector<double> log_probabilities(const PolicyState& s, double temperature = 1.0) const {
    std::vector<double> z(num_actions(s));
    logits(s, z);
    double m = *std::max_element(z.begin(), z.end()) / temperature;
    double acc = 0.0;
    for (double& v : z) {
      v = v / temperature - m;
      acc += std::exp(v);
    }
    const double lse = std::log(acc);
    for (double& v : z) v -= lse;
    return z;
  }

  double log_prob(const PolicyState& s, std::size_t action, double temperature = 1.0) const {
    return log_probabilities(s, temperature)[action];
  }

  static void softmax_inplace(std::span<double> z, double temperature) {
    double m = *std::max_element(z.begin(), z.end());
    double acc = 0.0;
    for (double& v : z) {
      v = std::exp((v - m) / temperature);
      acc += v;
    }
    for (double& v : z) v /= acc;
  }

  friend bool operator==(const PolicyModel&, const PolicyModel&) = default;

 private:
  std::vector<HeadShape> heads_;
  std::vector<std::size_t> offsets_;
  std::vector<double> params_;
};

/// Temperature-scaled distribution truncated to the smallest top-probability
/// prefix whose mass reaches `top_p`, renormalized. Ties are broken by
/// action index so the result is deterministic.
inline std::vector<double> sampling_distribution(const PolicyModel& policy,
                                                 const PolicyState& s, double temperature,
                                                 double top_p) {
  std::vector<double> p = policy.probabilities(s, temperature);
  if (top_p >= 1.0) return p;
  std::vector<std::size_t> order(p.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return p[a] > p[b]; });
  double mass = 0.0;
  std::size_t keep = 0;
  while (keep < order.size() && mass < top_p) mass += p[order[keep++]];
  std::vector<double> q(p.size(), 0.0);
  for (std::size_t i = 0; i < keep; ++i) q[order[i]] = p[order[i]] / mass;
  return q;
}

/// Inverse-CDF draw with u in [0, 1).
inline std::size_t draw(std::span<const double> probs, double u) {
  double acc = 0.0;
  std::size_t last = 0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    if (probs[i] <= 0.0) continue;
    acc += probs[i];
    last = i;
    if (u < acc) return i;
  }
  return last;
}

template <typename Rng>
double uniform01(Rng& rng) {
  return static_cast<double>(rng() >> 11) * 0x1.0p-53;
}

inline nlohmann::json to_json(const PolicyModel& p) {
  nlohmann::json heads = nlohmann::json::array();
  for (const HeadShape& h : p.heads())
    heads.push_back({{"features", h.num_features}, {"actions", h.num_actions}});
  return {{"heads", heads},
          {"params", std::vector<double>(p.params().begin(), p.params().end())}};
}

inline PolicyModel policy_from_json(const nlohmann::json& j) {
  std::vector<HeadShape> heads;
  for (const auto& h : j.at("heads"))
    heads.push_back({h.at("features").get<std::size_t>(), h.at("actions").get<std::size_t>()});
  PolicyModel p(std::move(heads));
  auto params = j.at("params").get<std::vector<double>>();
  if (params.size() != p.num_params())
    throw InvariantViolation("policy file: parameter count does not match heads");
  std::copy(params.begin(), params.end(), p.params().begin());
  return p;
}

}  // namespace pbso
