#pragma once

// Reward predicates behind a pluggable backend, a shared result cache, and
// assembly of per-trajectory reward vectors.

#include <condition_variable>
#include <future>
#include <memory>
#include <mutex>
#include <shared_mutex>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "pbso/common.hpp"
#include "pbso/transcript.hpp"

namespace pbso {

struct CheckResult {
  bool pass = false;
  std::string detail;
};

/// A source of the three predicates. Implementations must be deterministic
/// for fixed inputs and safe to call from several threads.
class VerifierBackend {
 public:
  virtual ~VerifierBackend() = default;
  virtual std::string id() const = 0;
  /// 0 means unbounded.
  virtual std::size_t max_in_flight() const { return 0; }

  virtual CheckResult syntax(const Question& q, std::string_view statement) const = 0;
  virtual CheckResult consistency(const Question& q, std::string_view statement) const = 0;
  virtual CheckResult critique(const Question& q, std::string_view statement,
                               std::string_view critique) const = 0;
};

/// [r_aux^1, ..., r_aux^T, r_task]
struct RewardVector {
  std::vector<double> aux;
  double task = 0.0;

  std::size_t positions() const { return aux.size() + 1; }
  double at(std::size_t position) const {  // 1-based
    return position <= aux.size() ? aux[position - 1] : task;
  }
  friend bool operator==(const RewardVector&, const RewardVector&) = default;
};

inline void validate_binary(const RewardVector& rv) {
  auto ok = [](double r) { return r == 0.0 || r == 1.0; };
  for (double r : rv.aux)
    if (!ok(r)) throw InvariantViolation("aux reward outside {0,1}");
  if (!ok(rv.task)) throw InvariantViolation("task reward outside {0,1}");
}

inline nlohmann::json to_json(const RewardVector& rv) {
  return {{"aux", rv.aux}, {"task", rv.task}};
}

inline RewardVector reward_vector_from_json(const nlohmann::json& j) {
  try {
    return {j.at("aux").get<std::vector<double>>(), j.at("task").get<double>()};
  } catch (const nlohmann::json::exception& e) {
    throw InvariantViolation(std::string("bad reward record: ") + e.what());
  }
}

namespace detail {

class InFlightLimiter {
 public:
  explicit InFlightLimiter(std::size_t limit) : limit_(limit) {}

  template <typename F>
  auto run(F&& f) {
    if (limit_ == 0) return f();
    {
      std::unique_lock lock(mu_);
      cv_.wait(lock, [&] { return active_ < limit_; });
      ++active_;
    }
    struct Release {
      InFlightLimiter* self;
      ~Release() {
        {
          std::lock_guard lock(self->mu_);
          --self->active_;
        }
        self->cv_.notify_one();
      }
    } release{this};
    return f();
  }

 private:
  std::size_t limit_;
  std::size_t active_ = 0;
  std::mutex mu_;
  std::condition_variable cv_;
};

}  // namespace detail

/// The three predicates of one backend plus a concurrent result cache keyed
/// by (backend id, question id, content hash). Copies share the cache.
class VerifierSet {
 public:
  explicit VerifierSet(std::shared_ptr<const VerifierBackend> backend)
      : backend_(std::move(backend)),
        shared_(std::make_shared<Shared>(backend_->max_in_flight())) {}

  const VerifierBackend& backend() const { return *backend_; }

  CheckResult syntax_check(const Question& q, std::string_view statement) const {
    return cached('S', q, statement, [&] { return backend_->syntax(q, statement); });
  }

  CheckResult consistency_check(const Question& q, std::string_view statement) const {
    return cached('C', q, statement, [&] { return backend_->consistency(q, statement); });
  }

  CheckResult critique_faithfulness_check(const Question& q, std::string_view statement,
                                          std::string_view critique) const {
    std::string content;
    content.reserve(statement.size() + critique.size() + 1);
    content.append(statement).push_back('\x1f');
    content.append(critique);
    return cached('F', q, content,
                  [&] { return backend_->critique(q, statement, critique); });
  }

  std::size_t cache_size() const {
    std::shared_lock lock(shared_->mu);
    return shared_->cache.size();
  }

 private:
  struct Shared {
    explicit Shared(std::size_t limit) : limiter(limit) {}
    mutable std::shared_mutex mu;
    std::unordered_map<std::string, CheckResult> cache;
    detail::InFlightLimiter limiter;
  };

  template <typename F>
  CheckResult cached(char predicate, const Question& q, std::string_view content,
                     F&& compute) const {
    std::string key = backend_->id();
    key.push_back('\x1f');
    key.push_back(predicate);
    key.push_back('\x1f');
    key += q.id;
    key.push_back('\x1f');
    key += hex64(fnv1a(content));
    {
      std::shared_lock lock(shared_->mu);
      if (auto it = shared_->cache.find(key); it != shared_->cache.end()) return it->second;
    }
    CheckResult r = shared_->limiter.run(std::forward<F>(compute));
    std::unique_lock lock(shared_->mu);
    return shared_->cache.emplace(std::move(key), std::move(r)).first->second;
  }

  std::shared_ptr<const VerifierBackend> backend_;
  std::shared_ptr<Shared> shared_;
};

// ---------------------------------------------------------------------------
// Rewards

/// 1 iff the answer passes the syntax check and the consistency check.
/// Consistency is not queried when syntax fails.
inline int task_reward(const Question& q, std::string_view answer, const VerifierSet& v) {
  if (answer.empty()) throw InvariantViolation("task_reward: empty answer");
  if (!v.syntax_check(q, answer).pass) return 0;
  return v.consistency_check(q, answer).pass ? 1 : 0;
}

/// 1 iff the critique faithfully diagnoses the statement.
inline int aux_reward(const Question& q, std::string_view statement,
                      std::string_view critique, const VerifierSet& v) {
  if (!find_verdict(critique))
    throw InvariantViolation("aux_reward: critique carries no verdict");
  return v.critique_faithfulness_check(q, statement, critique).pass ? 1 : 0;
}

/// Scores every iteration and the final answer. With `parallel` set, the
/// per-iteration verifier calls are issued concurrently; the result is
/// identical either way.
inline RewardVector score_trajectory(const Question& q, const Trajectory& traj,
                                     const VerifierSet& v, bool parallel = false) {
  validate_structure(traj);
  const std::size_t n = traj.iterations.size();
  auto at_position = [&](std::size_t position, auto&& f) -> int {
    try {
      return f();
    } catch (const VerifierUnavailable& e) {
      throw VerifierUnavailable(e.backend(),
                                "position " + std::to_string(position) + ": " + e.cause());
    }
  };
  auto aux_at = [&](std::size_t i) {
    const Iteration& it = traj.iterations[i];
    return at_position(i + 1, [&] { return aux_reward(q, it.statement, it.critique, v); });
  };

  RewardVector rv;
  rv.aux.resize(n);
  if (parallel && n > 1) {
    std::vector<std::future<int>> pending;
    pending.reserve(n);
    for (std::size_t i = 0; i < n; ++i)
      pending.push_back(std::async(std::launch::async, aux_at, i));
    for (std::size_t i = 0; i < n; ++i) rv.aux[i] = pending[i].get();
  } else {
    for (std::size_t i = 0; i < n; ++i) rv.aux[i] = aux_at(i);
  }
  rv.task = at_position(n + 1, [&] { return task_reward(q, traj.final_statement, v); });
  return rv;
}

// ---------------------------------------------------------------------------
// Scripted backend: fixture tables keyed by content hash.
//
// {"syntax":      {"<hash(statement)>": true, ...},
//  "consistency": {"<hash(statement)>": {"pass": false, "detail": "..."}, ...},
//  "critique":    {"<hash(statement \x1f critique)>": true, ...}}

class MockBackend final : public VerifierBackend {
 public:
  explicit MockBackend(nlohmann::json fixtures) : fixtures_(std::move(fixtures)) {}

  static std::string statement_key(std::string_view statement) {
    return hex64(fnv1a(statement));
  }
  static std::string critique_key(std::string_view statement, std::string_view critique) {
    std::string s(statement);
    s.push_back('\x1f');
    s.append(critique);
    return hex64(fnv1a(s));
  }

  std::string id() const override { return "mock"; }

  CheckResult syntax(const Question&, std::string_view statement) const override {
    return lookup("syntax", statement_key(statement));
  }
  CheckResult consistency(const Question&, std::string_view statement) const override {
    return lookup("consistency", statement_key(statement));
  }
  CheckResult critique(const Question&, std::string_view statement,
                       std::string_view critique) const override {
    return lookup("critique", critique_key(statement, critique));
  }

 private:
  CheckResult lookup(const char* table, const std::string& key) const {
    auto t = fixtures_.find(table);
    if (t == fixtures_.end() || !t->contains(key))
      throw VerifierUnavailable("mock", std::string("no ") + table + " fixture for " + key);
    const auto& e = (*t)[key];
    if (e.is_boolean()) return {e.get<bool>(), ""};
    return {e.at("pass").get<bool>(), e.value("detail", "")};
  }

  nlohmann::json fixtures_;
};

}  // namespace pbso
