#include <atomic>
#include <random>
#include <thread>

#include <gtest/gtest.h>
#include <httplib.h>

#include "pbso/remote_verifier.hpp"
#include "pbso/synthenv.hpp"
#include "pbso/verifiers.hpp"

using namespace pbso;

namespace {

// Fixed answers plus call counters.
class TableBackend final : public VerifierBackend {
 public:
  TableBackend(bool syn, bool con, bool cri) : syn_(syn), con_(con), cri_(cri) {}
  std::string id() const override { return "table"; }
  CheckResult syntax(const Question&, std::string_view) const override {
    ++syntax_calls;
    return {syn_, ""};
  }
  CheckResult consistency(const Question&, std::string_view) const override {
    ++consistency_calls;
    return {con_, ""};
  }
  CheckResult critique(const Question&, std::string_view, std::string_view) const override {
    ++critique_calls;
    return {cri_, ""};
  }
  mutable std::atomic<int> syntax_calls{0}, consistency_calls{0}, critique_calls{0};

 private:
  bool syn_, con_, cri_;
};

// Records the peak number of concurrent calls.
class SlowBackend final : public VerifierBackend {
 public:
  explicit SlowBackend(std::size_t limit) : limit_(limit) {}
  std::string id() const override { return "slow"; }
  std::size_t max_in_flight() const override { return limit_; }
  CheckResult syntax(const Question&, std::string_view) const override { return work(); }
  CheckResult consistency(const Question&, std::string_view) const override { return work(); }
  CheckResult critique(const Question&, std::string_view, std::string_view) const override {
    return work();
  }
  mutable std::atomic<int> active{0}, peak{0};

 private:
  CheckResult work() const {
    int now = ++active;
    int seen = peak.load();
    while (now > seen && !peak.compare_exchange_weak(seen, now)) {
    }
    std::this_thread::sleep_for(std::chrono::milliseconds(5));
    --active;
    return {true, ""};
  }
  std::size_t limit_;
};

Trajectory make_traj(std::vector<std::pair<std::string, Verdict>> rounds, std::string final) {
  Trajectory t;
  t.question_id = "t0";
  for (std::size_t i = 0; i < rounds.size(); ++i)
    t.iterations.push_back({i + 1, rounds[i].first, std::string(to_string(rounds[i].second)),
                            rounds[i].second, {}, {}});
  t.final_statement = std::move(final);
  return canonicalize(t);
}

struct Env {
  EnvSpec spec{};
  SynthTask task = make_task(spec, 0);
  VerifierSet v = oracle_verifiers(spec, task);
  Question q = task.question();
  std::string right = render_symbols(task.target);
  std::string wrong = [this] {
    Symbols s = task.target;
    s[0] = (s[0] + 1) % static_cast<int>(spec.alphabet_size);
    return render_symbols(s);
  }();
};

}  // namespace

TEST(Verifiers, TaskRewardIsConjunction) {
  const Question q{"q", "text"};
  for (bool syn : {false, true})
    for (bool con : {false, true}) {
      auto backend = std::make_shared<TableBackend>(syn, con, true);
      VerifierSet v(backend);
      EXPECT_EQ(task_reward(q, "s", v), syn && con ? 1 : 0);
      EXPECT_EQ(backend->consistency_calls.load(), syn ? 1 : 0) << "short circuit";
    }
}

TEST(Verifiers, EmptyAnswerIsRejected) {
  VerifierSet v(std::make_shared<TableBackend>(true, true, true));
  EXPECT_THROW(task_reward({"q", ""}, "", v), InvariantViolation);
  EXPECT_THROW(aux_reward({"q", ""}, "s", "no verdict here", v), InvariantViolation);
}

TEST(Verifiers, OracleFaithfulnessTruthTable) {
  Env e;
  for (bool consistent : {false, true})
    for (Verdict says : {Verdict::Correct, Verdict::Incorrect}) {
      const std::string& s = consistent ? e.right : e.wrong;
      const int expect = (says == Verdict::Correct) == consistent ? 1 : 0;
      EXPECT_EQ(aux_reward(e.q, s, std::string(to_string(says)), e.v), expect);
    }
  const auto premature = e.v.critique_faithfulness_check(e.q, e.wrong, "Correct");
  EXPECT_FALSE(premature.pass);
  EXPECT_NE(premature.detail.find("premature"), std::string::npos);
}

TEST(Verifiers, OracleSyntaxAndConsistency) {
  Env e;
  EXPECT_TRUE(e.v.consistency_check(e.q, e.right).pass);
  EXPECT_FALSE(e.v.consistency_check(e.q, e.wrong).pass);
  EXPECT_FALSE(e.v.syntax_check(e.q, "a b z").pass);
  EXPECT_FALSE(e.v.syntax_check(e.q, "a b").pass);
  EXPECT_FALSE(e.v.syntax_check(e.q, "ab c d").pass);
  EXPECT_EQ(task_reward(e.q, "a b z", e.v), 0);
  EXPECT_EQ(task_reward(e.q, e.right, e.v), 1);
}

TEST(Verifiers, ScoreExamples) {
  Env e;
  EXPECT_EQ(score_trajectory(e.q, make_traj({}, e.right), e.v), (RewardVector{{}, 1.0}));
  const auto case_study =
      make_traj({{e.wrong, Verdict::Incorrect}, {e.right, Verdict::Correct}}, e.right);
  EXPECT_EQ(score_trajectory(e.q, case_study, e.v), (RewardVector{{1.0, 1.0}, 1.0}));
  const auto overconfident = make_traj({{e.wrong, Verdict::Correct}}, e.wrong);
  EXPECT_EQ(score_trajectory(e.q, overconfident, e.v), (RewardVector{{0.0}, 0.0}));
}

TEST(Verifiers, CacheAvoidsRepeatCalls) {
  auto backend = std::make_shared<TableBackend>(true, true, true);
  VerifierSet v(backend);
  const Question q{"q", ""};
  for (int i = 0; i < 5; ++i) {
    v.syntax_check(q, "s");
    v.critique_faithfulness_check(q, "s", "Correct");
  }
  EXPECT_EQ(backend->syntax_calls.load(), 1);
  EXPECT_EQ(backend->critique_calls.load(), 1);
  v.syntax_check({"other", ""}, "s");
  EXPECT_EQ(backend->syntax_calls.load(), 2);
  VerifierSet copy = v;
  copy.syntax_check(q, "s");
  EXPECT_EQ(backend->syntax_calls.load(), 2) << "copies share the cache";
  EXPECT_EQ(v.cache_size(), 3u);
}

TEST(Verifiers, DeterministicUnderConcurrency) {
  EnvSpec spec;
  std::mt19937_64 rng(5);
  const PolicyModel policy = make_policy(spec);
  for (int k = 0; k < 20; ++k) {
    const SynthTask task = make_task(spec, static_cast<std::uint64_t>(k));
    const Episode ep = sample_trajectory(policy, spec, task, EpisodeConfig{}, rng);
    const RewardVector serial =
        score_trajectory(task.question(), ep.trajectory, oracle_verifiers(spec, task));
    const VerifierSet shared = oracle_verifiers(spec, task);
    std::vector<RewardVector> out(8);
    std::vector<std::thread> pool;
    for (std::size_t w = 0; w < out.size(); ++w)
      pool.emplace_back([&, w] { out[w] = score_trajectory(task.question(), ep.trajectory, shared, true); });
    for (auto& t : pool) t.join();
    for (const auto& rv : out) EXPECT_EQ(rv, serial);
  }
}

TEST(Verifiers, InFlightLimitHolds) {
  auto backend = std::make_shared<SlowBackend>(2);
  VerifierSet v(backend);
  std::vector<std::thread> pool;
  for (int w = 0; w < 8; ++w)
    pool.emplace_back([&, w] { v.syntax_check({"q", ""}, "s" + std::to_string(w)); });
  for (auto& t : pool) t.join();
  EXPECT_LE(backend->peak.load(), 2);
  EXPECT_GE(backend->peak.load(), 1);
}

TEST(Verifiers, MockFixtures) {
  const std::string s = "a b c", c = "check ok ok ok\nCorrect";
  nlohmann::json fx = {
      {"syntax", {{MockBackend::statement_key(s), true}}},
      {"consistency", {{MockBackend::statement_key(s), {{"pass", false}, {"detail", "off by one"}}}}},
      {"critique", {{MockBackend::critique_key(s, c), false}}}};
  VerifierSet v(std::make_shared<MockBackend>(fx));
  const Question q{"q", ""};
  EXPECT_TRUE(v.syntax_check(q, s).pass);
  const auto con = v.consistency_check(q, s);
  EXPECT_FALSE(con.pass);
  EXPECT_EQ(con.detail, "off by one");
  EXPECT_EQ(aux_reward(q, s, c, v), 0);
  EXPECT_THROW(v.syntax_check(q, "unknown"), VerifierUnavailable);
}

TEST(Verifiers, UnavailableCarriesPosition) {
  const std::string s = "a";
  nlohmann::json fx = {{"critique", {{MockBackend::critique_key(s, "Incorrect"), true}}}};
  VerifierSet v(std::make_shared<MockBackend>(fx));
  Trajectory t = make_traj({{s, Verdict::Incorrect}, {"b", Verdict::Incorrect}}, "b");
  try {
    score_trajectory({"q", ""}, t, v);
    FAIL() << "expected VerifierUnavailable";
  } catch (const VerifierUnavailable& e) {
    EXPECT_EQ(e.backend(), "mock");
    EXPECT_EQ(e.cause().rfind("position 2: ", 0), 0u) << e.cause();
  }
}

TEST(Verifiers, RewardVectorJson) {
  const RewardVector rv{{1.0, 0.0}, 1.0};
  EXPECT_EQ(reward_vector_from_json(to_json(rv)), rv);
  EXPECT_THROW(reward_vector_from_json(nlohmann::json{{"aux", 1}}), InvariantViolation);
  EXPECT_THROW(validate_binary({{0.5}, 1.0}), InvariantViolation);
}

// ---------------------------------------------------------------------------
// Remote backend against an in-process server

namespace {

struct Server {
  httplib::Server srv;
  std::thread th;
  int port = 0;
  std::atomic<int> hits{0};
  std::atomic<int> fail_first{0};

  Server() {
    auto handler = [this](const httplib::Request& req, httplib::Response& res) {
      ++hits;
      if (fail_first-- > 0) {
        res.status = 503;
        return;
      }
      auto j = nlohmann::json::parse(req.body);
      const bool pass = j.at("statement").get<std::string>() == "a b c";
      res.set_content(nlohmann::json{{"pass", pass}, {"detail", req.path}}.dump(),
                      "application/json");
    };
    srv.Post("/v/syntax", handler);
    srv.Post("/v/consistency", handler);
    srv.Post("/v/critique", handler);
    srv.Post("/bad/syntax", [this](const httplib::Request&, httplib::Response& res) {
      ++hits;
      res.set_content("not json", "text/plain");
    });
    port = srv.bind_to_any_port("127.0.0.1");
    th = std::thread([this] { srv.listen_after_bind(); });
    srv.wait_until_ready();
  }
  ~Server() {
    srv.stop();
    th.join();
  }
  RemoteConfig config(const std::string& prefix) const {
    RemoteConfig c;
    c.base_url = "http://127.0.0.1:" + std::to_string(port) + prefix;
    c.timeout = std::chrono::milliseconds(2000);
    c.backoff = std::chrono::milliseconds(1);
    return c;
  }
};

}  // namespace

TEST(RemoteVerifier, AnswersFromServer) {
  Server s;
  VerifierSet v(std::make_shared<RemoteBackend>(s.config("/v")));
  const Question q{"q", "Decode"};
  EXPECT_TRUE(v.syntax_check(q, "a b c").pass);
  const auto r = v.consistency_check(q, "a b d");
  EXPECT_FALSE(r.pass);
  EXPECT_EQ(r.detail, "/v/consistency");
  EXPECT_EQ(aux_reward(q, "a b c", "Correct", v), 1);
}

TEST(RemoteVerifier, RetriesThenSucceeds) {
  Server s;
  s.fail_first = 2;
  RemoteBackend b(s.config("/v"));
  EXPECT_TRUE(b.syntax({"q", ""}, "a b c").pass);
  EXPECT_EQ(s.hits.load(), 3);
}

TEST(RemoteVerifier, ExhaustedRetriesRaise) {
  Server s;
  s.fail_first = 100;
  VerifierSet v(std::make_shared<RemoteBackend>(s.config("/v")));
  EXPECT_THROW(task_reward({"q", ""}, "a b c", v), VerifierUnavailable);
  EXPECT_EQ(s.hits.load(), 4) << "one attempt plus three retries";
  EXPECT_EQ(v.cache_size(), 0u) << "failures are not cached";
}

TEST(RemoteVerifier, MalformedBodyRaises) {
  Server s;
  RemoteBackend b(s.config("/bad"));
  EXPECT_THROW(b.syntax({"q", ""}, "a"), VerifierUnavailable);
}

TEST(RemoteVerifier, UnreachableHostRaises) {
  RemoteConfig c;
  c.base_url = "http://127.0.0.1:1";
  c.retries = 1;
  c.backoff = std::chrono::milliseconds(1);
  c.timeout = std::chrono::milliseconds(200);
  RemoteBackend b(c);
  EXPECT_THROW(b.syntax({"q", ""}, "a"), VerifierUnavailable);
}

TEST(RemoteVerifier, RejectsNonHttpUrl) {
  RemoteConfig c;
  c.base_url = "https://example.com";
  EXPECT_THROW(RemoteBackend{c}, InvalidConfig);
}
