#pragma once

// Simulated user, recommendation rewards, the agent/user episode loop and
// the evaluation harness.

#include <array>
#include <atomic>
#include <cmath>
#include <functional>
#include <memory>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "crs/catalog.hpp"
#include "crs/dialoggen.hpp"
#include "crs/nlu.hpp"
#include "crs/policy.hpp"
#include "crs/recommender.hpp"
#include "crs/rng.hpp"

namespace crs {

class EnvError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Rewards

enum class RewardModel { linear, ndcg, cascade };

inline const char* to_string(RewardModel m) {
  switch (m) {
    case RewardModel::linear: return "linear";
    case RewardModel::ndcg: return "ndcg";
    case RewardModel::cascade: return "cascade";
  }
  return "?";
}

inline RewardModel parse_reward_model(std::string_view s) {
  if (s == "linear") return RewardModel::linear;
  if (s == "ndcg") return RewardModel::ndcg;
  if (s == "cascade") return RewardModel::cascade;
  throw EnvError("unknown reward model '" + std::string(s) + "' (expected linear, ndcg or cascade)");
}

struct RewardConfig {
  double r_c = -1.0;
  double r_q = -10.0;
  double C = 40.0;
  std::size_t K = 30;      // stop threshold
  std::size_t kappa = 3;   // page size
  double alpha1 = 0.95;    // page-continuation decay
  double alpha2 = 0.95;    // reward decay per page
  double gamma = 0.95;
  std::size_t max_turns = 7;
  RewardModel model = RewardModel::linear;

  void validate() const {
    if (!(r_c <= 0.0)) throw EnvError("r_c must be <= 0");
    if (!(r_q < 0.0)) throw EnvError("r_q must be < 0");
    if (!(C > 0.0)) throw EnvError("C must be > 0");
    if (K < 1) throw EnvError("stop threshold K must be >= 1");
    if (kappa < 1) throw EnvError("page size kappa must be >= 1");
    if (!(alpha1 > 0.0 && alpha1 < 1.0) || !(alpha2 > 0.0 && alpha2 < 1.0)) throw EnvError("alpha1 and alpha2 must be in (0, 1)");
    if (!(gamma >= 0.0 && gamma <= 1.0)) throw EnvError("gamma must be in [0, 1]");
  }
};

inline void to_json(nlohmann::json& j, const RewardConfig& c) {
  j = {{"r_c", c.r_c}, {"r_q", c.r_q}, {"C", c.C},         {"K", c.K},
       {"kappa", c.kappa}, {"alpha1", c.alpha1}, {"alpha2", c.alpha2}, {"gamma", c.gamma},
       {"max_turns", c.max_turns}, {"model", to_string(c.model)}};
}

inline void from_json(const nlohmann::json& j, RewardConfig& c) {
  c.r_c = j.value("r_c", c.r_c);
  c.r_q = j.value("r_q", c.r_q);
  c.C = j.value("C", c.C);
  c.K = j.value("K", c.K);
  c.kappa = j.value("kappa", c.kappa);
  c.alpha1 = j.value("alpha1", c.alpha1);
  c.alpha2 = j.value("alpha2", c.alpha2);
  c.gamma = j.value("gamma", c.gamma);
  c.max_turns = j.value("max_turns", c.max_turns);
  if (j.contains("model")) c.model = parse_reward_model(j.at("model").get<std::string>());
}

/// Page holding rank tau (1-based).
inline std::size_t page_of(std::size_t tau, std::size_t kappa) { return (tau + kappa - 1) / kappa; }

/// r_p for the target at rank tau, or nullopt when tau > K (a failure).
inline std::optional<double> success_reward(std::size_t tau, const RewardConfig& cfg) {
  if (tau < 1) throw EnvError("rank tau must be >= 1");
  if (tau > cfg.K) return std::nullopt;
  const double t = static_cast<double>(tau);
  switch (cfg.model) {
    case RewardModel::linear: return cfg.C * static_cast<double>(cfg.K - tau + 1) / static_cast<double>(cfg.K);
    case RewardModel::ndcg: return cfg.C / std::log2(t + 1.0);
    case RewardModel::cascade: return cfg.C * std::pow(cfg.alpha2, static_cast<double>(page_of(tau, cfg.kappa)) - 1.0);
  }
  return std::nullopt;
}

// ---------------------------------------------------------------------------
// Simulated user

struct UserConfig {
  double two_facet_opener = 0.0;
  NoiseConfig noise;
};

struct Verdict {
  Outcome outcome = Outcome::wrong_quit;
  std::optional<std::size_t> rank;
};

/// Cooperative user with a fixed target: opens with a random facet, answers
/// every request with the target's value, and scans recommendation lists.
class SimulatedUser {
 public:
  SimulatedUser(const Catalog& cat, const TemplatePack& pack, std::size_t user, std::size_t item, Rng rng, UserConfig cfg = {})
      : cat_(&cat), pack_(&pack), user_(user), item_(item), rng_(rng), cfg_(cfg), informed_(cat.schema().size(), false) {
    if (item >= cat.n_items()) throw EnvError("simulated user: target item out of range");
  }

  std::size_t user() const noexcept { return user_; }
  std::size_t target() const noexcept { return item_; }
  const std::vector<bool>& informed() const noexcept { return informed_; }

  UserTurn open() {
    const std::size_t L = cat_->schema().size();
    const auto& vals = cat_->item(item_).values;
    const std::size_t f = rng_.below(L);
    if (L >= 2 && cfg_.two_facet_opener > 0.0 && rng_.bernoulli(cfg_.two_facet_opener)) {
      std::size_t g = rng_.below(L - 1);
      if (g >= f) ++g;
      DialogueAct two = DialogueAct::inform({{std::min(f, g), vals[std::min(f, g)]}, {std::max(f, g), vals[std::max(f, g)]}});
      if (!pack_->matching(two).empty()) return say(two);
    }
    return say(DialogueAct::inform(f, vals[f]));
  }

  /// Answers with the target's value, also when the facet was given before.
  UserTurn answer(std::size_t facet) {
    if (facet >= cat_->schema().size()) throw EnvError("simulated user: requested facet out of range");
    return say(DialogueAct::inform(facet, cat_->item(item_).values[facet]));
  }

  /// Scans the ranked list top-down. Lists are cut at K; under the cascade
  /// model the first page is always viewed and page rho+1 is reached with
  /// probability alpha1^rho.
  Verdict examine(const std::vector<ScoredItem>& ranked, const RewardConfig& cfg) {
    std::optional<std::size_t> tau;
    for (std::size_t i = 0; i < ranked.size(); ++i)
      if (ranked[i].item == item_) {
        tau = i + 1;
        break;
      }
    if (!tau) return {Outcome::wrong_quit, std::nullopt};
    if (*tau > cfg.K) return {Outcome::low_rank, tau};
    if (cfg.model == RewardModel::cascade) {
      const std::size_t rho = page_of(*tau, cfg.kappa);
      for (std::size_t p = 1; p < rho; ++p)
        if (!rng_.bernoulli(std::pow(cfg.alpha1, static_cast<double>(p)))) return {Outcome::low_rank, tau};
    }
    return {Outcome::success, tau};
  }

 private:
  UserTurn say(const DialogueAct& act) {
    for (const auto& s : act.slots) informed_[s.facet] = true;
    return {realize(act, *pack_, rng_, cfg_.noise).text, act.slots};
  }

  const Catalog* cat_;
  const TemplatePack* pack_;
  std::size_t user_, item_;
  Rng rng_;
  UserConfig cfg_;
  std::vector<bool> informed_;
};

// ---------------------------------------------------------------------------
// Agents

struct DialogueView {
  const Catalog& catalog;
  const BeliefState& belief;
  std::span<const double> state;  // belief.flat()
  const RuleState& rule;
};

/// Maps a dialogue view to an action index in [0, l]. Implementations are
/// const and shareable across evaluation workers.
class DialoguePolicy {
 public:
  virtual ~DialoguePolicy() = default;
  virtual std::string name() const = 0;
  virtual std::size_t act(const DialogueView& view, Rng& rng) const = 0;
  /// Action probabilities when the policy is stochastic.
  virtual std::optional<std::vector<double>> distribution(const DialogueView&) const { return std::nullopt; }
};

class MaxEntPolicy : public DialoguePolicy {
 public:
  explicit MaxEntPolicy(MaxEntVariant v = {}) : v_(v) {}
  std::string name() const override { return v_.ask_limit ? "maxent@" + std::to_string(*v_.ask_limit) : "maxent_full"; }
  std::size_t act(const DialogueView& view, Rng&) const override {
    return maxent_action(view.catalog, view.rule, v_).index(view.catalog.schema().size());
  }

 private:
  MaxEntVariant v_;
};

class NetPolicy : public DialoguePolicy {
 public:
  NetPolicy(std::shared_ptr<const PolicyNet> net, ActMode mode, std::string name = "crm")
      : net_(std::move(net)), mode_(mode), name_(std::move(name)) {}
  std::string name() const override { return name_; }
  std::size_t act(const DialogueView& view, Rng& rng) const override {
    return select_action(net_->forward(view.state), rng, mode_).index;
  }
  std::optional<std::vector<double>> distribution(const DialogueView& view) const override { return net_->forward(view.state); }
  const PolicyNet& net() const noexcept { return *net_; }

 private:
  std::shared_ptr<const PolicyNet> net_;
  ActMode mode_;
  std::string name_;
};

/// Always takes the same action; used for the no-dialogue baseline and tests.
class FixedPolicy : public DialoguePolicy {
 public:
  FixedPolicy(std::size_t action, std::string name) : a_(action), name_(std::move(name)) {}
  std::string name() const override { return name_; }
  std::size_t act(const DialogueView&, Rng&) const override { return a_; }

 private:
  std::size_t a_;
  std::string name_;
};

class RandomPolicy : public DialoguePolicy {
 public:
  std::string name() const override { return "random"; }
  std::size_t act(const DialogueView& view, Rng& rng) const override { return rng.below(view.catalog.schema().size() + 1); }
};

// ---------------------------------------------------------------------------
// Environment and the episode loop

struct Environment {
  std::shared_ptr<const Catalog> catalog;
  std::shared_ptr<const TemplatePack> templates;
  std::shared_ptr<const BeliefTracker> tracker;
  std::shared_ptr<const FmModel> fm;
  RetrievalConfig retrieval;
  RewardConfig reward;
  UserConfig user;

  void check() const {
    if (!catalog || !templates || !tracker || !fm) throw EnvError("environment is missing a component");
    reward.validate();
    if (!(catalog->schema() == tracker->schema())) throw EnvError("tracker schema does not match the catalog");
    if (!(catalog->schema() == templates->schema())) throw EnvError("template schema does not match the catalog");
    fm->check_layout(*catalog);
    if (fm->layout().belief_dim != catalog->schema().state_dim())
      throw EnvError("recommender belief dimension " + std::to_string(fm->layout().belief_dim) + " does not match state dimension " +
                     std::to_string(catalog->schema().state_dim()));
  }
};

struct EpisodeTarget {
  std::size_t user = 0;
  std::size_t item = 0;
  friend bool operator==(const EpisodeTarget&, const EpisodeTarget&) = default;
};

inline std::vector<EpisodeTarget> targets_from(const Catalog& cat, const std::vector<std::size_t>& rating_indices) {
  std::vector<EpisodeTarget> out;
  out.reserve(rating_indices.size());
  for (std::size_t r : rating_indices) out.push_back({cat.ratings().at(r).user, cat.ratings().at(r).item});
  return out;
}

/// Targets whose full facet combination matches no other item.
inline std::vector<EpisodeTarget> unique_targets(const Catalog& cat, const std::vector<EpisodeTarget>& targets) {
  std::vector<EpisodeTarget> out;
  for (const auto& t : targets) {
    std::vector<FacetValue> all;
    const auto& vals = cat.item(t.item).values;
    for (std::size_t f = 0; f < vals.size(); ++f) all.push_back({f, vals[f]});
    if (cat.items_matching(all).size() == 1) out.push_back(t);
  }
  return out;
}

struct TraceTurn {
  std::string user_text;
  std::vector<FacetValue> informs;
  std::vector<std::size_t> belief_argmax;
  std::size_t action = 0;
  double reward = 0.0;
  std::size_t candidates = 0;  // list length on the recommendation turn
};

inline nlohmann::json trace_to_json(const std::vector<TraceTurn>& turns, const Episode& ep, const FacetSchema& schema) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& t : turns) {
    nlohmann::json beliefs = nlohmann::json::object();
    for (std::size_t f = 0; f < t.belief_argmax.size(); ++f) beliefs[schema.facet(f).name] = schema.value_name({f, t.belief_argmax[f]});
    rows.push_back({{"user", t.user_text},
                    {"belief", beliefs},
                    {"action", t.action == schema.size() ? std::string("recommend") : "request:" + schema.facet(t.action).name},
                    {"reward", t.reward}});
    if (t.action == schema.size()) rows.back()["candidates"] = t.candidates;
  }
  nlohmann::json j{{"outcome", to_string(ep.outcome)}, {"turns", rows}};
  if (ep.rank) j["rank"] = *ep.rank;
  return j;
}

/// One dialogue: the user opens, then each turn the tracker updates the
/// belief, the agent acts; recommend ends the episode with r_p or r_q,
/// request costs r_c unless the turn limit is hit (timeout, r_q).
inline Episode run_episode(const DialoguePolicy& agent, const Environment& env, const EpisodeTarget& target, std::uint64_t key,
                           Rng rng, std::vector<TraceTurn>* trace = nullptr) {
  const Catalog& cat = *env.catalog;
  const std::size_t L = cat.schema().size();
  const RewardConfig& rc = env.reward;
  SimulatedUser user(cat, *env.templates, target.user, target.item, rng.split(1), env.user);
  Rng agent_rng = rng.split(2);
  auto session = env.tracker->start(key);

  Episode ep;
  RuleState rule{std::vector<bool>(L, false), {}, 0, rc.max_turns};
  UserTurn turn = user.open();
  for (std::size_t t = 0;; ++t) {
    BeliefState belief = session->observe(turn);
    rule.known = user.informed();
    rule.known_values.clear();
    for (std::size_t f = 0; f < L; ++f)
      if (rule.known[f]) rule.known_values.push_back({f, belief.argmax(f)});
    rule.turn = t;
    std::vector<double> state = belief.flat();
    const std::size_t a = agent.act({cat, belief, state, rule}, agent_rng);
    if (a > L) throw EnvError("agent returned action " + std::to_string(a) + " outside [0, " + std::to_string(L) + "]");

    TraceTurn tt;
    if (trace) {
      tt.user_text = turn.text;
      tt.informs = turn.informs;
      for (std::size_t f = 0; f < L; ++f) tt.belief_argmax.push_back(belief.argmax(f));
      tt.action = a;
    }
    auto finish = [&](double r) {
      ep.steps.push_back({std::move(state), a, r});
      if (trace) {
        tt.reward = r;
        trace->push_back(std::move(tt));
      }
    };

    if (a == L) {
      auto ranked = recommend(*env.fm, target.user, belief, cat, env.retrieval);
      tt.candidates = ranked.size();
      Verdict v = user.examine(ranked, rc);
      ep.outcome = v.outcome;
      ep.rank = v.rank;
      finish(v.outcome == Outcome::success ? *success_reward(*v.rank, rc) : rc.r_q);
      return ep;
    }
    if (t >= rc.max_turns) {
      ep.outcome = Outcome::timeout;
      finish(rc.r_q);
      return ep;
    }
    finish(rc.r_c);
    turn = user.answer(a);
  }
}

// ---------------------------------------------------------------------------
// Metrics

struct Metrics {
  std::size_t episodes = 0;
  double R = 0.0;  // mean undiscounted return
  double T = 0.0;  // mean turns, the recommendation turn included
  double S = 0.0;  // percentages
  double W = 0.0;
  double L = 0.0;
  double timeout = 0.0;

  friend bool operator==(const Metrics&, const Metrics&) = default;
};

inline void to_json(nlohmann::json& j, const Metrics& m) {
  j = {{"episodes", m.episodes}, {"R", m.R}, {"T", m.T}, {"S", m.S}, {"W", m.W}, {"L", m.L}, {"timeout", m.timeout}};
}

/// Accumulates episodes in the order added, so sums are reproducible.
class MetricsAccumulator {
 public:
  void add(const Episode& ep) {
    double g = 0.0;
    for (const auto& s : ep.steps) g += s.reward;
    ret_ += g;
    turns_ += static_cast<double>(ep.steps.size());
    ++counts_[static_cast<std::size_t>(ep.outcome)];
    ++n_;
  }
  Metrics finish() const {
    if (n_ == 0) throw EnvError("metrics over zero episodes");
    const double n = static_cast<double>(n_);
    auto pct = [&](Outcome o) { return 100.0 * static_cast<double>(counts_[static_cast<std::size_t>(o)]) / n; };
    return {n_, ret_ / n, turns_ / n, pct(Outcome::success), pct(Outcome::wrong_quit), pct(Outcome::low_rank), pct(Outcome::timeout)};
  }

 private:
  std::size_t n_ = 0;
  double ret_ = 0.0, turns_ = 0.0;
  std::array<std::size_t, 4> counts_{};
};

struct EvalConfig {
  std::size_t episodes = 2000;
  std::uint64_t seed = 1;
  std::size_t workers = 1;
};

/// Episode i draws its target and all randomness from (seed, i) only, so the
/// result does not depend on the worker count.
inline std::vector<Episode> generate_episodes(const DialoguePolicy& agent, const Environment& env,
                                              const std::vector<EpisodeTarget>& targets, const EvalConfig& cfg) {
  env.check();
  if (cfg.episodes == 0) throw EnvError("evaluation needs at least one episode");
  if (targets.empty()) throw EnvError("evaluation needs at least one target pair");
  std::vector<Episode> out(cfg.episodes);
  const Rng root(cfg.seed);
  auto one = [&](std::size_t i) {
    Rng r = root.split(i);
    const EpisodeTarget& tgt = targets[r.below(targets.size())];
    out[i] = run_episode(agent, env, tgt, hash_combine(cfg.seed, i), r.split(7));
  };
  const std::size_t w = std::max<std::size_t>(1, std::min(cfg.workers, cfg.episodes));
  if (w == 1) {
    for (std::size_t i = 0; i < cfg.episodes; ++i) one(i);
    return out;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr error;
  std::mutex error_mu;
  std::vector<std::thread> pool;
  for (std::size_t k = 0; k < w; ++k)
    pool.emplace_back([&] {
      for (std::size_t i; (i = next.fetch_add(1)) < cfg.episodes;) {
        try {
          one(i);
        } catch (...) {
          std::lock_guard lock(error_mu);
          if (!error) error = std::current_exception();
          next = cfg.episodes;
        }
      }
    });
  for (auto& th : pool) th.join();
  if (error) std::rethrow_exception(error);
  return out;
}

inline Metrics summarize(const std::vector<Episode>& episodes) {
  MetricsAccumulator acc;
  for (const auto& e : episodes) acc.add(e);
  return acc.finish();
}

inline Metrics evaluate(const DialoguePolicy& agent, const Environment& env, const std::vector<EpisodeTarget>& targets,
                        const EvalConfig& cfg) {
  return summarize(generate_episodes(agent, env, targets, cfg));
}

// ---------------------------------------------------------------------------
// Sweeps

struct SweepPoint {
  double C = 40.0;
  std::size_t K = 30;
  std::optional<double> accuracy;  // nullopt: the base tracker
  RewardModel model = RewardModel::linear;
};

struct SweepGrid {
  std::vector<double> C{40.0};
  std::vector<std::size_t> K{30};
  std::vector<double> accuracies;  // empty: base tracker only
  std::vector<RewardModel> models{RewardModel::linear};

  std::vector<SweepPoint> points() const {
    if (C.empty() || K.empty() || models.empty()) throw EnvError("sweep grid has an empty axis");
    std::vector<std::optional<double>> accs;
    for (double a : accuracies) accs.emplace_back(a);
    if (accs.empty()) accs.emplace_back();
    std::vector<SweepPoint> out;
    for (RewardModel m : models)
      for (double c : C)
        for (std::size_t k : K)
          for (const auto& a : accs) out.push_back({c, k, a, m});
    return out;
  }
};

struct SweepRow {
  std::string policy;
  SweepPoint point;
  Metrics metrics;
};

/// Builds the environment for a grid point (including any degraded tracker).
using EnvFactory = std::function<Environment(const SweepPoint&)>;
/// Builds (possibly trains) a policy for a grid point's environment.
using PolicyFactory = std::function<std::shared_ptr<const DialoguePolicy>(const SweepPoint&, const Environment&)>;

struct SweepPolicy {
  std::string name;
  PolicyFactory make;
};

inline std::vector<SweepRow> sweep(const SweepGrid& grid, const EnvFactory& make_env, const std::vector<SweepPolicy>& policies,
                                   const std::vector<EpisodeTarget>& targets, const EvalConfig& eval) {
  if (policies.empty()) throw EnvError("sweep needs at least one policy");
  std::vector<SweepRow> rows;
  for (const auto& p : grid.points()) {
    Environment env = make_env(p);
    for (const auto& pol : policies) {
      auto agent = pol.make(p, env);
      rows.push_back({pol.name, p, evaluate(*agent, env, targets, eval)});
    }
  }
  return rows;
}

inline void write_csv(std::ostream& out, const std::vector<SweepRow>& rows) {
  out << "policy,model,C,K,acc,R,T,S,W,L,timeout\n";
  auto num = [](double v) {
    std::ostringstream s;
    s.precision(10);
    s << v;
    return s.str();
  };
  for (const auto& r : rows) {
    const auto& m = r.metrics;
    out << r.policy << ',' << to_string(r.point.model) << ',' << num(r.point.C) << ',' << r.point.K << ','
        << (r.point.accuracy ? num(*r.point.accuracy) : std::string()) << ',' << num(m.R) << ',' << num(m.T) << ',' << num(m.S)
        << ',' << num(m.W) << ',' << num(m.L) << ',' << num(m.timeout) << '\n';
  }
}

inline nlohmann::json rows_to_json(const std::vector<SweepRow>& rows) {
  nlohmann::json out = nlohmann::json::array();
  for (const auto& r : rows) {
    nlohmann::json j{{"policy", r.policy}, {"model", to_string(r.point.model)}, {"C", r.point.C}, {"K", r.point.K}};
    j["acc"] = r.point.accuracy ? nlohmann::json(*r.point.accuracy) : nlohmann::json(nullptr);
    j["metrics"] = r.metrics;
    out.push_back(std::move(j));
  }
  return out;
}

}  // namespace crs
