#pragma once

// Dialogue managers: MaxEnt rule baselines, the policy network, imitation
// pretraining and REINFORCE.

#include <algorithm>
#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "crs/autodiff.hpp"
#include "crs/catalog.hpp"
#include "crs/checkpoint.hpp"
#include "crs/nlu.hpp"
#include "crs/ops.hpp"
#include "crs/optim.hpp"
#include "crs/rng.hpp"

namespace crs {

class PolicyError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Actions and episodes

/// request(f) has index f; recommend has index l.
struct Action {
  enum class Kind { request, recommend };
  Kind kind = Kind::recommend;
  std::size_t facet = 0;

  static Action request(std::size_t f) { return {Kind::request, f}; }
  static Action recommend() { return {Kind::recommend, 0}; }
  bool is_recommend() const noexcept { return kind == Kind::recommend; }

  std::size_t index(std::size_t n_facets) const {
    if (kind == Kind::recommend) return n_facets;
    if (facet >= n_facets) throw PolicyError("request action facet " + std::to_string(facet) + " out of range");
    return facet;
  }
  static Action from_index(std::size_t i, std::size_t n_facets) {
    if (i > n_facets) throw PolicyError("action index " + std::to_string(i) + " out of range [0, " + std::to_string(n_facets) + "]");
    return i == n_facets ? recommend() : request(i);
  }
  friend bool operator==(const Action&, const Action&) = default;
};

enum class Outcome { success, wrong_quit, low_rank, timeout };

inline const char* to_string(Outcome o) {
  switch (o) {
    case Outcome::success: return "success";
    case Outcome::wrong_quit: return "wrong_quit";
    case Outcome::low_rank: return "low_rank";
    case Outcome::timeout: return "timeout";
  }
  return "?";
}

struct Transition {
  std::vector<double> state;  // s_t
  std::size_t action = 0;     // index in [0, l]
  double reward = 0.0;
};

struct Episode {
  std::vector<Transition> steps;
  Outcome outcome = Outcome::timeout;
  std::optional<std::size_t> rank;  // tau of the target when it was listed
};

/// G_t = r_t + gamma * G_{t+1}.
inline std::vector<double> returns(const std::vector<double>& rewards, double gamma) {
  std::vector<double> g(rewards.size());
  double acc = 0.0;
  for (std::size_t t = rewards.size(); t-- > 0;) {
    acc = rewards[t] + gamma * acc;
    g[t] = acc;
  }
  return g;
}

inline std::vector<double> returns(const Episode& ep, double gamma) {
  std::vector<double> r;
  for (const auto& s : ep.steps) r.push_back(s.reward);
  return returns(r, gamma);
}

// ---------------------------------------------------------------------------
// MaxEnt rule policies

/// Entropy in bits of the facet's value distribution over the candidates.
inline double facet_entropy(const Catalog& cat, const std::vector<std::size_t>& candidates, std::size_t facet) {
  if (candidates.empty()) throw PolicyError("facet_entropy: empty candidate set");
  std::map<std::size_t, double> counts;
  for (std::size_t i : candidates) counts[cat.item(i).values.at(facet)] += 1.0;
  const double n = static_cast<double>(candidates.size());
  double h = 0.0;
  for (const auto& [v, c] : counts) {
    const double p = c / n;
    h -= p * std::log2(p);
  }
  return h;
}

/// What a rule policy sees: which facets the user has answered (tracked
/// symbolically by the dialogue loop), their values as read off the belief,
/// and the turn index.
struct RuleState {
  std::vector<bool> known;
  std::vector<FacetValue> known_values;
  std::size_t turn = 0;
  std::size_t max_turns = 7;
};

struct MaxEntVariant {
  /// nullopt = Full; otherwise ask exactly this many facets.
  std::optional<std::size_t> ask_limit;
};

inline Action maxent_action(const Catalog& cat, const RuleState& st, const MaxEntVariant& variant) {
  const std::size_t L = cat.schema().size();
  std::size_t asked = 0;
  for (bool k : st.known) asked += k;
  if (asked == L || st.turn >= st.max_turns) return Action::recommend();
  if (variant.ask_limit && asked >= *variant.ask_limit) return Action::recommend();
  const auto candidates = cat.items_matching(st.known_values);
  if (candidates.empty()) return Action::recommend();
  std::optional<std::size_t> best;
  double best_h = -1.0;
  for (std::size_t f = 0; f < L; ++f) {
    if (st.known[f]) continue;
    const double h = facet_entropy(cat, candidates, f);
    if (h > best_h) {
      best_h = h;
      best = f;
    }
  }
  return Action::request(*best);
}

// ---------------------------------------------------------------------------
// Policy network

struct PolicyArch {
  std::size_t input = 0;
  std::size_t hidden1 = 32;
  std::size_t hidden2 = 32;
  std::size_t actions = 0;  // l + 1
};

class PolicyNet {
 public:
  PolicyNet() = default;

  PolicyNet(PolicyArch arch, std::uint64_t seed) : arch_(arch) {
    if (arch.input == 0 || arch.actions < 2) throw PolicyError("policy net needs input > 0 and at least two actions");
    Rng rng(seed);
    params_.add("W1", Tensor::glorot(arch.input, arch.hidden1, rng));
    params_.add("b1", Tensor::zeros({1, arch.hidden1}));
    params_.add("W2", Tensor::glorot(arch.hidden1, arch.hidden2, rng));
    params_.add("b2", Tensor::zeros({1, arch.hidden2}));
    params_.add("W3", Tensor::glorot(arch.hidden2, arch.actions, rng));
    params_.add("b3", Tensor::zeros({1, arch.actions}));
  }

  const PolicyArch& arch() const noexcept { return arch_; }
  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }

  Tensor logits(const Tensor& states) const {
    if (states.cols() != arch_.input)
      throw DimensionError("policy: state dimension " + std::to_string(states.cols()) + ", expected " + std::to_string(arch_.input));
    Tensor h = ops::relu(ops::add(ops::matmul(states, params_.get("W1")), params_.get("b1")));
    h = ops::relu(ops::add(ops::matmul(h, params_.get("W2")), params_.get("b2")));
    return ops::add(ops::matmul(h, params_.get("W3")), params_.get("b3"));
  }

  std::vector<double> forward(std::span<const double> state) const {
    return ops::softmax(logits(Tensor::row({state.begin(), state.end()}))).data();
  }

  /// Logits on the tape for a [n, input] batch.
  Var logits(Tape& t, const ParameterSet& ps, const Tensor& states) const {
    if (states.cols() != arch_.input)
      throw DimensionError("policy: state dimension " + std::to_string(states.cols()) + ", expected " + std::to_string(arch_.input));
    Var h = t.relu(t.add(t.matmul(t.constant(states), t.param(ps, "W1")), t.param(ps, "b1")));
    h = t.relu(t.add(t.matmul(h, t.param(ps, "W2")), t.param(ps, "b2")));
    return t.add(t.matmul(h, t.param(ps, "W3")), t.param(ps, "b3"));
  }

  Checkpoint to_checkpoint() const {
    return make_checkpoint("policy", params_,
                           {{"input", arch_.input}, {"hidden1", arch_.hidden1}, {"hidden2", arch_.hidden2}, {"actions", arch_.actions}});
  }

  static PolicyNet from_checkpoint(const Checkpoint& ck) {
    if (ck.model_kind != "policy") throw PolicyError("expected a policy checkpoint, got '" + ck.model_kind + "'");
    PolicyArch a{ck.metadata.at("input").get<std::size_t>(), ck.metadata.at("hidden1").get<std::size_t>(),
                 ck.metadata.at("hidden2").get<std::size_t>(), ck.metadata.at("actions").get<std::size_t>()};
    PolicyNet net(a, 0);
    if (net.params_.names() != ck.parameters.names()) throw PolicyError("policy checkpoint parameters do not match its architecture");
    for (std::size_t i = 0; i < net.params_.size(); ++i)
      if (net.params_[i].shape() != ck.parameters[i].shape())
        throw PolicyError("policy checkpoint parameter " + ck.parameters.name(i) + " has the wrong shape");
    net.params_ = ck.parameters;
    return net;
  }

 private:
  PolicyArch arch_;
  ParameterSet params_;
};

enum class ActMode { sample, greedy };

struct SampledAction {
  std::size_t index = 0;
  double log_prob = 0.0;
};

/// Greedy ties go to the lowest index.
inline SampledAction select_action(const std::vector<double>& probs, Rng& rng, ActMode mode) {
  std::size_t a = 0;
  if (mode == ActMode::greedy) {
    for (std::size_t i = 1; i < probs.size(); ++i)
      if (probs[i] > probs[a]) a = i;
  } else {
    a = rng.categorical(probs);
  }
  return {a, std::log(probs[a])};
}

// ---------------------------------------------------------------------------
// Imitation pretraining

struct LabeledState {
  std::vector<double> state;
  std::size_t action = 0;
};

struct PretrainConfig {
  OptimizerConfig optimizer{OptimizerKind::adam, 0.001};
  std::size_t max_epochs = 100;
  std::size_t batch_size = 32;
  std::size_t patience = 5;
  std::uint64_t seed = 1;
};

struct PretrainResult {
  std::vector<double> dev_accuracy;  // per epoch
  double best_accuracy = 0.0;
};

inline double imitation_accuracy(const PolicyNet& net, const std::vector<LabeledState>& data) {
  if (data.empty()) return 0.0;
  double hit = 0.0;
  Rng unused(0);
  for (const auto& d : data) hit += select_action(net.forward(d.state), unused, ActMode::greedy).index == d.action;
  return hit / static_cast<double>(data.size());
}

inline Var imitation_loss(Tape& t, const PolicyNet& net, const ParameterSet& ps, const std::vector<const LabeledState*>& batch) {
  Tensor states = Tensor::zeros({batch.size(), net.arch().input});
  Tensor pick = Tensor::zeros({batch.size(), net.arch().actions});
  for (std::size_t i = 0; i < batch.size(); ++i) {
    std::copy(batch[i]->state.begin(), batch[i]->state.end(), states.row_span(i).begin());
    pick.at(i, batch[i]->action) = -1.0 / static_cast<double>(batch.size());
  }
  return t.sum(t.mul(t.log_softmax(net.logits(t, ps, states)), t.constant(std::move(pick))));
}

/// Cross-entropy on rule-policy labels; keeps the best dev epoch and stops
/// once dev accuracy has not improved for `patience` epochs.
inline PretrainResult pretrain_policy(PolicyNet& net, const std::vector<LabeledState>& train, const std::vector<LabeledState>& dev,
                                      const PretrainConfig& cfg) {
  if (train.empty()) throw PolicyError("pretrain_policy: no labeled states");
  cfg.optimizer.validate();
  const auto& eval_set = dev.empty() ? train : dev;
  Optimizer opt(cfg.optimizer);
  PretrainResult res;
  ParameterSet best = net.params();
  res.best_accuracy = imitation_accuracy(net, eval_set);
  std::size_t since = 0;
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const Rng root(cfg.seed);
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng rng = root.split(epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      std::vector<const LabeledState*> batch;
      for (std::size_t k = s; k < std::min(order.size(), s + cfg.batch_size); ++k) batch.push_back(&train[order[k]]);
      Tape t;
      Var loss = imitation_loss(t, net, net.params(), batch);
      opt.step(net.params(), t.backward(loss, net.params()));
    }
    const double acc = imitation_accuracy(net, eval_set);
    res.dev_accuracy.push_back(acc);
    if (acc > res.best_accuracy) {
      res.best_accuracy = acc;
      best = net.params();
      since = 0;
    } else if (++since >= cfg.patience) {
      break;
    }
  }
  net.params() = best;
  return res;
}

// ---------------------------------------------------------------------------
// REINFORCE

struct ReinforceConfig {
  double gamma = 0.95;
  /// Subtract the batch-mean return; false gives the plain estimator.
  bool baseline = true;
  double entropy_bonus = 0.0;
};

/// Mean that is exact when all values are equal.
inline double stable_mean(const std::vector<double>& xs) {
  if (xs.empty()) return 0.0;
  double s = 0.0;
  for (double x : xs) s += x - xs[0];
  return xs[0] + s / static_cast<double>(xs.size());
}

/// loss = -(1/B) sum_episodes sum_t gamma^t (G_t - b) log pi(a_t | s_t)
///        - entropy_bonus * mean_t H(pi(.|s_t))
inline Var reinforce_loss(Tape& t, const PolicyNet& net, const ParameterSet& ps, const std::vector<Episode>& batch,
                          const ReinforceConfig& cfg) {
  if (batch.empty()) throw PolicyError("reinforce: empty episode batch");
  std::vector<std::vector<double>> G;
  std::vector<double> all;
  std::size_t n = 0;
  for (const auto& ep : batch) {
    if (ep.steps.empty()) throw PolicyError("reinforce: episode without sampled actions");
    G.push_back(returns(ep, cfg.gamma));
    all.insert(all.end(), G.back().begin(), G.back().end());
    n += ep.steps.size();
  }
  const double b = cfg.baseline ? stable_mean(all) : 0.0;
  Tensor states = Tensor::zeros({n, net.arch().input});
  Tensor weights = Tensor::zeros({n, net.arch().actions});
  const double B = static_cast<double>(batch.size());
  std::size_t row = 0;
  for (std::size_t e = 0; e < batch.size(); ++e) {
    double discount = 1.0;
    for (std::size_t s = 0; s < batch[e].steps.size(); ++s, ++row) {
      const auto& step = batch[e].steps[s];
      if (step.state.size() != net.arch().input) throw DimensionError("reinforce: state dimension mismatch");
      std::copy(step.state.begin(), step.state.end(), states.row_span(row).begin());
      weights.at(row, step.action) = -discount * (G[e][s] - b) / B;
      discount *= cfg.gamma;
    }
  }
  Var logits = net.logits(t, ps, states);
  Var logp = t.log_softmax(logits);
  Var loss = t.sum(t.mul(logp, t.constant(std::move(weights))));
  if (cfg.entropy_bonus != 0.0) {
    Var neg_entropy = t.sum(t.mul(t.softmax(logits), logp));  // sum p log p = -H
    loss = t.add(loss, t.scale(neg_entropy, cfg.entropy_bonus / static_cast<double>(n)));
  }
  return loss;
}

/// One optimizer step on the batch; returns the loss value before the step.
inline double reinforce_update(PolicyNet& net, const std::vector<Episode>& batch, const ReinforceConfig& cfg, Optimizer& opt) {
  Tape t;
  Var loss = reinforce_loss(t, net, net.params(), batch, cfg);
  const double value = loss.value().item();
  opt.step(net.params(), t.backward(loss, net.params()));
  return value;
}

// ---------------------------------------------------------------------------
// Two-armed bandit sanity environment

struct BanditResult {
  double final_good_prob = 0.0;
  std::size_t episodes = 0;
};

/// One state, two actions; action `good` pays +1, the other -1.
inline BanditResult train_bandit(std::uint64_t seed, std::size_t episodes, std::size_t batch_size, const OptimizerConfig& ocfg,
                                 const ReinforceConfig& rcfg, std::size_t good = 0) {
  PolicyNet net({1, 32, 32, 2}, seed);
  Optimizer opt(ocfg);
  Rng rng = Rng(seed).split(0xBA4D17);
  const std::vector<double> state{1.0};
  std::size_t done = 0;
  while (done < episodes) {
    std::vector<Episode> batch;
    for (std::size_t k = 0; k < batch_size && done < episodes; ++k, ++done) {
      auto a = select_action(net.forward(state), rng, ActMode::sample);
      batch.push_back({{{state, a.index, a.index == good ? 1.0 : -1.0}}, Outcome::success, std::nullopt});
    }
    reinforce_update(net, batch, rcfg, opt);
  }
  return {net.forward(state)[good], done};
}

}  // namespace crs
