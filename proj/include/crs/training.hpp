#pragma once

// End-to-end training stages: data, tracker, recommender, imitation
// pretraining and REINFORCE against the simulated user.

#include <filesystem>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crs/catalog.hpp"
#include "crs/dialoggen.hpp"
#include "crs/env.hpp"
#include "crs/nlu.hpp"
#include "crs/policy.hpp"
#include "crs/recommender.hpp"

namespace crs {

// ---------------------------------------------------------------------------
// Data

struct DataConfig {
  SyntheticConfig synthetic;
  std::array<double, 3> split{0.8, 0.1, 0.1};
  std::uint64_t split_seed = 11;
  CorpusConfig corpus;
  std::uint64_t corpus_seed = 5;
  std::filesystem::path templates = std::filesystem::path(CRS_DATA_DIR) / "templates.jsonl";
};

struct LabWorld {
  std::shared_ptr<const Catalog> catalog;
  std::shared_ptr<const TemplatePack> templates;
  DatasetSplit split;
  std::vector<LabeledDialogue> train, dev, test;
};

inline LabWorld build_world(const DataConfig& cfg) {
  SyntheticConfig sc = cfg.synthetic;
  if (sc.facets.empty()) sc.facets = default_facet_specs();
  LabWorld w;
  w.catalog = std::make_shared<const Catalog>(generate_synthetic(sc).catalog);
  w.templates = std::make_shared<const TemplatePack>(load_templates(cfg.templates, w.catalog->schema()));
  w.split = split(*w.catalog, cfg.split, cfg.split_seed);
  w.train = generate_dialogue_corpus(*w.catalog, w.split.train, *w.templates, cfg.corpus, cfg.corpus_seed);
  w.dev = generate_dialogue_corpus(*w.catalog, w.split.dev, *w.templates, cfg.corpus, cfg.corpus_seed);
  w.test = generate_dialogue_corpus(*w.catalog, w.split.test, *w.templates, cfg.corpus, cfg.corpus_seed);
  return w;
}

// ---------------------------------------------------------------------------
// Recommender stage

inline FmTrainResult train_recommender(const Catalog& cat, const BeliefTracker& tracker, const std::vector<LabeledDialogue>& train,
                                       const std::vector<LabeledDialogue>& dev, const FmTrainConfig& cfg) {
  return train_fm(cat, fm_examples(tracker, train), fm_examples(tracker, dev), cfg);
}

// ---------------------------------------------------------------------------
// Policy stages

inline PolicyArch default_policy_arch(const FacetSchema& schema) { return {schema.state_dim(), 32, 32, schema.size() + 1}; }

/// (state, MaxEnt Full action) pairs from rule-policy rollouts.
inline std::vector<LabeledState> harvest_maxent_labels(const Environment& env, const std::vector<EpisodeTarget>& targets,
                                                       const EvalConfig& cfg) {
  std::vector<LabeledState> out;
  for (auto& ep : generate_episodes(MaxEntPolicy{}, env, targets, cfg))
    for (auto& s : ep.steps) out.push_back({std::move(s.state), s.action});
  return out;
}

struct RlConfig {
  OptimizerConfig optimizer{OptimizerKind::rmsprop, 0.001};
  std::size_t epochs = 20;
  std::size_t episodes_per_epoch = 2000;
  std::size_t batch_size = 100;
  ReinforceConfig reinforce;
  std::size_t dev_episodes = 1000;
  std::uint64_t seed = 1;
  std::size_t workers = 1;
};

struct RlEpoch {
  std::size_t epoch = 0;
  Metrics train;  // sampled rollouts of this epoch
  Metrics dev;    // greedy policy after the epoch
};

inline nlohmann::json to_json_row(const RlEpoch& e) {
  return {{"epoch", e.epoch},        {"avg_reward", e.train.R}, {"success_rate", e.train.S},
          {"avg_turns", e.train.T},  {"dev_avg_reward", e.dev.R}, {"dev_success_rate", e.dev.S},
          {"dev_avg_turns", e.dev.T}};
}

struct RlResult {
  PolicyNet policy;  // best greedy dev reward, epoch 0 (the starting net) included
  std::size_t best_epoch = 0;
  Metrics best_dev;
  std::vector<RlEpoch> log;
};

template <class OnEpoch>
RlResult train_reinforce(PolicyNet net, const Environment& env, const std::vector<EpisodeTarget>& train,
                         const std::vector<EpisodeTarget>& dev, const RlConfig& cfg, OnEpoch&& on_epoch) {
  cfg.optimizer.validate();
  if (cfg.batch_size == 0 || cfg.episodes_per_epoch == 0) throw PolicyError("REINFORCE needs positive batch and epoch sizes");
  const EvalConfig dev_eval{cfg.dev_episodes, hash_combine(cfg.seed, 0xD5), cfg.workers};
  auto greedy_dev = [&](const PolicyNet& n) {
    return evaluate(NetPolicy(std::make_shared<const PolicyNet>(n), ActMode::greedy), env, dev, dev_eval);
  };
  RlResult res{net, 0, greedy_dev(net), {}};
  Optimizer opt(cfg.optimizer);
  ReinforceConfig rc = cfg.reinforce;
  rc.gamma = env.reward.gamma;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    MetricsAccumulator train_m;
    for (std::size_t done = 0, b = 0; done < cfg.episodes_per_epoch; ++b) {
      const std::size_t n = std::min(cfg.batch_size, cfg.episodes_per_epoch - done);
      NetPolicy sampler(std::make_shared<const PolicyNet>(net), ActMode::sample);
      auto batch = generate_episodes(sampler, env, train, {n, hash_combine(hash_combine(cfg.seed, epoch), b), cfg.workers});
      for (const auto& ep : batch) train_m.add(ep);
      reinforce_update(net, batch, rc, opt);
      done += n;
    }
    RlEpoch row{epoch, train_m.finish(), greedy_dev(net)};
    res.log.push_back(row);
    on_epoch(row);
    if (row.dev.R > res.best_dev.R) {
      res.policy = net;
      res.best_epoch = epoch;
      res.best_dev = row.dev;
    }
  }
  return res;
}

inline RlResult train_reinforce(PolicyNet net, const Environment& env, const std::vector<EpisodeTarget>& train,
                                const std::vector<EpisodeTarget>& dev, const RlConfig& cfg) {
  return train_reinforce(std::move(net), env, train, dev, cfg, [](const RlEpoch&) {});
}

struct AgentConfig {
  std::size_t harvest_episodes = 2000;
  PretrainConfig pretrain;
  RlConfig rl;
  std::uint64_t seed = 1;
};

struct AgentResult {
  PolicyNet pretrained;
  PretrainResult pretrain;
  RlResult rl;
};

/// Pretrain on MaxEnt Full labels, then REINFORCE.
inline AgentResult train_agent(const Environment& env, const std::vector<EpisodeTarget>& train, const std::vector<EpisodeTarget>& dev,
                               const AgentConfig& cfg) {
  const auto tr = harvest_maxent_labels(env, train, {cfg.harvest_episodes, hash_combine(cfg.seed, 1), cfg.rl.workers});
  const auto dv = harvest_maxent_labels(env, dev, {std::max<std::size_t>(1, cfg.harvest_episodes / 4), hash_combine(cfg.seed, 2),
                                                   cfg.rl.workers});
  AgentResult out;
  out.pretrained = PolicyNet(default_policy_arch(env.catalog->schema()), hash_combine(cfg.seed, 3));
  PretrainConfig pc = cfg.pretrain;
  pc.seed = hash_combine(cfg.seed, 4);
  out.pretrain = pretrain_policy(out.pretrained, tr, dv, pc);
  RlConfig rc = cfg.rl;
  rc.seed = hash_combine(cfg.seed, 5);
  out.rl = train_reinforce(out.pretrained, env, train, dev, rc);
  return out;
}

}  // namespace crs
