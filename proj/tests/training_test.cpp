#include "crs/training.hpp"

#include <gtest/gtest.h>

using namespace crs;
using nlohmann::json;

namespace {

struct Lab {
  LabWorld world;
  Environment env;
  std::vector<EpisodeTarget> train, dev, test;
};

const Lab& lab() {
  static const Lab l = [] {
    Lab out;
    out.world = build_world({});
    const auto& w = out.world;
    auto tracker = std::make_shared<const OracleTracker>(w.catalog->schema());
    FmTrainConfig fc;
    fc.epochs = 40;
    auto fm = std::make_shared<const FmModel>(train_recommender(*w.catalog, *tracker, w.train, w.dev, fc).model);
    out.env = Environment{w.catalog, w.templates, tracker, fm, {}, {}, {}};
    out.train = targets_from(*w.catalog, w.split.train);
    out.dev = targets_from(*w.catalog, w.split.dev);
    out.test = targets_from(*w.catalog, w.split.test);
    return out;
  }();
  return l;
}

RlConfig small_rl() {
  RlConfig rc;
  rc.epochs = 2;
  rc.episodes_per_epoch = 200;
  rc.batch_size = 50;
  rc.dev_episodes = 200;
  return rc;
}

}  // namespace

TEST(BuildWorld, IsDeterministic) {
  LabWorld a = build_world({}), b = build_world({});
  ASSERT_EQ(a.catalog->n_items(), b.catalog->n_items());
  for (std::size_t i = 0; i < a.catalog->n_items(); ++i) EXPECT_EQ(a.catalog->item(i).values, b.catalog->item(i).values);
  EXPECT_EQ(a.split.train, b.split.train);
  ASSERT_EQ(a.train.size(), b.train.size());
  ASSERT_EQ(a.train.size(), a.split.train.size());
  for (std::size_t i = 0; i < a.train.size(); i += 97) EXPECT_EQ(to_json(a.train[i], *a.catalog), to_json(b.train[i], *b.catalog));
}

TEST(Harvest, LabelsAreRuleActions) {
  const auto& L = lab();
  const auto labels = harvest_maxent_labels(L.env, L.train, {100, 3, 1});
  ASSERT_FALSE(labels.empty());
  const std::size_t n_actions = L.env.catalog->schema().size() + 1;
  std::size_t recommends = 0;
  for (const auto& s : labels) {
    ASSERT_LT(s.action, n_actions);
    EXPECT_EQ(s.state.size(), L.env.catalog->schema().state_dim());
    recommends += s.action == n_actions - 1;
  }
  EXPECT_EQ(recommends, 100u);  // one recommendation closes every episode
}

TEST(Pretrain, GreedyRolloutTracksTheRule) {
  const auto& L = lab();
  const auto tr = harvest_maxent_labels(L.env, L.train, {1000, 1, 1});
  const auto dv = harvest_maxent_labels(L.env, L.dev, {250, 2, 1});
  PolicyNet net(default_policy_arch(L.env.catalog->schema()), 3);
  const auto res = pretrain_policy(net, tr, dv, {});
  EXPECT_GT(res.best_accuracy, 0.95);
  const Metrics rule = evaluate(MaxEntPolicy{}, L.env, L.test, {1000, 9, 1});
  const Metrics imit = evaluate(NetPolicy(std::make_shared<const PolicyNet>(net), ActMode::greedy), L.env, L.test, {1000, 9, 1});
  EXPECT_GT(rule.R, 0.0);
  EXPECT_LE(std::abs(imit.R - rule.R), 0.15 * std::abs(rule.R)) << imit.R << " vs " << rule.R;
}

TEST(Reinforce, KeepsBestDevEpochAndLogs) {
  const auto& L = lab();
  PolicyNet start(default_policy_arch(L.env.catalog->schema()), 4);
  std::vector<json> rows;
  const auto res = train_reinforce(start, L.env, L.train, L.dev, small_rl(), [&](const RlEpoch& e) { rows.push_back(to_json_row(e)); });
  ASSERT_EQ(res.log.size(), 2u);
  ASSERT_EQ(rows.size(), 2u);
  for (const char* k : {"epoch", "avg_reward", "success_rate", "avg_turns", "dev_avg_reward", "dev_success_rate", "dev_avg_turns"})
    EXPECT_TRUE(rows[0].contains(k)) << k;
  EXPECT_EQ(res.log[0].train.episodes, 200u);
  for (const auto& e : res.log) EXPECT_LE(e.dev.R, res.best_dev.R);
  if (res.best_epoch == 0) {
    EXPECT_TRUE(res.policy.params() == start.params());
  } else {
    EXPECT_DOUBLE_EQ(res.log[res.best_epoch - 1].dev.R, res.best_dev.R);
  }
  // the kept policy reproduces its recorded dev score
  const EvalConfig dev_eval{200, hash_combine(small_rl().seed, 0xD5), 1};
  const Metrics again = evaluate(NetPolicy(std::make_shared<const PolicyNet>(res.policy), ActMode::greedy), L.env, L.dev, dev_eval);
  EXPECT_DOUBLE_EQ(again.R, res.best_dev.R);
}

TEST(Reinforce, IsReproducibleAcrossWorkers) {
  const auto& L = lab();
  PolicyNet start(default_policy_arch(L.env.catalog->schema()), 4);
  RlConfig a = small_rl(), b = small_rl();
  a.epochs = b.epochs = 1;
  b.workers = 3;
  const auto ra = train_reinforce(start, L.env, L.train, L.dev, a);
  const auto rb = train_reinforce(start, L.env, L.train, L.dev, b);
  EXPECT_TRUE(ra.policy.params() == rb.policy.params());
  EXPECT_EQ(ra.log[0].train.R, rb.log[0].train.R);
}

TEST(Reinforce, RejectsEmptyBatches) {
  const auto& L = lab();
  RlConfig rc = small_rl();
  rc.batch_size = 0;
  EXPECT_THROW(train_reinforce(PolicyNet(default_policy_arch(L.env.catalog->schema()), 1), L.env, L.train, L.dev, rc), PolicyError);
}
