#include "crs/pipeline.hpp"

#include <gtest/gtest.h>

#include "test_util.hpp"

using namespace crs;

namespace {

std::string error_code(const std::function<void()>& f) {
  try {
    f();
  } catch (const PipelineError& e) {
    return e.code();
  }
  return "";
}

/// Small enough to run every stage in a couple of seconds.
json tiny_config(const fs::path& dir) {
  return resolve_config(std::nullopt, {{"dir", dir.string()},
                                       {"tracker", {{"max_epochs", 3}}},
                                       {"fm", {{"epochs", 5}}},
                                       {"pretrain", {{"harvest_episodes", 200}, {"max_epochs", 5}}},
                                       {"rl", {{"epochs", 1}, {"episodes_per_epoch", 100}, {"batch_size", 50}, {"dev_episodes", 100}}},
                                       {"eval", {{"episodes", 200}}}});
}

}  // namespace

TEST(Config, FileThenFlags) {
  test_util::TempDir tmp;
  test_util::write_file(tmp / "c.json", R"({"seed": 5, "rl": {"epochs": 3}, "reward": {"model": "ndcg"}})");
  json cfg = resolve_config(tmp / "c.json", {{"seed", 9}});
  EXPECT_EQ(cfg["seed"], 9);
  EXPECT_EQ(cfg["rl"]["epochs"], 3);
  EXPECT_EQ(cfg["rl"]["batch_size"], 100);  // untouched default
  EXPECT_EQ(reward_config(cfg).model, RewardModel::ndcg);
  EXPECT_EQ(reward_config(cfg).C, 40.0);
}

TEST(Config, RejectsUnknownKeysAndBadFiles) {
  test_util::TempDir tmp;
  test_util::write_file(tmp / "a.json", R"({"rl": {"epoch": 3}})");
  test_util::write_file(tmp / "b.json", "[1, 2]");
  test_util::write_file(tmp / "c.json", "{oops");
  EXPECT_EQ(error_code([&] { resolve_config(tmp / "a.json", json::object()); }), "bad_config");
  EXPECT_EQ(error_code([&] { resolve_config(tmp / "b.json", json::object()); }), "bad_config");
  EXPECT_EQ(error_code([&] { resolve_config(tmp / "c.json", json::object()); }), "bad_config");
  EXPECT_EQ(error_code([&] { resolve_config(tmp / "none.json", json::object()); }), "bad_config");
  EXPECT_EQ(error_code([&] { resolve_config(std::nullopt, {{"bogus", 1}}); }), "bad_config");
  json bad_reward = resolve_config(std::nullopt, {{"reward", {{"K", 0}}}});
  EXPECT_THROW(reward_config(bad_reward), EnvError);
}

TEST(GenData, RerunGivesIdenticalBytes) {
  test_util::TempDir tmp;
  const json cfg = tiny_config(tmp / "nested" / "run");  // missing directories are created
  gen_data(cfg);
  const fs::path d = run_paths(cfg).data();
  std::map<std::string, std::string> first;
  for (const auto& e : fs::directory_iterator(d)) first[e.path().filename()] = test_util::read_file(e.path());
  EXPECT_EQ(first.size(), 8u);
  gen_data(cfg);
  for (const auto& [name, bytes] : first) EXPECT_EQ(test_util::read_file(d / name), bytes) << name;
}

TEST(GenData, LoadedWorldMatchesGenerated) {
  test_util::TempDir tmp;
  const json cfg = tiny_config(tmp.path());
  const json summary = gen_data(cfg);
  const LabWorld a = build_world(data_config(cfg));
  const LabWorld b = load_world(run_paths(cfg));
  EXPECT_EQ(summary["ratings"], a.catalog->ratings().size());
  ASSERT_EQ(a.catalog->ratings().size(), b.catalog->ratings().size());
  for (std::size_t r = 0; r < a.catalog->ratings().size(); ++r) {
    EXPECT_EQ(a.catalog->ratings()[r].user, b.catalog->ratings()[r].user);
    EXPECT_EQ(a.catalog->ratings()[r].item, b.catalog->ratings()[r].item);
    EXPECT_EQ(a.catalog->ratings()[r].value, b.catalog->ratings()[r].value);
  }
  EXPECT_EQ(a.split.test, b.split.test);
  ASSERT_EQ(a.dev.size(), b.dev.size());
  for (std::size_t i = 0; i < a.dev.size(); ++i) EXPECT_EQ(to_json(a.dev[i], *a.catalog), to_json(b.dev[i], *b.catalog));
}

TEST(Stages, EnforceOrder) {
  test_util::TempDir tmp;
  const json cfg = tiny_config(tmp.path());
  EXPECT_EQ(error_code([&] { train_tracker_stage(cfg); }), "missing_checkpoint");
  gen_data(cfg);
  EXPECT_EQ(error_code([&] { train_fm_stage(cfg); }), "missing_checkpoint");
  try {
    train_fm_stage(cfg);
  } catch (const PipelineError& e) {
    EXPECT_NE(std::string(e.what()).find("tracker.json"), std::string::npos);
  }
  EXPECT_EQ(error_code([&] { train_pretrain_stage(cfg); }), "missing_checkpoint");
  EXPECT_EQ(error_code([&] { eval_stage(cfg); }), "missing_checkpoint");
}

TEST(Stages, FullPipelineRuns) {
  test_util::TempDir tmp;
  const json cfg = tiny_config(tmp.path());
  const RunPaths paths = run_paths(cfg);
  gen_data(cfg);
  const json t = train_tracker_stage(cfg);
  EXPECT_TRUE(t.contains("dev_joint_accuracy"));
  EXPECT_EQ(t["hash"], file_hash(paths.checkpoint("tracker")));
  train_fm_stage(cfg);

  // REINFORCE refuses a random start unless asked
  EXPECT_EQ(error_code([&] { train_rl_stage(cfg, false); }), "missing_checkpoint");
  EXPECT_EQ(train_rl_stage(cfg, true)["start"], "random");
  fs::remove(paths.checkpoint("policy"));
  EXPECT_EQ(error_code([&] { make_policy("crm", load_world(paths).catalog->schema(), paths); }), "missing_checkpoint");

  train_pretrain_stage(cfg);
  const json rl = train_rl_stage(cfg, false);
  EXPECT_EQ(rl["start"], "pretrain");
  for (const char* stage : {"tracker", "fm", "pretrain", "rl"}) {
    const std::string log = test_util::read_file(paths.log(stage));
    ASSERT_FALSE(log.empty()) << stage;
    EXPECT_NO_THROW(json::parse(log.substr(0, log.find('\n')))) << stage;
  }

  json ecfg = cfg;
  ecfg["eval"]["policies"] = {"maxent@2", "maxent_full", "crm", "random", "recommend_first"};
  const auto rows = eval_stage(ecfg);
  ASSERT_EQ(rows.size(), 5u);
  for (const auto& r : rows) {
    EXPECT_EQ(r.metrics.episodes, 200u);
    EXPECT_NEAR(r.metrics.S + r.metrics.W + r.metrics.L + r.metrics.timeout, 100.0, 0.01);
  }
  EXPECT_DOUBLE_EQ(rows[4].metrics.T, 1.0);
  json ecfg4 = ecfg;
  ecfg4["workers"] = 4;
  const auto rows4 = eval_stage(ecfg4);
  for (std::size_t i = 0; i < rows.size(); ++i) EXPECT_EQ(rows[i].metrics.R, rows4[i].metrics.R);

  json scfg = cfg;
  scfg["sweep"]["K"] = {5, 30};
  scfg["sweep"]["models"] = {"linear", "cascade"};
  scfg["sweep"]["policies"] = {"maxent_full"};
  EXPECT_EQ(sweep_stage(scfg).size(), 4u);

  const ServiceModels m = service_models(cfg);
  EXPECT_EQ(m.checkpoints["policy"], file_hash(paths.checkpoint("policy")));
  EXPECT_TRUE(m.policies.count("crm"));
}

TEST(Policies, ByName) {
  test_util::TempDir tmp;
  const FacetSchema schema = FacetSchema::from_json(
      json::parse(R"({"facets":[{"name":"a","values":["x","y"]},{"name":"b","values":["u","v"]}]})"));
  const RunPaths paths{tmp.path()};
  EXPECT_EQ(make_policy("maxent_full", schema, paths)->name(), "maxent_full");
  EXPECT_EQ(make_policy("maxent@2", schema, paths)->name(), "maxent@2");
  EXPECT_EQ(make_policy("recommend_first", schema, paths)->name(), "recommend_first");
  EXPECT_EQ(make_policy("random", schema, paths)->name(), "random");
  for (const char* bad : {"maxent@0", "maxent@3", "maxent@x", "maxent@1x", "oracle", ""})
    EXPECT_EQ(error_code([&] { make_policy(bad, schema, paths); }), "unknown_policy") << bad;
}
