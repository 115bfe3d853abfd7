#pragma once

// Artifact layout and the stages behind the command-line driver.
//
//   <dir>/data/        schema.json items.jsonl ratings.jsonl split.json
//                      templates.jsonl train.jsonl dev.jsonl test.jsonl
//   <dir>/checkpoints/ tracker.json fm.json pretrain.json policy.json
//   <dir>/logs/        <stage>.jsonl

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "crs/checkpoint.hpp"
#include "crs/service.hpp"
#include "crs/training.hpp"

namespace crs {

namespace fs = std::filesystem;

/// Failure with a stable machine-readable code.
class PipelineError : public std::runtime_error {
 public:
  PipelineError(std::string code, const std::string& msg) : std::runtime_error(msg), code_(std::move(code)) {}
  const std::string& code() const noexcept { return code_; }

 private:
  std::string code_;
};

// ---------------------------------------------------------------------------
// Configuration

inline json default_run_config() {
  RewardConfig reward;
  return {
      {"dir", "run"},
      {"seed", 1},
      {"workers", 1},
      {"data",
       {{"n_users", 50},
        {"n_items", 200},
        {"ratings_per_user", 40},
        {"catalog_seed", 7},
        {"split", {0.8, 0.1, 0.1}},
        {"split_seed", 11},
        {"corpus_seed", 5},
        {"two_facet_opener", 0.2},
        {"typo_rate", 0.0},
        {"templates", (fs::path(CRS_DATA_DIR) / "templates.jsonl").string()}}},
      {"tracker", {{"hidden", 64}, {"max_epochs", 30}, {"patience", 3}, {"batch_size", 32}, {"learning_rate", 0.001}}},
      {"fm", {{"epochs", 200}, {"batch_size", 8}, {"learning_rate", 0.001}, {"l2", 1e-4}}},
      {"pretrain",
       {{"harvest_episodes", 2000}, {"max_epochs", 100}, {"patience", 5}, {"batch_size", 32}, {"learning_rate", 0.001}}},
      {"rl",
       {{"epochs", 20},
        {"episodes_per_epoch", 2000},
        {"batch_size", 100},
        {"learning_rate", 0.001},
        {"dev_episodes", 1000},
        {"baseline", true}}},
      {"reward", reward},
      {"retrieval", {{"mu", 3}, {"theta_known", 0.5}}},
      {"eval",
       {{"episodes", 2000},
        {"split", "test"},
        {"policies", {"maxent@1", "maxent@2", "maxent@3", "maxent@4", "maxent_full", "crm"}}}},
      {"sweep",
       {{"C", {40.0}},
        {"K", {30}},
        {"accuracy", json::array()},
        {"models", {"linear"}},
        {"policies", {"maxent_full", "crm"}},
        {"retrain", false}}},
      {"serve", {{"host", "127.0.0.1"}, {"port", 8080}, {"log", "study.jsonl"}, {"ttl_minutes", 30}, {"default_policy", "crm"}}},
  };
}

namespace detail {

inline void reject_unknown_keys(const json& user, const json& defaults, const std::string& where) {
  for (auto it = user.begin(); it != user.end(); ++it) {
    const std::string key = where.empty() ? it.key() : where + "." + it.key();
    if (!defaults.contains(it.key())) throw PipelineError("bad_config", "unknown config key '" + key + "'");
    const json& d = defaults.at(it.key());
    if (d.is_object()) {
      if (!it->is_object()) throw PipelineError("bad_config", "config key '" + key + "' must be an object");
      reject_unknown_keys(*it, d, key);
    }
  }
}

}  // namespace detail

/// Defaults, then the config file, then flag overrides (already in JSON form).
inline json resolve_config(const std::optional<fs::path>& file, const json& overrides) {
  json cfg = default_run_config();
  if (file) {
    json user;
    try {
      user = read_json_file(*file);
    } catch (const std::exception& e) {
      throw PipelineError("bad_config", e.what());
    }
    if (!user.is_object()) throw PipelineError("bad_config", file->string() + ": expected a JSON object");
    detail::reject_unknown_keys(user, cfg, "");
    cfg.merge_patch(user);
  }
  detail::reject_unknown_keys(overrides, cfg, "");
  cfg.merge_patch(overrides);
  return cfg;
}

struct RunPaths {
  fs::path dir;
  fs::path data() const { return dir / "data"; }
  fs::path checkpoint(const std::string& stage) const { return dir / "checkpoints" / (stage + ".json"); }
  fs::path log(const std::string& stage) const { return dir / "logs" / (stage + ".jsonl"); }
};

inline RunPaths run_paths(const json& cfg) { return {cfg.at("dir").get<std::string>()}; }

inline OptimizerConfig optimizer_from(const json& j, OptimizerKind kind) { return {kind, j.at("learning_rate").get<double>()}; }

inline DataConfig data_config(const json& cfg) {
  const json& d = cfg.at("data");
  DataConfig dc;
  dc.synthetic.n_users = d.at("n_users");
  dc.synthetic.n_items = d.at("n_items");
  dc.synthetic.rating.ratings_per_user = d.at("ratings_per_user");
  dc.synthetic.seed = d.at("catalog_seed");
  dc.split = d.at("split").get<std::array<double, 3>>();
  dc.split_seed = d.at("split_seed");
  dc.corpus_seed = d.at("corpus_seed");
  dc.corpus.two_facet_opener = d.at("two_facet_opener");
  dc.corpus.noise.typo_rate = d.at("typo_rate");
  dc.templates = d.at("templates").get<std::string>();
  return dc;
}

inline RewardConfig reward_config(const json& cfg) {
  RewardConfig r = cfg.at("reward").get<RewardConfig>();
  r.validate();
  return r;
}

inline RetrievalConfig retrieval_config(const json& cfg) {
  return {cfg.at("retrieval").at("mu").get<std::size_t>(), cfg.at("retrieval").at("theta_known").get<double>()};
}

// ---------------------------------------------------------------------------
// Artifacts

inline std::string file_hash(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw PipelineError("missing_file", "cannot read " + p.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(hash_string(ss.str())));
  return buf;
}

inline void require(const fs::path& p, const std::string& stage) {
  if (!fs::exists(p))
    throw PipelineError("missing_checkpoint", "missing " + p.string() + " (run '" + stage + "' first)");
}

class JsonlLog {
 public:
  explicit JsonlLog(const fs::path& p) {
    fs::create_directories(p.parent_path());
    out_.open(p, std::ios::binary | std::ios::trunc);
    if (!out_) throw PipelineError("io_error", "cannot write " + p.string());
  }
  void write(const json& row) { out_ << row.dump() << '\n' << std::flush; }

 private:
  std::ofstream out_;
};

/// Writes the world produced by the data config. Returns a summary.
inline json gen_data(const json& cfg) {
  const RunPaths paths = run_paths(cfg);
  const DataConfig dc = data_config(cfg);
  if (!fs::exists(dc.templates)) throw PipelineError("missing_file", "template file " + dc.templates.string() + " not found");
  const LabWorld w = build_world(dc);
  const fs::path d = paths.data();
  write_catalog(*w.catalog, d);
  write_json_file(d / "split.json", to_json(w.split));
  fs::copy_file(dc.templates, d / "templates.jsonl", fs::copy_options::overwrite_existing);
  write_corpus(w.train, *w.catalog, d / "train.jsonl");
  write_corpus(w.dev, *w.catalog, d / "dev.jsonl");
  write_corpus(w.test, *w.catalog, d / "test.jsonl");
  return {{"dir", d.string()},
          {"items", w.catalog->n_items()},
          {"users", w.catalog->n_users()},
          {"ratings", w.catalog->ratings().size()},
          {"train", w.train.size()},
          {"dev", w.dev.size()},
          {"test", w.test.size()}};
}

inline LabWorld load_world(const RunPaths& paths) {
  const fs::path d = paths.data();
  for (const char* f : {"schema.json", "items.jsonl", "ratings.jsonl", "split.json", "templates.jsonl", "train.jsonl", "dev.jsonl", "test.jsonl"})
    require(d / f, "gen-data");
  LabWorld w;
  w.catalog = std::make_shared<const Catalog>(load_catalog(d / "items.jsonl", d / "ratings.jsonl", d / "schema.json"));
  w.templates = std::make_shared<const TemplatePack>(load_templates(d / "templates.jsonl", w.catalog->schema()));
  w.split = split_from_json(read_json_file(d / "split.json"));
  w.train = read_corpus(d / "train.jsonl", *w.catalog);
  w.dev = read_corpus(d / "dev.jsonl", *w.catalog);
  w.test = read_corpus(d / "test.jsonl", *w.catalog);
  return w;
}

inline std::shared_ptr<const NeuralTracker> load_tracker(const RunPaths& paths) {
  require(paths.checkpoint("tracker"), "train tracker");
  auto m = std::make_shared<const TrackerModel>(TrackerModel::from_checkpoint(load_checkpoint(paths.checkpoint("tracker"))));
  return std::make_shared<const NeuralTracker>(m);
}

inline std::shared_ptr<const FmModel> load_fm(const RunPaths& paths) {
  require(paths.checkpoint("fm"), "train fm");
  return std::make_shared<const FmModel>(FmModel::from_checkpoint(load_checkpoint(paths.checkpoint("fm"))));
}

/// The dialogue environment from stored checkpoints.
inline Environment load_environment(const json& cfg, const LabWorld& w) {
  const RunPaths paths = run_paths(cfg);
  Environment env{w.catalog, w.templates, load_tracker(paths), load_fm(paths), retrieval_config(cfg), reward_config(cfg), {}};
  env.check();
  return env;
}

inline std::vector<EpisodeTarget> split_targets(const LabWorld& w, const std::string& name) {
  if (name == "train") return targets_from(*w.catalog, w.split.train);
  if (name == "dev") return targets_from(*w.catalog, w.split.dev);
  if (name == "test") return targets_from(*w.catalog, w.split.test);
  throw PipelineError("bad_config", "unknown split '" + name + "'");
}

// ---------------------------------------------------------------------------
// Training stages. Each writes a checkpoint and a JSONL log and returns a
// summary.

inline json train_tracker_stage(const json& cfg) {
  const RunPaths paths = run_paths(cfg);
  const LabWorld w = load_world(paths);
  const json& t = cfg.at("tracker");
  TrackerTrainConfig tc;
  tc.arch.hidden = t.at("hidden");
  tc.max_epochs = t.at("max_epochs");
  tc.patience = t.at("patience");
  tc.batch_size = t.at("batch_size");
  tc.optimizer = optimizer_from(t, OptimizerKind::adam);
  tc.seed = hash_combine(cfg.at("seed").get<std::uint64_t>(), 0x7A);
  JsonlLog log(paths.log("tracker"));
  auto res = train_tracker(w.catalog->schema(), w.train, w.dev, tc, [&](const TrackerEpoch& e) {
    log.write({{"epoch", e.epoch}, {"train_loss", e.train_loss}, {"dev_label_accuracy", e.dev.label}, {"dev_joint_accuracy", e.dev.joint}});
  });
  save_checkpoint(paths.checkpoint("tracker"), res.model->to_checkpoint());
  return {{"stage", "tracker"},
          {"epochs", res.log.size()},
          {"dev_label_accuracy", res.best_dev.label},
          {"dev_joint_accuracy", res.best_dev.joint},
          {"checkpoint", paths.checkpoint("tracker").string()},
          {"hash", file_hash(paths.checkpoint("tracker"))}};
}

inline json train_fm_stage(const json& cfg) {
  const RunPaths paths = run_paths(cfg);
  const LabWorld w = load_world(paths);
  auto tracker = load_tracker(paths);
  const json& f = cfg.at("fm");
  FmTrainConfig fc;
  fc.epochs = f.at("epochs");
  fc.batch_size = f.at("batch_size");
  fc.l2 = f.at("l2");
  fc.optimizer = optimizer_from(f, OptimizerKind::adam);
  fc.seed = hash_combine(cfg.at("seed").get<std::uint64_t>(), 0xF3);
  JsonlLog log(paths.log("fm"));
  const auto res = train_fm(*w.catalog, fm_examples(*tracker, w.train), fm_examples(*tracker, w.dev), fc,
                            [&](const FmEpoch& e) { log.write({{"epoch", e.epoch}, {"train_rmse", e.train_rmse}, {"dev_rmse", e.dev_rmse}}); });
  save_checkpoint(paths.checkpoint("fm"), res.model.to_checkpoint());
  return {{"stage", "fm"},
          {"epochs", res.log.size()},
          {"dev_rmse", res.log.empty() ? 0.0 : res.log.back().dev_rmse},
          {"test_rmse", fm_rmse(res.model, *w.catalog, fm_examples(*tracker, w.test))},
          {"checkpoint", paths.checkpoint("fm").string()},
          {"hash", file_hash(paths.checkpoint("fm"))}};
}

inline json train_pretrain_stage(const json& cfg) {
  const RunPaths paths = run_paths(cfg);
  const LabWorld w = load_world(paths);
  const Environment env = load_environment(cfg, w);
  const json& p = cfg.at("pretrain");
  const auto seed = cfg.at("seed").get<std::uint64_t>();
  const std::size_t workers = cfg.at("workers");
  const std::size_t n = p.at("harvest_episodes");
  const auto tr = harvest_maxent_labels(env, split_targets(w, "train"), {n, hash_combine(seed, 1), workers});
  const auto dv = harvest_maxent_labels(env, split_targets(w, "dev"), {std::max<std::size_t>(1, n / 4), hash_combine(seed, 2), workers});
  PretrainConfig pc;
  pc.max_epochs = p.at("max_epochs");
  pc.patience = p.at("patience");
  pc.batch_size = p.at("batch_size");
  pc.optimizer = optimizer_from(p, OptimizerKind::adam);
  pc.seed = hash_combine(seed, 4);
  PolicyNet net(default_policy_arch(w.catalog->schema()), hash_combine(seed, 3));
  const auto res = pretrain_policy(net, tr, dv, pc);
  JsonlLog log(paths.log("pretrain"));
  for (std::size_t e = 0; e < res.dev_accuracy.size(); ++e) log.write({{"epoch", e + 1}, {"dev_accuracy", res.dev_accuracy[e]}});
  save_checkpoint(paths.checkpoint("pretrain"), net.to_checkpoint());
  return {{"stage", "pretrain"},
          {"labeled_states", tr.size()},
          {"dev_accuracy", res.best_accuracy},
          {"checkpoint", paths.checkpoint("pretrain").string()},
          {"hash", file_hash(paths.checkpoint("pretrain"))}};
}

inline RlConfig rl_config(const json& cfg) {
  const json& r = cfg.at("rl");
  RlConfig rc;
  rc.epochs = r.at("epochs");
  rc.episodes_per_epoch = r.at("episodes_per_epoch");
  rc.batch_size = r.at("batch_size");
  rc.dev_episodes = r.at("dev_episodes");
  rc.optimizer = optimizer_from(r, OptimizerKind::rmsprop);
  rc.reinforce.baseline = r.at("baseline");
  rc.seed = hash_combine(cfg.at("seed").get<std::uint64_t>(), 5);
  rc.workers = cfg.at("workers");
  return rc;
}

inline json train_rl_stage(const json& cfg, bool allow_random_init) {
  const RunPaths paths = run_paths(cfg);
  const LabWorld w = load_world(paths);
  const Environment env = load_environment(cfg, w);
  PolicyNet net;
  std::string start = "pretrain";
  if (fs::exists(paths.checkpoint("pretrain"))) {
    net = PolicyNet::from_checkpoint(load_checkpoint(paths.checkpoint("pretrain")));
  } else if (allow_random_init) {
    net = PolicyNet(default_policy_arch(w.catalog->schema()), hash_combine(cfg.at("seed").get<std::uint64_t>(), 3));
    start = "random";
  } else {
    throw PipelineError("missing_checkpoint", "missing " + paths.checkpoint("pretrain").string() +
                                                  " (run 'train pretrain' first, or pass --allow-random-init)");
  }
  JsonlLog log(paths.log("rl"));
  const auto res = train_reinforce(net, env, split_targets(w, "train"), split_targets(w, "dev"), rl_config(cfg),
                                   [&](const RlEpoch& e) { log.write(to_json_row(e)); });
  save_checkpoint(paths.checkpoint("policy"), res.policy.to_checkpoint());
  return {{"stage", "rl"},
          {"start", start},
          {"best_epoch", res.best_epoch},
          {"dev", res.best_dev},
          {"checkpoint", paths.checkpoint("policy").string()},
          {"hash", file_hash(paths.checkpoint("policy"))}};
}

// ---------------------------------------------------------------------------
// Policies by name

inline std::shared_ptr<const PolicyNet> load_policy_net(const RunPaths& paths) {
  require(paths.checkpoint("policy"), "train rl");
  return std::make_shared<const PolicyNet>(PolicyNet::from_checkpoint(load_checkpoint(paths.checkpoint("policy"))));
}

/// maxent_full, maxent@k, crm, random, recommend_first.
inline std::shared_ptr<const DialoguePolicy> make_policy(const std::string& name, const FacetSchema& schema, const RunPaths& paths) {
  if (name == "maxent_full") return std::make_shared<MaxEntPolicy>();
  if (name.rfind("maxent@", 0) == 0) {
    std::size_t k = 0;
    try {
      std::size_t used = 0;
      k = std::stoul(name.substr(7), &used);
      if (used != name.size() - 7) k = 0;
    } catch (const std::exception&) {
    }
    if (k == 0 || k > schema.size()) throw PipelineError("unknown_policy", "bad policy '" + name + "': k must be in 1.." + std::to_string(schema.size()));
    return std::make_shared<MaxEntPolicy>(MaxEntVariant{k});
  }
  if (name == "crm") return std::make_shared<NetPolicy>(load_policy_net(paths), ActMode::greedy);
  if (name == "random") return std::make_shared<RandomPolicy>();
  if (name == "recommend_first") return std::make_shared<FixedPolicy>(schema.size(), "recommend_first");
  throw PipelineError("unknown_policy", "unknown policy '" + name + "'");
}

// ---------------------------------------------------------------------------
// Evaluation

inline std::vector<SweepRow> eval_stage(const json& cfg) {
  const RunPaths paths = run_paths(cfg);
  const LabWorld w = load_world(paths);
  const Environment env = load_environment(cfg, w);
  const json& e = cfg.at("eval");
  const auto names = e.at("policies").get<std::vector<std::string>>();
  if (names.empty()) throw PipelineError("bad_config", "no policies to evaluate");
  std::vector<std::shared_ptr<const DialoguePolicy>> pols;
  for (const auto& n : names) pols.push_back(make_policy(n, w.catalog->schema(), paths));
  const auto targets = split_targets(w, e.at("split"));
  const EvalConfig ec{e.at("episodes"), cfg.at("seed"), cfg.at("workers")};
  std::vector<SweepRow> rows;
  for (std::size_t i = 0; i < pols.size(); ++i)
    rows.push_back({names[i], {env.reward.C, env.reward.K, std::nullopt, env.reward.model}, evaluate(*pols[i], env, targets, ec)});
  return rows;
}

inline std::vector<SweepRow> sweep_stage(const json& cfg) {
  const RunPaths paths = run_paths(cfg);
  const LabWorld w = load_world(paths);
  const Environment base = load_environment(cfg, w);
  const json& s = cfg.at("sweep");
  SweepGrid grid;
  grid.C = s.at("C").get<std::vector<double>>();
  grid.K = s.at("K").get<std::vector<std::size_t>>();
  grid.accuracies = s.at("accuracy").get<std::vector<double>>();
  grid.models.clear();
  for (const auto& m : s.at("models")) grid.models.push_back(parse_reward_model(m.get<std::string>()));
  const auto seed = cfg.at("seed").get<std::uint64_t>();
  const bool retrain = s.at("retrain");

  std::map<double, std::shared_ptr<const BeliefTracker>> degraded;
  auto make_env = [&](const SweepPoint& p) {
    Environment env = base;
    env.reward.C = p.C;
    env.reward.K = p.K;
    env.reward.model = p.model;
    env.reward.validate();
    if (p.accuracy) {
      auto& t = degraded[*p.accuracy];
      if (!t) t = calibrate_degradation(base.tracker, w.dev, *p.accuracy, hash_combine(seed, 0xDE));
      env.tracker = t;
    }
    return env;
  };
  std::vector<SweepPolicy> pols;
  for (const auto& name : s.at("policies").get<std::vector<std::string>>()) {
    if (name == "crm" && retrain) {
      const auto train = split_targets(w, "train"), dev = split_targets(w, "dev");
      const json& p = cfg.at("pretrain");
      AgentConfig ac;
      ac.harvest_episodes = p.at("harvest_episodes");
      ac.pretrain.max_epochs = p.at("max_epochs");
      ac.pretrain.patience = p.at("patience");
      ac.pretrain.batch_size = p.at("batch_size");
      ac.pretrain.optimizer = optimizer_from(p, OptimizerKind::adam);
      ac.rl = rl_config(cfg);
      ac.seed = seed;
      pols.push_back({name, [train, dev, ac](const SweepPoint&, const Environment& env) -> std::shared_ptr<const DialoguePolicy> {
                        return std::make_shared<NetPolicy>(std::make_shared<const PolicyNet>(train_agent(env, train, dev, ac).rl.policy),
                                                           ActMode::greedy);
                      }});
    } else {
      auto pol = make_policy(name, w.catalog->schema(), paths);
      pols.push_back({name, [pol](const SweepPoint&, const Environment&) { return pol; }});
    }
  }
  const EvalConfig ec{cfg.at("eval").at("episodes"), seed, cfg.at("workers")};
  return sweep(grid, make_env, pols, split_targets(w, cfg.at("eval").at("split")), ec);
}

// ---------------------------------------------------------------------------
// Serving

/// Models for the chat service, plus the hashes of the checkpoints in use.
inline ServiceModels service_models(const json& cfg) {
  const RunPaths paths = run_paths(cfg);
  const LabWorld w = load_world(paths);
  const Environment env = load_environment(cfg, w);
  ServiceModels m;
  m.catalog = env.catalog;
  m.templates = env.templates;
  m.tracker = env.tracker;
  m.fm = env.fm;
  m.retrieval = env.retrieval;
  m.reward = env.reward;
  m.checkpoints = json::object();
  for (const char* stage : {"tracker", "fm"}) m.checkpoints[stage] = file_hash(paths.checkpoint(stage));
  for (const char* name : {"maxent_full", "random", "recommend_first"}) m.policies[name] = make_policy(name, w.catalog->schema(), paths);
  if (fs::exists(paths.checkpoint("policy"))) {
    m.policies["crm"] = make_policy("crm", w.catalog->schema(), paths);
    m.checkpoints["policy"] = file_hash(paths.checkpoint("policy"));
  }
  m.default_policy = cfg.at("serve").at("default_policy");
  if (!m.policies.count(m.default_policy)) {
    if (m.default_policy == "crm") require(paths.checkpoint("policy"), "train rl");
    throw PipelineError("unknown_policy", "default policy '" + m.default_policy + "' is not available");
  }
  m.study_targets = split_targets(w, "test");
  return m;
}

inline ServiceConfig service_config(const json& cfg) {
  const json& s = cfg.at("serve");
  ServiceConfig sc;
  sc.ttl = std::chrono::minutes(s.at("ttl_minutes").get<long>());
  const std::string log = s.at("log");
  if (!log.empty()) sc.log_path = run_paths(cfg).dir / log;
  sc.seed = cfg.at("seed");
  return sc;
}

}  // namespace crs
