// crs: data generation, staged training, evaluation, sweeps and the chat
// service. Summaries go to stdout as one JSON line; failures print one JSON
// line on stderr and exit nonzero.

#include <csignal>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "crs/pipeline.hpp"

using namespace crs;

namespace {

void fail(const std::string& code, const std::string& message) {
  std::string flat = message;
  for (char& c : flat)
    if (c == '\n' || c == '\r') c = ' ';
  std::cerr << json{{"error", {{"code", code}, {"message", flat}}}}.dump() << std::endl;
}

void emit_rows(const std::vector<SweepRow>& rows, const std::string& out, bool as_json) {
  std::ostringstream body;
  if (as_json)
    body << rows_to_json(rows).dump(2) << '\n';
  else
    write_csv(body, rows);
  if (out.empty() || out == "-") {
    std::cout << body.str() << std::flush;
    return;
  }
  const fs::path p(out);
  if (p.has_parent_path()) fs::create_directories(p.parent_path());
  std::ofstream f(p, std::ios::binary);
  if (!f) throw PipelineError("io_error", "cannot write " + out);
  f << body.str();
}

int serve(const json& cfg) {
  // block termination signals before any thread exists so sigwait sees them
  sigset_t sigs;
  sigemptyset(&sigs);
  sigaddset(&sigs, SIGINT);
  sigaddset(&sigs, SIGTERM);
  pthread_sigmask(SIG_BLOCK, &sigs, nullptr);

  auto svc = std::make_shared<ChatService>(service_models(cfg), service_config(cfg));
  HttpServer server(svc);
  const std::string host = cfg.at("serve").at("host");
  int port = 0;
  try {
    port = server.bind(host, cfg.at("serve").at("port"));
  } catch (const ServiceError& e) {
    throw PipelineError("bind_failed", e.what());
  }
  server.start();
  std::cout << json{{"event", "listening"}, {"host", host}, {"port", port}, {"checkpoints", svc->health().at("checkpoints")}}.dump()
            << std::endl;
  int sig = 0;
  sigwait(&sigs, &sig);
  server.stop();
  std::cout << json{{"event", "stopped"}, {"signal", sig}, {"sessions_logged", svc->log_rows().size()}}.dump() << std::endl;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Conversational recommender pipeline"};
  app.require_subcommand(1);

  std::optional<std::string> config_file, dir;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> workers;
  auto add_common = [&](CLI::App* sub) {
    sub->add_option("--config", config_file, "JSON config; flags override its values");
    sub->add_option("--dir", dir, "artifact directory (default: run)");
    sub->add_option("--seed", seed, "master seed");
    sub->add_option("--workers", workers, "evaluation threads; results do not depend on it")->check(CLI::PositiveNumber);
  };

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic catalog, split and dialogue corpus");
  add_common(gen);
  std::optional<std::size_t> n_items, n_users;
  gen->add_option("--items", n_items, "number of items");
  gen->add_option("--users", n_users, "number of users");

  auto* train = app.add_subcommand("train", "train one stage: tracker, fm, pretrain, rl");
  add_common(train);
  std::string stage;
  train->add_option("stage", stage, "stage to train")->required()->check(CLI::IsMember({"tracker", "fm", "pretrain", "rl"}));
  std::optional<std::size_t> epochs, episodes_per_epoch;
  bool allow_random_init = false;
  train->add_option("--epochs", epochs, "maximum epochs for the stage");
  train->add_option("--episodes-per-epoch", episodes_per_epoch, "REINFORCE episodes per epoch (rl)");
  train->add_flag("--allow-random-init", allow_random_init, "start REINFORCE from a random policy when no pretrain checkpoint exists");

  std::optional<std::vector<std::string>> policies;
  std::optional<std::size_t> episodes;
  std::optional<std::string> split_name, reward_model;
  std::optional<double> cost_c;
  std::optional<std::size_t> list_k;
  std::string out;
  bool as_json = false;

  auto* eval = app.add_subcommand("eval", "evaluate policies against the simulated user");
  add_common(eval);
  eval->add_option("--policies", policies, "maxent_full, maxent@k, crm, random, recommend_first")->delimiter(',');
  eval->add_option("--episodes", episodes, "episodes per policy");
  eval->add_option("--split", split_name, "target split")->check(CLI::IsMember({"train", "dev", "test"}));
  eval->add_option("--reward-model", reward_model, "linear, ndcg or cascade")->check(CLI::IsMember({"linear", "ndcg", "cascade"}));
  eval->add_option("--C", cost_c, "success reward scale");
  eval->add_option("--K", list_k, "recommendation list length");
  eval->add_option("--out", out, "output file (default: stdout)");
  eval->add_flag("--json", as_json, "JSON instead of CSV");

  auto* sw = app.add_subcommand("sweep", "evaluate policies over a grid of environment settings");
  add_common(sw);
  std::optional<std::vector<double>> grid_c, grid_acc;
  std::optional<std::vector<std::size_t>> grid_k;
  std::optional<std::vector<std::string>> grid_models;
  bool retrain = false;
  sw->add_option("--policies", policies, "policies to evaluate")->delimiter(',');
  sw->add_option("--C", grid_c, "values of C")->delimiter(',');
  sw->add_option("--K", grid_k, "values of K")->delimiter(',');
  sw->add_option("--accuracy", grid_acc, "tracker accuracy levels")->delimiter(',');
  sw->add_option("--models", grid_models, "reward models")->delimiter(',');
  sw->add_option("--episodes", episodes, "episodes per grid point and policy");
  sw->add_flag("--retrain", retrain, "retrain crm at every grid point");
  sw->add_option("--out", out, "output file (default: stdout)");
  sw->add_flag("--json", as_json, "JSON instead of CSV");

  auto* srv = app.add_subcommand("serve", "run the chat service");
  add_common(srv);
  std::optional<std::string> host, log_file, default_policy;
  std::optional<int> port;
  srv->add_option("--host", host, "bind address");
  srv->add_option("--port", port, "port; 0 picks a free one")->check(CLI::Range(0, 65535));
  srv->add_option("--log", log_file, "study log file, relative to the artifact directory");
  srv->add_option("--default-policy", default_policy, "policy for sessions that do not name one");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    fail("usage", e.what());
    return 2;
  }

  try {
    json o = json::object();
    if (dir) o["dir"] = *dir;
    if (seed) o["seed"] = *seed;
    if (workers) o["workers"] = *workers;
    if (n_items) o["data"]["n_items"] = *n_items;
    if (n_users) o["data"]["n_users"] = *n_users;
    if (epochs) {
      if (stage == "fm")
        o["fm"]["epochs"] = *epochs;
      else if (stage == "rl")
        o["rl"]["epochs"] = *epochs;
      else
        o[stage]["max_epochs"] = *epochs;
    }
    if (episodes_per_epoch) o["rl"]["episodes_per_epoch"] = *episodes_per_epoch;
    if (policies) o[eval->parsed() ? "eval" : "sweep"]["policies"] = *policies;
    if (episodes) o["eval"]["episodes"] = *episodes;
    if (split_name) o["eval"]["split"] = *split_name;
    if (reward_model) o["reward"]["model"] = *reward_model;
    if (cost_c) o["reward"]["C"] = *cost_c;
    if (list_k) o["reward"]["K"] = *list_k;
    if (grid_c) o["sweep"]["C"] = *grid_c;
    if (grid_k) o["sweep"]["K"] = *grid_k;
    if (grid_acc) o["sweep"]["accuracy"] = *grid_acc;
    if (grid_models) o["sweep"]["models"] = *grid_models;
    if (retrain) o["sweep"]["retrain"] = true;
    if (host) o["serve"]["host"] = *host;
    if (port) o["serve"]["port"] = *port;
    if (log_file) o["serve"]["log"] = *log_file;
    if (default_policy) o["serve"]["default_policy"] = *default_policy;
    const json cfg = resolve_config(config_file ? std::optional<fs::path>(*config_file) : std::nullopt, o);

    if (gen->parsed()) {
      std::cout << gen_data(cfg).dump() << std::endl;
    } else if (train->parsed()) {
      json summary;
      if (stage == "tracker")
        summary = train_tracker_stage(cfg);
      else if (stage == "fm")
        summary = train_fm_stage(cfg);
      else if (stage == "pretrain")
        summary = train_pretrain_stage(cfg);
      else
        summary = train_rl_stage(cfg, allow_random_init);
      std::cout << summary.dump() << std::endl;
    } else if (eval->parsed()) {
      emit_rows(eval_stage(cfg), out, as_json);
    } else if (sw->parsed()) {
      emit_rows(sweep_stage(cfg), out, as_json);
    } else if (srv->parsed()) {
      return serve(cfg);
    }
  } catch (const PipelineError& e) {
    fail(e.code(), e.what());
    return 1;
  } catch (const json::exception& e) {
    fail("bad_config", e.what());
    return 1;
  } catch (const std::exception& e) {
    fail("runtime", e.what());
    return 1;
  }
  return 0;
}
