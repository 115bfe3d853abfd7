#pragma once

// Session-based chat service: a person talks to a trained agent over
// REST/JSON. ChatService holds the logic; HttpServer maps it onto routes.

#include <chrono>
#include <ctime>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <thread>
#include <unordered_map>
#include <vector>

#include <httplib.h>
#include <nlohmann/json.hpp>

#include "crs/catalog.hpp"
#include "crs/dialoggen.hpp"
#include "crs/env.hpp"
#include "crs/nlu.hpp"
#include "crs/recommender.hpp"

namespace crs {

using nlohmann::json;

class ServiceError : public std::runtime_error {
 public:
  ServiceError(int status, std::string code, const std::string& message)
      : std::runtime_error(message), status_(status), code_(std::move(code)) {}
  int status() const noexcept { return status_; }
  const std::string& code() const noexcept { return code_; }

 private:
  int status_;
  std::string code_;
};

enum class SessionStatus { active, recommending, succeeded, failed };

inline const char* to_string(SessionStatus s) {
  switch (s) {
    case SessionStatus::active: return "active";
    case SessionStatus::recommending: return "recommending";
    case SessionStatus::succeeded: return "succeeded";
    case SessionStatus::failed: return "failed";
  }
  return "?";
}

struct ServiceModels {
  std::shared_ptr<const Catalog> catalog;
  std::shared_ptr<const TemplatePack> templates;
  std::shared_ptr<const BeliefTracker> tracker;
  std::shared_ptr<const FmModel> fm;
  RetrievalConfig retrieval;
  RewardConfig reward;
  std::map<std::string, std::shared_ptr<const DialoguePolicy>> policies;
  std::string default_policy = "crm";
  std::vector<EpisodeTarget> study_targets;  // held-out (user, item) pairs
  json checkpoints = json::object();         // name -> content hash, shown by /api/health
};

struct ServiceConfig {
  std::chrono::seconds ttl{30 * 60};
  std::filesystem::path log_path;  // JSONL study log; empty disables
  std::size_t max_selections = 3;
  std::uint64_t seed = 1;
};

/// Aggregates study-log rows into the offline metrics schema.
inline Metrics metrics_from_log(const std::vector<json>& rows) {
  MetricsAccumulator acc;
  for (const auto& r : rows) {
    Episode ep;
    const std::string o = r.at("outcome");
    ep.outcome = o == "success" ? Outcome::success : o == "low_rank" ? Outcome::low_rank : o == "timeout" ? Outcome::timeout : Outcome::wrong_quit;
    const std::size_t turns = r.at("turns");
    const double reward = r.at("reward");
    for (std::size_t t = 0; t < turns; ++t) ep.steps.push_back({{}, 0, t + 1 == turns ? reward : 0.0});
    acc.add(ep);
  }
  return acc.finish();
}

class ChatService {
 public:
  using Clock = std::function<std::chrono::system_clock::time_point()>;

  ChatService(ServiceModels models, ServiceConfig cfg, Clock clock = [] { return std::chrono::system_clock::now(); })
      : m_(std::move(models)), cfg_(std::move(cfg)), clock_(std::move(clock)) {
    if (!m_.catalog || !m_.templates || !m_.tracker || !m_.fm) throw ServiceError(500, "misconfigured", "service is missing a model");
    if (m_.policies.empty()) throw ServiceError(500, "misconfigured", "service has no policies");
    if (!m_.policies.count(m_.default_policy)) m_.default_policy = m_.policies.begin()->first;
    m_.reward.validate();
  }

  json health() const {
    json pols = json::array();
    for (const auto& [name, p] : m_.policies) pols.push_back(name);
    std::lock_guard lock(store_mu_);
    return {{"status", "ok"}, {"policies", pols}, {"sessions", sessions_.size()}, {"checkpoints", m_.checkpoints}};
  }

  /// {policy?, study_mode? (default true), seed?, user_id?}
  json create(const json& body) {
    const json req = body.is_null() ? json::object() : body;
    if (!req.is_object()) throw ServiceError(400, "bad_request", "expected a JSON object");
    const std::string policy = req.value("policy", m_.default_policy);
    if (!m_.policies.count(policy)) throw ServiceError(400, "unknown_policy", "unknown policy '" + policy + "'");
    const bool study = req.value("study_mode", true);
    const Catalog& cat = *m_.catalog;

    auto s = std::make_shared<Session>();
    {
      std::lock_guard lock(store_mu_);
      evict_locked();
      const std::uint64_t n = counter_++;
      s->seed = req.contains("seed") ? req.at("seed").get<std::uint64_t>() : hash_combine(cfg_.seed, n);
      do s->id = hex(hash_combine(hash_combine(cfg_.seed, 0x5E55), n + salt_++));
      while (sessions_.count(s->id));
    }
    Rng rng(s->seed);
    if (study) {
      if (m_.study_targets.empty()) throw ServiceError(400, "no_study_targets", "study mode needs held-out targets");
      const auto& t = m_.study_targets[rng.below(m_.study_targets.size())];
      s->user = t.user;
      s->target = t.item;
    } else if (req.contains("user_id")) {
      auto u = cat.find_user(req.at("user_id").get<std::string>());
      if (!u) throw ServiceError(400, "unknown_user", "unknown user_id");
      s->user = *u;
    } else {
      s->user = rng.below(cat.n_users());
    }
    s->policy_name = policy;
    s->policy = m_.policies.at(policy);
    s->rng = rng.split(1);
    s->tracking = m_.tracker->start(s->seed);
    s->belief = BeliefState::uniform(cat.schema());
    s->asked.assign(cat.schema().size(), false);
    s->created = s->touched = clock_();
    s->history.push_back({{"role", "agent"}, {"text", kGreeting}});

    json out = describe(*s);
    if (s->target) out["target"] = item_card(*s->target);
    json visited = json::array();
    for (std::size_t r : cat.ratings_of(s->user)) {
      const auto& rt = cat.ratings()[r];
      if (s->target && rt.item == *s->target) continue;
      json card = item_card(rt.item);
      card["rating"] = rt.value;
      visited.push_back(std::move(card));
    }
    out["visited"] = std::move(visited);
    out["greeting"] = kGreeting;
    {
      std::lock_guard lock(store_mu_);
      sessions_[s->id] = s;
    }
    return out;
  }

  /// {text}
  json message(const std::string& id, const json& req) {
    if (!req.contains("text") || !req.at("text").is_string() || req.at("text").get<std::string>().empty())
      throw ServiceError(400, "bad_request", "message needs a non-empty 'text'");
    const std::string text = req.at("text");
    auto s = find(id);
    std::lock_guard lock(s->mu);
    if (s->status == SessionStatus::recommending) throw ServiceError(409, "awaiting_selection", "session is waiting for a selection");
    if (s->status != SessionStatus::active) throw ServiceError(409, "session_closed", "session is closed");
    s->touched = clock_();

    const Catalog& cat = *m_.catalog;
    const std::size_t L = cat.schema().size();
    s->history.push_back({{"role", "user"}, {"text", text}});
    s->belief = s->tracking->observe({text, {}});

    RuleState rule{std::vector<bool>(L, false), {}, s->questions, m_.reward.max_turns};
    for (std::size_t f = 0; f < L; ++f) {
      rule.known[f] = s->asked[f] || s->belief.max_prob(f) >= m_.retrieval.theta_known;
      if (rule.known[f]) rule.known_values.push_back({f, s->belief.argmax(f)});
    }
    const std::vector<double> state = s->belief.flat();
    const DialogueView view{cat, s->belief, state, rule};
    std::size_t a = s->policy->act(view, s->rng);
    auto probs = s->policy->distribution(view);
    if (a < L && s->questions >= m_.reward.max_turns) a = L;  // out of questions

    json reply;
    if (a < L) {
      s->asked[a] = true;
      ++s->questions;
      const std::string q = agent_text(DialogueAct::request(a), *s);
      s->history.push_back({{"role", "agent"}, {"text", q}, {"facet", cat.schema().facet(a).name}});
      reply = {{"kind", "question"}, {"facet", cat.schema().facet(a).name}, {"text", q}};
    } else {
      auto ranked = recommend(*m_.fm, s->user, s->belief, cat, m_.retrieval);
      if (ranked.size() > m_.reward.K) ranked.resize(m_.reward.K);
      s->shown = ranked;
      s->status = SessionStatus::recommending;
      const std::string t = agent_text(DialogueAct::recommend(), *s);
      s->history.push_back({{"role", "agent"}, {"text", t}});
      reply = {{"kind", "recommendations"}, {"text", t}, {"items", cards(ranked)}};
    }
    json action_probs = json::object();
    if (probs)
      for (std::size_t i = 0; i <= L; ++i) action_probs[i == L ? "recommend" : cat.schema().facet(i).name] = (*probs)[i];
    reply["debug"] = {{"belief", belief_json(s->belief)}, {"action_probs", action_probs}};
    reply["session"] = describe(*s);
    return reply;
  }

  /// {item_id} or {none_found: true}
  json select(const std::string& id, const json& req) {
    auto s = find(id);
    std::lock_guard lock(s->mu);
    if (s->status != SessionStatus::recommending) throw ServiceError(409, "not_recommending", "no recommendation list to select from");
    s->touched = clock_();
    const Catalog& cat = *m_.catalog;
    auto target_rank = [&]() -> std::optional<std::size_t> {
      if (!s->target) return std::nullopt;
      for (std::size_t i = 0; i < s->shown.size(); ++i)
        if (s->shown[i].item == *s->target) return i + 1;
      return std::nullopt;
    };

    if (req.value("none_found", false)) {
      close(*s, false, target_rank() ? "low_rank" : "wrong_quit", std::nullopt);
      return outcome_json(*s);
    }
    if (!req.contains("item_id") || !req.at("item_id").is_string())
      throw ServiceError(400, "bad_request", "select needs 'item_id' or 'none_found'");
    auto item = cat.find_item(req.at("item_id").get<std::string>());
    std::optional<std::size_t> rank;
    for (std::size_t i = 0; item && i < s->shown.size(); ++i)
      if (s->shown[i].item == *item) rank = i + 1;
    if (!rank) throw ServiceError(400, "item_not_shown", "item is not in the recommendation list");
    ++s->selections;
    s->history.push_back({{"role", "user"}, {"selected", cat.item(*item).id}});
    if (!s->target || *item == *s->target) {
      close(*s, true, "success", rank);
    } else if (s->selections >= cfg_.max_selections) {
      close(*s, false, target_rank() ? "low_rank" : "wrong_quit", std::nullopt);
    } else {
      json out = outcome_json(*s);
      out["outcome"] = "not_target";
      out["remaining_selections"] = cfg_.max_selections - s->selections;
      return out;
    }
    return outcome_json(*s);
  }

  json get(const std::string& id) {
    auto s = find(id);
    std::lock_guard lock(s->mu);
    s->touched = clock_();
    json out = describe(*s);
    out["history"] = s->history;
    out["belief"] = belief_json(s->belief);
    if (!s->shown.empty()) out["items"] = cards(s->shown);
    if (s->log_row) out["outcome"] = *s->log_row;
    return out;
  }

  /// Drops sessions idle for longer than the TTL; returns how many.
  std::size_t evict_expired() {
    std::lock_guard lock(store_mu_);
    return evict_locked();
  }

  std::size_t session_count() const {
    std::lock_guard lock(store_mu_);
    return sessions_.size();
  }

  std::vector<json> log_rows() const {
    std::lock_guard lock(log_mu_);
    return log_;
  }

 private:
  static constexpr const char* kGreeting = "Hi! What are you looking for today?";

  struct Session {
    std::mutex mu;
    std::string id;
    std::string policy_name;
    std::shared_ptr<const DialoguePolicy> policy;
    std::uint64_t seed = 0;
    std::size_t user = 0;
    std::optional<std::size_t> target;
    Rng rng;
    std::unique_ptr<TrackingSession> tracking;
    BeliefState belief;
    std::vector<bool> asked;
    std::size_t questions = 0;
    std::size_t selections = 0;
    std::vector<ScoredItem> shown;
    SessionStatus status = SessionStatus::active;
    json history = json::array();
    std::optional<json> log_row;
    std::chrono::system_clock::time_point created, touched;
  };

  static std::string hex(std::uint64_t v) {
    static const char* d = "0123456789abcdef";
    std::string s(16, '0');
    for (int i = 15; i >= 0; --i, v >>= 4) s[static_cast<std::size_t>(i)] = d[v & 15];
    return s;
  }

  static std::string iso(std::chrono::system_clock::time_point t) {
    const std::time_t tt = std::chrono::system_clock::to_time_t(t);
    std::tm tm{};
    gmtime_r(&tt, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
  }

  std::size_t evict_locked() {
    const auto now = clock_();
    std::size_t n = 0;
    for (auto it = sessions_.begin(); it != sessions_.end();) {
      std::unique_lock slock(it->second->mu, std::try_to_lock);
      if (slock.owns_lock() && now - it->second->touched > cfg_.ttl) {
        slock.unlock();
        it = sessions_.erase(it);
        ++n;
      } else {
        ++it;
      }
    }
    return n;
  }

  std::shared_ptr<Session> find(const std::string& id) {
    std::lock_guard lock(store_mu_);
    evict_locked();
    auto it = sessions_.find(id);
    if (it == sessions_.end()) throw ServiceError(404, "unknown_session", "no session '" + id + "'");
    return it->second;
  }

  std::string agent_text(const DialogueAct& act, Session& s) const {
    if (!m_.templates->matching(act).empty()) return realize(act, *m_.templates, s.rng).text;
    if (act.kind == ActKind::request) return "Which " + m_.catalog->schema().facet(act.slots.at(0).facet).name + " would you like?";
    return "Here are my recommendations.";
  }

  json item_card(std::size_t item) const {
    const Catalog& cat = *m_.catalog;
    json facets = json::object();
    for (std::size_t f = 0; f < cat.schema().size(); ++f)
      facets[cat.schema().facet(f).name] = cat.schema().value_name({f, cat.item(item).values[f]});
    return {{"item_id", cat.item(item).id}, {"facets", facets}};
  }

  json cards(const std::vector<ScoredItem>& list) const {
    json out = json::array();
    for (std::size_t i = 0; i < list.size(); ++i) {
      json c = item_card(list[i].item);
      c["rank"] = i + 1;
      c["score"] = list[i].score;
      out.push_back(std::move(c));
    }
    return out;
  }

  json belief_json(const BeliefState& b) const {
    const FacetSchema& schema = m_.catalog->schema();
    json out = json::object();
    for (std::size_t f = 0; f < b.size(); ++f) {
      json block = json::object();
      for (std::size_t v = 0; v < b.blocks[f].size(); ++v) block[schema.value_name({f, v})] = b.blocks[f][v];
      out[schema.facet(f).name] = std::move(block);
    }
    return out;
  }

  json describe(const Session& s) const {
    return {{"session_id", s.id},
            {"policy", s.policy_name},
            {"study_mode", s.target.has_value()},
            {"user_id", m_.catalog->users()[s.user]},
            {"status", to_string(s.status)},
            {"turn", s.questions}};
  }

  json outcome_json(const Session& s) const {
    json out = describe(s);
    if (s.log_row) {
      out["outcome"] = s.log_row->at("outcome");
      out["tau"] = s.log_row->at("tau");
      out["reward"] = s.log_row->at("reward");
    }
    return out;
  }

  void close(Session& s, bool success, const std::string& outcome, std::optional<std::size_t> tau) {
    s.status = success ? SessionStatus::succeeded : SessionStatus::failed;
    std::optional<double> rp = success && tau ? success_reward(*tau, m_.reward) : std::nullopt;
    const double reward = m_.reward.r_c * static_cast<double>(s.questions) + (rp ? *rp : m_.reward.r_q);
    json row{{"session_id", s.id},
             {"policy", s.policy_name},
             {"user_id", m_.catalog->users()[s.user]},
             {"target", s.target ? json(m_.catalog->item(*s.target).id) : json(nullptr)},
             {"turns", s.questions + 1},
             {"outcome", outcome},
             {"tau", tau ? json(*tau) : json(nullptr)},
             {"reward", reward},
             {"history", s.history},
             {"created", iso(s.created)},
             {"closed", iso(clock_())}};
    s.log_row = row;
    std::lock_guard lock(log_mu_);
    log_.push_back(row);
    if (!cfg_.log_path.empty()) {
      std::ofstream out(cfg_.log_path, std::ios::app);
      out << row.dump() << '\n';
    }
  }

  ServiceModels m_;
  ServiceConfig cfg_;
  Clock clock_;
  mutable std::mutex store_mu_;
  std::unordered_map<std::string, std::shared_ptr<Session>> sessions_;
  std::uint64_t counter_ = 0, salt_ = 0;
  mutable std::mutex log_mu_;
  std::vector<json> log_;
};

// ---------------------------------------------------------------------------
// HTTP

class HttpServer {
 public:
  explicit HttpServer(std::shared_ptr<ChatService> service) : svc_(std::move(service)) { routes(); }
  ~HttpServer() { stop(); }
  HttpServer(const HttpServer&) = delete;
  HttpServer& operator=(const HttpServer&) = delete;

  /// Binds and returns the port; port 0 picks a free one.
  int bind(const std::string& host, int port) {
    if (port == 0) {
      port_ = server_.bind_to_any_port(host);
      if (port_ < 0) throw ServiceError(500, "bind_failed", "cannot bind " + host);
    } else {
      if (!server_.bind_to_port(host, port)) throw ServiceError(500, "bind_failed", "cannot bind " + host + ":" + std::to_string(port));
      port_ = port;
    }
    return port_;
  }

  /// Serves on a background thread.
  void start() {
    thread_ = std::thread([this] { server_.listen_after_bind(); });
    server_.wait_until_ready();
  }

  /// Serves on the calling thread until stop().
  void run() { server_.listen_after_bind(); }

  void stop() {
    server_.stop();
    if (thread_.joinable()) thread_.join();
  }

  int port() const noexcept { return port_; }

 private:
  template <class F>
  static void handle(httplib::Response& res, F&& f) {
    try {
      res.set_content(f().dump(), "application/json");
      res.status = 200;
    } catch (const ServiceError& e) {
      res.status = e.status();
      res.set_content(json{{"error", {{"code", e.code()}, {"message", e.what()}}}}.dump(), "application/json");
    } catch (const json::exception& e) {
      res.status = 400;
      res.set_content(json{{"error", {{"code", "bad_request"}, {"message", e.what()}}}}.dump(), "application/json");
    } catch (const std::exception& e) {
      res.status = 500;
      res.set_content(json{{"error", {{"code", "internal"}, {"message", e.what()}}}}.dump(), "application/json");
    }
  }

  static json body(const httplib::Request& req) { return req.body.empty() ? json::object() : json::parse(req.body); }

  void routes() {
    // SO_REUSEADDR only: a port held by another server must fail to bind
    server_.set_socket_options([](socket_t sock) {
      int yes = 1;
      setsockopt(sock, SOL_SOCKET, SO_REUSEADDR, reinterpret_cast<const void*>(&yes), sizeof(yes));
    });
    server_.Get("/api/health", [this](const httplib::Request&, httplib::Response& res) { handle(res, [&] { return svc_->health(); }); });
    server_.Post("/api/session", [this](const httplib::Request& req, httplib::Response& res) {
      handle(res, [&] { return svc_->create(body(req)); });
    });
    server_.Post(R"(/api/session/([^/]+)/message)", [this](const httplib::Request& req, httplib::Response& res) {
      handle(res, [&] { return svc_->message(req.matches[1], body(req)); });
    });
    server_.Post(R"(/api/session/([^/]+)/select)", [this](const httplib::Request& req, httplib::Response& res) {
      handle(res, [&] { return svc_->select(req.matches[1], body(req)); });
    });
    server_.Get(R"(/api/session/([^/]+))", [this](const httplib::Request& req, httplib::Response& res) {
      handle(res, [&] { return svc_->get(req.matches[1]); });
    });
  }

  std::shared_ptr<ChatService> svc_;
  httplib::Server server_;
  std::thread thread_;
  int port_ = -1;
};

}  // namespace crs
