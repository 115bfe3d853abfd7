#include "crs/service.hpp"

#include <gtest/gtest.h>

#include <atomic>
#include <thread>

#include "service_fixture.hpp"
#include "test_util.hpp"

using namespace crs;

namespace {

using test_util::answer_for;
using test_util::opener_for;

const test_util::ServiceLab& lab() {
  static const auto l = test_util::make_service_lab();
  return l;
}

std::size_t target_index(const Catalog& cat, const json& created) {
  return *cat.find_item(created.at("target").at("item_id").get<std::string>());
}

int error_status(const std::function<void()>& f) {
  try {
    f();
  } catch (const ServiceError& e) {
    return e.status();
  }
  return 0;
}

}  // namespace

TEST(ChatService, ScriptedSessionReachesSuccess) {
  const auto& L = lab();
  const Catalog& cat = *L.models.catalog;
  ChatService svc(L.models, {});
  json s = svc.create({{"policy", "scripted"}, {"seed", 42}});
  ASSERT_TRUE(s.contains("target"));
  EXPECT_EQ(s["status"], "active");
  EXPECT_FALSE(s["visited"].empty());
  const std::string id = s["session_id"];
  const std::size_t item = target_index(cat, s);
  Rng rng(3);

  json r = svc.message(id, {{"text", opener_for(cat, *L.models.templates, item, rng)}});
  ASSERT_EQ(r["kind"], "question");
  EXPECT_EQ(r["facet"], "price_range");
  EXPECT_EQ(r["session"]["turn"], 1);
  r = svc.message(id, {{"text", answer_for(cat, *L.models.templates, item, *cat.schema().find_facet("price_range"), rng)}});
  ASSERT_EQ(r["kind"], "question");
  EXPECT_EQ(r["facet"], "state");
  r = svc.message(id, {{"text", answer_for(cat, *L.models.templates, item, *cat.schema().find_facet("state"), rng)}});
  ASSERT_EQ(r["kind"], "recommendations") << r.dump();
  EXPECT_EQ(r["session"]["status"], "recommending");
  EXPECT_LE(r["items"].size(), L.models.reward.K);
  for (auto& [facet, block] : r["debug"]["belief"].items()) {
    double sum = 0.0;
    for (auto& [val, p] : block.items()) sum += p.get<double>();
    EXPECT_NEAR(sum, 1.0, 1e-6) << facet;
  }
  std::optional<std::size_t> rank;
  for (const auto& card : r["items"])
    if (card["item_id"] == cat.item(item).id) rank = card["rank"].get<std::size_t>();
  ASSERT_TRUE(rank.has_value());

  EXPECT_EQ(error_status([&] { svc.message(id, {{"text", "more"}}); }), 409);
  json out = svc.select(id, {{"item_id", cat.item(item).id}});
  EXPECT_EQ(out["status"], "succeeded");
  EXPECT_EQ(out["outcome"], "success");
  EXPECT_EQ(out["tau"], *rank);
  EXPECT_DOUBLE_EQ(out["reward"].get<double>(), -2.0 + *success_reward(*rank, L.models.reward));
  EXPECT_EQ(error_status([&] { svc.select(id, {{"item_id", cat.item(item).id}}); }), 409);
  EXPECT_EQ(error_status([&] { svc.message(id, {{"text", "hello"}}); }), 409);

  auto rows = svc.log_rows();
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_EQ(rows[0]["outcome"], "success");
  EXPECT_EQ(rows[0]["turns"], 3);
  EXPECT_EQ(rows[0]["target"], cat.item(item).id);
  Metrics m = metrics_from_log(rows);
  EXPECT_DOUBLE_EQ(m.S, 100.0);
  EXPECT_DOUBLE_EQ(m.T, 3.0);
  EXPECT_DOUBLE_EQ(m.R, rows[0]["reward"].get<double>());
}

TEST(ChatService, MaxEntSessionFindsTarget) {
  const auto& L = lab();
  const Catalog& cat = *L.models.catalog;
  ChatService svc(L.models, {});
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    json s = svc.create({{"policy", "maxent_full"}, {"seed", seed}});
    const std::string id = s["session_id"];
    const std::size_t item = target_index(cat, s);
    Rng rng(seed);
    json r = svc.message(id, {{"text", opener_for(cat, *L.models.templates, item, rng)}});
    std::size_t n = 1;
    while (r["kind"] == "question") {
      ASSERT_LT(n, cat.schema().size());
      r = svc.message(id, {{"text", answer_for(cat, *L.models.templates, item, *cat.schema().find_facet(r["facet"].get<std::string>()), rng)}});
      ++n;
    }
    json out = svc.select(id, {{"item_id", cat.item(item).id}});
    EXPECT_EQ(out["outcome"], "success") << "seed " << seed;
  }
  Metrics m = metrics_from_log(svc.log_rows());
  EXPECT_EQ(m.episodes, 10u);
  EXPECT_DOUBLE_EQ(m.S, 100.0);
}

TEST(ChatService, OpenerGetsQuestionAboutUnknownFacet) {
  ChatService svc(lab().models, {});
  const std::string id = svc.create({{"policy", "maxent_full"}, {"study_mode", false}, {"seed", 1}})["session_id"];
  json r = svc.message(id, {{"text", "I'm looking for Mexican food in Glendale"}});
  ASSERT_EQ(r["kind"], "question") << r.dump();
  EXPECT_NE(r["facet"], "category");
  EXPECT_NE(r["facet"], "city");
  EXPECT_FALSE(r["text"].get<std::string>().empty());
  EXPECT_GT(r["debug"]["belief"]["category"]["Mexican"].get<double>(), 0.5);
  EXPECT_GT(r["debug"]["belief"]["city"]["Glendale"].get<double>(), 0.5);
}

TEST(ChatService, CreateIsSeededAndIdsAreDistinct) {
  ChatService svc(lab().models, {});
  json a = svc.create({{"seed", 7}}), b = svc.create({{"seed", 7}}), c = svc.create({});
  EXPECT_NE(a["session_id"], b["session_id"]);
  EXPECT_NE(a["session_id"], c["session_id"]);
  EXPECT_EQ(a["target"], b["target"]);
  EXPECT_EQ(a["user_id"], b["user_id"]);
  json free = svc.create({{"study_mode", false}});
  EXPECT_FALSE(free.contains("target"));
  EXPECT_EQ(free["study_mode"], false);
  EXPECT_EQ(error_status([&] { svc.create({{"policy", "oracle"}}); }), 400);
  EXPECT_EQ(error_status([&] { svc.create({{"study_mode", false}, {"user_id", "nobody"}}); }), 400);
}

TEST(ChatService, ErrorsAndStateMachine) {
  const auto& L = lab();
  ChatService svc(L.models, {});
  EXPECT_EQ(error_status([&] { svc.message("nope", {{"text", "hi"}}); }), 404);
  EXPECT_EQ(error_status([&] { svc.get("nope"); }), 404);
  const std::string id = svc.create({{"seed", 1}})["session_id"];
  EXPECT_EQ(error_status([&] { svc.select(id, {{"none_found", true}}); }), 409);
  EXPECT_EQ(error_status([&] { svc.message(id, {{"text", ""}}); }), 400);
  EXPECT_EQ(error_status([&] { svc.message(id, json::object()); }), 400);

  // recommend-first agent: one message, then a list
  ServiceModels m = L.models;
  m.policies["recommend_first"] = std::make_shared<FixedPolicy>(L.models.catalog->schema().size(), "recommend_first");
  ChatService svc2(m, {});
  const std::string id2 = svc2.create({{"policy", "recommend_first"}, {"seed", 2}})["session_id"];
  json r = svc2.message(id2, {{"text", "I want Thai food."}});
  ASSERT_EQ(r["kind"], "recommendations");
  EXPECT_EQ(error_status([&] { svc2.select(id2, {{"item_id", "not-an-item"}}); }), 400);
  json out = svc2.select(id2, {{"none_found", true}});
  EXPECT_EQ(out["status"], "failed");
  EXPECT_NE(out["outcome"], "success");
  EXPECT_EQ(out["reward"], L.models.reward.r_q);
  json got = svc2.get(id2);
  EXPECT_EQ(got["status"], "failed");
  EXPECT_EQ(got["history"].size(), 3u);  // greeting, user, agent
}

TEST(ChatService, WrongSelectionsUpToLimit) {
  const auto& L = lab();
  ServiceModels m = L.models;
  m.policies["recommend_first"] = std::make_shared<FixedPolicy>(L.models.catalog->schema().size(), "recommend_first");
  ChatService svc(m, {});
  // find a session whose unconstrained list holds at least 3 non-targets
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    json s = svc.create({{"policy", "recommend_first"}, {"seed", seed}});
    const std::string id = s["session_id"];
    const std::string target = s["target"]["item_id"];
    json r = svc.message(id, {{"text", "hello"}});
    std::vector<std::string> wrong;
    for (const auto& c : r["items"])
      if (c["item_id"] != target) wrong.push_back(c["item_id"]);
    if (wrong.size() < 3) continue;
    EXPECT_EQ(svc.select(id, {{"item_id", wrong[0]}})["outcome"], "not_target");
    EXPECT_EQ(svc.select(id, {{"item_id", wrong[1]}})["remaining_selections"], 1);
    json last = svc.select(id, {{"item_id", wrong[2]}});
    EXPECT_EQ(last["status"], "failed");
    return;
  }
  FAIL() << "no session with a long enough list";
}

TEST(ChatService, TurnLimitForcesRecommendation) {
  const auto& L = lab();
  ServiceModels m = L.models;
  m.policies["ask"] = std::make_shared<FixedPolicy>(0, "ask");
  ChatService svc(m, {});
  const std::string id = svc.create({{"policy", "ask"}, {"seed", 4}})["session_id"];
  json r;
  std::size_t n = 0;
  do {
    r = svc.message(id, {{"text", "whatever"}});
    ++n;
    EXPECT_LE(r["session"]["turn"].get<std::size_t>(), L.models.reward.max_turns);
  } while (r["kind"] == "question" && n < 20);
  EXPECT_EQ(r["kind"], "recommendations");
  EXPECT_EQ(n, L.models.reward.max_turns + 1);
}

TEST(ChatService, IdleSessionsExpire) {
  auto now = std::chrono::system_clock::time_point{} + std::chrono::hours(1000);
  ServiceConfig cfg;
  cfg.ttl = std::chrono::seconds(60);
  ChatService svc(lab().models, cfg, [&] { return now; });
  const std::string a = svc.create({{"seed", 1}})["session_id"];
  now += std::chrono::seconds(30);
  const std::string b = svc.create({{"seed", 2}})["session_id"];
  now += std::chrono::seconds(45);
  EXPECT_EQ(svc.evict_expired(), 1u);
  EXPECT_EQ(error_status([&] { svc.get(a); }), 404);
  EXPECT_NO_THROW(svc.get(b));
}

TEST(ChatService, GreedyRepliesAreReproducible) {
  const auto& L = lab();
  ChatService s1(L.models, {}), s2(L.models, {});
  for (const char* pol : {"maxent_full", "crm"}) {
    const std::string a = s1.create({{"policy", pol}, {"seed", 9}})["session_id"];
    const std::string b = s2.create({{"policy", pol}, {"seed", 9}})["session_id"];
    for (const char* text : {"I'm looking for Thai food.", "I'm in Phoenix."}) {
      json ra = s1.message(a, {{"text", text}}), rb = s2.message(b, {{"text", text}});
      ra["session"].erase("session_id");
      rb["session"].erase("session_id");
      EXPECT_EQ(ra, rb);
      if (ra["kind"] != "question") break;
    }
  }
}

TEST(ChatService, StudyLogIsAppendedAsJsonl) {
  test_util::TempDir dir;
  ServiceModels m = lab().models;
  m.policies["recommend_first"] = std::make_shared<FixedPolicy>(m.catalog->schema().size(), "recommend_first");
  ServiceConfig cfg;
  cfg.log_path = dir.path() / "study.jsonl";
  ChatService svc(m, cfg);
  for (int i = 0; i < 2; ++i) {
    const std::string id = svc.create({{"policy", "recommend_first"}, {"seed", i}})["session_id"];
    svc.message(id, {{"text", "hi"}});
    svc.select(id, {{"none_found", true}});
  }
  std::istringstream in(test_util::read_file(cfg.log_path));
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    json row = json::parse(line);
    for (const char* k : {"session_id", "policy", "target", "turns", "outcome", "tau", "reward", "created", "closed"})
      EXPECT_TRUE(row.contains(k)) << k;
    ++n;
  }
  EXPECT_EQ(n, 2);
}

TEST(HttpServer, ScriptedSessionOverHttp) {
  const auto& L = lab();
  const Catalog& cat = *L.models.catalog;
  auto svc = std::make_shared<ChatService>(L.models, ServiceConfig{});
  HttpServer server(svc);
  const int port = server.bind("127.0.0.1", 0);
  ASSERT_GT(port, 0);
  server.start();
  httplib::Client cli("127.0.0.1", port);

  auto health = cli.Get("/api/health");
  ASSERT_TRUE(health);
  EXPECT_EQ(health->status, 200);
  EXPECT_EQ(json::parse(health->body)["status"], "ok");

  auto created = cli.Post("/api/session", json{{"policy", "scripted"}, {"seed", 42}}.dump(), "application/json");
  ASSERT_TRUE(created);
  ASSERT_EQ(created->status, 200);
  json s = json::parse(created->body);
  const std::string base = "/api/session/" + s["session_id"].get<std::string>();
  const std::size_t item = target_index(cat, s);
  Rng rng(3);
  std::string text = opener_for(cat, *L.models.templates, item, rng);
  json r;
  for (int i = 0; i < 3; ++i) {
    auto res = cli.Post(base + "/message", json{{"text", text}}.dump(), "application/json");
    ASSERT_TRUE(res);
    ASSERT_EQ(res->status, 200) << res->body;
    r = json::parse(res->body);
    if (i < 2) {
      ASSERT_EQ(r["kind"], "question");
      text = answer_for(cat, *L.models.templates, item, *cat.schema().find_facet(r["facet"].get<std::string>()), rng);
    }
  }
  ASSERT_EQ(r["kind"], "recommendations");
  auto again = cli.Post(base + "/message", json{{"text", "hi"}}.dump(), "application/json");
  EXPECT_EQ(again->status, 409);
  EXPECT_EQ(json::parse(again->body)["error"]["code"], "awaiting_selection");
  auto sel = cli.Post(base + "/select", json{{"item_id", cat.item(item).id}}.dump(), "application/json");
  ASSERT_EQ(sel->status, 200) << sel->body;
  EXPECT_EQ(json::parse(sel->body)["outcome"], "success");
  auto got = cli.Get(base);
  EXPECT_EQ(json::parse(got->body)["status"], "succeeded");
  EXPECT_EQ(cli.Get("/api/session/unknown")->status, 404);
  EXPECT_EQ(cli.Post(base + "/message", "{not json", "application/json")->status, 400);
  EXPECT_EQ(svc->log_rows().size(), 1u);
  server.stop();
}

TEST(HttpServer, ConcurrentSessionsDoNotMix) {
  const auto& L = lab();
  auto svc = std::make_shared<ChatService>(L.models, ServiceConfig{});
  HttpServer server(svc);
  const int port = server.bind("127.0.0.1", 0);
  server.start();
  const int n = 16;
  std::vector<std::string> ids(n);
  std::vector<std::vector<std::string>> sent(n);
  std::atomic<int> failures{0};
  std::vector<std::thread> threads;
  for (int k = 0; k < n; ++k)
    threads.emplace_back([&, k] {
      httplib::Client cli("127.0.0.1", port);
      auto c = cli.Post("/api/session", json{{"policy", k % 2 ? "crm" : "maxent_full"}, {"seed", 100 + k}}.dump(), "application/json");
      if (!c || c->status != 200) {
        ++failures;
        return;
      }
      ids[k] = json::parse(c->body)["session_id"];
      Rng rng(k);
      for (int i = 0; i < 4; ++i) {
        const std::string text = "session " + std::to_string(k) + " message " + std::to_string(i) + " thai food " +
                                 std::to_string(rng.below(1000));
        auto r = cli.Post("/api/session/" + ids[k] + "/message", json{{"text", text}}.dump(), "application/json");
        if (!r) {
          ++failures;
          return;
        }
        if (r->status != 200) break;  // the list came early
        sent[k].push_back(text);
        std::this_thread::yield();
      }
    });
  for (auto& t : threads) t.join();
  ASSERT_EQ(failures.load(), 0);
  httplib::Client cli("127.0.0.1", port);
  for (int k = 0; k < n; ++k) {
    json h = json::parse(cli.Get("/api/session/" + ids[k])->body)["history"];
    std::vector<std::string> users;
    for (const auto& turn : h)
      if (turn["role"] == "user" && turn.contains("text")) users.push_back(turn["text"]);
    EXPECT_FALSE(sent[k].empty());
    EXPECT_EQ(users, sent[k]) << "session " << k;
  }
  server.stop();
}

TEST(HttpServer, BusyPortIsAnError) {
  auto svc = std::make_shared<ChatService>(lab().models, ServiceConfig{});
  HttpServer a(svc), b(svc);
  const int port = a.bind("127.0.0.1", 0);
  a.start();
  EXPECT_EQ(error_status([&] { b.bind("127.0.0.1", port); }), 500);
  a.stop();
}
