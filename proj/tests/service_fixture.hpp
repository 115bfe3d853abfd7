#pragma once

#include <memory>
#include <string>
#include <vector>

#include "crs/service.hpp"
#include "crs/training.hpp"

namespace crs::test_util {

/// Asks the listed facets in order, then recommends.
class ScriptedPolicy : public DialoguePolicy {
 public:
  explicit ScriptedPolicy(std::vector<std::size_t> facets) : facets_(std::move(facets)) {}
  std::string name() const override { return "scripted"; }
  std::size_t act(const DialogueView& view, Rng&) const override {
    const std::size_t L = view.catalog.schema().size();
    return view.rule.turn < facets_.size() ? facets_[view.rule.turn] : L;
  }

 private:
  std::vector<std::size_t> facets_;
};

struct ServiceLab {
  LabWorld world;
  ServiceModels models;
};

/// Default world with a trained tracker and recommender. The "crm" entry is
/// an untrained net; "scripted" asks price then state.
inline ServiceLab make_service_lab(std::size_t fm_epochs = 20) {
  ServiceLab out;
  out.world = build_world({});
  const auto& w = out.world;
  const auto& schema = w.catalog->schema();
  auto tracker = std::make_shared<const NeuralTracker>(train_tracker(schema, w.train, w.dev, {}).model);
  FmTrainConfig fc;
  fc.epochs = fm_epochs;
  auto fm = std::make_shared<const FmModel>(train_recommender(*w.catalog, *tracker, w.train, w.dev, fc).model);
  out.models.catalog = w.catalog;
  out.models.templates = w.templates;
  out.models.tracker = tracker;
  out.models.fm = fm;
  out.models.policies["maxent_full"] = std::make_shared<MaxEntPolicy>();
  out.models.policies["crm"] =
      std::make_shared<NetPolicy>(std::make_shared<const PolicyNet>(default_policy_arch(schema), 5), ActMode::greedy);
  out.models.policies["scripted"] =
      std::make_shared<ScriptedPolicy>(std::vector<std::size_t>{*schema.find_facet("price_range"), *schema.find_facet("state")});
  out.models.default_policy = "maxent_full";
  out.models.study_targets = targets_from(*w.catalog, w.split.test);
  return out;
}

/// Cooperative user text: the opener names category and city, answers give
/// the target's value for the asked facet.
inline std::string opener_for(const Catalog& cat, const TemplatePack& pack, std::size_t item, Rng& rng) {
  const auto& schema = cat.schema();
  const auto& v = cat.item(item).values;
  const std::size_t category = *schema.find_facet("category"), city = *schema.find_facet("city");
  return realize(DialogueAct::inform({{category, v[category]}, {city, v[city]}}), pack, rng).text;
}

inline std::string answer_for(const Catalog& cat, const TemplatePack& pack, std::size_t item, std::size_t facet, Rng& rng) {
  return realize(DialogueAct::inform(facet, cat.item(item).values[facet]), pack, rng).text;
}

}  // namespace crs::test_util
