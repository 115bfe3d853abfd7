#pragma once

// Template-based realization of dialogue acts, delexicalization, and the
// synthetic labeled dialogue corpus used to train the belief tracker.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "crs/catalog.hpp"
#include "crs/rng.hpp"

namespace crs {

class DialogError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

enum class ActKind { inform, request, recommend, dontknow, thanks };

inline const char* to_string(ActKind k) {
  switch (k) {
    case ActKind::inform: return "inform";
    case ActKind::request: return "request";
    case ActKind::recommend: return "recommend";
    case ActKind::dontknow: return "dontknow";
    case ActKind::thanks: return "thanks";
  }
  return "?";
}

inline ActKind parse_act_kind(std::string_view s) {
  for (ActKind k : {ActKind::inform, ActKind::request, ActKind::recommend, ActKind::dontknow, ActKind::thanks})
    if (s == to_string(k)) return k;
  throw DialogError("unknown act kind '" + std::string(s) + "'");
}

inline bool act_has_facet(ActKind k) { return k == ActKind::inform || k == ActKind::request || k == ActKind::dontknow; }

struct DialogueAct {
  ActKind kind = ActKind::thanks;
  /// inform: one or more (facet, value) pairs; request/dontknow: one pair
  /// whose value is ignored.
  std::vector<FacetValue> slots;

  static DialogueAct inform(std::vector<FacetValue> fvs) { return {ActKind::inform, std::move(fvs)}; }
  static DialogueAct inform(std::size_t facet, std::size_t value) { return {ActKind::inform, {{facet, value}}}; }
  static DialogueAct request(std::size_t facet) { return {ActKind::request, {{facet, 0}}}; }
  static DialogueAct dontknow(std::size_t facet) { return {ActKind::dontknow, {{facet, 0}}}; }
  static DialogueAct recommend() { return {ActKind::recommend, {}}; }
  static DialogueAct thanks() { return {ActKind::thanks, {}}; }

  void validate(const FacetSchema& schema) const {
    const std::string k = to_string(kind);
    if (kind == ActKind::inform && slots.empty()) throw DialogError("inform act without slots");
    if ((kind == ActKind::request || kind == ActKind::dontknow) && slots.size() != 1)
      throw DialogError(k + " act needs exactly one facet");
    if (!act_has_facet(kind) && !slots.empty()) throw DialogError(k + " act takes no facet");
    std::set<std::size_t> seen;
    for (const auto& fv : slots) {
      if (fv.facet >= schema.size()) throw DialogError(k + " act references facet " + std::to_string(fv.facet) + " out of range");
      if (!seen.insert(fv.facet).second) throw DialogError(k + " act repeats facet " + schema.facet(fv.facet).name);
      if (kind == ActKind::inform && fv.value >= schema.cardinality(fv.facet))
        throw DialogError("inform act value " + std::to_string(fv.value) + " out of range for " + schema.facet(fv.facet).name);
    }
  }

  friend bool operator==(const DialogueAct&, const DialogueAct&) = default;
};

/// Placeholder token for a facet name: price_range -> <PriceRange>.
inline std::string placeholder_for(std::string_view facet_name) {
  std::string out = "<";
  bool up = true;
  for (char c : facet_name) {
    if (c == '_' || c == '-' || c == ' ') {
      up = true;
      continue;
    }
    out += up ? static_cast<char>(std::toupper(static_cast<unsigned char>(c))) : c;
    up = false;
  }
  return out + ">";
}

struct UtteranceTemplate {
  ActKind act = ActKind::inform;
  /// Facet names the template speaks about (inform may have several).
  std::vector<std::string> facets;
  /// Restricts an inform template to one value of its single facet
  /// ("Low price." only realizes price_range=cheap).
  std::optional<std::string> value;
  std::string text;
  double weight = 1.0;

  friend bool operator==(const UtteranceTemplate&, const UtteranceTemplate&) = default;
};

struct Utterance {
  std::string text;
  std::optional<DialogueAct> act;
};

struct NoiseConfig {
  double casing_rate = 0.0;  // per utterance: force all-upper or all-lower
  double typo_rate = 0.0;    // per letter: swap, drop, or double it
};

namespace detail {

inline std::string lower(std::string_view s) {
  std::string out(s);
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

/// Placeholder tokens (without brackets) appearing in the text, in order.
inline std::vector<std::string> placeholders_in(const std::string& text) {
  std::vector<std::string> out;
  std::size_t pos = 0;
  while ((pos = text.find('<', pos)) != std::string::npos) {
    const std::size_t end = text.find('>', pos);
    if (end == std::string::npos) break;
    out.push_back(text.substr(pos, end - pos + 1));
    pos = end + 1;
  }
  return out;
}

inline std::string replace_all(std::string s, const std::string& from, const std::string& to) {
  std::size_t pos = 0;
  while ((pos = s.find(from, pos)) != std::string::npos) {
    s.replace(pos, from.size(), to);
    pos += to.size();
  }
  return s;
}

inline std::string apply_noise(std::string text, const NoiseConfig& noise, Rng& rng) {
  if (noise.typo_rate > 0.0) {
    std::string out;
    for (std::size_t i = 0; i < text.size(); ++i) {
      const char c = text[i];
      if (!std::isalpha(static_cast<unsigned char>(c)) || !rng.bernoulli(noise.typo_rate)) {
        out += c;
        continue;
      }
      switch (rng.below(3)) {
        case 0:  // swap with the next character
          if (i + 1 < text.size()) {
            out += text[i + 1];
            out += c;
            ++i;
          } else {
            out += c;
          }
          break;
        case 1: break;  // drop
        default: out += c; out += c;
      }
    }
    text = std::move(out);
  }
  if (noise.casing_rate > 0.0 && rng.bernoulli(noise.casing_rate)) {
    const bool up = rng.bernoulli(0.5);
    for (auto& c : text) c = static_cast<char>(up ? std::toupper(static_cast<unsigned char>(c)) : std::tolower(static_cast<unsigned char>(c)));
  }
  if (text.empty()) text = ".";
  return text;
}

}  // namespace detail

/// Validated set of templates bound to one schema.
class TemplatePack {
 public:
  TemplatePack() = default;

  TemplatePack(FacetSchema schema, std::vector<UtteranceTemplate> templates)
      : schema_(std::move(schema)), templates_(std::move(templates)) {
    std::map<std::string, std::size_t> by_placeholder;
    for (std::size_t f = 0; f < schema_.size(); ++f) by_placeholder[placeholder_for(schema_.facet(f).name)] = f;
    for (std::size_t t = 0; t < templates_.size(); ++t) {
      const auto& tp = templates_[t];
      const std::string where = "template " + std::to_string(t + 1) + " (\"" + tp.text + "\")";
      if (tp.text.empty()) throw DialogError(where + ": empty text");
      if (!(tp.weight > 0.0)) throw DialogError(where + ": weight must be positive");
      Key key{tp.act, {}, std::nullopt};
      for (const auto& name : tp.facets) {
        auto f = schema_.find_facet(name);
        if (!f) throw DialogError(where + ": unknown facet '" + name + "'");
        key.facets.push_back(*f);
      }
      std::sort(key.facets.begin(), key.facets.end());
      if (std::adjacent_find(key.facets.begin(), key.facets.end()) != key.facets.end())
        throw DialogError(where + ": repeated facet");
      if (act_has_facet(tp.act) ? key.facets.empty() : !key.facets.empty())
        throw DialogError(where + ": wrong number of facets for " + to_string(tp.act));
      if (tp.act != ActKind::inform && key.facets.size() > 1) throw DialogError(where + ": only inform may name several facets");
      if (tp.value) {
        if (tp.act != ActKind::inform || key.facets.size() != 1) throw DialogError(where + ": value needs a single-facet inform");
        auto v = schema_.find_value(key.facets[0], *tp.value);
        if (!v) throw DialogError(where + ": unknown value '" + *tp.value + "'");
        key.value = *v;
      }
      std::set<std::size_t> used;
      for (const auto& ph : detail::placeholders_in(tp.text)) {
        auto it = by_placeholder.find(ph);
        if (it == by_placeholder.end()) throw DialogError(where + ": placeholder " + ph + " names no facet");
        if (!std::binary_search(key.facets.begin(), key.facets.end(), it->second))
          throw DialogError(where + ": placeholder " + ph + " is not one of the template's facets");
        used.insert(it->second);
      }
      if (tp.act == ActKind::inform && !key.value && used.size() != key.facets.size())
        throw DialogError(where + ": every informed facet needs a placeholder");
      if (tp.act != ActKind::inform && !used.empty()) throw DialogError(where + ": only inform templates take placeholders");
      keys_.push_back(std::move(key));
    }
  }

  const FacetSchema& schema() const noexcept { return schema_; }
  const std::vector<UtteranceTemplate>& templates() const noexcept { return templates_; }
  std::size_t size() const noexcept { return templates_.size(); }

  /// Indices of templates that can realize the act.
  std::vector<std::size_t> matching(const DialogueAct& act) const {
    std::vector<std::size_t> facets;
    for (const auto& fv : act.slots) facets.push_back(fv.facet);
    std::sort(facets.begin(), facets.end());
    std::vector<std::size_t> out;
    for (std::size_t t = 0; t < keys_.size(); ++t) {
      const Key& k = keys_[t];
      if (k.act != act.kind || k.facets != facets) continue;
      if (k.value && act.slots[0].value != *k.value) continue;
      out.push_back(t);
    }
    return out;
  }

  /// True when every value of the facet can be realized for this act kind.
  bool covers(ActKind kind, std::size_t facet) const {
    if (!act_has_facet(kind)) {
      for (const Key& k : keys_)
        if (k.act == kind) return true;
      return false;
    }
    const std::size_t n_values = kind == ActKind::inform ? schema_.cardinality(facet) : 1;
    for (std::size_t v = 0; v < n_values; ++v) {
      DialogueAct a{kind, {{facet, v}}};
      if (matching(a).empty()) return false;
    }
    return true;
  }

  /// Throws naming the first uncovered (act, facet).
  void require_coverage(ActKind kind) const {
    if (!act_has_facet(kind)) {
      if (!covers(kind, 0)) throw DialogError(std::string("template coverage gap: (") + to_string(kind) + ")");
      return;
    }
    for (std::size_t f = 0; f < schema_.size(); ++f)
      if (!covers(kind, f))
        throw DialogError(std::string("template coverage gap: (") + to_string(kind) + ", " + schema_.facet(f).name + ")");
  }

 private:
  struct Key {
    ActKind act;
    std::vector<std::size_t> facets;  // sorted
    std::optional<std::size_t> value;
  };
  FacetSchema schema_;
  std::vector<UtteranceTemplate> templates_;
  std::vector<Key> keys_;
};

inline UtteranceTemplate template_from_json(const nlohmann::json& j) {
  UtteranceTemplate t;
  t.act = parse_act_kind(j.at("act").get<std::string>());
  if (j.contains("facet")) t.facets.push_back(j.at("facet").get<std::string>());
  if (j.contains("facets"))
    for (const auto& f : j.at("facets")) t.facets.push_back(f.get<std::string>());
  if (j.contains("value")) t.value = j.at("value").get<std::string>();
  t.text = j.at("text").get<std::string>();
  t.weight = j.value("weight", 1.0);
  return t;
}

inline nlohmann::json to_json(const UtteranceTemplate& t) {
  nlohmann::json j{{"act", to_string(t.act)}};
  if (t.facets.size() == 1) j["facet"] = t.facets[0];
  else if (!t.facets.empty()) j["facets"] = t.facets;
  if (t.value) j["value"] = *t.value;
  j["text"] = t.text;
  j["weight"] = t.weight;
  return j;
}

inline TemplatePack load_templates(const std::filesystem::path& path, const FacetSchema& schema) {
  std::ifstream in(path);
  if (!in) throw DialogError("cannot open templates file " + path.string());
  std::vector<UtteranceTemplate> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(template_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw DialogError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  try {
    return TemplatePack(schema, std::move(out));
  } catch (const DialogError& e) {
    throw DialogError(path.string() + ": " + e.what());
  }
}

/// Plain templates for an arbitrary schema, so any catalog can be simulated.
inline TemplatePack generic_template_pack(const FacetSchema& schema) {
  std::vector<UtteranceTemplate> t;
  for (const auto& f : schema.facets()) {
    const std::string ph = placeholder_for(f.name);
    std::string words = f.name;
    std::replace(words.begin(), words.end(), '_', ' ');
    for (const char* form : {"I want <P>.", "<P> please", "Something with <P>.", "<P>"})
      t.push_back({ActKind::inform, {f.name}, std::nullopt, detail::replace_all(form, "<P>", ph), 1.0});
    t.push_back({ActKind::request, {f.name}, std::nullopt, "Which " + words + " would you like?", 1.0});
    t.push_back({ActKind::dontknow, {f.name}, std::nullopt, "Any " + words + " is fine.", 1.0});
  }
  t.push_back({ActKind::recommend, {}, std::nullopt, "Here are some items you might like.", 1.0});
  t.push_back({ActKind::thanks, {}, std::nullopt, "thank you", 1.0});
  return TemplatePack(schema, std::move(t));
}

/// Fill a specific template with the act's values (no noise).
inline std::string fill_template(const TemplatePack& pack, std::size_t index, const DialogueAct& act) {
  std::string text = pack.templates().at(index).text;
  if (act.kind == ActKind::inform)
    for (const auto& fv : act.slots)
      text = detail::replace_all(text, placeholder_for(pack.schema().facet(fv.facet).name), pack.schema().value_name(fv));
  return text;
}

inline Utterance realize(const DialogueAct& act, const TemplatePack& pack, Rng& rng, const NoiseConfig& noise = {}) {
  act.validate(pack.schema());
  const auto idx = pack.matching(act);
  if (idx.empty()) {
    std::string desc = to_string(act.kind);
    for (const auto& fv : act.slots) desc += " " + pack.schema().facet(fv.facet).name;
    throw DialogError("no template for act (" + desc + ")");
  }
  std::vector<double> weights;
  for (std::size_t i : idx) weights.push_back(pack.templates()[i].weight);
  const std::size_t pick = idx[rng.categorical(weights)];
  return {detail::apply_noise(fill_template(pack, pick, act), noise, rng), act};
}

/// Replace every word-bounded, case-insensitive occurrence of each target
/// value with its facet placeholder. Longer values claim spans first.
inline UtteranceTemplate delexicalize(const std::string& utterance,
                                      const std::vector<std::pair<std::string, std::string>>& targets) {
  const std::string low = detail::lower(utterance);
  auto is_word = [](char c) { return std::isalnum(static_cast<unsigned char>(c)) != 0; };
  std::vector<std::size_t> order(targets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return targets[a].second.size() > targets[b].second.size(); });

  struct Span {
    std::size_t begin, end, target;
  };
  std::vector<Span> spans;
  std::vector<std::string> missing;
  for (std::size_t t : order) {
    const std::string needle = detail::lower(targets[t].second);
    bool found = false;
    for (std::size_t pos = needle.empty() ? std::string::npos : low.find(needle); pos != std::string::npos;
         pos = low.find(needle, pos + 1)) {
      const std::size_t end = pos + needle.size();
      if (pos > 0 && is_word(low[pos - 1]) && is_word(low[pos])) continue;
      if (end < low.size() && is_word(low[end]) && is_word(low[end - 1])) continue;
      bool overlaps = false;
      for (const auto& s : spans) overlaps = overlaps || (pos < s.end && s.begin < end);
      if (overlaps) continue;
      spans.push_back({pos, end, t});
      found = true;
    }
    if (!found) missing.push_back(targets[t].first + "=" + targets[t].second);
  }
  if (!missing.empty()) {
    std::string msg = "delexicalize: values not found in \"" + utterance + "\":";
    for (const auto& m : missing) msg += " " + m;
    throw DialogError(msg);
  }
  std::sort(spans.begin(), spans.end(), [](const Span& a, const Span& b) { return a.begin < b.begin; });
  UtteranceTemplate out;
  out.act = ActKind::inform;
  for (const auto& [facet, value] : targets) out.facets.push_back(facet);
  std::size_t cursor = 0;
  for (const auto& s : spans) {
    out.text += utterance.substr(cursor, s.begin - cursor);
    out.text += placeholder_for(targets[s.target].first);
    cursor = s.end;
  }
  out.text += utterance.substr(cursor);
  return out;
}

// ---------------------------------------------------------------------------
// Labeled dialogue corpus

struct DialogueTurn {
  std::string text;
  /// Facet values newly informed in this turn (empty for dontknow turns).
  std::vector<FacetValue> informs;
};

struct LabeledDialogue {
  std::size_t rating = 0;  // index into Catalog::ratings()
  std::size_t user = 0;
  std::size_t item = 0;
  std::vector<DialogueTurn> turns;

  /// Cumulative gold label per facet after turn t (nullopt = not yet informed).
  std::vector<std::optional<std::size_t>> labels_after(std::size_t t, std::size_t n_facets) const {
    std::vector<std::optional<std::size_t>> out(n_facets);
    for (std::size_t k = 0; k <= t && k < turns.size(); ++k)
      for (const auto& fv : turns[k].informs) out.at(fv.facet) = fv.value;
    return out;
  }

  friend bool operator==(const LabeledDialogue& a, const LabeledDialogue& b) {
    if (a.rating != b.rating || a.user != b.user || a.item != b.item || a.turns.size() != b.turns.size()) return false;
    for (std::size_t i = 0; i < a.turns.size(); ++i)
      if (a.turns[i].text != b.turns[i].text || a.turns[i].informs != b.turns[i].informs) return false;
    return true;
  }
};

struct CorpusConfig {
  double two_facet_opener = 0.2;
  double dontknow_rate = 0.0;
  NoiseConfig noise;
};

/// One dialogue for the given rating: a random facet order; the opener may
/// inform two facets. Seeded per rating index, so the result does not depend
/// on which other ratings are generated alongside it.
inline LabeledDialogue generate_dialogue(const Catalog& catalog, std::size_t rating_index, const TemplatePack& pack,
                                         const CorpusConfig& cfg, std::uint64_t seed) {
  const auto& r = catalog.ratings().at(rating_index);
  const auto& item = catalog.item(r.item);
  const std::size_t L = catalog.schema().size();
  Rng rng = Rng(seed).split(rating_index);
  std::vector<std::size_t> order(L);
  for (std::size_t f = 0; f < L; ++f) order[f] = f;
  for (std::size_t i = L; i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);

  LabeledDialogue d{rating_index, r.user, r.item, {}};
  std::size_t next = 0;
  if (L >= 2 && rng.bernoulli(cfg.two_facet_opener)) {
    DialogueAct two = DialogueAct::inform({{order[0], item.values[order[0]]}, {order[1], item.values[order[1]]}});
    if (!pack.matching(two).empty()) {
      d.turns.push_back({realize(two, pack, rng, cfg.noise).text, two.slots});
      std::sort(d.turns.back().informs.begin(), d.turns.back().informs.end());
      next = 2;
    }
  }
  for (; next < L; ++next) {
    const std::size_t f = order[next];
    if (cfg.dontknow_rate > 0.0 && rng.bernoulli(cfg.dontknow_rate)) {
      d.turns.push_back({realize(DialogueAct::dontknow(f), pack, rng, cfg.noise).text, {}});
      continue;
    }
    DialogueAct a = DialogueAct::inform(f, item.values[f]);
    d.turns.push_back({realize(a, pack, rng, cfg.noise).text, a.slots});
  }
  return d;
}

inline std::vector<LabeledDialogue> generate_dialogue_corpus(const Catalog& catalog, const std::vector<std::size_t>& ratings,
                                                             const TemplatePack& pack, const CorpusConfig& cfg,
                                                             std::uint64_t seed) {
  if (!(catalog.schema() == pack.schema())) throw DialogError("template pack was built for a different schema");
  pack.require_coverage(ActKind::inform);
  if (cfg.dontknow_rate > 0.0) pack.require_coverage(ActKind::dontknow);
  std::vector<LabeledDialogue> out;
  out.reserve(ratings.size());
  for (std::size_t r : ratings) out.push_back(generate_dialogue(catalog, r, pack, cfg, seed));
  return out;
}

inline nlohmann::json to_json(const LabeledDialogue& d, const Catalog& catalog) {
  const auto& schema = catalog.schema();
  nlohmann::json turns = nlohmann::json::array();
  for (const auto& t : d.turns) {
    nlohmann::json informs = nlohmann::json::object();
    for (const auto& fv : t.informs) informs[schema.facet(fv.facet).name] = schema.value_name(fv);
    turns.push_back({{"text", t.text}, {"informs", informs}});
  }
  return {{"rating", d.rating}, {"user_id", catalog.users()[d.user]}, {"item_id", catalog.item(d.item).id}, {"turns", turns}};
}

inline LabeledDialogue dialogue_from_json(const nlohmann::json& j, const Catalog& catalog) {
  const auto& schema = catalog.schema();
  LabeledDialogue d;
  d.rating = j.at("rating").get<std::size_t>();
  auto u = catalog.find_user(j.at("user_id").get<std::string>());
  auto i = catalog.find_item(j.at("item_id").get<std::string>());
  if (!u || !i) throw DialogError("dialogue references unknown user or item");
  d.user = *u;
  d.item = *i;
  for (const auto& t : j.at("turns")) {
    DialogueTurn turn{t.at("text").get<std::string>(), {}};
    for (const auto& [name, value] : t.at("informs").items()) {
      auto f = schema.find_facet(name);
      if (!f) throw DialogError("dialogue informs unknown facet '" + name + "'");
      auto v = schema.find_value(*f, value.get<std::string>());
      if (!v) throw DialogError("dialogue informs unknown value '" + value.get<std::string>() + "'");
      turn.informs.push_back({*f, *v});
    }
    std::sort(turn.informs.begin(), turn.informs.end());
    d.turns.push_back(std::move(turn));
  }
  return d;
}

inline void write_corpus(const std::vector<LabeledDialogue>& corpus, const Catalog& catalog, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DialogError("cannot write " + path.string());
  for (const auto& d : corpus) out << to_json(d, catalog).dump() << '\n';
}

inline std::vector<LabeledDialogue> read_corpus(const std::filesystem::path& path, const Catalog& catalog) {
  std::ifstream in(path);
  if (!in) throw DialogError("cannot open corpus " + path.string());
  std::vector<LabeledDialogue> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    try {
      out.push_back(dialogue_from_json(nlohmann::json::parse(line), catalog));
    } catch (const std::exception& e) {
      throw DialogError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace crs
