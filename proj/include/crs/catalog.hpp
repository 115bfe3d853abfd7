#pragma once

// Faceted item catalog: schema, items, users and ratings, plus the synthetic
// generator and the train/dev/test splitter.

#include <algorithm>
#include <array>
#include <cmath>
#include <compare>
#include <filesystem>
#include <fstream>
#include <map>
#include <nlohmann/json.hpp>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "autodiff.hpp"
#include "rng.hpp"

namespace crs {

using json = nlohmann::json;

class CatalogError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct Facet {
  std::string name;
  std::vector<std::string> values;
};

struct FacetValue {
  std::size_t facet = 0;
  std::size_t value = 0;
  auto operator<=>(const FacetValue&) const = default;
};

class FacetSchema {
 public:
  FacetSchema() = default;

  explicit FacetSchema(std::vector<Facet> facets) : facets_(std::move(facets)) {
    if (facets_.empty()) throw CatalogError("schema: at least one facet is required");
    std::size_t offset = 0;
    for (std::size_t f = 0; f < facets_.size(); ++f) {
      const Facet& facet = facets_[f];
      if (facet.name.empty()) throw CatalogError("schema: facet " + std::to_string(f) + " has an empty name");
      if (!facet_index_.emplace(facet.name, f).second) throw CatalogError("schema: duplicate facet '" + facet.name + "'");
      if (facet.values.empty()) throw CatalogError("schema: facet '" + facet.name + "' has no values");
      std::unordered_map<std::string, std::size_t> vals;
      for (std::size_t v = 0; v < facet.values.size(); ++v)
        if (!vals.emplace(facet.values[v], v).second)
          throw CatalogError("schema: facet '" + facet.name + "' repeats value '" + facet.values[v] + "'");
      value_index_.push_back(std::move(vals));
      offsets_.push_back(offset);
      offset += facet.values.size();
    }
    state_dim_ = offset;
  }

  std::size_t size() const noexcept { return facets_.size(); }
  const Facet& facet(std::size_t f) const { return facets_.at(f); }
  const std::vector<Facet>& facets() const noexcept { return facets_; }
  std::size_t cardinality(std::size_t f) const { return facets_.at(f).values.size(); }

  /// Length of the concatenated per-facet distributions.
  std::size_t state_dim() const noexcept { return state_dim_; }
  std::size_t offset(std::size_t f) const { return offsets_.at(f); }

  std::optional<std::size_t> find_facet(std::string_view name) const {
    auto it = facet_index_.find(std::string(name));
    if (it == facet_index_.end()) return std::nullopt;
    return it->second;
  }

  std::size_t facet_index(std::string_view name) const {
    auto f = find_facet(name);
    if (!f) throw CatalogError("schema: unknown facet '" + std::string(name) + "'");
    return *f;
  }

  std::optional<std::size_t> find_value(std::size_t facet, std::string_view value) const {
    const auto& m = value_index_.at(facet);
    auto it = m.find(std::string(value));
    if (it == m.end()) return std::nullopt;
    return it->second;
  }

  const std::string& value_name(FacetValue fv) const { return facets_.at(fv.facet).values.at(fv.value); }

  json to_json() const {
    json arr = json::array();
    for (const auto& f : facets_) arr.push_back({{"name", f.name}, {"values", f.values}});
    return {{"facets", arr}};
  }

  static FacetSchema from_json(const json& doc) {
    if (!doc.is_object() || !doc.contains("facets") || !doc.at("facets").is_array())
      throw CatalogError("schema: expected {\"facets\": [...]}");
    std::vector<Facet> facets;
    for (const auto& f : doc.at("facets"))
      facets.push_back({f.at("name").get<std::string>(), f.at("values").get<std::vector<std::string>>()});
    return FacetSchema(std::move(facets));
  }

  friend bool operator==(const FacetSchema& a, const FacetSchema& b) {
    if (a.facets_.size() != b.facets_.size()) return false;
    for (std::size_t i = 0; i < a.facets_.size(); ++i)
      if (a.facets_[i].name != b.facets_[i].name || a.facets_[i].values != b.facets_[i].values) return false;
    return true;
  }

 private:
  std::vector<Facet> facets_;
  std::map<std::string, std::size_t> facet_index_;
  std::vector<std::unordered_map<std::string, std::size_t>> value_index_;
  std::vector<std::size_t> offsets_;
  std::size_t state_dim_ = 0;
};

struct Item {
  std::string id;
  std::vector<std::size_t> values;  // one value index per facet
};

struct Rating {
  std::size_t user = 0;  // index into Catalog::users()
  std::size_t item = 0;  // index into Catalog::items()
  double value = 0.0;
};

/// Immutable after construction. Items and users are kept sorted by id so an
/// item index order is also item_id order.
class Catalog {
 public:
  Catalog() = default;

  Catalog(FacetSchema schema, std::vector<Item> items, std::vector<std::string> users, std::vector<Rating> ratings)
      : schema_(std::move(schema)), items_(std::move(items)), users_(std::move(users)), ratings_(std::move(ratings)) {
    if (!std::is_sorted(items_.begin(), items_.end(), [](const Item& a, const Item& b) { return a.id < b.id; }))
      throw CatalogError("catalog: items must be sorted by item_id");
    if (!std::is_sorted(users_.begin(), users_.end())) throw CatalogError("catalog: users must be sorted by user_id");
    postings_.resize(schema_.size());
    for (std::size_t f = 0; f < schema_.size(); ++f) postings_[f].resize(schema_.cardinality(f));
    for (std::size_t i = 0; i < items_.size(); ++i) {
      const Item& it = items_[i];
      if (i > 0 && items_[i - 1].id == it.id) throw CatalogError("catalog: duplicate item_id '" + it.id + "'");
      if (it.values.size() != schema_.size())
        throw CatalogError("catalog: item '" + it.id + "' assigns " + std::to_string(it.values.size()) + " of " +
                           std::to_string(schema_.size()) + " facets");
      for (std::size_t f = 0; f < schema_.size(); ++f) {
        if (it.values[f] >= schema_.cardinality(f))
          throw CatalogError("catalog: item '" + it.id + "' has out-of-range value for facet '" + schema_.facet(f).name + "'");
        postings_[f][it.values[f]].push_back(i);
      }
      item_index_.emplace(it.id, i);
    }
    for (std::size_t u = 0; u < users_.size(); ++u)
      if (!user_index_.emplace(users_[u], u).second) throw CatalogError("catalog: duplicate user_id '" + users_[u] + "'");
    by_user_.resize(users_.size());
    for (std::size_t r = 0; r < ratings_.size(); ++r) {
      const Rating& rt = ratings_[r];
      if (rt.user >= users_.size() || rt.item >= items_.size()) throw CatalogError("catalog: rating references unknown user or item");
      if (!std::isfinite(rt.value)) throw CatalogError("catalog: non-finite rating");
      by_user_[rt.user].push_back(r);
    }
  }

  const FacetSchema& schema() const noexcept { return schema_; }
  const std::vector<Item>& items() const noexcept { return items_; }
  const Item& item(std::size_t i) const { return items_.at(i); }
  const std::vector<std::string>& users() const noexcept { return users_; }
  const std::vector<Rating>& ratings() const noexcept { return ratings_; }
  std::size_t n_users() const noexcept { return users_.size(); }
  std::size_t n_items() const noexcept { return items_.size(); }

  std::optional<std::size_t> find_item(std::string_view id) const {
    auto it = item_index_.find(std::string(id));
    if (it == item_index_.end()) return std::nullopt;
    return it->second;
  }
  std::optional<std::size_t> find_user(std::string_view id) const {
    auto it = user_index_.find(std::string(id));
    if (it == user_index_.end()) return std::nullopt;
    return it->second;
  }

  /// Rating indices for one user, in rating order.
  const std::vector<std::size_t>& ratings_of(std::size_t user) const { return by_user_.at(user); }

  /// Item indices whose facets satisfy every constraint (conjunctive exact
  /// match), ascending item_id. No constraints means every item.
  std::vector<std::size_t> items_matching(std::span<const FacetValue> constraints) const {
    if (constraints.empty()) {
      std::vector<std::size_t> all(items_.size());
      for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
      return all;
    }
    std::vector<const std::vector<std::size_t>*> lists;
    for (const auto& c : constraints) {
      if (c.facet >= postings_.size() || c.value >= postings_[c.facet].size())
        throw CatalogError("items_matching: constraint references an unknown facet or value");
      lists.push_back(&postings_[c.facet][c.value]);
    }
    std::sort(lists.begin(), lists.end(), [](auto* a, auto* b) { return a->size() < b->size(); });
    std::vector<std::size_t> out;
    for (std::size_t i : *lists.front()) {
      bool ok = true;
      for (std::size_t k = 1; k < constraints.size() && ok; ++k)
        ok = std::binary_search(lists[k]->begin(), lists[k]->end(), i);
      if (ok) out.push_back(i);
    }
    return out;
  }

  bool matches(std::size_t item, std::span<const FacetValue> constraints) const {
    for (const auto& c : constraints)
      if (items_.at(item).values.at(c.facet) != c.value) return false;
    return true;
  }

 private:
  FacetSchema schema_;
  std::vector<Item> items_;
  std::vector<std::string> users_;
  std::vector<Rating> ratings_;
  std::vector<std::vector<std::vector<std::size_t>>> postings_;
  std::unordered_map<std::string, std::size_t> item_index_;
  std::unordered_map<std::string, std::size_t> user_index_;
  std::vector<std::vector<std::size_t>> by_user_;
};

// ---------------------------------------------------------------------------
// File formats: schema.json, items.jsonl, ratings.jsonl

inline FacetSchema load_schema(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw CatalogError("cannot open schema file " + path.string());
  try {
    return FacetSchema::from_json(json::parse(in));
  } catch (const json::exception& e) {
    throw CatalogError(path.string() + ": " + e.what());
  }
}

struct LoadOptions {
  /// Drop users and items with fewer ratings than this (iterated to a fixed
  /// point). 0 disables filtering.
  std::size_t min_count = 0;
};

namespace detail {

template <class F>
void for_each_jsonl(const std::filesystem::path& path, F&& f) {
  std::ifstream in(path);
  if (!in) throw CatalogError("cannot open " + path.string());
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json rec;
    try {
      rec = json::parse(line);
    } catch (const json::parse_error& e) {
      throw CatalogError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
    try {
      f(rec, lineno);
    } catch (const json::exception& e) {
      throw CatalogError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
}

}  // namespace detail

inline Catalog load_catalog(const std::filesystem::path& items_path, const std::filesystem::path& ratings_path,
                            const std::filesystem::path& schema_path, const LoadOptions& opts = {}) {
  FacetSchema schema = load_schema(schema_path);
  std::vector<Item> items;
  detail::for_each_jsonl(items_path, [&](const json& rec, std::size_t lineno) {
    Item it;
    it.id = rec.at("item_id").get<std::string>();
    const json& facets = rec.at("facets");
    it.values.resize(schema.size());
    for (std::size_t f = 0; f < schema.size(); ++f) {
      const std::string& name = schema.facet(f).name;
      if (!facets.contains(name))
        throw CatalogError(items_path.string() + ":" + std::to_string(lineno) + ": item '" + it.id + "' is missing facet '" +
                           name + "'");
      const auto value = facets.at(name).get<std::string>();
      auto v = schema.find_value(f, value);
      if (!v)
        throw CatalogError(items_path.string() + ":" + std::to_string(lineno) + ": item '" + it.id +
                           "' has unknown value '" + value + "' for facet '" + name + "'");
      it.values[f] = *v;
    }
    for (auto kv = facets.begin(); kv != facets.end(); ++kv)
      if (!schema.find_facet(kv.key()))
        throw CatalogError(items_path.string() + ":" + std::to_string(lineno) + ": unknown facet '" + kv.key() + "'");
    items.push_back(std::move(it));
  });
  std::sort(items.begin(), items.end(), [](const Item& a, const Item& b) { return a.id < b.id; });

  struct RawRating {
    std::string user, item;
    double value;
  };
  std::map<std::pair<std::string, std::string>, double> seen;
  std::vector<RawRating> raw;
  std::set<std::string> item_ids;
  for (const auto& it : items) item_ids.insert(it.id);
  detail::for_each_jsonl(ratings_path, [&](const json& rec, std::size_t lineno) {
    RawRating r{rec.at("user_id").get<std::string>(), rec.at("item_id").get<std::string>(), rec.at("rating").get<double>()};
    if (!item_ids.contains(r.item))
      throw CatalogError(ratings_path.string() + ":" + std::to_string(lineno) + ": rating references unknown item '" + r.item + "'");
    auto [pos, inserted] = seen.emplace(std::make_pair(r.user, r.item), r.value);
    if (!inserted) {
      if (pos->second != r.value)
        throw CatalogError(ratings_path.string() + ":" + std::to_string(lineno) + ": conflicting duplicate rating for (" +
                           r.user + ", " + r.item + ")");
      return;
    }
    raw.push_back(std::move(r));
  });

  if (opts.min_count > 0) {
    for (bool changed = true; changed;) {
      std::map<std::string, std::size_t> uc, ic;
      for (const auto& r : raw) ++uc[r.user], ++ic[r.item];
      const auto before_items = items.size();
      std::erase_if(items, [&](const Item& it) { return ic[it.id] < opts.min_count; });
      std::set<std::string> kept;
      for (const auto& it : items) kept.insert(it.id);
      const auto before = raw.size();
      std::erase_if(raw, [&](const RawRating& r) { return uc[r.user] < opts.min_count || !kept.contains(r.item); });
      changed = raw.size() != before || items.size() != before_items;
    }
  }

  std::set<std::string> user_set;
  for (const auto& r : raw) user_set.insert(r.user);
  std::vector<std::string> users(user_set.begin(), user_set.end());
  std::unordered_map<std::string, std::size_t> uidx, iidx;
  for (std::size_t u = 0; u < users.size(); ++u) uidx[users[u]] = u;
  for (std::size_t i = 0; i < items.size(); ++i) iidx[items[i].id] = i;
  std::vector<Rating> ratings;
  ratings.reserve(raw.size());
  for (const auto& r : raw) ratings.push_back({uidx.at(r.user), iidx.at(r.item), r.value});
  return Catalog(std::move(schema), std::move(items), std::move(users), std::move(ratings));
}

inline void write_catalog(const Catalog& cat, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  {
    std::ofstream out(dir / "schema.json", std::ios::binary);
    out << cat.schema().to_json().dump(2) << '\n';
  }
  {
    std::ofstream out(dir / "items.jsonl", std::ios::binary);
    for (const auto& it : cat.items()) {
      json facets = json::object();
      for (std::size_t f = 0; f < cat.schema().size(); ++f)
        facets[cat.schema().facet(f).name] = cat.schema().facet(f).values[it.values[f]];
      out << json{{"item_id", it.id}, {"facets", facets}}.dump() << '\n';
    }
  }
  {
    std::ofstream out(dir / "ratings.jsonl", std::ios::binary);
    for (const auto& r : cat.ratings())
      out << json{{"user_id", cat.users()[r.user]}, {"item_id", cat.item(r.item).id}, {"rating", r.value}}.dump() << '\n';
  }
}

// ---------------------------------------------------------------------------
// Splitting

struct DatasetSplit {
  std::vector<std::size_t> train, dev, test;  // rating indices, ascending
};

/// Seeded random partition of the rating set. Train and dev sizes are
/// round(ratio * n); test takes the remainder.
inline DatasetSplit split(const Catalog& cat, std::array<double, 3> ratios, std::uint64_t seed) {
  const std::size_t n = cat.ratings().size();
  if (n == 0) throw CatalogError("split: empty rating set");
  for (double r : ratios)
    if (r < 0.0) throw CatalogError("split: negative ratio");
  if (std::abs(ratios[0] + ratios[1] + ratios[2] - 1.0) > 1e-9) throw CatalogError("split: ratios must sum to 1");
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng(seed);
  for (std::size_t i = n; i > 1; --i) std::swap(perm[i - 1], perm[rng.below(i)]);
  const auto n_train = std::min<std::size_t>(n, static_cast<std::size_t>(std::llround(ratios[0] * static_cast<double>(n))));
  const auto n_dev =
      std::min<std::size_t>(n - n_train, static_cast<std::size_t>(std::llround(ratios[1] * static_cast<double>(n))));
  DatasetSplit s;
  s.train.assign(perm.begin(), perm.begin() + static_cast<long>(n_train));
  s.dev.assign(perm.begin() + static_cast<long>(n_train), perm.begin() + static_cast<long>(n_train + n_dev));
  s.test.assign(perm.begin() + static_cast<long>(n_train + n_dev), perm.end());
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.dev.begin(), s.dev.end());
  std::sort(s.test.begin(), s.test.end());
  return s;
}

inline json to_json(const DatasetSplit& s) { return {{"train", s.train}, {"dev", s.dev}, {"test", s.test}}; }

inline DatasetSplit split_from_json(const json& j) {
  return {j.at("train").get<std::vector<std::size_t>>(), j.at("dev").get<std::vector<std::size_t>>(),
          j.at("test").get<std::vector<std::size_t>>()};
}

// ---------------------------------------------------------------------------
// Synthetic catalogs with planted factorization-machine ratings

struct FacetSpec {
  std::string name;
  std::vector<std::string> values;
  /// Zipf exponent of the value popularity (0 = uniform).
  double zipf = 0.0;
  /// Name of a coarser facet this one nests in (city in state). Child value
  /// v belongs to parent value v % |parent|; the parent is then derived.
  std::string nested_in;
};

struct RatingModelConfig {
  std::size_t ratings_per_user = 40;
  double global_bias = 3.5;
  double user_scale = 0.3;    // std of user linear weights
  double item_scale = 0.15;   // std of item linear weights
  double facet_scale = 0.3;   // std of facet-value linear weights
  double factor_scale = 0.4;  // std of latent factor entries
  double noise_std = 0.0;
  /// Users pick which items to rate with probability proportional to
  /// exp(visit_bias * planted score).
  double visit_bias = 0.0;
};

struct SyntheticConfig {
  std::size_t n_users = 50;
  std::size_t n_items = 200;
  std::vector<FacetSpec> facets;
  RatingModelConfig rating;
  std::uint64_t seed = 7;
};

inline std::vector<FacetSpec> default_facet_specs() {
  return {
      {"category", {"Mexican", "Italian", "Thai", "Chinese", "Japanese", "Indian", "Mediterranean", "Korean"}, 0.6, ""},
      {"state", {"AZ", "NV", "NC", "OH"}, 0.0, ""},
      {"city",
       {"Phoenix", "Las Vegas", "Charlotte", "Cleveland", "Glendale", "Henderson", "Raleigh", "Columbus", "Gilbert", "Reno",
        "Durham", "Cincinnati"},
       0.5,
       "state"},
      {"price_range", {"cheap", "moderate", "expensive", "luxury"}, 0.4, ""},
  };
}

struct SyntheticCatalog {
  Catalog catalog;
  /// Ground-truth FM over [user one-hot | item one-hot | item facet one-hots]:
  /// "w0" [1,1], "w" [D,1], "V" [D,2].
  ParameterSet planted;
};

/// Planted score via the direct pairwise sum (kept independent of the
/// recommender's O(KD) implementation).
inline double planted_score(const ParameterSet& planted, const Catalog& cat, std::size_t user, std::size_t item) {
  const std::size_t M = cat.n_users(), N = cat.n_items();
  std::vector<std::size_t> active{user, M + item};
  for (std::size_t f = 0; f < cat.schema().size(); ++f) active.push_back(M + N + cat.schema().offset(f) + cat.item(item).values[f]);
  const Tensor& w = planted.get("w");
  const Tensor& V = planted.get("V");
  double y = planted.get("w0")[0];
  for (std::size_t a : active) y += w[a];
  for (std::size_t i = 0; i < active.size(); ++i)
    for (std::size_t j = i + 1; j < active.size(); ++j)
      y += V.at(active[i], 0) * V.at(active[j], 0) + V.at(active[i], 1) * V.at(active[j], 1);
  return y;
}

inline SyntheticCatalog generate_synthetic(SyntheticConfig cfg) {
  if (cfg.n_users == 0 || cfg.n_items == 0) throw CatalogError("generate_synthetic: n_users and n_items must be positive");
  if (cfg.facets.empty()) cfg.facets = default_facet_specs();
  std::vector<Facet> facets;
  for (const auto& fs : cfg.facets) facets.push_back({fs.name, fs.values});
  FacetSchema schema(std::move(facets));
  const std::size_t L = schema.size();

  std::vector<long> parent_of(L, -1);  // parent facet index for nested facets
  std::vector<bool> derived(L, false);
  for (std::size_t f = 0; f < L; ++f) {
    if (cfg.facets[f].nested_in.empty()) continue;
    const std::size_t p = schema.facet_index(cfg.facets[f].nested_in);
    if (p == f || derived[p]) throw CatalogError("generate_synthetic: facet '" + cfg.facets[f].name + "' has an invalid parent");
    if (schema.cardinality(f) < schema.cardinality(p))
      throw CatalogError("generate_synthetic: nested facet '" + cfg.facets[f].name + "' is smaller than its parent");
    parent_of[f] = static_cast<long>(p);
    derived[p] = true;
  }

  Rng root(cfg.seed);
  Rng item_rng = root.split(1);
  std::vector<std::vector<double>> popularity(L);
  for (std::size_t f = 0; f < L; ++f)
    for (std::size_t v = 0; v < schema.cardinality(f); ++v)
      popularity[f].push_back(1.0 / std::pow(static_cast<double>(v + 1), cfg.facets[f].zipf));

  const int width = static_cast<int>(std::to_string(cfg.n_items).size());
  std::vector<Item> items;
  for (std::size_t i = 0; i < cfg.n_items; ++i) {
    Item it;
    std::string num = std::to_string(i);
    it.id = "item_" + std::string(static_cast<std::size_t>(std::max(0, width - static_cast<int>(num.size()))), '0') + num;
    it.values.assign(L, 0);
    for (std::size_t f = 0; f < L; ++f)
      if (!derived[f]) it.values[f] = item_rng.categorical(popularity[f]);
    for (std::size_t f = 0; f < L; ++f)
      if (parent_of[f] >= 0) {
        const auto p = static_cast<std::size_t>(parent_of[f]);
        it.values[p] = it.values[f] % schema.cardinality(p);
      }
    items.push_back(std::move(it));
  }

  const int uwidth = static_cast<int>(std::to_string(cfg.n_users).size());
  std::vector<std::string> users;
  for (std::size_t u = 0; u < cfg.n_users; ++u) {
    std::string num = std::to_string(u);
    users.push_back("user_" + std::string(static_cast<std::size_t>(std::max(0, uwidth - static_cast<int>(num.size()))), '0') + num);
  }

  const auto& rm = cfg.rating;
  const std::size_t M = cfg.n_users, N = cfg.n_items, D = M + N + schema.state_dim();
  Rng param_rng = root.split(2);
  ParameterSet planted;
  planted.add("w0", Tensor::scalar(rm.global_bias));
  Tensor w = Tensor::zeros({D, 1});
  Tensor V = Tensor::zeros({D, 2});
  for (std::size_t a = 0; a < D; ++a) {
    const double s = a < M ? rm.user_scale : a < M + N ? rm.item_scale : rm.facet_scale;
    w[a] = param_rng.normal(0.0, s);
    const double fs = a < M + N && a >= M ? rm.factor_scale * 0.5 : rm.factor_scale;
    V.at(a, 0) = param_rng.normal(0.0, fs);
    V.at(a, 1) = param_rng.normal(0.0, fs);
  }
  planted.add("w", std::move(w));
  planted.add("V", std::move(V));

  // Score everything once with a provisional catalog (no ratings yet).
  Catalog shell(schema, items, users, {});
  const std::size_t per_user = std::min(rm.ratings_per_user, N);
  std::vector<Rating> ratings;
  Rng rating_rng = root.split(3);
  for (std::size_t u = 0; u < M; ++u) {
    Rng ur = rating_rng.split(u);
    std::vector<std::pair<double, std::size_t>> keys;  // Gumbel-top-k sampling without replacement
    std::vector<double> scores(N);
    for (std::size_t i = 0; i < N; ++i) {
      scores[i] = planted_score(planted, shell, u, i);
      double e = ur.uniform();
      while (e <= 0.0) e = ur.uniform();
      keys.emplace_back(rm.visit_bias * scores[i] - std::log(-std::log(e)), i);
    }
    std::partial_sort(keys.begin(), keys.begin() + static_cast<long>(per_user), keys.end(), std::greater<>{});
    std::vector<std::size_t> chosen;
    for (std::size_t k = 0; k < per_user; ++k) chosen.push_back(keys[k].second);
    std::sort(chosen.begin(), chosen.end());
    for (std::size_t i : chosen) ratings.push_back({u, i, scores[i] + (rm.noise_std > 0 ? ur.normal(0.0, rm.noise_std) : 0.0)});
  }
  return {Catalog(std::move(schema), std::move(items), std::move(users), std::move(ratings)), std::move(planted)};
}

}  // namespace crs
