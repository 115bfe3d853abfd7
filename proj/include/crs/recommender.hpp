#pragma once

// Factorization-machine scoring over [user | item | belief] features and
// belief-driven candidate retrieval.

#include <algorithm>
#include <cmath>
#include <functional>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "crs/autodiff.hpp"
#include "crs/catalog.hpp"
#include "crs/checkpoint.hpp"
#include "crs/nlu.hpp"
#include "crs/optim.hpp"
#include "crs/rng.hpp"

namespace crs {

class RecommenderError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr std::size_t kFmFactors = 2;

/// Sparse feature vector of dimension `dim`: (index, value) pairs, indices
/// strictly increasing.
struct FeatureVector {
  std::size_t dim = 0;
  std::vector<std::pair<std::size_t, double>> entries;

  std::vector<double> dense() const {
    std::vector<double> x(dim, 0.0);
    for (const auto& [i, v] : entries) x[i] = v;
    return x;
  }
};

struct FmLayout {
  std::size_t users = 0;        // M
  std::size_t items = 0;        // N
  std::size_t belief_dim = 0;   // sum of facet cardinalities
  std::size_t dim() const noexcept { return users + items + belief_dim; }
  friend bool operator==(const FmLayout&, const FmLayout&) = default;
};

inline FeatureVector build_features(const FmLayout& layout, std::size_t user, std::size_t item, std::span<const double> belief) {
  if (user >= layout.users) throw RecommenderError("build_features: user index " + std::to_string(user) + " out of range");
  if (item >= layout.items) throw RecommenderError("build_features: item index " + std::to_string(item) + " out of range");
  if (belief.size() != layout.belief_dim)
    throw RecommenderError("build_features: belief length " + std::to_string(belief.size()) + ", expected " +
                           std::to_string(layout.belief_dim));
  FeatureVector x{layout.dim(), {}};
  x.entries.reserve(2 + belief.size());
  x.entries.emplace_back(user, 1.0);
  x.entries.emplace_back(layout.users + item, 1.0);
  for (std::size_t k = 0; k < belief.size(); ++k)
    if (belief[k] != 0.0) x.entries.emplace_back(layout.users + layout.items + k, belief[k]);
  return x;
}

/// w0 [1,1], w [D,1], V [D,K].
class FmModel {
 public:
  FmModel() = default;

  FmModel(FmLayout layout, std::uint64_t seed, double init_std = 0.01) : layout_(layout) {
    Rng rng(seed);
    const std::size_t D = layout.dim();
    params_.add("w0", Tensor::zeros({1, 1}));
    params_.add("w", Tensor::zeros({D, 1}));
    Tensor V = Tensor::zeros({D, kFmFactors});
    for (auto& v : V.values()) v = rng.normal(0.0, init_std);
    params_.add("V", std::move(V));
  }

  const FmLayout& layout() const noexcept { return layout_; }
  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }

  /// y = w0 + sum_a w_a x_a + 1/2 sum_k [(sum_a V_ak x_a)^2 - sum_a V_ak^2 x_a^2]
  double score(const FeatureVector& x) const { return score(params_, x); }

  static double score(const ParameterSet& ps, const FeatureVector& x) {
    const Tensor& w = ps[1];
    const Tensor& V = ps[2];
    if (x.dim != w.rows()) throw RecommenderError("fm_score: feature dimension " + std::to_string(x.dim) + ", model expects " + std::to_string(w.rows()));
    double y = ps[0][0];
    double sum[kFmFactors] = {}, sq[kFmFactors] = {};
    for (const auto& [a, xa] : x.entries) {
      y += w[a] * xa;
      for (std::size_t k = 0; k < kFmFactors; ++k) {
        const double t = V.at(a, k) * xa;
        sum[k] += t;
        sq[k] += t * t;
      }
    }
    for (std::size_t k = 0; k < kFmFactors; ++k) y += 0.5 * (sum[k] * sum[k] - sq[k]);
    return y;
  }

  /// Adds scale * dy/dparams into `g` (sparse rows only).
  static void accumulate_gradient(const ParameterSet& ps, const FeatureVector& x, double scale, Gradients& g) {
    const Tensor& V = ps[2];
    double sum[kFmFactors] = {};
    for (const auto& [a, xa] : x.entries)
      for (std::size_t k = 0; k < kFmFactors; ++k) sum[k] += V.at(a, k) * xa;
    g[0][0] += scale;
    for (const auto& [a, xa] : x.entries) {
      g[1][a] += scale * xa;
      for (std::size_t k = 0; k < kFmFactors; ++k) g[2].at(a, k) += scale * xa * (sum[k] - V.at(a, k) * xa);
    }
  }

  Checkpoint to_checkpoint() const {
    return make_checkpoint("fm", params_,
                           {{"D", layout_.dim()}, {"M", layout_.users}, {"N", layout_.items}, {"belief_dim", layout_.belief_dim}});
  }

  static FmModel from_checkpoint(const Checkpoint& ck) {
    if (ck.model_kind != "fm") throw RecommenderError("expected an fm checkpoint, got '" + ck.model_kind + "'");
    FmModel m;
    m.layout_ = {ck.metadata.at("M").get<std::size_t>(), ck.metadata.at("N").get<std::size_t>(),
                 ck.metadata.at("belief_dim").get<std::size_t>()};
    const std::size_t D = ck.metadata.at("D").get<std::size_t>();
    if (D != m.layout_.dim()) throw RecommenderError("fm checkpoint: D does not equal M + N + belief_dim");
    if (ck.parameters.names() != std::vector<std::string>{"w0", "w", "V"} || ck.parameters[1].shape() != Shape{D, 1} ||
        ck.parameters[2].shape() != Shape{D, kFmFactors})
      throw RecommenderError("fm checkpoint: parameters do not match layout D=" + std::to_string(D));
    m.params_ = ck.parameters;
    return m;
  }

  /// Throws unless this model was trained for the catalog's shape.
  void check_layout(const Catalog& cat) const {
    const FmLayout want{cat.n_users(), cat.n_items(), cat.schema().state_dim()};
    if (!(want == layout_))
      throw RecommenderError("fm model layout (M=" + std::to_string(layout_.users) + ", N=" + std::to_string(layout_.items) +
                             ", belief=" + std::to_string(layout_.belief_dim) + ") does not match the catalog (M=" +
                             std::to_string(want.users) + ", N=" + std::to_string(want.items) +
                             ", belief=" + std::to_string(want.belief_dim) + ")");
  }

 private:
  FmLayout layout_;
  ParameterSet params_;
};

// ---------------------------------------------------------------------------
// Training

struct FmTrainConfig {
  OptimizerConfig optimizer{OptimizerKind::adam, 0.001};
  std::size_t epochs = 200;
  std::size_t batch_size = 8;
  double l2 = 1e-4;
  double init_std = 0.01;
  /// Ablation: train with an all-zero belief block.
  bool zero_beliefs = false;
  std::uint64_t seed = 1;
};

struct FmEpoch {
  std::size_t epoch = 0;
  double train_rmse = 0.0;
  double dev_rmse = 0.0;
};

struct FmTrainResult {
  FmModel model;
  std::vector<FmEpoch> log;
};

/// Example = (rating index, belief used in its features).
struct FmExample {
  std::size_t rating = 0;
  std::vector<double> belief;
};

inline double fm_rmse(const FmModel& m, const Catalog& cat, const std::vector<FmExample>& data) {
  if (data.empty()) return 0.0;
  double se = 0.0;
  for (const auto& ex : data) {
    const auto& r = cat.ratings()[ex.rating];
    const double e = m.score(build_features(m.layout(), r.user, r.item, ex.belief)) - r.value;
    se += e * e;
  }
  return std::sqrt(se / static_cast<double>(data.size()));
}

/// Mean squared error over the batch plus l2 * (|w|^2 + |V|^2).
inline double fm_batch_loss(const ParameterSet& ps, const Catalog& cat, const FmLayout& layout,
                            const std::vector<const FmExample*>& batch, double l2) {
  double loss = 0.0;
  for (const auto* ex : batch) {
    const auto& r = cat.ratings()[ex->rating];
    const double e = FmModel::score(ps, build_features(layout, r.user, r.item, ex->belief)) - r.value;
    loss += e * e;
  }
  loss /= static_cast<double>(batch.size());
  double reg = 0.0;
  for (std::size_t i = 1; i < 3; ++i)
    for (double v : ps[i].values()) reg += v * v;
  return loss + l2 * reg;
}

inline Gradients fm_batch_gradient(const ParameterSet& ps, const Catalog& cat, const FmLayout& layout,
                                   const std::vector<const FmExample*>& batch, double l2) {
  Gradients g = zero_gradients(ps);
  const double n = static_cast<double>(batch.size());
  for (const auto* ex : batch) {
    const auto& r = cat.ratings()[ex->rating];
    FeatureVector x = build_features(layout, r.user, r.item, ex->belief);
    const double e = FmModel::score(ps, x) - r.value;
    FmModel::accumulate_gradient(ps, x, 2.0 * e / n, g);
  }
  if (l2 > 0.0)
    for (std::size_t i = 1; i < 3; ++i)
      for (std::size_t k = 0; k < ps[i].size(); ++k) g[i][k] += 2.0 * l2 * ps[i][k];
  return g;
}

template <class OnEpoch>
FmTrainResult train_fm(const Catalog& cat, const std::vector<FmExample>& train, const std::vector<FmExample>& dev,
                       const FmTrainConfig& cfg, OnEpoch&& on_epoch) {
  if (train.empty()) throw RecommenderError("train_fm: empty training set");
  if (cfg.batch_size == 0) throw RecommenderError("train_fm: batch size must be positive");
  cfg.optimizer.validate();
  const FmLayout layout{cat.n_users(), cat.n_items(), cat.schema().state_dim()};
  FmTrainResult res{FmModel(layout, cfg.seed, cfg.init_std), {}};
  std::vector<FmExample> tr = train, dv = dev;
  if (cfg.zero_beliefs) {
    for (auto& ex : tr) std::fill(ex.belief.begin(), ex.belief.end(), 0.0);
    for (auto& ex : dv) std::fill(ex.belief.begin(), ex.belief.end(), 0.0);
  }
  double mean = 0.0;
  for (const auto& ex : tr) mean += cat.ratings()[ex.rating].value;
  res.model.params()[0][0] = mean / static_cast<double>(tr.size());

  Optimizer opt(cfg.optimizer);
  std::vector<std::size_t> order(tr.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const Rng root(cfg.seed);
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    Rng rng = root.split(epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      std::vector<const FmExample*> batch;
      for (std::size_t k = s; k < std::min(order.size(), s + cfg.batch_size); ++k) batch.push_back(&tr[order[k]]);
      opt.step(res.model.params(), fm_batch_gradient(res.model.params(), cat, layout, batch, cfg.l2));
    }
    FmEpoch e{epoch, fm_rmse(res.model, cat, tr), fm_rmse(res.model, cat, dv)};
    res.log.push_back(e);
    on_epoch(e);
  }
  return res;
}

inline FmTrainResult train_fm(const Catalog& cat, const std::vector<FmExample>& train, const std::vector<FmExample>& dev,
                              const FmTrainConfig& cfg) {
  return train_fm(cat, train, dev, cfg, [](const FmEpoch&) {});
}

/// Examples whose beliefs are the tracker's end-of-dialogue state.
inline std::vector<FmExample> fm_examples(const BeliefTracker& tracker, const std::vector<LabeledDialogue>& dialogues) {
  std::vector<FmExample> out;
  out.reserve(dialogues.size());
  for (const auto& d : dialogues) {
    auto session = tracker.start(d.rating);
    BeliefState b = BeliefState::uniform(tracker.schema());
    for (const auto& t : d.turns) b = session->observe({t.text, t.informs});
    out.push_back({d.rating, b.flat()});
  }
  return out;
}

// ---------------------------------------------------------------------------
// Retrieval and ranking

struct KnownFacet {
  std::size_t facet = 0;
  std::size_t value = 0;
  double prob = 0.0;
};

inline std::vector<KnownFacet> known_facets(const BeliefState& belief, double theta_known = 0.5) {
  std::vector<KnownFacet> out;
  for (std::size_t f = 0; f < belief.size(); ++f)
    if (belief.max_prob(f) >= theta_known) out.push_back({f, belief.argmax(f), belief.max_prob(f)});
  return out;
}

/// The mu most probable value combinations over the given facets, most
/// probable first; ties go to the lexicographically smaller value tuple.
/// Zero-probability combinations are never returned.
inline std::vector<std::vector<FacetValue>> top_combinations(const BeliefState& belief, const std::vector<std::size_t>& facets,
                                                             std::size_t mu) {
  std::vector<std::vector<std::size_t>> sorted;  // per facet: value indices by prob desc, index asc
  for (std::size_t f : facets) {
    const auto& b = belief.blocks.at(f);
    std::vector<std::size_t> idx(b.size());
    for (std::size_t v = 0; v < idx.size(); ++v) idx[v] = v;
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t x, std::size_t y) { return b[x] > b[y]; });
    sorted.push_back(std::move(idx));
  }
  struct Node {
    double prob;
    std::vector<std::size_t> values;  // value per facet
    std::vector<std::size_t> ranks;
  };
  auto worse = [](const Node& a, const Node& b) {
    if (a.prob != b.prob) return a.prob < b.prob;
    return a.values > b.values;
  };
  auto make = [&](std::vector<std::size_t> ranks) {
    Node n{1.0, {}, std::move(ranks)};
    for (std::size_t i = 0; i < facets.size(); ++i) {
      const std::size_t v = sorted[i][n.ranks[i]];
      n.values.push_back(v);
      n.prob *= belief.blocks[facets[i]][v];
    }
    return n;
  };
  std::priority_queue<Node, std::vector<Node>, decltype(worse)> heap(worse);
  std::set<std::vector<std::size_t>> seen;
  std::vector<std::size_t> start(facets.size(), 0);
  heap.push(make(start));
  seen.insert(start);
  std::vector<std::vector<FacetValue>> out;
  while (!heap.empty() && out.size() < mu) {
    Node top = heap.top();
    heap.pop();
    if (!(top.prob > 0.0)) break;  // only impossible combinations remain
    std::vector<FacetValue> combo;
    for (std::size_t i = 0; i < facets.size(); ++i) combo.push_back({facets[i], top.values[i]});
    out.push_back(std::move(combo));
    for (std::size_t i = 0; i < facets.size(); ++i) {
      if (top.ranks[i] + 1 >= sorted[i].size()) continue;
      auto next = top.ranks;
      ++next[i];
      if (seen.insert(next).second) heap.push(make(std::move(next)));
    }
  }
  return out;
}

struct RetrievalConfig {
  std::size_t mu = 3;
  double theta_known = 0.5;
};

/// Sorted item indices: union of items_matching over the top-mu value
/// combinations of the known facets.
inline std::vector<std::size_t> retrieve_candidates(const BeliefState& belief, const Catalog& cat, const RetrievalConfig& cfg = {}) {
  std::vector<std::size_t> facets;
  for (const auto& k : known_facets(belief, cfg.theta_known)) facets.push_back(k.facet);
  std::set<std::size_t> out;
  for (const auto& combo : top_combinations(belief, facets, cfg.mu)) {
    auto m = cat.items_matching(combo);
    out.insert(m.begin(), m.end());
  }
  return {out.begin(), out.end()};
}

struct ScoredItem {
  std::size_t item = 0;
  double score = 0.0;
  friend bool operator==(const ScoredItem&, const ScoredItem&) = default;
};

/// Score desc, then item id asc (item indices follow id order).
inline void sort_ranked(std::vector<ScoredItem>& list) {
  std::sort(list.begin(), list.end(), [](const ScoredItem& a, const ScoredItem& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.item < b.item;
  });
}

inline std::vector<ScoredItem> rank_items(const FmModel& fm, std::size_t user, const BeliefState& belief,
                                          const std::vector<std::size_t>& items) {
  const auto flat = belief.flat();
  std::vector<ScoredItem> out;
  out.reserve(items.size());
  for (std::size_t i : items) out.push_back({i, fm.score(build_features(fm.layout(), user, i, flat))});
  sort_ranked(out);
  return out;
}

inline std::vector<ScoredItem> recommend(const FmModel& fm, std::size_t user, const BeliefState& belief, const Catalog& cat,
                                         const RetrievalConfig& cfg = {}) {
  return rank_items(fm, user, belief, retrieve_candidates(belief, cat, cfg));
}

}  // namespace crs
