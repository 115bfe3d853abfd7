#pragma once

// Belief tracking: n-gram features, the LSTM tracker with per-facet softmax
// heads, plus oracle and degraded trackers used by the simulator.

#include <algorithm>
#include <cctype>
#include <cmath>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "crs/autodiff.hpp"
#include "crs/catalog.hpp"
#include "crs/checkpoint.hpp"
#include "crs/dialoggen.hpp"
#include "crs/ops.hpp"
#include "crs/optim.hpp"
#include "crs/rng.hpp"

namespace crs {

class TrackerError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---------------------------------------------------------------------------
// Features

/// Lowercase, punctuation to spaces, whitespace split, then <s> ... </s>.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> toks{"<s>"};
  std::string cur;
  for (char ch : text) {
    const auto c = static_cast<unsigned char>(ch);
    if (std::isalnum(c) || c == '\'' || c >= 0x80) {
      if (c != '\'') cur += static_cast<char>(std::tolower(c));
    } else if (!cur.empty()) {
      toks.push_back(std::move(cur));
      cur.clear();
    }
  }
  if (!cur.empty()) toks.push_back(std::move(cur));
  toks.emplace_back("</s>");
  return toks;
}

using TokenPair = std::pair<std::string, std::string>;

/// Feature keys of an utterance: sliding bigrams, plus unigrams encoded as
/// (token, "") so single words survive when a bigram is unseen.
inline std::vector<TokenPair> ngram_keys(std::string_view text) {
  const auto toks = tokenize(text);
  std::vector<TokenPair> out;
  for (std::size_t i = 0; i + 1 < toks.size(); ++i) out.emplace_back(toks[i], toks[i + 1]);
  for (std::size_t i = 1; i + 1 < toks.size(); ++i) out.emplace_back(toks[i], "");
  return out;
}

/// Dense index over n-gram keys; index size() is the OOV bucket.
class NGramVocabulary {
 public:
  NGramVocabulary() = default;

  explicit NGramVocabulary(std::vector<TokenPair> keys) : keys_(std::move(keys)) {
    for (std::size_t i = 0; i < keys_.size(); ++i)
      if (!index_.emplace(keys_[i], i).second) throw TrackerError("vocabulary: duplicate entry");
  }

  template <class Texts>
  static NGramVocabulary build(const Texts& texts) {
    std::map<TokenPair, bool> seen;
    for (const auto& t : texts)
      for (auto& k : ngram_keys(t)) seen.emplace(std::move(k), true);
    std::vector<TokenPair> keys;
    for (auto& [k, _] : seen) keys.push_back(k);
    return NGramVocabulary(std::move(keys));
  }

  std::size_t size() const noexcept { return keys_.size(); }
  std::size_t input_dim() const noexcept { return keys_.size() + 1; }
  std::size_t oov() const noexcept { return keys_.size(); }
  const std::vector<TokenPair>& keys() const noexcept { return keys_; }

  std::size_t index(const TokenPair& k) const {
    auto it = index_.find(k);
    return it == index_.end() ? oov() : it->second;
  }

  nlohmann::json to_json() const {
    nlohmann::json arr = nlohmann::json::array();
    for (const auto& [a, b] : keys_) arr.push_back({a, b});
    return arr;
  }

  static NGramVocabulary from_json(const nlohmann::json& arr) {
    std::vector<TokenPair> keys;
    for (const auto& p : arr) keys.emplace_back(p.at(0).get<std::string>(), p.at(1).get<std::string>());
    return NGramVocabulary(std::move(keys));
  }

  friend bool operator==(const NGramVocabulary& a, const NGramVocabulary& b) { return a.keys_ == b.keys_; }

 private:
  std::vector<TokenPair> keys_;
  std::map<TokenPair, std::size_t> index_;
};

/// Sparse count vector z_t as sorted (index, count) pairs.
using SparseCounts = std::vector<std::pair<std::size_t, double>>;

inline SparseCounts vectorize(std::string_view text, const NGramVocabulary& vocab) {
  std::map<std::size_t, double> counts;
  if (text.find_first_not_of(" \t\r\n") == std::string_view::npos) return {};
  for (const auto& k : ngram_keys(text)) counts[vocab.index(k)] += 1.0;
  return {counts.begin(), counts.end()};
}

inline Tensor dense_row(const SparseCounts& z, std::size_t dim) {
  Tensor x = Tensor::zeros({1, dim});
  for (const auto& [i, c] : z) x[i] = c;
  return x;
}

// ---------------------------------------------------------------------------
// Belief state

struct BeliefState {
  std::vector<std::vector<double>> blocks;  // one distribution per facet, schema order

  static BeliefState uniform(const FacetSchema& schema) {
    BeliefState b;
    for (std::size_t f = 0; f < schema.size(); ++f)
      b.blocks.emplace_back(schema.cardinality(f), 1.0 / static_cast<double>(schema.cardinality(f)));
    return b;
  }

  std::size_t size() const noexcept { return blocks.size(); }

  std::size_t dim() const noexcept {
    std::size_t d = 0;
    for (const auto& b : blocks) d += b.size();
    return d;
  }

  /// Concatenated view s_t.
  std::vector<double> flat() const {
    std::vector<double> out;
    for (const auto& b : blocks) out.insert(out.end(), b.begin(), b.end());
    return out;
  }

  std::size_t argmax(std::size_t f) const {
    const auto& b = blocks.at(f);
    return static_cast<std::size_t>(std::max_element(b.begin(), b.end()) - b.begin());
  }

  double max_prob(std::size_t f) const { return blocks.at(f)[argmax(f)]; }

  bool valid(double tol = 1e-6) const {
    for (const auto& b : blocks) {
      double s = 0.0;
      for (double p : b) {
        if (!(p >= 0.0) || !std::isfinite(p)) return false;
        s += p;
      }
      if (std::abs(s - 1.0) > tol) return false;
    }
    return true;
  }
};

/// One user turn as seen by a tracker. The gold informs are only present in
/// simulation; the oracle and degraded trackers read them, the LSTM does not.
struct UserTurn {
  std::string text;
  std::vector<FacetValue> informs;
};

class TrackingSession {
 public:
  virtual ~TrackingSession() = default;
  virtual BeliefState observe(const UserTurn& turn) = 0;
};

class BeliefTracker {
 public:
  virtual ~BeliefTracker() = default;
  virtual const FacetSchema& schema() const = 0;
  /// `key` seeds any per-dialogue randomness.
  virtual std::unique_ptr<TrackingSession> start(std::uint64_t key) const = 0;
};

// ---------------------------------------------------------------------------
// LSTM tracker

struct TrackerArch {
  std::size_t hidden = 64;
  /// One LSTM per facet instead of a shared encoder.
  bool separate = false;
  /// Optional linear projection of z_t before the LSTM (0 = raw counts).
  std::size_t projection = 0;

  nlohmann::json to_json() const { return {{"hidden", hidden}, {"separate", separate}, {"projection", projection}}; }
  static TrackerArch from_json(const nlohmann::json& j) {
    return {j.at("hidden").get<std::size_t>(), j.at("separate").get<bool>(), j.at("projection").get<std::size_t>()};
  }
};

/// Padded batch of dialogues: inputs[t] is [B, V+1]; targets[t][f][b] is the
/// gold value or nullopt when facet f is not yet informed (masked).
struct TrackerBatch {
  std::vector<Tensor> inputs;
  std::vector<std::vector<std::vector<std::optional<std::size_t>>>> targets;
  std::size_t batch_size = 0;
};

class TrackerModel {
 public:
  TrackerModel() = default;

  TrackerModel(FacetSchema schema, NGramVocabulary vocab, TrackerArch arch, std::uint64_t seed)
      : schema_(std::move(schema)), vocab_(std::move(vocab)), arch_(arch) {
    if (arch_.hidden == 0) throw TrackerError("tracker hidden size must be positive");
    Rng rng(seed);
    const std::size_t H = arch_.hidden;
    const std::size_t in = arch_.projection ? arch_.projection : vocab_.input_dim();
    if (arch_.projection) params_.add("proj", Tensor::glorot(vocab_.input_dim(), arch_.projection, rng));
    for (std::size_t e = 0; e < encoders(); ++e) {
      const std::string p = "enc" + std::to_string(e) + "_";
      params_.add(p + "Wx", Tensor::glorot(in, 4 * H, rng));
      params_.add(p + "Wh", Tensor::glorot(H, 4 * H, rng));
      Tensor b = Tensor::zeros({1, 4 * H});
      for (std::size_t j = H; j < 2 * H; ++j) b[j] = 1.0;  // forget-gate bias
      params_.add(p + "b", std::move(b));
    }
    for (std::size_t f = 0; f < schema_.size(); ++f) {
      params_.add("head" + std::to_string(f) + "_W", Tensor::glorot(H, schema_.cardinality(f), rng));
      params_.add("head" + std::to_string(f) + "_b", Tensor::zeros({1, schema_.cardinality(f)}));
    }
  }

  const FacetSchema& schema() const noexcept { return schema_; }
  const NGramVocabulary& vocab() const noexcept { return vocab_; }
  const TrackerArch& arch() const noexcept { return arch_; }
  ParameterSet& params() noexcept { return params_; }
  const ParameterSet& params() const noexcept { return params_; }
  std::size_t encoders() const noexcept { return arch_.separate ? schema_.size() : 1; }
  std::size_t encoder_of(std::size_t facet) const noexcept { return arch_.separate ? facet : 0; }

  /// Mean over labeled (dialogue, turn, facet) entries of the cross-entropy.
  /// Masked entries put nothing on the tape's upstream gradient, so their
  /// heads receive exactly zero gradient from them.
  Var loss(Tape& tape, const ParameterSet& ps, const TrackerBatch& batch) const {
    const std::size_t B = batch.batch_size, H = arch_.hidden;
    std::vector<Var> h, c;
    for (std::size_t e = 0; e < encoders(); ++e) {
      h.push_back(tape.constant(Tensor::zeros({B, H})));
      c.push_back(tape.constant(Tensor::zeros({B, H})));
    }
    std::vector<LstmWeights> w;
    for (std::size_t e = 0; e < encoders(); ++e) {
      const std::string p = "enc" + std::to_string(e) + "_";
      w.push_back({tape.param(ps, p + "Wx"), tape.param(ps, p + "Wh"), tape.param(ps, p + "b")});
    }
    std::vector<Var> hw, hb;
    for (std::size_t f = 0; f < schema_.size(); ++f) {
      hw.push_back(tape.param(ps, "head" + std::to_string(f) + "_W"));
      hb.push_back(tape.param(ps, "head" + std::to_string(f) + "_b"));
    }
    double n_labels = 0.0;
    for (const auto& turn : batch.targets)
      for (const auto& facet : turn)
        for (const auto& y : facet) n_labels += y.has_value();
    if (n_labels == 0.0) throw TrackerError("tracker batch has no labels");

    std::optional<Var> total;
    for (std::size_t t = 0; t < batch.inputs.size(); ++t) {
      Var x = tape.constant(batch.inputs[t]);
      if (arch_.projection) x = tape.matmul(x, tape.param(ps, "proj"));
      for (std::size_t e = 0; e < encoders(); ++e) std::tie(h[e], c[e]) = lstm_cell(tape, x, h[e], c[e], w[e]);
      for (std::size_t f = 0; f < schema_.size(); ++f) {
        Tensor pick = Tensor::zeros({B, schema_.cardinality(f)});
        bool any = false;
        for (std::size_t b = 0; b < B; ++b)
          if (auto y = batch.targets[t][f][b]) {
            pick.at(b, *y) = -1.0 / n_labels;
            any = true;
          }
        if (!any) continue;
        Var logp = tape.log_softmax(tape.add(tape.matmul(h[encoder_of(f)], hw[f]), hb[f]));
        Var term = tape.sum(tape.mul(logp, tape.constant(std::move(pick))));
        total = total ? tape.add(*total, term) : term;
      }
    }
    return *total;
  }

  struct State {
    std::vector<Tensor> h, c;
  };

  State initial_state() const {
    State s;
    for (std::size_t e = 0; e < encoders(); ++e) {
      s.h.push_back(Tensor::zeros({1, arch_.hidden}));
      s.c.push_back(Tensor::zeros({1, arch_.hidden}));
    }
    return s;
  }

  /// Consume one utterance and return the belief after it (tape-free).
  BeliefState step(State& s, std::string_view text) const {
    Tensor x = dense_row(vectorize(text, vocab_), vocab_.input_dim());
    if (arch_.projection) x = ops::matmul(x, params_.get("proj"));
    for (std::size_t e = 0; e < encoders(); ++e) {
      const std::string p = "enc" + std::to_string(e) + "_";
      std::tie(s.h[e], s.c[e]) = lstm_step(x, s.h[e], s.c[e], params_.get(p + "Wx"), params_.get(p + "Wh"), params_.get(p + "b"));
    }
    BeliefState out;
    for (std::size_t f = 0; f < schema_.size(); ++f) {
      const std::string p = "head" + std::to_string(f) + "_";
      Tensor probs = ops::softmax(ops::add(ops::matmul(s.h[encoder_of(f)], params_.get(p + "W")), params_.get(p + "b")));
      out.blocks.emplace_back(probs.data());
    }
    return out;
  }

  /// Belief after each turn of an utterance history.
  std::vector<BeliefState> track(const std::vector<std::string>& history) const {
    if (history.empty()) throw TrackerError("track: empty history");
    State s = initial_state();
    std::vector<BeliefState> out;
    for (const auto& u : history) out.push_back(step(s, u));
    return out;
  }

  Checkpoint to_checkpoint() const {
    return make_checkpoint("tracker", params_,
                           {{"schema", schema_.to_json()}, {"vocab", vocab_.to_json()}, {"arch", arch_.to_json()}});
  }

  static TrackerModel from_checkpoint(const Checkpoint& ck) {
    if (ck.model_kind != "tracker") throw TrackerError("expected a tracker checkpoint, got '" + ck.model_kind + "'");
    TrackerModel m;
    m.schema_ = FacetSchema::from_json(ck.metadata.at("schema"));
    m.vocab_ = NGramVocabulary::from_json(ck.metadata.at("vocab"));
    m.arch_ = TrackerArch::from_json(ck.metadata.at("arch"));
    TrackerModel fresh(m.schema_, m.vocab_, m.arch_, 0);
    if (fresh.params_.names() != ck.parameters.names()) throw TrackerError("tracker checkpoint parameters do not match its architecture");
    for (std::size_t i = 0; i < fresh.params_.size(); ++i)
      if (fresh.params_[i].shape() != ck.parameters[i].shape())
        throw TrackerError("tracker checkpoint parameter " + ck.parameters.name(i) + " has shape " +
                           shape_str(ck.parameters[i].shape()) + ", expected " + shape_str(fresh.params_[i].shape()));
    m.params_ = ck.parameters;
    return m;
  }

 private:
  FacetSchema schema_;
  NGramVocabulary vocab_;
  TrackerArch arch_;
  ParameterSet params_;
};

inline TrackerBatch make_batch(const std::vector<const LabeledDialogue*>& dialogues, const NGramVocabulary& vocab,
                               const FacetSchema& schema) {
  TrackerBatch b;
  b.batch_size = dialogues.size();
  std::size_t T = 0;
  for (const auto* d : dialogues) T = std::max(T, d->turns.size());
  for (std::size_t t = 0; t < T; ++t) {
    Tensor x = Tensor::zeros({b.batch_size, vocab.input_dim()});
    std::vector<std::vector<std::optional<std::size_t>>> y(schema.size(), std::vector<std::optional<std::size_t>>(b.batch_size));
    for (std::size_t i = 0; i < dialogues.size(); ++i) {
      const auto& d = *dialogues[i];
      if (t >= d.turns.size()) continue;  // padding: no input, no labels
      for (const auto& [k, cnt] : vectorize(d.turns[t].text, vocab)) x.at(i, k) = cnt;
      const auto labels = d.labels_after(t, schema.size());
      for (std::size_t f = 0; f < schema.size(); ++f) y[f][i] = labels[f];
    }
    b.inputs.push_back(std::move(x));
    b.targets.push_back(std::move(y));
  }
  return b;
}

// ---------------------------------------------------------------------------
// Trackers usable by the dialogue loop

class NeuralTracker : public BeliefTracker {
 public:
  explicit NeuralTracker(std::shared_ptr<const TrackerModel> model) : model_(std::move(model)) {}
  const FacetSchema& schema() const override { return model_->schema(); }
  const TrackerModel& model() const { return *model_; }

  std::unique_ptr<TrackingSession> start(std::uint64_t) const override {
    struct Session : TrackingSession {
      const TrackerModel* m;
      TrackerModel::State s;
      explicit Session(const TrackerModel* model) : m(model), s(model->initial_state()) {}
      BeliefState observe(const UserTurn& turn) override { return m->step(s, turn.text); }
    };
    return std::make_unique<Session>(model_.get());
  }

 private:
  std::shared_ptr<const TrackerModel> model_;
};

/// Perfect tracker: one-hot on gold informed values, uniform elsewhere.
class OracleTracker : public BeliefTracker {
 public:
  explicit OracleTracker(FacetSchema schema) : schema_(std::move(schema)) {}
  const FacetSchema& schema() const override { return schema_; }

  std::unique_ptr<TrackingSession> start(std::uint64_t) const override {
    struct Session : TrackingSession {
      BeliefState b;
      explicit Session(const FacetSchema& s) : b(BeliefState::uniform(s)) {}
      BeliefState observe(const UserTurn& turn) override {
        for (const auto& fv : turn.informs) {
          auto& block = b.blocks.at(fv.facet);
          std::fill(block.begin(), block.end(), 0.0);
          block.at(fv.value) = 1.0;
        }
        return b;
      }
    };
    return std::make_unique<Session>(schema_);
  }

 private:
  FacetSchema schema_;
};

/// Wraps a tracker so that, per dialogue and informed facet, with
/// probability p the distribution is re-pointed at a fixed random wrong
/// value (its probability swapped with the current argmax). The maximum
/// probability is unchanged, only which value carries it.
class DegradedTracker : public BeliefTracker {
 public:
  DegradedTracker(std::shared_ptr<const BeliefTracker> base, double p, std::uint64_t seed)
      : base_(std::move(base)), p_(p), seed_(seed) {
    if (!(p_ >= 0.0 && p_ <= 1.0)) throw TrackerError("degradation probability must be in [0, 1]");
  }
  const FacetSchema& schema() const override { return base_->schema(); }
  double probability() const noexcept { return p_; }

  std::unique_ptr<TrackingSession> start(std::uint64_t key) const override {
    struct Session : TrackingSession {
      std::unique_ptr<TrackingSession> inner;
      const FacetSchema* schema;
      std::vector<std::optional<std::size_t>> gold;
      std::vector<bool> corrupt;
      std::vector<std::size_t> wrong;  // value index among the non-gold values
      BeliefState observe(const UserTurn& turn) override {
        BeliefState b = inner->observe(turn);
        for (const auto& fv : turn.informs) gold.at(fv.facet) = fv.value;
        for (std::size_t f = 0; f < b.size(); ++f) {
          if (!corrupt[f] || !gold[f] || schema->cardinality(f) < 2) continue;
          const std::size_t w = wrong[f] >= *gold[f] ? wrong[f] + 1 : wrong[f];
          std::swap(b.blocks[f][b.argmax(f)], b.blocks[f][w]);
        }
        return b;
      }
    };
    auto s = std::make_unique<Session>();
    s->inner = base_->start(key);
    s->schema = &base_->schema();
    const std::size_t L = s->schema->size();
    s->gold.resize(L);
    Rng rng = Rng(seed_).split(key);
    for (std::size_t f = 0; f < L; ++f) {
      // Fixed draw order so p only moves the threshold, not the stream.
      const double u = rng.uniform();
      const std::size_t n = s->schema->cardinality(f);
      s->corrupt.push_back(u < p_);
      s->wrong.push_back(n > 1 ? rng.below(n - 1) : 0);
    }
    return s;
  }

 private:
  std::shared_ptr<const BeliefTracker> base_;
  double p_;
  std::uint64_t seed_;
};

// ---------------------------------------------------------------------------
// Accuracy

struct TrackerAccuracy {
  /// Fraction of (dialogue, turn, informed facet) labels whose argmax is gold.
  double label = 0.0;
  /// Fraction of (dialogue, turn) where every informed facet is correct.
  double joint = 0.0;
  std::vector<double> per_facet;
};

inline TrackerAccuracy measure_accuracy(const BeliefTracker& tracker, const std::vector<LabeledDialogue>& dialogues) {
  const std::size_t L = tracker.schema().size();
  std::vector<double> hit(L, 0.0), seen(L, 0.0);
  double joint_hit = 0.0, joint_n = 0.0;
  for (const auto& d : dialogues) {
    auto session = tracker.start(d.rating);
    for (std::size_t t = 0; t < d.turns.size(); ++t) {
      const BeliefState b = session->observe({d.turns[t].text, d.turns[t].informs});
      const auto labels = d.labels_after(t, L);
      bool all = true, any = false;
      for (std::size_t f = 0; f < L; ++f) {
        if (!labels[f]) continue;
        any = true;
        const bool ok = b.argmax(f) == *labels[f];
        hit[f] += ok;
        seen[f] += 1.0;
        all = all && ok;
      }
      if (any) {
        joint_hit += all;
        joint_n += 1.0;
      }
    }
  }
  TrackerAccuracy acc;
  double h = 0.0, n = 0.0;
  for (std::size_t f = 0; f < L; ++f) {
    acc.per_facet.push_back(seen[f] > 0 ? hit[f] / seen[f] : 0.0);
    h += hit[f];
    n += seen[f];
  }
  acc.label = n > 0 ? h / n : 0.0;
  acc.joint = joint_n > 0 ? joint_hit / joint_n : 0.0;
  return acc;
}

/// Bisection on the corruption probability so measured label accuracy on
/// `dev` lands within `tolerance` of `target`.
inline std::shared_ptr<DegradedTracker> calibrate_degradation(std::shared_ptr<const BeliefTracker> base,
                                                              const std::vector<LabeledDialogue>& dev, double target,
                                                              std::uint64_t seed, double tolerance = 0.02) {
  if (!(target > 0.0)) throw TrackerError("degradation target must be positive");
  const double current = measure_accuracy(*base, dev).label;
  if (target > current + tolerance)
    throw TrackerError("degradation target " + std::to_string(target) + " is above the tracker's accuracy " +
                       std::to_string(current));
  auto at = [&](double p) { return std::make_shared<DegradedTracker>(base, p, seed); };
  if (target >= current) return at(0.0);
  double lo = 0.0, hi = 1.0;
  if (measure_accuracy(*at(1.0), dev).label > target + tolerance)
    throw TrackerError("degradation target " + std::to_string(target) + " is below what full corruption reaches");
  std::shared_ptr<DegradedTracker> best = at(0.0);
  double best_err = std::abs(current - target);
  for (int it = 0; it < 40 && best_err > tolerance / 4; ++it) {
    const double mid = 0.5 * (lo + hi);
    auto cand = at(mid);
    const double acc = measure_accuracy(*cand, dev).label;
    if (std::abs(acc - target) < best_err) {
      best_err = std::abs(acc - target);
      best = cand;
    }
    (acc > target ? lo : hi) = mid;
  }
  if (best_err > tolerance) throw TrackerError("could not calibrate degradation to " + std::to_string(target));
  return best;
}

// ---------------------------------------------------------------------------
// Training

struct TrackerTrainConfig {
  TrackerArch arch;
  OptimizerConfig optimizer{OptimizerKind::adam, 0.001};
  std::size_t max_epochs = 30;
  std::size_t batch_size = 32;
  std::size_t patience = 3;
  std::uint64_t seed = 1;
};

struct TrackerEpoch {
  std::size_t epoch = 0;
  double train_loss = 0.0;
  TrackerAccuracy dev;
};

struct TrackerTrainResult {
  std::shared_ptr<TrackerModel> model;  // parameters of the best dev epoch
  std::vector<TrackerEpoch> log;
  TrackerAccuracy best_dev;
};

template <class OnEpoch>
TrackerTrainResult train_tracker(const FacetSchema& schema, const std::vector<LabeledDialogue>& train,
                                 const std::vector<LabeledDialogue>& dev, const TrackerTrainConfig& cfg, OnEpoch&& on_epoch) {
  if (train.empty()) throw TrackerError("train_tracker: empty training corpus");
  if (cfg.batch_size == 0) throw TrackerError("train_tracker: batch size must be positive");
  cfg.optimizer.validate();
  std::vector<std::string> texts;
  for (const auto& d : train)
    for (const auto& t : d.turns) texts.push_back(t.text);
  auto model = std::make_shared<TrackerModel>(schema, NGramVocabulary::build(texts), cfg.arch, cfg.seed);
  Optimizer opt(cfg.optimizer);
  const std::vector<LabeledDialogue>& eval_set = dev.empty() ? train : dev;

  TrackerTrainResult res;
  ParameterSet best = model->params();
  double best_joint = -1.0;
  std::size_t since_best = 0;
  std::vector<std::size_t> order(train.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  const Rng root(cfg.seed);
  for (std::size_t epoch = 1; epoch <= cfg.max_epochs; ++epoch) {
    Rng rng = root.split(epoch);
    for (std::size_t i = order.size(); i > 1; --i) std::swap(order[i - 1], order[rng.below(i)]);
    double loss_sum = 0.0;
    std::size_t n_batches = 0;
    for (std::size_t s = 0; s < order.size(); s += cfg.batch_size) {
      std::vector<const LabeledDialogue*> batch;
      for (std::size_t k = s; k < std::min(order.size(), s + cfg.batch_size); ++k) batch.push_back(&train[order[k]]);
      TrackerBatch tb = make_batch(batch, model->vocab(), schema);
      Tape tape;
      Var loss = model->loss(tape, model->params(), tb);
      loss_sum += loss.value().item();
      ++n_batches;
      opt.step(model->params(), tape.backward(loss, model->params()));
    }
    TrackerEpoch e{epoch, loss_sum / static_cast<double>(n_batches), measure_accuracy(NeuralTracker(model), eval_set)};
    res.log.push_back(e);
    on_epoch(e);
    if (e.dev.joint > best_joint) {
      best_joint = e.dev.joint;
      best = model->params();
      res.best_dev = e.dev;
      since_best = 0;
    } else if (++since_best >= cfg.patience) {
      break;
    }
  }
  model->params() = best;
  res.model = model;
  return res;
}

inline TrackerTrainResult train_tracker(const FacetSchema& schema, const std::vector<LabeledDialogue>& train,
                                        const std::vector<LabeledDialogue>& dev, const TrackerTrainConfig& cfg) {
  return train_tracker(schema, train, dev, cfg, [](const TrackerEpoch&) {});
}

}  // namespace crs
