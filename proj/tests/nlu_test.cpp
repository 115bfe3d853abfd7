#include <gtest/gtest.h>

#include "crs/nlu.hpp"
#include "gradcheck.hpp"
#include "test_util.hpp"

using namespace crs;

namespace {

FacetSchema toy_schema() { return FacetSchema({{"color", {"red", "blue", "green"}}, {"size", {"small", "large"}}}); }

LabeledDialogue toy_dialogue(std::string t1, std::vector<FacetValue> i1, std::string t2, std::vector<FacetValue> i2) {
  LabeledDialogue d;
  d.turns = {{std::move(t1), std::move(i1)}, {std::move(t2), std::move(i2)}};
  return d;
}

struct Corpus {
  Catalog catalog;
  TemplatePack pack;
  std::vector<LabeledDialogue> train, dev;
};

const Corpus& template_corpus() {
  static const Corpus c = [] {
    Corpus out;
    out.catalog = generate_synthetic({}).catalog;
    out.pack = load_templates(std::string(CRS_DATA_DIR) + "/templates.jsonl", out.catalog.schema());
    DatasetSplit s = split(out.catalog, {0.8, 0.1, 0.1}, 1);
    out.train = generate_dialogue_corpus(out.catalog, s.train, out.pack, {}, 2);
    out.dev = generate_dialogue_corpus(out.catalog, s.dev, out.pack, {}, 2);
    return out;
  }();
  return c;
}

}  // namespace

TEST(Vectorize, EmptyTextIsZeroVector) {
  NGramVocabulary v(std::vector<TokenPair>{{"mexican", "food"}});
  EXPECT_TRUE(vectorize("", v).empty());
}

TEST(Vectorize, KnownBigramCountsOnce) {
  NGramVocabulary v(std::vector<TokenPair>{{"mexican", "food"}});
  auto z = vectorize("Mexican food!", v);
  ASSERT_FALSE(z.empty());
  EXPECT_EQ(z[0].first, 0u);
  EXPECT_EQ(z[0].second, 1.0);
  // Everything else lands in the OOV bucket.
  for (std::size_t i = 1; i < z.size(); ++i) EXPECT_EQ(z[i].first, v.oov());
}

// Sliding-window oracle: each adjacent token pair counted once.
TEST(Vectorize, SlidingWindowBigrams) {
  NGramVocabulary v(std::vector<TokenPair>{{"very", "very"}, {"very", "good"}});
  auto z = vectorize("very very good", v);
  std::map<std::size_t, double> m(z.begin(), z.end());
  EXPECT_EQ(m[0], 1.0);
  EXPECT_EQ(m[1], 1.0);
  EXPECT_EQ(tokenize("I'm in Las Vegas."), (std::vector<std::string>{"<s>", "im", "in", "las", "vegas", "</s>"}));
}

TEST(Vocabulary, JsonRoundTripAndDenseIndices) {
  auto v = NGramVocabulary::build(std::vector<std::string>{"a b", "b c a"});
  for (std::size_t i = 0; i < v.size(); ++i) EXPECT_EQ(v.index(v.keys()[i]), i);
  EXPECT_EQ(NGramVocabulary::from_json(v.to_json()), v);
}

TEST(Tracker, UntrainedModelGivesValidDistributionsOfLength27) {
  std::vector<Facet> facets;
  const std::size_t sizes[] = {10, 5, 8, 4};
  for (std::size_t f = 0; f < 4; ++f) {
    Facet fc{"f" + std::to_string(f), {}};
    for (std::size_t v = 0; v < sizes[f]; ++v) fc.values.push_back("v" + std::to_string(v));
    facets.push_back(fc);
  }
  FacetSchema schema(facets);
  TrackerModel m(schema, NGramVocabulary::build(std::vector<std::string>{"hello there"}), {8, false, 0}, 3);
  Rng rng(4);
  for (int trial = 0; trial < 30; ++trial) {
    for (std::size_t i = 0; i < m.params().size(); ++i)
      for (auto& x : m.params()[i].values()) x = rng.normal(0.0, 3.0);
    std::vector<std::string> hist;
    for (int t = 0; t < 3; ++t) hist.push_back(trial % 2 ? "hello there" : "zzz qqq");
    for (const auto& b : m.track(hist)) {
      EXPECT_EQ(b.dim(), 27u);
      EXPECT_TRUE(b.valid());
    }
  }
}

TEST(Tracker, EmptyHistoryIsAnError) {
  TrackerModel m(toy_schema(), {}, {4, false, 0}, 1);
  EXPECT_THROW(m.track({}), TrackerError);
}

// FD oracle on a 2-turn toy dialogue for each architecture variant.
TEST(Tracker, GradientMatchesFiniteDifferences) {
  const auto schema = toy_schema();
  std::vector<LabeledDialogue> ds{toy_dialogue("red please", {{0, 0}}, "large one", {{1, 1}}),
                                  toy_dialogue("a small green", {{0, 2}, {1, 0}}, "thanks", {})};
  std::vector<std::string> texts{"red please", "large one", "a small green"};
  auto vocab = NGramVocabulary::build(texts);
  std::vector<const LabeledDialogue*> ptrs{&ds[0], &ds[1]};
  TrackerBatch batch = make_batch(ptrs, vocab, schema);
  for (TrackerArch arch : {TrackerArch{4, false, 0}, TrackerArch{3, true, 0}, TrackerArch{4, false, 5}}) {
    for (std::uint64_t seed = 0; seed < 4; ++seed) {
      TrackerModel m(schema, vocab, arch, seed);
      Rng rng(seed + 10);
      for (std::size_t i = 0; i < m.params().size(); ++i)
        for (auto& x : m.params()[i].values()) x += rng.normal(0.0, 0.3);
      Tape tape;
      Var loss = m.loss(tape, m.params(), batch);
      Gradients g = tape.backward(loss, m.params());
      auto r = oracle::grad_check(
          m.params(),
          [&](const ParameterSet& ps) {
            Tape t;
            return m.loss(t, ps, batch).value().item();
          },
          g);
      EXPECT_LE(r.max_rel_error, 1e-4) << r.worst;
    }
  }
}

TEST(Tracker, MaskedFacetHeadGetsExactlyZeroGradient) {
  const auto schema = toy_schema();
  // Facet "size" is never informed.
  std::vector<LabeledDialogue> ds{toy_dialogue("red please", {{0, 0}}, "hmm", {}),
                                  toy_dialogue("blue", {{0, 1}}, "ok then", {})};
  auto vocab = NGramVocabulary::build(std::vector<std::string>{"red please", "blue"});
  TrackerModel m(schema, vocab, {4, false, 0}, 2);
  TrackerBatch batch = make_batch({&ds[0], &ds[1]}, vocab, schema);
  Tape tape;
  Gradients g = tape.backward(m.loss(tape, m.params(), batch), m.params());
  for (const char* name : {"head1_W", "head1_b"})
    for (double v : g[m.params().index(name)].values()) EXPECT_EQ(v, 0.0) << name;
  double other = 0.0;
  for (double v : g[m.params().index("head0_W")].values()) other += std::abs(v);
  EXPECT_GT(other, 0.0);
}

TEST(Tracker, TrackIsCausal) {
  TrackerModel m(toy_schema(), NGramVocabulary::build(std::vector<std::string>{"red please", "large one"}), {6, false, 0}, 5);
  std::vector<std::string> hist{"red please", "large one", "blue", "small"};
  auto full = m.track(hist);
  for (std::size_t n = 1; n <= hist.size(); ++n) {
    auto prefix = m.track({hist.begin(), hist.begin() + static_cast<long>(n)});
    for (std::size_t t = 0; t < n; ++t) EXPECT_EQ(prefix[t].blocks, full[t].blocks);
  }
}

TEST(Tracker, OverfitsOneExample) {
  const auto schema = toy_schema();
  std::vector<LabeledDialogue> one{toy_dialogue("something green", {{0, 2}}, "make it small", {{1, 0}})};
  TrackerTrainConfig cfg;
  cfg.arch.hidden = 8;
  cfg.optimizer.learning_rate = 0.05;
  cfg.max_epochs = 200;
  cfg.patience = 200;
  auto res = train_tracker(schema, one, one, cfg);
  auto beliefs = res.model->track({"something green", "make it small"});
  EXPECT_EQ(beliefs[1].argmax(0), 2u);
  EXPECT_EQ(beliefs[1].argmax(1), 0u);
  EXPECT_EQ(beliefs[0].argmax(0), 2u);
}

TEST(Tracker, EmptyCorpusIsAnError) {
  EXPECT_THROW(train_tracker(toy_schema(), {}, {}, {}), TrackerError);
}

TEST(Tracker, CheckpointRoundTripPreservesBeliefs) {
  TrackerModel m(toy_schema(), NGramVocabulary::build(std::vector<std::string>{"red please"}), {5, true, 3}, 9);
  test_util::TempDir dir;
  save_checkpoint(dir / "t.json", m.to_checkpoint());
  TrackerModel back = TrackerModel::from_checkpoint(load_checkpoint(dir / "t.json", "tracker"));
  EXPECT_EQ(back.params(), m.params());
  EXPECT_EQ(back.track({"red please", "x"})[1].blocks, m.track({"red please", "x"})[1].blocks);
  Checkpoint wrong = m.to_checkpoint();
  wrong.model_kind = "fm";
  EXPECT_THROW(TrackerModel::from_checkpoint(wrong), TrackerError);
}

TEST(Tracker, LearnsTemplateCorpus) {
  const auto& c = template_corpus();
  TrackerTrainConfig cfg;
  cfg.max_epochs = 15;
  auto res = train_tracker(c.catalog.schema(), c.train, c.dev, cfg);
  EXPECT_GE(res.best_dev.joint, 0.95);
  EXPECT_GE(res.best_dev.label, res.best_dev.joint);
}

// Uniformly random labels leave nothing to learn: dev accuracy against the
// real labels falls to about one in |V^j|.
TEST(Tracker, RandomLabelsGiveChanceAccuracy) {
  const auto& c = template_corpus();
  const auto& schema = c.catalog.schema();
  auto noisy = c.train;
  Rng rng(3);
  for (auto& d : noisy)
    for (auto& t : d.turns)
      for (auto& fv : t.informs) fv.value = rng.below(schema.cardinality(fv.facet));
  TrackerTrainConfig cfg;
  cfg.max_epochs = 3;
  cfg.arch.hidden = 16;
  auto res = train_tracker(schema, noisy, noisy, cfg);
  auto acc = measure_accuracy(NeuralTracker(res.model), c.dev);
  for (std::size_t f = 0; f < schema.size(); ++f)
    EXPECT_NEAR(acc.per_facet[f], 1.0 / static_cast<double>(schema.cardinality(f)), 0.15) << schema.facet(f).name;
}

TEST(Oracle, OneHotOnInformedFacetsUniformElsewhere) {
  OracleTracker t(toy_schema());
  auto s = t.start(0);
  auto b = s->observe({"", {{1, 1}}});
  EXPECT_EQ(b.blocks[1], (std::vector<double>{0.0, 1.0}));
  EXPECT_NEAR(b.blocks[0][0], 1.0 / 3.0, 1e-15);
  EXPECT_TRUE(b.valid());
  OracleTracker full(template_corpus().catalog.schema());
  EXPECT_EQ(measure_accuracy(full, template_corpus().dev).label, 1.0);
  EXPECT_EQ(measure_accuracy(full, template_corpus().dev).joint, 1.0);
}

TEST(Degraded, ZeroProbabilityIsIdentity) {
  auto base = std::make_shared<OracleTracker>(template_corpus().catalog.schema());
  DegradedTracker d(base, 0.0, 1);
  const auto& dev = template_corpus().dev;
  EXPECT_EQ(measure_accuracy(d, dev).label, 1.0);
  auto same = calibrate_degradation(base, dev, 1.0, 1);
  EXPECT_EQ(same->probability(), 0.0);
}

TEST(Degraded, CalibratesToTargetWithinTwoPoints) {
  auto base = std::make_shared<OracleTracker>(template_corpus().catalog.schema());
  const auto& dev = template_corpus().dev;
  for (double target : {0.95, 0.80, 0.65, 0.525}) {
    auto d = calibrate_degradation(base, dev, target, 7);
    const double acc = measure_accuracy(*d, dev).label;
    EXPECT_NEAR(acc, target, 0.02) << target;
  }
  EXPECT_THROW(calibrate_degradation(base, dev, 0.0, 7), TrackerError);
}

TEST(Degraded, KeepsDistributionsValidAndMaxProbability) {
  const auto& c = template_corpus();
  auto base = std::make_shared<OracleTracker>(c.catalog.schema());
  DegradedTracker d(base, 1.0, 3);
  for (const auto& dlg : c.dev) {
    auto sb = base->start(dlg.rating), sd = d.start(dlg.rating);
    for (const auto& t : dlg.turns) {
      auto a = sb->observe({t.text, t.informs}), b = sd->observe({t.text, t.informs});
      EXPECT_TRUE(b.valid());
      for (std::size_t f = 0; f < a.size(); ++f) EXPECT_EQ(a.max_prob(f), b.max_prob(f));
    }
  }
  EXPECT_EQ(measure_accuracy(d, c.dev).label, 0.0);
}

TEST(Degraded, TargetAboveTrackerAccuracyIsAnError) {
  auto base = std::make_shared<OracleTracker>(template_corpus().catalog.schema());
  auto weak = calibrate_degradation(base, template_corpus().dev, 0.6, 2);
  EXPECT_THROW(calibrate_degradation(weak, template_corpus().dev, 0.9, 2), TrackerError);
}
