#include <gtest/gtest.h>

#include <cmath>
#include <limits>

#include "crs/autodiff.hpp"
#include "crs/checkpoint.hpp"
#include "crs/optim.hpp"
#include "gradcheck.hpp"

using namespace crs;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t = Tensor::zeros(std::move(shape));
  for (auto& v : t.values()) v = rng.uniform(-scale, scale);
  return t;
}

}  // namespace

TEST(Tensor, RejectsMismatchedData) { EXPECT_THROW(Tensor({2, 2}, {1.0, 2.0}), DimensionError); }

TEST(Ops, SoftmaxOfZerosIsUniform) {
  Tensor y = ops::softmax(Tensor::row({0.0, 0.0}));
  EXPECT_DOUBLE_EQ(y[0], 0.5);
  EXPECT_DOUBLE_EQ(y[1], 0.5);
}

TEST(Ops, ReluClampsNegatives) {
  Tensor y = ops::relu(Tensor::row({-1.0, 2.0}));
  EXPECT_EQ(y, Tensor::row({0.0, 2.0}));
}

TEST(Ops, SoftmaxRowsArePositiveAndNormalized) {
  Rng rng(3);
  for (int trial = 0; trial < 50; ++trial) {
    Tensor y = ops::softmax(random_tensor({4, 7}, rng, 30.0));
    for (std::size_t r = 0; r < 4; ++r) {
      double s = 0.0;
      for (double v : y.row_span(r)) {
        EXPECT_GT(v, 0.0);
        s += v;
      }
      EXPECT_NEAR(s, 1.0, 1e-9);
    }
  }
}

TEST(Ops, ShapeMismatchNamesOpAndShapes) {
  try {
    ops::matmul(Tensor::zeros({2, 3}), Tensor::zeros({2, 3}));
    FAIL() << "expected DimensionError";
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("matmul"), std::string::npos);
    EXPECT_NE(msg.find("[2,3]"), std::string::npos);
  }
}

TEST(Ops, NonFiniteInputIsRejected) {
  Tape t;
  EXPECT_THROW(t.constant(Tensor::row({std::numeric_limits<double>::infinity()})), NumericError);
}

TEST(Lstm, ZeroWeightsGiveZeroHidden) {
  ParameterSet ps;
  ps.add("wx", Tensor::zeros({3, 8}));
  ps.add("wh", Tensor::zeros({2, 8}));
  ps.add("b", Tensor::zeros({1, 8}));
  Tape t;
  auto [h, c] = lstm_cell(t, t.constant(Tensor::row({0.3, -2.0, 5.0})), t.constant(Tensor::zeros({1, 2})),
                          t.constant(Tensor::zeros({1, 2})), {t.param(ps, "wx"), t.param(ps, "wh"), t.param(ps, "b")});
  for (double v : h.value().values()) EXPECT_EQ(v, 0.0);
  for (double v : c.value().values()) EXPECT_EQ(v, 0.0);
}

TEST(Lstm, TapeAndPlainStepAgree) {
  Rng rng(11);
  Tensor wx = random_tensor({5, 12}, rng), wh = random_tensor({3, 12}, rng), b = random_tensor({1, 12}, rng);
  Tensor x = random_tensor({2, 5}, rng), h = random_tensor({2, 3}, rng), c = random_tensor({2, 3}, rng);
  Tape t;
  auto [hv, cv] = lstm_cell(t, t.constant(x), t.constant(h), t.constant(c), {t.constant(wx), t.constant(wh), t.constant(b)});
  auto [hp, cp] = lstm_step(x, h, c, wx, wh, b);
  for (std::size_t i = 0; i < hp.size(); ++i) {
    EXPECT_NEAR(hv.value()[i], hp[i], 1e-14);
    EXPECT_NEAR(cv.value()[i], cp[i], 1e-14);
  }
}

TEST(Backward, LinearSumGradientIsInputPerRow) {
  ParameterSet ps;
  ps.add("W", Tensor({2, 2}, {0.3, -0.1, 0.7, 2.0}));
  Tape t;
  // loss = sum(W x) with x = [1, 2] as a column.
  Var loss = t.sum(t.matmul(t.param(ps, "W"), t.constant(Tensor({2, 1}, {1.0, 2.0}))));
  Gradients g = t.backward(loss, ps);
  EXPECT_EQ(g[0], Tensor({2, 2}, {1.0, 2.0, 1.0, 2.0}));
}

TEST(Backward, UnusedParameterHasZeroGradient) {
  ParameterSet ps;
  ps.add("used", Tensor::row({1.0, 2.0}));
  ps.add("unused", Tensor::row({3.0, 4.0}));
  Tape t;
  Gradients g = t.backward(t.sum(t.square(t.param(ps, "used"))), ps);
  EXPECT_EQ(g[1], Tensor::zeros({1, 2}));
  EXPECT_EQ(g[0], Tensor::row({2.0, 4.0}));
}

TEST(Backward, SharedParameterAccumulates) {
  ParameterSet ps;
  ps.add("p", Tensor::row({3.0}));
  Tape t;
  Var p1 = t.param(ps, "p");
  Var p2 = t.param(ps, "p");
  Gradients g = t.backward(t.sum(t.mul(p1, p2)), ps);
  EXPECT_DOUBLE_EQ(g[0][0], 6.0);
}

TEST(Backward, NonScalarLossIsAnError) {
  ParameterSet ps;
  ps.add("p", Tensor::row({1.0, 2.0}));
  Tape t;
  Var v = t.relu(t.param(ps, "p"));
  EXPECT_THROW(t.backward(v, ps), DimensionError);
}

// Composite graph touching every differentiable op, checked against central
// finite differences on 25 random instances.
TEST(Backward, CompositeGraphMatchesFiniteDifferences) {
  for (std::uint64_t trial = 0; trial < 25; ++trial) {
    Rng rng(100 + trial);
    ParameterSet ps;
    ps.add("A", random_tensor({3, 4}, rng));
    ps.add("B", random_tensor({4, 5}, rng));
    ps.add("bias", random_tensor({1, 5}, rng));
    ps.add("C", random_tensor({3, 2}, rng));
    ps.add("s", random_tensor({1, 1}, rng));
    const Tensor weights = random_tensor({3, 7}, rng);

    auto build = [&](Tape& t, const ParameterSet& p) {
      Var h = t.add(t.matmul(t.param(p, "A"), t.param(p, "B")), t.param(p, "bias"));
      Var a = t.relu(h);
      Var b = t.sigmoid(t.slice_cols(h, 0, 3));
      Var c = t.tanh(t.param(p, "C"));
      Var cat = t.concat(t.mul(t.slice_cols(a, 1, 3), c), t.softmax(t.sub(h, t.scale(a, 0.5))));
      Var ls = t.log_softmax(t.add_scalar(cat, t.param(p, "s")));
      Var e = t.mul(ls, t.constant(weights));
      return t.add(t.sum(e), t.add(t.sum(t.square(t.sum_cols(b))), t.sum(t.square(cat))));
    };
    Tape tape;
    Gradients g = tape.backward(build(tape, ps), ps);
    auto loss = [&](const ParameterSet& p) {
      Tape t;
      return build(t, p).value().item();
    };
    auto res = oracle::grad_check(ps, loss, g);
    EXPECT_LE(res.max_rel_error, 1e-4) << "trial " << trial << ": " << res.worst;
  }
}

TEST(Backward, LstmMatchesFiniteDifferences) {
  for (std::uint64_t trial = 0; trial < 20; ++trial) {
    Rng rng(500 + trial);
    ParameterSet ps;
    ps.add("wx", random_tensor({4, 12}, rng));
    ps.add("wh", random_tensor({3, 12}, rng));
    ps.add("b", random_tensor({1, 12}, rng));
    std::vector<Tensor> xs;
    for (int s = 0; s < 3; ++s) xs.push_back(random_tensor({2, 4}, rng));
    auto build = [&](Tape& t, const ParameterSet& p) {
      LstmWeights w{t.param(p, "wx"), t.param(p, "wh"), t.param(p, "b")};
      Var h = t.constant(Tensor::zeros({2, 3})), c = t.constant(Tensor::zeros({2, 3}));
      Var total = t.constant(Tensor::scalar(0.0));
      for (const auto& x : xs) {
        std::tie(h, c) = lstm_cell(t, t.constant(x), h, c, w);
        total = t.add(total, t.sum(t.mul(h, h)));
      }
      return total;
    };
    Tape tape;
    Gradients g = tape.backward(build(tape, ps), ps);
    auto res = oracle::grad_check(ps, [&](const ParameterSet& p) {
      Tape t;
      return build(t, p).value().item();
    }, g);
    EXPECT_LE(res.max_rel_error, 1e-4) << "trial " << trial << ": " << res.worst;
  }
}

TEST(Backward, ForwardIsDeterministic) {
  Rng rng(9);
  ParameterSet ps;
  ps.add("A", random_tensor({3, 3}, rng));
  auto eval = [&] {
    Tape t;
    return t.softmax(t.matmul(t.param(ps, "A"), t.param(ps, "A"))).value();
  };
  EXPECT_EQ(eval(), eval());
}

TEST(Optimizer, SgdStep) {
  ParameterSet ps;
  ps.add("p", Tensor::scalar(1.0));
  Optimizer opt({.kind = OptimizerKind::sgd, .learning_rate = 0.1});
  opt.step(ps, {Tensor::scalar(0.5)});
  EXPECT_DOUBLE_EQ(ps[0][0], 0.95);
  opt.step(ps, {Tensor::scalar(0.0)});
  EXPECT_DOUBLE_EQ(ps[0][0], 0.95);
}

TEST(Optimizer, AdamFirstStepMovesByLearningRate) {
  ParameterSet ps;
  ps.add("p", Tensor::scalar(0.0));
  Optimizer opt({.kind = OptimizerKind::adam, .learning_rate = 0.001});
  opt.step(ps, {Tensor::scalar(1.0)});
  // m_hat = 1, v_hat = 1  =>  p = -lr / (1 + eps)
  EXPECT_NEAR(ps[0][0], -0.001 / (1.0 + 1e-8), 1e-15);
  EXPECT_NEAR(ps[0][0], -0.001, 1e-10);
}

TEST(Optimizer, RmspropKeepsStateAcrossSteps) {
  ParameterSet ps;
  ps.add("p", Tensor::scalar(0.0));
  Optimizer opt({.kind = OptimizerKind::rmsprop, .learning_rate = 0.01, .decay = 0.9});
  opt.step(ps, {Tensor::scalar(1.0)});
  // v = 0.1 -> step = 0.01 / sqrt(0.1)
  const double first = -0.01 / (std::sqrt(0.1) + 1e-8);
  EXPECT_NEAR(ps[0][0], first, 1e-15);
  opt.step(ps, {Tensor::scalar(1.0)});
  // v = 0.19
  EXPECT_NEAR(ps[0][0], first - 0.01 / (std::sqrt(0.19) + 1e-8), 1e-15);
}

TEST(Optimizer, MisalignedRegistriesAreRejected) {
  ParameterSet ps;
  ps.add("p", Tensor::scalar(0.0));
  Optimizer opt({});
  EXPECT_THROW(opt.step(ps, {}), DimensionError);
  EXPECT_THROW(opt.step(ps, {Tensor::row({1.0, 2.0})}), DimensionError);
}

TEST(Optimizer, RejectsNonPositiveEpsilon) {
  EXPECT_THROW(Optimizer({.epsilon = 0.0}), std::invalid_argument);
  EXPECT_THROW(Optimizer({.learning_rate = -1.0}), std::invalid_argument);
}

TEST(Checkpoint, RoundTripIsBitExact) {
  Rng rng(21);
  ParameterSet ps;
  ps.add("zeta", random_tensor({3, 5}, rng, 1e6));
  ps.add("alpha", Tensor::row({-0.0, std::numeric_limits<double>::denorm_min(), 1.0 / 3.0, -1e308}));
  Checkpoint ck = make_checkpoint("policy", ps, {{"note", "x"}});
  const std::string text = to_json(ck).dump();
  Checkpoint back = checkpoint_from_json(json::parse(text), "policy");
  ASSERT_EQ(back.parameters.names(), ps.names());
  for (std::size_t i = 0; i < ps.size(); ++i)
    for (std::size_t k = 0; k < ps[i].size(); ++k)
      EXPECT_EQ(std::bit_cast<std::uint64_t>(ps[i][k]), std::bit_cast<std::uint64_t>(back.parameters[i][k]));
  EXPECT_EQ(back.metadata.at("note"), "x");
  EXPECT_EQ(to_json(back).dump(), text);
}

TEST(Checkpoint, RejectsWrongKindAndVersion) {
  ParameterSet ps;
  ps.add("p", Tensor::scalar(1.0));
  json doc = to_json(make_checkpoint("fm", ps));
  EXPECT_THROW(checkpoint_from_json(doc, "tracker"), CheckpointError);
  doc["format_version"] = 2;
  EXPECT_THROW(checkpoint_from_json(doc), CheckpointError);
}

TEST(Base64, KnownVectors) {
  EXPECT_EQ(base64::encode(""), "");
  EXPECT_EQ(base64::encode("f"), "Zg==");
  EXPECT_EQ(base64::encode("fo"), "Zm8=");
  EXPECT_EQ(base64::encode("foo"), "Zm9v");
  EXPECT_EQ(base64::encode("foobar"), "Zm9vYmFy");
  EXPECT_EQ(base64::decode("Zm8="), "fo");
  EXPECT_EQ(base64::decode("Zg=="), "f");
  EXPECT_THROW(base64::decode("Zm8"), CheckpointError);
}

TEST(Rng, SplitStreamsAreReproducibleAndDistinct) {
  Rng a(5), b(5);
  EXPECT_EQ(a.split(1)(), b.split(1)());
  EXPECT_NE(a.split(1)(), a.split(2)());
  std::vector<double> w{0.2, 0.0, 0.8};
  int counts[3] = {0, 0, 0};
  Rng r(77);
  for (int i = 0; i < 20000; ++i) ++counts[r.categorical(w)];
  EXPECT_EQ(counts[1], 0);
  EXPECT_NEAR(counts[2] / 20000.0, 0.8, 0.02);
}
