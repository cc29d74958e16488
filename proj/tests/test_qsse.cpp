#include "qgn/qsse.hpp"

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "qgn/rng.hpp"

using namespace qgn;

namespace {

Tensor rand_t(std::vector<int> shape, RandomSource& rng, double lo = -1.0, double hi = 1.0) {
  Tensor t(std::move(shape));
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
  return t;
}

double sigmoid_ref(double z) { return 1.0 / (1.0 + std::exp(-z)); }

}  // namespace

TEST(Qsse, GateMatchesScalarReference) {
  RandomSource rng(40);
  ParamStore ps;
  const int C = 4, r = 2;  // hidden = 2C/r = 4
  QsseBlock block = QsseBlock::create(ps, rng, "se", C, r);

  Tensor zq = rand_t({1, C}, rng), zg = rand_t({1, C}, rng);
  Tape t;
  ParamBinder p(&t, &ps, false);
  Tensor got = block.gate_from_descriptors(p, t.constant(zq), t.constant(zg)).val();

  // Reference: independent loop transcription of sigmoid(W2 relu(W1 [zq,zg])).
  const Tensor& w1 = ps.at("se.fc1.w");
  const Tensor& b1 = ps.at("se.fc1.b");
  const Tensor& w2 = ps.at("se.fc2.w");
  const Tensor& b2 = ps.at("se.fc2.b");
  const int hidden = w1.dim(0);
  std::vector<double> z(2 * C);
  for (int c = 0; c < C; ++c) {
    z[static_cast<size_t>(c)] = zq[c];
    z[static_cast<size_t>(C + c)] = zg[c];
  }
  std::vector<double> hvec(static_cast<size_t>(hidden));
  for (int o = 0; o < hidden; ++o) {
    double acc = b1[o];
    for (int i = 0; i < 2 * C; ++i) acc += w1.at({o, i}) * z[static_cast<size_t>(i)];
    hvec[static_cast<size_t>(o)] = std::max(0.0, acc);
  }
  for (int o = 0; o < C; ++o) {
    double acc = b2[o];
    for (int i = 0; i < hidden; ++i) acc += w2.at({o, i}) * hvec[static_cast<size_t>(i)];
    EXPECT_NEAR(got[o], sigmoid_ref(acc), 1e-12);
  }
}

TEST(Qsse, BottleneckShapesFollowReduction) {
  RandomSource rng(41);
  ParamStore ps;
  QsseBlock block = QsseBlock::create(ps, rng, "se", 32, 16);
  // fc1: 2C -> 2C/r, fc2: 2C/r -> C.
  EXPECT_EQ(ps.at("se.fc1.w").shape(), (std::vector<int>{4, 64}));
  EXPECT_EQ(ps.at("se.fc2.w").shape(), (std::vector<int>{32, 4}));
}

TEST(Qsse, GateStaysInOpenUnitInterval) {
  RandomSource rng(42);
  ParamStore ps;
  QsseBlock block = QsseBlock::create(ps, rng, "se", 8, 4);
  for (int trial = 0; trial < 20; ++trial) {
    Tape t;
    ParamBinder p(&t, &ps, false);
    Tensor uq = rand_t({3, 8, 4, 4}, rng, -5, 5);
    Tensor ug = rand_t({3, 8, 4, 4}, rng, -5, 5);
    Tensor g = block.gate(p, t.constant(uq), t.constant(ug)).val();
    for (int64_t i = 0; i < g.numel(); ++i) {
      EXPECT_GT(g[i], 0.0);
      EXPECT_LT(g[i], 1.0);
    }
  }
}

TEST(Qsse, ForwardIsSkipPlusGatedResidual) {
  RandomSource rng(43);
  ParamStore ps;
  QsseBlock block = QsseBlock::create(ps, rng, "se", 6, 2);
  Tape t;
  ParamBinder p(&t, &ps, false);
  Tensor xq = rand_t({2, 6, 3, 3}, rng), uq = rand_t({2, 6, 3, 3}, rng);
  Tensor xg = rand_t({2, 6, 3, 3}, rng), ug = rand_t({2, 6, 3, 3}, rng);
  auto out = qsse_forward(p, block, t.constant(xq), t.constant(uq), t.constant(xg),
                          t.constant(ug));
  const Tensor& s = out.gate.val();
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 6; ++c)
      for (int y = 0; y < 3; ++y)
        for (int x = 0; x < 3; ++x) {
          EXPECT_NEAR(out.xq.val().at({n, c, y, x}),
                      xq.at({n, c, y, x}) + s.at({n, c}) * uq.at({n, c, y, x}), 1e-12);
          EXPECT_NEAR(out.xg.val().at({n, c, y, x}),
                      xg.at({n, c, y, x}) + s.at({n, c}) * ug.at({n, c, y, x}), 1e-12);
        }
}

TEST(Qsse, SameGateDrivesBothStreams) {
  // With u_g = 0 on some channel, the gate still re-scales u_q by the shared
  // value; recomputing both outputs from the single returned gate already
  // proves sharing, so here we just pin that the gate is one tensor per pair.
  RandomSource rng(44);
  ParamStore ps;
  QsseBlock block = QsseBlock::create(ps, rng, "se", 4, 2);
  Tape t;
  ParamBinder p(&t, &ps, false);
  Tensor uq = rand_t({1, 4, 2, 2}, rng), ug = rand_t({1, 4, 2, 2}, rng);
  auto out = qsse_forward(p, block, t.constant(Tensor({1, 4, 2, 2})), t.constant(uq),
                          t.constant(Tensor({1, 4, 2, 2})), t.constant(ug));
  ASSERT_EQ(out.gate.val().shape(), (std::vector<int>{1, 4}));
  // x = 0 makes outputs pure gated residuals; their ratio recovers the gate.
  for (int c = 0; c < 4; ++c) {
    EXPECT_NEAR(out.xq.val().at({0, c, 0, 0}) / uq.at({0, c, 0, 0}), out.gate.val().at({0, c}),
                1e-9);
    EXPECT_NEAR(out.xg.val().at({0, c, 0, 0}) / ug.at({0, c, 0, 0}), out.gate.val().at({0, c}),
                1e-9);
  }
}

TEST(Qsse, ZeroGateReducesToSkipPath) {
  RandomSource rng(45);
  Tape t;
  Tensor x = rand_t({2, 3, 2, 2}, rng), u = rand_t({2, 3, 2, 2}, rng);
  Value out = add(t.constant(x), channel_scale(t.constant(u), t.constant(Tensor({2, 3}))));
  for (int64_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(out.val()[i], x[i]);
}

TEST(Qsse, FullForwardGradients) {
  RandomSource rng(46);
  ParamStore ps;
  QsseBlock block = QsseBlock::create(ps, rng, "se", 4, 2);
  ps.create("in.xq", rand_t({2, 4, 3, 3}, rng));
  ps.create("in.uq", rand_t({2, 4, 3, 3}, rng));
  ps.create("in.xg", rand_t({2, 4, 3, 3}, rng));
  ps.create("in.ug", rand_t({2, 4, 3, 3}, rng));
  Tensor readout_q = rand_t({2, 4, 3, 3}, rng), readout_g = rand_t({2, 4, 3, 3}, rng);

  auto res = test::param_grad_check(
      ps,
      {"se.fc1.w", "se.fc1.b", "se.fc2.w", "se.fc2.b", "in.xq", "in.uq", "in.xg", "in.ug"},
      [&](Tape& t, ParamBinder& p) {
        auto out = qsse_forward(p, block, p("in.xq"), p("in.uq"), p("in.xg"), p("in.ug"));
        Value lq = mean_all(mul(out.xq, t.constant(readout_q)));
        Value lg = mean_all(mul(out.xg, t.constant(readout_g)));
        return add(lq, lg);
      });
  EXPECT_GT(res.checked, 300);
  EXPECT_LT(res.max_rel, 1e-6);
}
