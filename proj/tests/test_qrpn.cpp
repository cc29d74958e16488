#include "qgn/qrpn.hpp"

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "oracles.hpp"
#include "qgn/losses.hpp"
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

TEST(QueryGate, MatchesScalarReference) {
  RandomSource rng(80);
  ParamStore ps;
  const int C = 3, pool = 2;
  QueryGate gate = QueryGate::create(ps, rng, "qg", C, pool, 1);  // hidden = C
  Tensor qmap = rand_t({C, 5, 5}, rng);
  Box box{0.5, 1.0, 4.5, 4.0};

  Tape t;
  ParamBinder p(&t, &ps, false);
  Value pooled = roi_pool_max(t.constant(qmap), {box.arr()}, pool, pool);
  Tensor got = gate.gate_from_roi(p, t.constant(qmap), box).val();

  // Flattened pooled block through the two layers, transcribed by hand.
  const Tensor& pv = pooled.val();
  std::vector<double> flat(static_cast<size_t>(C * pool * pool));
  for (int64_t i = 0; i < pv.numel(); ++i) flat[static_cast<size_t>(i)] = pv[i];
  const Tensor& w1 = ps.at("qg.fc1.w");
  const Tensor& b1 = ps.at("qg.fc1.b");
  const Tensor& w2 = ps.at("qg.fc2.w");
  const Tensor& b2 = ps.at("qg.fc2.b");
  std::vector<double> h(static_cast<size_t>(w1.dim(0)));
  for (int o = 0; o < w1.dim(0); ++o) {
    double acc = b1[o];
    for (size_t i = 0; i < flat.size(); ++i) acc += w1.at({o, static_cast<int>(i)}) * flat[i];
    h[static_cast<size_t>(o)] = std::max(0.0, acc);
  }
  for (int o = 0; o < C; ++o) {
    double acc = b2[o];
    for (int i = 0; i < w1.dim(0); ++i) acc += w2.at({o, i}) * h[static_cast<size_t>(i)];
    EXPECT_NEAR(got[o], sigmoid_ref(acc), 1e-12);
  }
}

TEST(QueryGate, BottleneckUsesAllPixelsOfAllChannels) {
  RandomSource rng(81);
  ParamStore ps;
  QueryGate gate = QueryGate::create(ps, rng, "qg", 16, 3, 4);
  EXPECT_EQ(ps.at("qg.fc1.w").shape(), (std::vector<int>{4, 16 * 3 * 3}));
  EXPECT_EQ(ps.at("qg.fc2.w").shape(), (std::vector<int>{16, 4}));
}

TEST(QueryGate, OutputInOpenUnitInterval) {
  RandomSource rng(82);
  ParamStore ps;
  QueryGate gate = QueryGate::create(ps, rng, "qg", 8, 2, 2);
  Tape t;
  ParamBinder p(&t, &ps, false);
  Tensor g = gate.gate_from_roi(p, t.constant(rand_t({8, 6, 6}, rng, -4, 4)), {1, 1, 5, 5}).val();
  ASSERT_EQ(g.shape(), (std::vector<int>{8}));
  for (int c = 0; c < 8; ++c) {
    EXPECT_GT(g[c], 0.0);
    EXPECT_LT(g[c], 1.0);
  }
}

TEST(RpnHead, StarVariantHasNoRegression) {
  RandomSource rng(83);
  ParamStore ps;
  RpnHead star = RpnHead::create(ps, rng, "star", 8, 3, false);
  EXPECT_FALSE(ps.has("star.reg.w"));
  Tape t;
  ParamBinder p(&t, &ps, false);
  auto out = star.forward(p, t.constant(rand_t({1, 8, 4, 6}, rng)));
  EXPECT_EQ(out.cls_logits.val().shape(), (std::vector<int>{1, 3, 4, 6}));
  EXPECT_FALSE(out.reg_deltas.valid());
}

TEST(RpnHead, FullVariantShapes) {
  RandomSource rng(84);
  ParamStore ps;
  RpnHead rpn = RpnHead::create(ps, rng, "rpn", 8, 3, true);
  Tape t;
  ParamBinder p(&t, &ps, false);
  auto out = rpn.forward(p, t.constant(rand_t({1, 8, 4, 6}, rng)));
  EXPECT_EQ(out.reg_deltas.val().shape(), (std::vector<int>{1, 12, 4, 6}));
}

TEST(QueryGateAndStarHead, JointGradients) {
  RandomSource rng(85);
  ParamStore ps;
  const int C = 4;
  QueryGate gate = QueryGate::create(ps, rng, "qg", C, 2, 2);
  RpnHead star = RpnHead::create(ps, rng, "star", C, 2, false);
  ps.create("in.qmap", rand_t({C, 6, 6}, rng));
  ps.create("in.gmap", rand_t({C, 6, 6}, rng));
  const Box qbox{1.0, 1.5, 4.5, 5.0};
  std::vector<double> targets = {1, 0, 0, 1, 0, 1, 0, 0};

  std::vector<std::string> names = {"in.qmap", "in.gmap"};
  for (const auto& [name, tensor] : ps.all())
    if (name.rfind("in.", 0) != 0) names.push_back(name);

  auto res = test::param_grad_check(
      ps, names,
      [&](Tape& t, ParamBinder& p) {
        Value g = gate.gate_from_roi(p, p("in.qmap"), qbox);
        Value gated = channel_scale_single(p("in.gmap"), g);
        Value fmap4 = reshape(gated, {1, C, 6, 6});
        auto out = star.forward(p, fmap4);
        // Eight fixed anchor logits sampled off the [1,2,6,6] cls map.
        Value flat = reshape(out.cls_logits, {72, 1});
        Value picked = reshape(take_rows(flat, {0, 9, 18, 27, 36, 45, 54, 63}), {8});
        return proposal_loss(picked, targets);
      },
      1e-5, 3);
  EXPECT_LT(res.max_rel, 1e-5);
}

TEST(AnchorScores, FlattenOrderMatchesAnchorLayout) {
  // Map value encodes its own (a,y,x); after flattening, entry i must equal
  // the value at the anchor with index i = (a*H + y)*W + x.
  const int A = 2, H = 3, W = 4;
  Tensor map({A, H, W});
  for (int a = 0; a < A; ++a)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) map.at({a, y, x}) = a * 10000 + y * 100 + x;
  auto flat = flatten_anchor_scores(map, false);
  auto anchors = make_anchors(H, W, 8, {16.0}, {0.5, 1.0});
  ASSERT_EQ(flat.size(), anchors.size());
  for (int a = 0; a < A; ++a)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const size_t i = (static_cast<size_t>(a) * H + static_cast<size_t>(y)) * W + static_cast<size_t>(x);
        EXPECT_DOUBLE_EQ(flat[i], a * 10000 + y * 100 + x);
        // Anchor at that index sits at cell (y,x): centers must match.
        EXPECT_DOUBLE_EQ(anchors[i].cx(), (x + 0.5) * 8);
        EXPECT_DOUBLE_EQ(anchors[i].cy(), (y + 0.5) * 8);
      }
}

TEST(DecodeAnchorDeltas, ZeroDeltasReproduceAnchors) {
  auto anchors = make_anchors(2, 2, 8, {8.0}, {1.0});
  Tensor reg({4, 2, 2});
  auto boxes = decode_anchor_deltas(anchors, reg, 100, 100);
  for (size_t i = 0; i < anchors.size(); ++i) {
    EXPECT_NEAR(boxes[i].x1, anchors[i].x1, 1e-12);
    EXPECT_NEAR(boxes[i].y2, anchors[i].y2, 1e-12);
  }
}

TEST(DecodeAnchorDeltas, HandComputedShift) {
  std::vector<Box> anchors = {{10, 10, 18, 18}};
  Tensor reg({4, 1, 1});
  reg[0] = 0.25;              // dx: move center by 2
  reg[2] = std::log(2.0);     // dw: double the width
  auto boxes = decode_anchor_deltas(anchors, reg, 100, 100);
  EXPECT_NEAR(boxes[0].cx(), 16.0, 1e-12);
  EXPECT_NEAR(boxes[0].w(), 16.0, 1e-12);
  EXPECT_NEAR(boxes[0].h(), 8.0, 1e-12);
}

TEST(DecodeAnchorDeltas, DecodedBoxesAreClippedToImage) {
  std::vector<Box> anchors = {{0, 0, 8, 8}};
  Tensor reg({4, 1, 1});
  reg[2] = std::log(4.0);  // width 32 around cx 4 would span [-12, 20]
  auto boxes = decode_anchor_deltas(anchors, reg, 20, 20);
  EXPECT_DOUBLE_EQ(boxes[0].x1, 0.0);
  EXPECT_DOUBLE_EQ(boxes[0].x2, 20.0);
}

TEST(SelectProposals, RespectsCapsAndSuppression) {
  std::vector<Box> boxes = {{0, 0, 10, 10}, {1, 1, 11, 11}, {30, 30, 40, 40}, {60, 0, 70, 10}};
  std::vector<double> scores = {0.9, 0.8, 0.7, 0.6};
  auto kept = select_proposals(boxes, scores, 10, 10, 0.5);
  EXPECT_EQ(kept, (std::vector<int>{0, 2, 3}));  // box 1 suppressed by box 0
  auto capped = select_proposals(boxes, scores, 10, 2, 0.5);
  EXPECT_EQ(capped, (std::vector<int>{0, 2}));
  auto pre_capped = select_proposals(boxes, scores, 1, 10, 0.5);
  EXPECT_EQ(pre_capped, (std::vector<int>{0}));
}

TEST(FuseScores, ProbabilityAndLogitModes) {
  Tensor obj({1, 2, 1});
  Tensor sim({1, 2, 1});
  obj[0] = 1.0;
  obj[1] = -2.0;
  sim[0] = 0.5;
  sim[1] = 3.0;
  auto p = fuse_scores(obj, sim, ScoreFusion::kProbability);
  EXPECT_NEAR(p[0], sigmoid_ref(1.0) + sigmoid_ref(0.5), 1e-12);
  EXPECT_NEAR(p[1], sigmoid_ref(-2.0) + sigmoid_ref(3.0), 1e-12);
  auto l = fuse_scores(obj, sim, ScoreFusion::kLogit);
  EXPECT_NEAR(l[0], 1.5, 1e-12);
  EXPECT_NEAR(l[1], 1.0, 1e-12);
}
