#include "qgn/boxgeom.hpp"

#include <gtest/gtest.h>

#include "oracles.hpp"
#include "qgn/rng.hpp"

using namespace qgn;

TEST(Iou, HandComputedCases) {
  // Identical boxes.
  EXPECT_DOUBLE_EQ(iou({0, 0, 4, 4}, {0, 0, 4, 4}), 1.0);
  // Disjoint.
  EXPECT_DOUBLE_EQ(iou({0, 0, 2, 2}, {3, 3, 5, 5}), 0.0);
  // Edge-touching boxes share no area under the half-open convention.
  EXPECT_DOUBLE_EQ(iou({0, 0, 2, 2}, {2, 0, 4, 2}), 0.0);
  // 2x2 and 4x4 sharing a corner quadrant: inter 1, union 4+16-1.
  EXPECT_DOUBLE_EQ(iou({0, 0, 2, 2}, {1, 1, 5, 5}), 1.0 / 19.0);
  // Nested: 2x2 inside 4x4 -> 4/16.
  EXPECT_DOUBLE_EQ(iou({1, 1, 3, 3}, {0, 0, 4, 4}), 0.25);
  // Half overlap: two 2x4 boxes offset by half a width.
  EXPECT_DOUBLE_EQ(iou({0, 0, 2, 4}, {1, 0, 3, 4}), 1.0 / 3.0);
  // Degenerate (zero-area) box.
  EXPECT_DOUBLE_EQ(iou({1, 1, 1, 3}, {0, 0, 4, 4}), 0.0);
}

TEST(Iou, AreaUsesHalfOpenExtent) {
  Box b{2, 3, 7, 9};
  EXPECT_DOUBLE_EQ(b.area(), 30.0);
  EXPECT_DOUBLE_EQ(b.w(), 5.0);
  EXPECT_DOUBLE_EQ(b.h(), 6.0);
}

TEST(Nms, MatchesQuadraticOracleOnRandomInstances) {
  RandomSource rng(77);
  for (int trial = 0; trial < 1000; ++trial) {
    const int n = 1 + static_cast<int>(rng.randint(0, 49));
    std::vector<Box> boxes;
    std::vector<test::RefBox> ref_boxes;
    std::vector<double> scores;
    for (int i = 0; i < n; ++i) {
      const double x1 = rng.uniform(0, 80), y1 = rng.uniform(0, 60);
      const double w = rng.uniform(1, 30), h = rng.uniform(1, 30);
      boxes.push_back({x1, y1, x1 + w, y1 + h});
      ref_boxes.push_back({x1, y1, x1 + w, y1 + h});
      // Quantized scores make ties common, exercising the stable ordering.
      scores.push_back(std::round(rng.uniform(0, 1) * 20) / 20.0);
    }
    const double thresh = rng.uniform(0.1, 0.9);
    ASSERT_EQ(nms(boxes, scores, thresh), test::nms_ref(ref_boxes, scores, thresh))
        << "trial " << trial;
  }
}

TEST(Nms, KeepsHighestScoringOfOverlappingPair) {
  std::vector<Box> boxes = {{0, 0, 10, 10}, {1, 1, 11, 11}, {40, 40, 50, 50}};
  std::vector<double> scores = {0.5, 0.9, 0.1};
  auto keep = nms(boxes, scores, 0.5);
  ASSERT_EQ(keep.size(), 2u);
  EXPECT_EQ(keep[0], 1);
  EXPECT_EQ(keep[1], 2);
}

TEST(Anchors, LayoutMatchesFlattenedMapOrder) {
  auto anchors = make_anchors(2, 3, 8, {16.0}, {1.0, 2.0});
  ASSERT_EQ(anchors.size(), 2u * 2 * 3);
  // index = (a * fh + row) * fw + col
  const Box& a0 = anchors[0];  // scale 16, ratio 1, row 0, col 0
  EXPECT_DOUBLE_EQ(a0.cx(), 4.0);
  EXPECT_DOUBLE_EQ(a0.cy(), 4.0);
  EXPECT_DOUBLE_EQ(a0.w(), 16.0);
  EXPECT_DOUBLE_EQ(a0.h(), 16.0);
  const Box& a5 = anchors[5];  // still ratio 1, row 1, col 2
  EXPECT_DOUBLE_EQ(a5.cx(), (2 + 0.5) * 8);
  EXPECT_DOUBLE_EQ(a5.cy(), (1 + 0.5) * 8);
  const Box& r2 = anchors[6];  // ratio 2 block starts: h/w = 2, area preserved
  EXPECT_NEAR(r2.h() / r2.w(), 2.0, 1e-12);
  EXPECT_NEAR(r2.w() * r2.h(), 256.0, 1e-9);
}

TEST(Jitter, AlwaysKeepsMinimumOverlap) {
  RandomSource rng(123);
  const Box b{10, 20, 42, 84};
  for (int i = 0; i < 5000; ++i) {
    Box j = jitter_box(b, rng);
    EXPECT_GE(iou(b, j), 0.5);
    EXPECT_TRUE(j.valid());
  }
}

TEST(Jitter, ActuallyMoves) {
  RandomSource rng(124);
  const Box b{0, 0, 20, 40};
  int moved = 0;
  for (int i = 0; i < 100; ++i) {
    Box j = jitter_box(b, rng);
    if (std::abs(j.x1 - b.x1) > 1e-9 || std::abs(j.y1 - b.y1) > 1e-9) ++moved;
  }
  EXPECT_GT(moved, 90);
}

TEST(BoxDelta, EncodeDecodeRoundTrip) {
  RandomSource rng(125);
  for (int i = 0; i < 200; ++i) {
    Box a{rng.uniform(0, 50), rng.uniform(0, 50), 0, 0};
    a.x2 = a.x1 + rng.uniform(2, 40);
    a.y2 = a.y1 + rng.uniform(2, 40);
    Box t{rng.uniform(0, 50), rng.uniform(0, 50), 0, 0};
    t.x2 = t.x1 + rng.uniform(2, 40);
    t.y2 = t.y1 + rng.uniform(2, 40);
    Box back = decode_box_delta(a, encode_box_delta(a, t));
    EXPECT_NEAR(back.x1, t.x1, 1e-9);
    EXPECT_NEAR(back.y1, t.y1, 1e-9);
    EXPECT_NEAR(back.x2, t.x2, 1e-9);
    EXPECT_NEAR(back.y2, t.y2, 1e-9);
  }
}

TEST(BoxDelta, IdentityForSameBox) {
  const Box b{3, 4, 10, 16};
  auto d = encode_box_delta(b, b);
  for (double v : d) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(QueryAnchorSampling, NegativesNeverCoverAnyPerson) {
  RandomSource rng(126);
  auto anchors = make_anchors(12, 16, 8, {16, 32, 48}, {1.0, 2.0});
  for (int trial = 0; trial < 50; ++trial) {
    const Box target{rng.uniform(0, 60), rng.uniform(0, 40), 0, 0};
    Box tgt = target;
    tgt.x2 = tgt.x1 + rng.uniform(10, 40);
    tgt.y2 = tgt.y1 + rng.uniform(16, 50);
    std::vector<Box> others;
    for (int k = 0; k < 3; ++k) {
      Box o{rng.uniform(0, 90), rng.uniform(0, 60), 0, 0};
      o.x2 = o.x1 + rng.uniform(10, 35);
      o.y2 = o.y1 + rng.uniform(14, 45);
      others.push_back(o);
    }
    Box jit = jitter_box(tgt, rng);
    auto sample = sample_query_anchors(anchors, tgt, jit, others, rng);
    for (int i : sample.pos) {
      const Box& a = anchors[static_cast<size_t>(i)];
      EXPECT_GE(std::max(iou(a, tgt), iou(a, jit)), 0.6);
    }
    for (int i : sample.neg) {
      const Box& a = anchors[static_cast<size_t>(i)];
      EXPECT_LT(iou(a, tgt), 0.3);
      EXPECT_LT(iou(a, jit), 0.3);
      for (const Box& o : others) EXPECT_LT(iou(a, o), 0.3);
    }
    EXPECT_LE(sample.pos.size(), 32u);
    EXPECT_LE(sample.pos.size() + sample.neg.size(), 128u);
  }
}

TEST(QueryAnchorSampling, FlagsMissingPositives) {
  RandomSource rng(127);
  auto anchors = make_anchors(4, 4, 8, {8.0}, {1.0});
  // Target far outside the anchor grid's reach.
  Box tgt{200, 200, 260, 320};
  auto sample = sample_query_anchors(anchors, tgt, tgt, {}, rng);
  EXPECT_FALSE(sample.has_positives);
  EXPECT_TRUE(sample.pos.empty());
  EXPECT_FALSE(sample.neg.empty());
}

TEST(RpnAnchorSampling, BestAnchorPerBoxIsPositive) {
  RandomSource rng(128);
  auto anchors = make_anchors(8, 8, 8, {12.0, 24.0}, {1.0});
  // A ground truth that no anchor reaches IoU 0.7 with still gets a positive.
  std::vector<Box> gts = {{5, 5, 21, 26}};
  auto sample = sample_rpn_anchors(anchors, gts, rng);
  EXPECT_TRUE(sample.has_positives);
  ASSERT_FALSE(sample.pos.empty());
  double best = 0;
  for (int i : sample.pos) best = std::max(best, iou(anchors[static_cast<size_t>(i)], gts[0]));
  double global_best = 0;
  for (const Box& a : anchors) global_best = std::max(global_best, iou(a, gts[0]));
  EXPECT_DOUBLE_EQ(best, global_best);
  for (int i : sample.neg) EXPECT_LT(iou(anchors[static_cast<size_t>(i)], gts[0]), 0.3);
}

TEST(ClipBox, ClampsToImageBounds) {
  Box b{-5, 3, 120, 70};
  Box c = clip_box(b, 96, 64);
  EXPECT_DOUBLE_EQ(c.x1, 0);
  EXPECT_DOUBLE_EQ(c.y1, 3);
  EXPECT_DOUBLE_EQ(c.x2, 96);
  EXPECT_DOUBLE_EQ(c.y2, 64);
}
