#include "qgn/detector.hpp"

#include <gtest/gtest.h>

#include <vector>

#include "gradcheck.hpp"
#include "qgn/rng.hpp"

using namespace qgn;

namespace {

Tensor rand_scene(int h, int w, RandomSource& rng) {
  Tensor t({3, h, w});
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform();
  return t;
}

// Small paired scenes: the query person reappears in the gallery next to a
// second labeled identity.
SearchExample small_example(RandomSource& rng) {
  SearchExample ex;
  ex.query_img = rand_scene(32, 48, rng);
  ex.query_box = Box{20, 6, 32, 28};
  ex.query_identity = 0;
  ex.gallery_img = rand_scene(32, 48, rng);
  ex.gallery_target = Box{8, 4, 20, 26};
  ex.gallery_persons = {Box{8, 4, 20, 26}, Box{30, 6, 42, 28}};
  ex.gallery_identities = {0, 1};
  return ex;
}

DetectorConfig small_cfg(uint64_t seed) {
  DetectorConfig cfg;
  cfg.num_identities = 4;
  cfg.oim_queue = 8;
  cfg.seed = seed;
  return cfg;
}

}  // namespace

TEST(DetectorGrad, QueryGatedProposalPath) {
  SearchDetector d = SearchDetector::create(small_cfg(11));
  RandomSource rng(90);
  SearchExample ex = small_example(rng);
  std::vector<std::string> names = {"query_gate.fc1.w", "query_gate.fc2.b", "rpn_star.conv.w",
                                    "rpn_star.cls.w"};
  auto res = test::param_grad_check(
      d.params(), names,
      [&](Tape& tape, ParamBinder& p) {
        RandomSource r(123);  // identical sampling every rebuild
        return d.build_losses(tape, p, ex, true, r).qrpn;
      },
      1e-4, 23);
  EXPECT_LT(res.max_rel, 1e-4) << "checked " << res.checked;
  EXPECT_GT(res.checked, 20);
}

TEST(DetectorGrad, PairSimilarityPath) {
  SearchDetector d = SearchDetector::create(small_cfg(12));
  RandomSource rng(91);
  SearchExample ex = small_example(rng);
  std::vector<std::string> names = {"roi.emb.w", "simnet.fc.w", "simnet.bn.gamma", "roi.fc.b"};
  auto res = test::param_grad_check(
      d.params(), names,
      [&](Tape& tape, ParamBinder& p) {
        RandomSource r(124);
        return d.build_losses(tape, p, ex, true, r).sim;
      },
      1e-5, 41);
  EXPECT_LT(res.max_rel, 1e-4) << "checked " << res.checked;
  EXPECT_GT(res.checked, 20);
}

TEST(DetectorGrad, CompositeObjective) {
  SearchDetector d = SearchDetector::create(small_cfg(13));
  RandomSource rng(92);
  SearchExample ex = small_example(rng);
  RandomSource lut_rng(93);
  for (int64_t i = 0; i < d.oim().lut.numel(); ++i) d.oim().lut[i] = lut_rng.uniform(-0.5, 0.5);
  std::vector<std::string> names = {"backbone.stem.w", "backbone.block1.qsse.fc2.w", "rpn.conv.w",
                                    "rpn.reg.w",       "roi.fc.w",                   "roi.cls.b"};
  auto res = test::param_grad_check(
      d.params(), names,
      [&](Tape& tape, ParamBinder& p) {
        RandomSource r(125);
        return d.build_losses(tape, p, ex, true, r).total;
      },
      1e-5, 211);
  EXPECT_LT(res.max_rel, 1e-3) << "checked " << res.checked;
  EXPECT_GT(res.checked, 30);
}

TEST(DetectorLoss, TotalDecomposesExactly) {
  SearchDetector d = SearchDetector::create(small_cfg(14));
  RandomSource rng(94);
  SearchExample ex = small_example(rng);
  SgdOptimizer opt(1e-3);
  auto l = d.train_step(ex, opt, true, rng);
  EXPECT_EQ(l.total, l.rpn_cls + l.rpn_reg + l.qrpn + l.roi_cls + l.roi_reg + l.oim + l.sim);
  EXPECT_GT(l.rpn_cls, 0.0);
  EXPECT_GT(l.roi_cls, 0.0);
  EXPECT_GT(l.qrpn, 0.0);
  EXPECT_GT(l.sim, 0.0);
}

TEST(DetectorLoss, WarmupSkipsQueryTerms) {
  SearchDetector d = SearchDetector::create(small_cfg(15));
  RandomSource rng(95);
  SearchExample ex = small_example(rng);
  SgdOptimizer opt(1e-3);
  auto l = d.train_step(ex, opt, false, rng);
  EXPECT_EQ(l.qrpn, 0.0);
  EXPECT_EQ(l.sim, 0.0);
  EXPECT_EQ(l.total, l.rpn_cls + l.rpn_reg + l.roi_cls + l.roi_reg + l.oim);
}

TEST(DetectorStep, DeterministicAcrossRebuilds) {
  RandomSource data_rng(96);
  SearchExample ex = small_example(data_rng);
  SearchDetector d1 = SearchDetector::create(small_cfg(16));
  SearchDetector d2 = SearchDetector::create(small_cfg(16));
  SgdOptimizer o1(1e-3), o2(1e-3);
  RandomSource r1(55), r2(55);
  auto l1 = d1.train_step(ex, o1, true, r1);
  auto l2 = d2.train_step(ex, o2, true, r2);
  EXPECT_EQ(l1.total, l2.total);
  const Tensor& w1 = d1.params().at("rpn.cls.w");
  const Tensor& w2 = d2.params().at("rpn.cls.w");
  for (int64_t i = 0; i < w1.numel(); ++i) ASSERT_EQ(w1[i], w2[i]);
}

TEST(DetectorSearch, RankedOutputWellFormed) {
  SearchDetector d = SearchDetector::create(small_cfg(17));
  RandomSource rng(97);
  SearchExample ex = small_example(rng);
  SgdOptimizer opt(1e-3);
  for (int i = 0; i < 3; ++i) d.train_step(ex, opt, true, rng);

  auto dets = d.search_pair(ex.query_img, ex.query_box, ex.gallery_img);
  ASSERT_FALSE(dets.empty());
  for (size_t i = 0; i + 1 < dets.size(); ++i) EXPECT_GE(dets[i].sim, dets[i + 1].sim);
  for (const Detection& det : dets) {
    EXPECT_GE(det.box.x1, 0.0);
    EXPECT_GE(det.box.y1, 0.0);
    EXPECT_LE(det.box.x2, 48.0);
    EXPECT_LE(det.box.y2, 32.0);
    EXPECT_GE(det.cls, d.config().cls_filter);
  }
}

TEST(DetectorProposals, QueryGuidanceChangesRanking) {
  SearchDetector d = SearchDetector::create(small_cfg(18));
  RandomSource rng(98);
  SearchExample ex = small_example(rng);
  SgdOptimizer opt(1e-3);
  for (int i = 0; i < 2; ++i) d.train_step(ex, opt, true, rng);

  auto plain = d.propose(ex.query_img, ex.query_box, ex.gallery_img, false, 10);
  auto guided = d.propose(ex.query_img, ex.query_box, ex.gallery_img, true, 10);
  EXPECT_LE(plain.boxes.size(), 10u);
  EXPECT_LE(guided.boxes.size(), 10u);
  ASSERT_FALSE(plain.boxes.empty());
  ASSERT_FALSE(guided.boxes.empty());
  // The fused score is objectness plus similarity, so it cannot match the
  // plain objectness scores.
  bool differs = plain.scores.size() != guided.scores.size();
  for (size_t i = 0; !differs && i < plain.scores.size(); ++i)
    differs = plain.scores[i] != guided.scores[i];
  EXPECT_TRUE(differs);
}

TEST(DetectorAblation, DisabledBranchesStayZeroAndCosineRanks) {
  DetectorConfig cfg = small_cfg(19);
  cfg.qrpn = false;
  cfg.qsimnet = false;
  SearchDetector d = SearchDetector::create(cfg);
  RandomSource rng(99);
  SearchExample ex = small_example(rng);
  SgdOptimizer opt(1e-3);
  auto l = d.train_step(ex, opt, true, rng);
  EXPECT_EQ(l.qrpn, 0.0);
  EXPECT_EQ(l.sim, 0.0);
  EXPECT_THROW(d.propose(ex.query_img, ex.query_box, ex.gallery_img, true, 10), std::logic_error);
  auto dets = d.search_pair(ex.query_img, ex.query_box, ex.gallery_img);
  for (const Detection& det : dets) {
    EXPECT_GE(det.sim, -1.0 - 1e-9);  // cosine range
    EXPECT_LE(det.sim, 1.0 + 1e-9);
  }
}

TEST(DetectorRoi, GlobalContextAndAlignModesRun)
{
  DetectorConfig cfg = small_cfg(20);
  cfg.global_context = true;
  cfg.roi_mode = "align";
  SearchDetector d = SearchDetector::create(cfg);
  RandomSource rng(100);
  SearchExample ex = small_example(rng);
  SgdOptimizer opt(1e-3);
  auto l = d.train_step(ex, opt, true, rng);
  EXPECT_GT(l.total, 0.0);
  EXPECT_TRUE(std::isfinite(l.total));
}
