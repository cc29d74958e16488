#include "qgn/backbone.hpp"

#include <gtest/gtest.h>

#include "gradcheck.hpp"
#include "qgn/rng.hpp"

using namespace qgn;

namespace {

Tensor rand_img(int n, int size, RandomSource& rng) {
  Tensor t({n, 3, size, size});
  for (int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform();
  return t;
}

}  // namespace

TEST(Backbone, PairedEncodeShapesAndNormalization) {
  RandomSource rng(50);
  ParamStore ps;
  Backbone bb = Backbone::create(ps, rng, BackboneConfig::tiny());
  Tape t;
  ParamBinder p(&t, &ps, false);
  auto out = bb.encode_pair(p, t.constant(rand_img(2, 24, rng)),
                            t.constant(rand_img(2, 24, rng)));
  EXPECT_EQ(out.map_q.val().shape(), (std::vector<int>{2, 64, 3, 3}));
  EXPECT_EQ(out.embed_q.val().shape(), (std::vector<int>{2, 64}));
  ASSERT_EQ(out.gates.size(), 3u);  // one per residual block
  for (int r = 0; r < 2; ++r) {
    double nq = 0, ng = 0;
    for (int c = 0; c < 64; ++c) {
      nq += out.embed_q.val().at({r, c}) * out.embed_q.val().at({r, c});
      ng += out.embed_g.val().at({r, c}) * out.embed_g.val().at({r, c});
    }
    EXPECT_NEAR(nq, 1.0, 1e-9);
    EXPECT_NEAR(ng, 1.0, 1e-9);
  }
}

TEST(Backbone, GatesStayInOpenUnitInterval) {
  RandomSource rng(51);
  ParamStore ps;
  Backbone bb = Backbone::create(ps, rng, BackboneConfig::tiny());
  Tape t;
  ParamBinder p(&t, &ps, false);
  auto out = bb.encode_pair(p, t.constant(rand_img(3, 16, rng)),
                            t.constant(rand_img(3, 16, rng)));
  for (const Value& g : out.gates)
    for (int64_t i = 0; i < g.val().numel(); ++i) {
      EXPECT_GT(g.val()[i], 0.0);
      EXPECT_LT(g.val()[i], 1.0);
    }
}

TEST(Backbone, ZeroGatePairEqualsCutSingleStream) {
  RandomSource rng(52);
  ParamStore ps;
  Backbone bb = Backbone::create(ps, rng, BackboneConfig::tiny());
  Tensor iq = rand_img(2, 16, rng), ig = rand_img(2, 16, rng);
  Tape t;
  ParamBinder p(&t, &ps, false);
  auto paired = bb.encode_pair_fixed_gate(p, t.constant(iq), t.constant(ig), 0.0);
  auto single_q = bb.encode_single(p, t.constant(iq), GateMode::kCut);
  auto single_g = bb.encode_single(p, t.constant(ig), GateMode::kCut);
  for (int64_t i = 0; i < paired.embed_q.val().numel(); ++i) {
    EXPECT_DOUBLE_EQ(paired.embed_q.val()[i], single_q.embed.val()[i]);
    EXPECT_DOUBLE_EQ(paired.embed_g.val()[i], single_g.embed.val()[i]);
  }
}

TEST(Backbone, UnitGatePairEqualsPlainSingleStream) {
  RandomSource rng(53);
  ParamStore ps;
  Backbone bb = Backbone::create(ps, rng, BackboneConfig::tiny());
  Tensor iq = rand_img(1, 16, rng), ig = rand_img(1, 16, rng);
  Tape t;
  ParamBinder p(&t, &ps, false);
  auto paired = bb.encode_pair_fixed_gate(p, t.constant(iq), t.constant(ig), 1.0);
  auto single_q = bb.encode_single(p, t.constant(iq), GateMode::kPlain);
  for (int64_t i = 0; i < paired.embed_q.val().numel(); ++i)
    EXPECT_DOUBLE_EQ(paired.embed_q.val()[i], single_q.embed.val()[i]);
}

TEST(Backbone, SiameseWeightSharingGivesIdenticalEmbedsForIdenticalInputs) {
  RandomSource rng(54);
  ParamStore ps;
  Backbone bb = Backbone::create(ps, rng, BackboneConfig::tiny());
  Tensor img = rand_img(2, 16, rng);
  Tape t;
  ParamBinder p(&t, &ps, false);
  auto out = bb.encode_pair(p, t.constant(img), t.constant(img));
  for (int64_t i = 0; i < out.embed_q.val().numel(); ++i)
    EXPECT_DOUBLE_EQ(out.embed_q.val()[i], out.embed_g.val()[i]);
}

TEST(Backbone, RecalibrationParameterOverheadIsSmall) {
  RandomSource rng(55);
  auto with_cfg = BackboneConfig::resnet18_like();
  auto without_cfg = BackboneConfig::resnet18_like();
  without_cfg.qsse = false;
  ParamStore with_ps, without_ps;
  Backbone::create(with_ps, rng, with_cfg);
  Backbone::create(without_ps, rng, without_cfg);
  const double ratio = static_cast<double>(with_ps.total_elements()) /
                       static_cast<double>(without_ps.total_elements());
  EXPECT_GT(ratio, 1.0);
  EXPECT_LE(ratio, 1.03);
}

TEST(Backbone, Resnet10LikeIsHalfTheBlocksOfResnet18Like) {
  auto r10 = BackboneConfig::resnet10_like();
  auto r18 = BackboneConfig::resnet18_like();
  int b10 = 0, b18 = 0;
  for (const auto& s : r10.stages) b10 += s.blocks;
  for (const auto& s : r18.stages) b18 += s.blocks;
  EXPECT_EQ(b10, 4);
  EXPECT_EQ(b18, 8);
  EXPECT_EQ(r10.out_channels(), 512);
}

TEST(Backbone, PairEncodeGradients) {
  RandomSource rng(56);
  ParamStore ps;
  BackboneConfig cfg;  // 2-stage micro net keeps the finite-difference pass fast
  cfg.stem_width = 4;
  cfg.stages = {{6, 2, 1}, {8, 2, 1}};
  cfg.qsse_reduction = 4;
  Backbone bb = Backbone::create(ps, rng, cfg);
  ps.create("in.q", rand_img(2, 8, rng));
  ps.create("in.g", rand_img(2, 8, rng));
  Tensor readout = Tensor({2, 8});
  for (int64_t i = 0; i < readout.numel(); ++i) readout[i] = rng.uniform(-1, 1);

  std::vector<std::string> names = {"in.q", "in.g"};
  for (const auto& [name, tensor] : ps.all())
    if (name.rfind("backbone.", 0) == 0) names.push_back(name);

  auto res = test::param_grad_check(
      ps, names,
      [&](Tape& t, ParamBinder& p) {
        auto out = bb.encode_pair(p, p("in.q"), p("in.g"));
        Value both = add(mul(out.embed_q, t.constant(readout)),
                         mul(out.embed_g, t.constant(readout)));
        return sum_all(both);
      },
      1e-5, 7);  // every 7th element of each tensor
  EXPECT_GT(res.checked, 150);
  EXPECT_LT(res.max_rel, 1e-4);
}
