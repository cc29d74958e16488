#include "qgn/qrpn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace qgn {

RpnHead RpnHead::create(ParamStore& ps, RandomSource& rng, const std::string& prefix, int channels,
                        int num_anchors, bool with_reg) {
  RpnHead h;
  h.conv = Conv2dLayer::create(ps, rng, prefix + ".conv", channels, channels, 3, 1, 1);
  h.cls = Conv2dLayer::create(ps, rng, prefix + ".cls", channels, num_anchors, 1, 1, 0);
  h.with_reg = with_reg;
  if (with_reg)
    h.reg = Conv2dLayer::create(ps, rng, prefix + ".reg", channels, 4 * num_anchors, 1, 1, 0);
  return h;
}

RpnHead::Out RpnHead::forward(ParamBinder& p, Value fmap) const {
  Value h = relu(conv.forward(p, fmap));
  Out out;
  out.cls_logits = cls.forward(p, h);
  if (with_reg) out.reg_deltas = reg.forward(p, h);
  return out;
}

QueryGate QueryGate::create(ParamStore& ps, RandomSource& rng, const std::string& prefix,
                            int channels, int pool, int reduction) {
  QueryGate g;
  g.channels = channels;
  g.pool = pool;
  g.reduction = reduction;
  const int hidden = std::max(1, channels / reduction);
  g.fc1 = LinearLayer::create(ps, rng, prefix + ".fc1", channels * pool * pool, hidden);
  g.fc2 = LinearLayer::create(ps, rng, prefix + ".fc2", hidden, channels);
  return g;
}

Value QueryGate::gate_from_roi(ParamBinder& p, Value query_map,
                               const Box& box_in_feature_coords) const {
  if (query_map.val().ndim() != 3 || query_map.val().dim(0) != channels)
    throw std::invalid_argument("QueryGate: expect query map [C,h,w]");
  Value pooled = roi_pool_max(query_map, {box_in_feature_coords.arr()}, pool, pool);
  Value flat = reshape(pooled, {channels * pool * pool});
  return sigmoid(fc2.forward(p, relu(fc1.forward(p, flat))));
}

std::vector<double> flatten_anchor_scores(const Tensor& map, bool apply_sigmoid) {
  if (map.ndim() != 3 && !(map.ndim() == 4 && map.dim(0) == 1))
    throw std::invalid_argument("flatten_anchor_scores: expect [A,H,W] or [1,A,H,W]");
  std::vector<double> out(static_cast<size_t>(map.numel()));
  for (int64_t i = 0; i < map.numel(); ++i) {
    const double z = map[i];
    out[static_cast<size_t>(i)] =
        apply_sigmoid ? (z >= 0 ? 1.0 / (1.0 + std::exp(-z)) : std::exp(z) / (1.0 + std::exp(z)))
                      : z;
  }
  return out;
}

std::vector<Box> decode_anchor_deltas(const std::vector<Box>& anchors, const Tensor& reg_map,
                                      double img_w, double img_h) {
  const Tensor map = reg_map.ndim() == 4 ? reg_map.reshaped({reg_map.dim(1), reg_map.dim(2),
                                                             reg_map.dim(3)})
                                         : reg_map;
  if (map.ndim() != 3 || map.dim(0) % 4 != 0)
    throw std::invalid_argument("decode_anchor_deltas: expect [4A,H,W]");
  const int A = map.dim(0) / 4, H = map.dim(1), W = map.dim(2);
  if (anchors.size() != static_cast<size_t>(A) * H * W)
    throw std::invalid_argument("decode_anchor_deltas: anchor count mismatch");
  std::vector<Box> out(anchors.size());
  for (int a = 0; a < A; ++a)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        const size_t i = (static_cast<size_t>(a) * H + static_cast<size_t>(y)) * W + static_cast<size_t>(x);
        const std::array<double, 4> d = {map.at({a * 4 + 0, y, x}), map.at({a * 4 + 1, y, x}),
                                         map.at({a * 4 + 2, y, x}), map.at({a * 4 + 3, y, x})};
        out[i] = clip_box(decode_box_delta(anchors[i], d), img_w, img_h);
      }
  return out;
}

std::vector<int> select_proposals(const std::vector<Box>& boxes, const std::vector<double>& scores,
                                  int pre_top, int post_top, double nms_thresh) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
  });
  if (static_cast<int>(order.size()) > pre_top) order.resize(static_cast<size_t>(pre_top));
  std::vector<Box> cand;
  std::vector<double> cand_scores;
  for (int i : order) {
    if (!boxes[static_cast<size_t>(i)].valid()) continue;
    cand.push_back(boxes[static_cast<size_t>(i)]);
    cand_scores.push_back(scores[static_cast<size_t>(i)]);
  }
  std::vector<int> cand_idx;
  for (int i : order)
    if (boxes[static_cast<size_t>(i)].valid()) cand_idx.push_back(i);
  std::vector<int> kept = nms(cand, cand_scores, nms_thresh);
  if (static_cast<int>(kept.size()) > post_top) kept.resize(static_cast<size_t>(post_top));
  std::vector<int> out;
  out.reserve(kept.size());
  for (int k : kept) out.push_back(cand_idx[static_cast<size_t>(k)]);
  return out;
}

std::vector<double> fuse_scores(const Tensor& obj_map, const Tensor& sim_map, ScoreFusion mode) {
  if (obj_map.numel() != sim_map.numel())
    throw std::invalid_argument("fuse_scores: map size mismatch");
  const bool prob = mode == ScoreFusion::kProbability;
  std::vector<double> obj = flatten_anchor_scores(obj_map, prob);
  std::vector<double> sim = flatten_anchor_scores(sim_map, prob);
  for (size_t i = 0; i < obj.size(); ++i) obj[i] += sim[i];
  return obj;
}

}  // namespace qgn
