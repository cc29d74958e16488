#pragma once

#include <string>
#include <vector>

#include "qgn/boxgeom.hpp"
#include "qgn/nn.hpp"

namespace qgn {

/// Region-proposal head: shared 3x3 conv, then 1x1 per-anchor objectness
/// logits and (optionally) 1x1 box-delta regression. The starred variant used
/// for query similarity drops the regression head entirely.
struct RpnHead {
  Conv2dLayer conv;
  Conv2dLayer cls;  // [A,H,W] logits
  Conv2dLayer reg;  // [4A,H,W] deltas
  bool with_reg = true;

  static RpnHead create(ParamStore& ps, RandomSource& rng, const std::string& prefix,
                        int channels, int num_anchors, bool with_reg);

  struct Out {
    Value cls_logits;  // [n,A,H,W]
    Value reg_deltas;  // [n,4A,H,W], invalid when with_reg is false
  };
  Out forward(ParamBinder& p, Value fmap) const;
};

/// Query-guided channel gate: the query person's ROI-pooled feature block is
/// flattened (all pixels of all channels) through a bottleneck to a sigmoid
/// per-channel weight vector that re-scales the gallery feature map. This is
/// what steers the starred proposal head toward query-like regions.
struct QueryGate {
  LinearLayer fc1;  // C*pool*pool -> C/r
  LinearLayer fc2;  // C/r -> C
  int channels = 0;
  int pool = 3;
  int reduction = 4;

  static QueryGate create(ParamStore& ps, RandomSource& rng, const std::string& prefix,
                          int channels, int pool, int reduction);

  /// query_map: [C,h,w] (feature coords); box half-open in the same coords.
  Value gate_from_roi(ParamBinder& p, Value query_map, const Box& box_in_feature_coords) const;
};

/// Anchor-vector view of an [A,H,W] score map (optionally sigmoided); the
/// flat order matches make_anchors().
std::vector<double> flatten_anchor_scores(const Tensor& map, bool apply_sigmoid);

/// Boxes for every anchor after applying the regression map [4A,H,W] and
/// clipping to the image. Delta channel layout is [a*4+k, row, col].
std::vector<Box> decode_anchor_deltas(const std::vector<Box>& anchors, const Tensor& reg_map,
                                      double img_w, double img_h);

/// Score-sorted proposal selection: keep pre_top by score, NMS, keep post_top.
/// Returns indices into `boxes`.
std::vector<int> select_proposals(const std::vector<Box>& boxes, const std::vector<double>& scores,
                                  int pre_top, int post_top, double nms_thresh);

enum class ScoreFusion { kProbability, kLogit };

/// Fused proposal score: objectness plus query similarity, either as
/// sigmoided probabilities (default) or raw logits.
std::vector<double> fuse_scores(const Tensor& obj_map, const Tensor& sim_map, ScoreFusion mode);

}  // namespace qgn
