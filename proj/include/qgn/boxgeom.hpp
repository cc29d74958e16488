#pragma once

#include <array>
#include <cstdint>
#include <vector>

#include "qgn/rng.hpp"

namespace qgn {

/// Axis-aligned box with half-open extent: a pixel (x, y) is inside when
/// x1 <= x < x2 and y1 <= y < y2, so area = (x2-x1)*(y2-y1). Serialized as
/// [x1,y1,x2,y2] everywhere.
struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;

  double w() const { return x2 - x1; }
  double h() const { return y2 - y1; }
  double area() const { return w() > 0 && h() > 0 ? w() * h() : 0.0; }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
  bool valid() const { return x2 > x1 && y2 > y1; }

  std::array<double, 4> arr() const { return {x1, y1, x2, y2}; }
  static Box of(const std::array<double, 4>& a) { return {a[0], a[1], a[2], a[3]}; }
};

double intersection_area(const Box& a, const Box& b);
double iou(const Box& a, const Box& b);

Box clip_box(const Box& b, double width, double height);

/// Greedy non-maximum suppression. Boxes are visited in decreasing `scores`
/// order (ties broken by lower index); a box is kept unless it overlaps an
/// already-kept box with IoU > threshold. Returns kept indices in visit order.
std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_threshold);

/// Anchor grid for a feature map of size (fh, fw) with the given pixel stride.
/// Anchors are centered on cell centers ((col+0.5)*stride, (row+0.5)*stride);
/// one anchor per (scale, ratio) pair. Order is anchor-major then row-major:
/// index = (a * fh + row) * fw + col, matching a [A,H,W] map flattened.
std::vector<Box> make_anchors(int fh, int fw, int stride, const std::vector<double>& scales,
                              const std::vector<double>& ratios);

/// Randomly shifts (up to +/-max_shift_frac of each side) and rescales
/// (1 +/- max_scale_frac) a box, rejecting draws until the jittered box keeps
/// IoU >= min_iou with the original; falls back to the original box if no
/// draw qualifies. Used to make query-person sampling translation tolerant.
Box jitter_box(const Box& b, RandomSource& rng, double max_shift_frac = 0.2,
               double max_scale_frac = 0.1, double min_iou = 0.5, int max_attempts = 16);

/// Bounding-box regression targets (dx, dy, dw, dh) from anchor to target,
/// the usual parameterization: dx = (tx - ax)/aw, dw = log(tw/aw), etc.
std::array<double, 4> encode_box_delta(const Box& anchor, const Box& target);
Box decode_box_delta(const Box& anchor, const std::array<double, 4>& delta);

struct AnchorSample {
  std::vector<int> pos;  // anchor indices
  std::vector<int> neg;
  bool has_positives = true;
};

/// Anchor sampling for the query-similarity branch. Positives overlap the
/// query target (or its jittered copy) with IoU >= pos_iou; negatives overlap
/// neither the target nor any other annotated person above bg_iou, so the
/// background set never covers bystanders. Sampling keeps at most
/// `max_pos` positives and fills up to `batch` total.
AnchorSample sample_query_anchors(const std::vector<Box>& anchors, const Box& target,
                                  const Box& jittered, const std::vector<Box>& other_persons,
                                  RandomSource& rng, int batch = 128, int max_pos = 32,
                                  double pos_iou = 0.6, double bg_iou = 0.3);

/// Standard two-class RPN anchor sampling: positives by IoU >= pos_iou with
/// any ground-truth box (plus the best anchor per box), negatives below
/// neg_iou with all of them.
AnchorSample sample_rpn_anchors(const std::vector<Box>& anchors, const std::vector<Box>& gts,
                                RandomSource& rng, int batch = 256, double pos_frac = 0.5,
                                double pos_iou = 0.7, double neg_iou = 0.3);

}  // namespace qgn
