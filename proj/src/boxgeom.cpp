#include "qgn/boxgeom.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <stdexcept>

namespace qgn {

double intersection_area(const Box& a, const Box& b) {
  const double w = std::min(a.x2, b.x2) - std::max(a.x1, b.x1);
  const double h = std::min(a.y2, b.y2) - std::max(a.y1, b.y1);
  return (w > 0 && h > 0) ? w * h : 0.0;
}

double iou(const Box& a, const Box& b) {
  const double inter = intersection_area(a, b);
  if (inter <= 0.0) return 0.0;
  const double uni = a.area() + b.area() - inter;
  return uni > 0.0 ? inter / uni : 0.0;
}

Box clip_box(const Box& b, double width, double height) {
  return {std::clamp(b.x1, 0.0, width), std::clamp(b.y1, 0.0, height),
          std::clamp(b.x2, 0.0, width), std::clamp(b.y2, 0.0, height)};
}

std::vector<int> nms(const std::vector<Box>& boxes, const std::vector<double>& scores,
                     double iou_threshold) {
  if (boxes.size() != scores.size()) throw std::invalid_argument("nms: size mismatch");
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    return scores[static_cast<size_t>(a)] > scores[static_cast<size_t>(b)];
  });
  std::vector<int> keep;
  std::vector<char> dead(boxes.size(), 0);
  for (size_t oi = 0; oi < order.size(); ++oi) {
    const int i = order[oi];
    if (dead[static_cast<size_t>(i)]) continue;
    keep.push_back(i);
    for (size_t oj = oi + 1; oj < order.size(); ++oj) {
      const int j = order[oj];
      if (dead[static_cast<size_t>(j)]) continue;
      if (iou(boxes[static_cast<size_t>(i)], boxes[static_cast<size_t>(j)]) > iou_threshold)
        dead[static_cast<size_t>(j)] = 1;
    }
  }
  return keep;
}

std::vector<Box> make_anchors(int fh, int fw, int stride, const std::vector<double>& scales,
                              const std::vector<double>& ratios) {
  std::vector<Box> anchors;
  anchors.reserve(scales.size() * ratios.size() * static_cast<size_t>(fh) * fw);
  for (double s : scales) {
    for (double r : ratios) {
      // ratio = h/w with area preserved: w = s/sqrt(r), h = s*sqrt(r).
      const double w = s / std::sqrt(r);
      const double h = s * std::sqrt(r);
      for (int row = 0; row < fh; ++row) {
        for (int col = 0; col < fw; ++col) {
          const double cx = (col + 0.5) * stride;
          const double cy = (row + 0.5) * stride;
          anchors.push_back({cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2});
        }
      }
    }
  }
  return anchors;
}

Box jitter_box(const Box& b, RandomSource& rng, double max_shift_frac, double max_scale_frac,
               double min_iou, int max_attempts) {
  for (int attempt = 0; attempt < max_attempts; ++attempt) {
    const double dx = rng.uniform(-max_shift_frac, max_shift_frac) * b.w();
    const double dy = rng.uniform(-max_shift_frac, max_shift_frac) * b.h();
    const double sw = 1.0 + rng.uniform(-max_scale_frac, max_scale_frac);
    const double sh = 1.0 + rng.uniform(-max_scale_frac, max_scale_frac);
    const double cx = b.cx() + dx, cy = b.cy() + dy;
    const double hw = 0.5 * b.w() * sw, hh = 0.5 * b.h() * sh;
    Box j{cx - hw, cy - hh, cx + hw, cy + hh};
    if (iou(b, j) >= min_iou) return j;
  }
  return b;
}

std::array<double, 4> encode_box_delta(const Box& anchor, const Box& target) {
  const double aw = anchor.w(), ah = anchor.h();
  if (aw <= 0 || ah <= 0 || target.w() <= 0 || target.h() <= 0)
    throw std::invalid_argument("encode_box_delta: degenerate box");
  return {(target.cx() - anchor.cx()) / aw, (target.cy() - anchor.cy()) / ah,
          std::log(target.w() / aw), std::log(target.h() / ah)};
}

Box decode_box_delta(const Box& anchor, const std::array<double, 4>& delta) {
  const double cx = anchor.cx() + delta[0] * anchor.w();
  const double cy = anchor.cy() + delta[1] * anchor.h();
  const double w = anchor.w() * std::exp(delta[2]);
  const double h = anchor.h() * std::exp(delta[3]);
  return {cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2};
}

AnchorSample sample_query_anchors(const std::vector<Box>& anchors, const Box& target,
                                  const Box& jittered, const std::vector<Box>& other_persons,
                                  RandomSource& rng, int batch, int max_pos, double pos_iou,
                                  double bg_iou) {
  std::vector<int> pos_pool, neg_pool;
  for (size_t i = 0; i < anchors.size(); ++i) {
    const Box& a = anchors[i];
    const double iou_t = iou(a, target);
    const double iou_j = iou(a, jittered);
    if (std::max(iou_t, iou_j) >= pos_iou) {
      pos_pool.push_back(static_cast<int>(i));
      continue;
    }
    if (iou_t >= bg_iou || iou_j >= bg_iou) continue;
    bool clear = true;
    for (const Box& p : other_persons) {
      if (iou(a, p) >= bg_iou) {
        clear = false;
        break;
      }
    }
    if (clear) neg_pool.push_back(static_cast<int>(i));
  }

  AnchorSample out;
  out.has_positives = !pos_pool.empty();
  rng.shuffle(pos_pool);
  if (static_cast<int>(pos_pool.size()) > max_pos) pos_pool.resize(static_cast<size_t>(max_pos));
  out.pos = std::move(pos_pool);
  const int want_neg = batch - static_cast<int>(out.pos.size());
  rng.shuffle(neg_pool);
  if (static_cast<int>(neg_pool.size()) > want_neg) neg_pool.resize(static_cast<size_t>(want_neg));
  out.neg = std::move(neg_pool);
  return out;
}

AnchorSample sample_rpn_anchors(const std::vector<Box>& anchors, const std::vector<Box>& gts,
                                RandomSource& rng, int batch, double pos_frac, double pos_iou,
                                double neg_iou) {
  std::vector<double> best_iou(anchors.size(), 0.0);
  std::vector<int> best_anchor_of_gt(gts.size(), -1);
  std::vector<double> best_gt_iou(gts.size(), 0.0);
  for (size_t i = 0; i < anchors.size(); ++i) {
    for (size_t g = 0; g < gts.size(); ++g) {
      const double v = iou(anchors[i], gts[g]);
      best_iou[i] = std::max(best_iou[i], v);
      if (v > best_gt_iou[g]) {
        best_gt_iou[g] = v;
        best_anchor_of_gt[g] = static_cast<int>(i);
      }
    }
  }
  std::vector<char> is_pos(anchors.size(), 0);
  for (size_t i = 0; i < anchors.size(); ++i)
    if (best_iou[i] >= pos_iou) is_pos[i] = 1;
  for (size_t g = 0; g < gts.size(); ++g)  // every gt claims its best anchor
    if (best_anchor_of_gt[g] >= 0 && best_gt_iou[g] > 0.0)
      is_pos[static_cast<size_t>(best_anchor_of_gt[g])] = 1;

  std::vector<int> pos_pool, neg_pool;
  for (size_t i = 0; i < anchors.size(); ++i) {
    if (is_pos[i])
      pos_pool.push_back(static_cast<int>(i));
    else if (best_iou[i] < neg_iou)
      neg_pool.push_back(static_cast<int>(i));
  }
  AnchorSample out;
  out.has_positives = !pos_pool.empty();
  const int max_pos = static_cast<int>(batch * pos_frac);
  rng.shuffle(pos_pool);
  if (static_cast<int>(pos_pool.size()) > max_pos) pos_pool.resize(static_cast<size_t>(max_pos));
  out.pos = std::move(pos_pool);
  const int want_neg = batch - static_cast<int>(out.pos.size());
  rng.shuffle(neg_pool);
  if (static_cast<int>(neg_pool.size()) > want_neg) neg_pool.resize(static_cast<size_t>(want_neg));
  out.neg = std::move(neg_pool);
  return out;
}

}  // namespace qgn
