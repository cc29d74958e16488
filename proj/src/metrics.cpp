#include "qgn/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <stdexcept>

namespace qgn {

std::vector<int> match_ranked_detections(std::vector<RankedDetection> dets,
                                         const std::vector<QueryTruth>& truths,
                                         double iou_thresh) {
  std::stable_sort(dets.begin(), dets.end(),
                   [](const RankedDetection& a, const RankedDetection& b) {
                     return a.score > b.score;
                   });
  std::vector<char> used(truths.size(), 0);
  std::vector<int> hits(dets.size(), 0);
  for (size_t d = 0; d < dets.size(); ++d) {
    int best = -1;
    double best_iou = -1.0;
    for (size_t t = 0; t < truths.size(); ++t) {
      if (used[t] || truths[t].scene != dets[d].scene) continue;
      double v = iou(dets[d].box, truths[t].box);
      if (v >= iou_thresh && v > best_iou) {
        best = static_cast<int>(t);
        best_iou = v;
      }
    }
    if (best >= 0) {
      used[static_cast<size_t>(best)] = 1;
      hits[d] = 1;
    }
  }
  return hits;
}

double average_precision(const std::vector<int>& ranked_hits, int n_pos) {
  if (n_pos <= 0) return 0.0;
  double ap = 0.0;
  int tp = 0;
  for (size_t r = 0; r < ranked_hits.size(); ++r) {
    if (ranked_hits[r]) {
      ++tp;
      ap += static_cast<double>(tp) / static_cast<double>(r + 1);
    }
  }
  return ap / n_pos;
}

double mean_ap(const std::vector<std::vector<RankedDetection>>& dets_per_query,
               const std::vector<std::vector<QueryTruth>>& truths_per_query,
               double iou_thresh, int* excluded) {
  if (dets_per_query.size() != truths_per_query.size()) {
    throw std::invalid_argument("mean_ap: query count mismatch");
  }
  double sum = 0.0;
  int counted = 0;
  int skipped = 0;
  for (size_t q = 0; q < dets_per_query.size(); ++q) {
    if (truths_per_query[q].empty()) {
      ++skipped;
      continue;
    }
    std::vector<int> hits = match_ranked_detections(
        dets_per_query[q], truths_per_query[q], iou_thresh);
    sum += average_precision(hits,
                             static_cast<int>(truths_per_query[q].size()));
    ++counted;
  }
  if (skipped > 0) {
    std::fprintf(stderr,
                 "warning: %d quer%s with no ground truth excluded from mAP\n",
                 skipped, skipped == 1 ? "y" : "ies");
  }
  if (excluded) *excluded = skipped;
  return counted > 0 ? sum / counted : 0.0;
}

double cmc_topk(const std::vector<std::vector<int>>& ranked_hits_per_query,
                int k) {
  if (k < 1) throw std::invalid_argument("cmc_topk: k must be >= 1");
  if (ranked_hits_per_query.empty()) return 0.0;
  int ok = 0;
  for (const auto& hits : ranked_hits_per_query) {
    int upto = std::min<int>(k, static_cast<int>(hits.size()));
    for (int r = 0; r < upto; ++r) {
      if (hits[static_cast<size_t>(r)]) {
        ++ok;
        break;
      }
    }
  }
  return static_cast<double>(ok) /
         static_cast<double>(ranked_hits_per_query.size());
}

std::vector<int> query_specific_counts(std::vector<RankedDetection> proposals,
                                       const Box& target,
                                       const std::vector<int>& n_values,
                                       double iou_thresh) {
  std::stable_sort(proposals.begin(), proposals.end(),
                   [](const RankedDetection& a, const RankedDetection& b) {
                     return a.score > b.score;
                   });
  // overlap[i] = 1 iff proposal at rank i covers the target.
  std::vector<int> prefix(proposals.size() + 1, 0);
  for (size_t i = 0; i < proposals.size(); ++i) {
    prefix[i + 1] =
        prefix[i] + (iou(proposals[i].box, target) >= iou_thresh ? 1 : 0);
  }
  std::vector<int> out;
  out.reserve(n_values.size());
  for (int n : n_values) {
    if (n < 0) throw std::invalid_argument("query_specific_counts: N < 0");
    size_t upto = std::min<size_t>(static_cast<size_t>(n), proposals.size());
    out.push_back(prefix[upto]);
  }
  return out;
}

std::vector<double> mean_query_specific_counts(
    const std::vector<std::vector<RankedDetection>>& proposals_per_query,
    const std::vector<Box>& targets, const std::vector<int>& n_values,
    double iou_thresh) {
  if (proposals_per_query.size() != targets.size()) {
    throw std::invalid_argument("mean_query_specific_counts: size mismatch");
  }
  std::vector<double> acc(n_values.size(), 0.0);
  for (size_t q = 0; q < targets.size(); ++q) {
    std::vector<int> c = query_specific_counts(proposals_per_query[q],
                                               targets[q], n_values, iou_thresh);
    for (size_t i = 0; i < c.size(); ++i) acc[i] += c[i];
  }
  if (!targets.empty()) {
    for (double& v : acc) v /= static_cast<double>(targets.size());
  }
  return acc;
}

}  // namespace qgn
