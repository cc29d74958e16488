#pragma once

#include <string>
#include <vector>

#include "qgn/boxgeom.hpp"

namespace qgn {

// One scored detection inside a gallery scene.
struct RankedDetection {
  int scene = 0;
  Box box;
  double score = 0.0;
};

// One ground-truth appearance of the queried identity.
struct QueryTruth {
  int scene = 0;
  Box box;
};

// Greedy score-ordered matching of detections to truths (same scene,
// IoU >= iou_thresh, each truth used once). Returns the ranked hit list:
// 1 = true positive at that rank.
std::vector<int> match_ranked_detections(std::vector<RankedDetection> dets,
                                         const std::vector<QueryTruth>& truths,
                                         double iou_thresh = 0.5);

// Area under the exact precision-recall staircase: mean over ground-truth
// positives of precision at each true-positive rank (0 when n_pos = 0).
double average_precision(const std::vector<int>& ranked_hits, int n_pos);

// Mean AP over queries. Queries with no ground truth are excluded (their
// count is reported via `excluded` when non-null) and a warning is printed.
double mean_ap(const std::vector<std::vector<RankedDetection>>& dets_per_query,
               const std::vector<std::vector<QueryTruth>>& truths_per_query,
               double iou_thresh = 0.5, int* excluded = nullptr);

// Fraction of queries whose ranked hit list contains a 1 within the first
// k entries. Throws on k < 1.
double cmc_topk(const std::vector<std::vector<int>>& ranked_hits_per_query,
                int k);

// For each N in n_values: how many of the top-N score-ranked proposals
// overlap the target with IoU >= iou_thresh. Proposals are stably sorted
// by descending score before counting.
std::vector<int> query_specific_counts(std::vector<RankedDetection> proposals,
                                       const Box& target,
                                       const std::vector<int>& n_values,
                                       double iou_thresh = 0.5);

// Mean of query_specific_counts across queries (the proposal-recall curve).
std::vector<double> mean_query_specific_counts(
    const std::vector<std::vector<RankedDetection>>& proposals_per_query,
    const std::vector<Box>& targets, const std::vector<int>& n_values,
    double iou_thresh = 0.5);

}  // namespace qgn
