#pragma once

#include <functional>
#include <string>
#include <vector>

#include "qgn/rng.hpp"

namespace qgn {

// One labeled image reference. `path` points at an on-disk image; `label`
// is the class id (few-shot) or identity id (search).
struct ItemRef {
  std::string path;
  int label = -1;
};

// Class-disjoint train/val/test partition of a labeled image set.
struct DatasetSplit {
  std::vector<std::vector<ItemRef>> train;  // index = position in train_classes
  std::vector<std::vector<ItemRef>> val;
  std::vector<std::vector<ItemRef>> test;
  std::vector<int> train_classes;
  std::vector<int> val_classes;
  std::vector<int> test_classes;

  // Throws if any class id appears in more than one partition.
  void check_disjoint() const;
};

// An N-way K-shot task: `classes` are test-split class ids; queries holds
// K exemplars per class (grouped: queries[c*k+i] has class classes[c]),
// gallery holds L items per class to be classified.
struct Episode {
  std::vector<int> classes;
  int k = 0;
  int l = 0;
  std::vector<ItemRef> queries;
  std::vector<ItemRef> gallery;
  std::uint64_t seed = 0;
};

// Samples c_novel classes from the test partition, then k + l distinct
// items per class (first k become queries). Classes with fewer than k + l
// items are skipped; throws if fewer than c_novel remain eligible.
Episode sample_episode(const DatasetSplit& split, int c_novel, int k, int l,
                       RandomSource& rng);

// One training pair: same_class = 1 when both images share a class.
struct TrainPair {
  ItemRef query;
  ItemRef gallery;
  int same_class = 0;
};

// Draws `batch` pairs from the train partition with a fixed
// negative:positive count ratio (batch 8, ratio 3 gives 6 neg / 2 pos).
// Pair images are distinct even for positives. Requires >= 2 classes.
std::vector<TrainPair> make_train_pairs(const DatasetSplit& split, int batch,
                                        int neg_ratio, RandomSource& rng);

// Model adapter for episodic evaluation. Given one gallery item and the
// per-class query exemplars (k per class, grouped as in Episode::queries),
// returns one similarity score per class, higher = more alike.
using PairScorer = std::function<std::vector<double>(
    const ItemRef& gallery_item, const std::vector<ItemRef>& queries,
    const std::vector<int>& classes, int k)>;

struct EpisodeResult {
  std::vector<int> predicted;  // index into episode.classes per gallery item
  std::vector<std::vector<double>> scores;  // [gallery][class]
  double accuracy = 0.0;
};

// Scores every gallery item against each class and takes the argmax;
// ties resolve to the lowest class index so results are reproducible.
EpisodeResult classify_episode(const PairScorer& scorer, const Episode& ep);

struct ProtocolResult {
  double mean_accuracy = 0.0;
  double ci95 = 0.0;  // 1.96 * standard error of the mean
  std::vector<double> per_episode;
};

// Runs `episodes` sampled evaluations and reports mean accuracy with a
// 95% confidence interval. Throws on zero episodes.
ProtocolResult evaluate_protocol(const PairScorer& scorer,
                                 const DatasetSplit& split, int episodes,
                                 int c_novel, int k, int l, RandomSource& rng);

// Serializes an episode (classes, query/gallery paths) for audit.
std::string episode_manifest(const Episode& ep);

}  // namespace qgn
