#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "qgn/boxgeom.hpp"
#include "qgn/episodic.hpp"
#include "qgn/tensor.hpp"

namespace qgn {

// ---------------------------------------------------------------------------
// Synthetic fine-grained classification set. Classes are tuples over four
// visual factors (shape, hue, stripe pattern, accent mark); distinct class
// ids always map to distinct tuples, so any two classes differ in at least
// one factor. Within a class, position, scale, rotation, and lighting vary
// per image.
// ---------------------------------------------------------------------------

struct SyntheticFinegrainedSpec {
  int num_classes = 20;
  int images_per_class = 30;
  int image_size = 32;
  // Class split fractions; test gets the remainder (defaults mimic a
  // 2:1:1 train/val/test class split).
  double train_frac = 0.5;
  double val_frac = 0.25;
  std::uint64_t seed = 0;
};

struct ClassAttributes {
  int shape = 0;   // 0 circle, 1 square, 2 triangle, 3 diamond
  int hue = 0;     // index into evenly spaced base hues
  int stripe = 0;  // 0 none, 1 horizontal, 2 vertical, 3 diagonal
  int accent = 0;  // 0 none, 1 upper-left dot, 2 lower-right dot
};

constexpr int kShapeCount = 4;
constexpr int kHueCount = 6;
constexpr int kStripeCount = 4;
constexpr int kAccentCount = 3;

// Mixed-radix unranking of a class id into its factor tuple.
ClassAttributes class_attributes(int class_id);
constexpr int max_finegrained_classes() {
  return kShapeCount * kHueCount * kStripeCount * kAccentCount;
}

// Renders one image of a class; image_seed controls all intra-class
// variation, so (spec, class_id, image_seed) fully determines the pixels.
Tensor render_finegrained_image(const SyntheticFinegrainedSpec& spec,
                                int class_id, std::uint64_t image_seed);

// Writes images (PPM) plus one annotation file per split under out_dir and
// returns the loaded split. Layout:
//   out_dir/spec.json
//   out_dir/images/class_###/img_###.ppm
//   out_dir/splits/{train,val,test}.json
DatasetSplit gen_finegrained(const SyntheticFinegrainedSpec& spec,
                             const std::string& out_dir);

// Loads a directory produced by gen_finegrained (or an ingested set laid
// out the same way). Verifies split class-disjointness.
DatasetSplit load_finegrained(const std::string& root);

// ---------------------------------------------------------------------------
// Synthetic person-search scenes. Labeled identities keep a consistent
// appearance (clothing hues, build) across scenes; scenes also contain
// unlabeled distractors, some of which copy a target's clothing hue to make
// matching harder.
// ---------------------------------------------------------------------------

struct SearchSceneSpec {
  int num_identities = 20;
  int appearances_per_identity = 10;  // scenes each identity shows up in
  int num_scenes = 100;
  int image_w = 96;
  int image_h = 64;
  int max_extra_distractors = 2;  // unlabeled persons added per scene
  double hue_share_prob = 0.5;    // distractor copies a target hue
  int gallery_size = 20;
  std::uint64_t seed = 0;
};

struct PersonInstance {
  Box box;
  int identity = -1;  // -1 = unlabeled distractor
  double torso_hue = 0.0;
};

struct SearchScene {
  int id = 0;
  std::string path;
  std::vector<PersonInstance> persons;
};

// One evaluation pair: the query person (by scene + person index) and the
// gallery scenes it must be found in. Every gallery holds >= 1 scene where
// the query identity appears.
struct SearchQuery {
  int scene = 0;
  int person = 0;
  int identity = -1;
  std::vector<int> gallery;
};

struct SearchDataset {
  int image_w = 0;
  int image_h = 0;
  std::vector<SearchScene> scenes;
  std::vector<SearchQuery> queries;
};

// Writes scene images, scenes.json, and protocol.json under out_dir.
// One query is emitted per identity appearance, so the query count is
// num_identities * appearances_per_identity.
SearchDataset gen_search_scenes(const SearchSceneSpec& spec,
                                const std::string& out_dir);

SearchDataset load_search_dataset(const std::string& root);

// ---------------------------------------------------------------------------
// Ingestion of a CUB-style directory: images/<class_dir>/<image>.ppm with a
// JSON split file listing class directory names per partition. Missing
// directories are reported by name. When all 200 classes are present the
// total image count is validated against the published 11,788.
// ---------------------------------------------------------------------------

DatasetSplit ingest_cub(const std::string& root, const std::string& split_file);

}  // namespace qgn
