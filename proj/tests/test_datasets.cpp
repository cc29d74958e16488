#include "qgn/datasets.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "qgn/image.hpp"

namespace fs = std::filesystem;
using namespace qgn;

namespace {

std::string fresh_dir(const std::string& tag) {
  fs::path p = fs::path(::testing::TempDir()) / ("qgn_ds_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

std::string slurp(const fs::path& p) {
  std::ifstream f(p, std::ios::binary);
  std::string s((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
  return s;
}

// Compares every regular file under a against its counterpart under b.
void expect_trees_identical(const std::string& a, const std::string& b) {
  int files = 0;
  for (const auto& entry : fs::recursive_directory_iterator(a)) {
    if (!entry.is_regular_file()) continue;
    fs::path rel = fs::relative(entry.path(), a);
    ASSERT_TRUE(fs::exists(fs::path(b) / rel)) << rel;
    EXPECT_EQ(slurp(entry.path()), slurp(fs::path(b) / rel)) << rel;
    ++files;
  }
  EXPECT_GT(files, 0);
}

}  // namespace

TEST(ClassAttributesMap, DistinctTuplesAcrossAllIds) {
  std::set<std::tuple<int, int, int, int>> seen;
  for (int c = 0; c < max_finegrained_classes(); ++c) {
    ClassAttributes a = class_attributes(c);
    EXPECT_TRUE(seen.insert({a.shape, a.hue, a.stripe, a.accent}).second) << c;
  }
  EXPECT_THROW(class_attributes(-1), std::invalid_argument);
  EXPECT_THROW(class_attributes(max_finegrained_classes()), std::invalid_argument);
}

TEST(RenderFinegrained, SeedControlsPixelsExactly) {
  SyntheticFinegrainedSpec spec;
  Tensor a = render_finegrained_image(spec, 3, 42);
  Tensor b = render_finegrained_image(spec, 3, 42);
  Tensor c = render_finegrained_image(spec, 3, 43);
  ASSERT_EQ(a.numel(), b.numel());
  for (int64_t i = 0; i < a.numel(); ++i) ASSERT_EQ(a[i], b[i]);
  bool differs = false;
  for (int64_t i = 0; i < a.numel() && !differs; ++i) differs = a[i] != c[i];
  EXPECT_TRUE(differs);
}

TEST(GenFinegrained, CountsSplitsAndDeterminism) {
  SyntheticFinegrainedSpec spec;
  spec.seed = 9;
  std::string d1 = fresh_dir("fg1");
  DatasetSplit s1 = gen_finegrained(spec, d1);

  EXPECT_EQ(s1.train_classes.size(), 10u);
  EXPECT_EQ(s1.val_classes.size(), 5u);
  EXPECT_EQ(s1.test_classes.size(), 5u);
  s1.check_disjoint();
  int images = 0;
  for (const auto& entry : fs::recursive_directory_iterator(d1)) {
    if (entry.is_regular_file() && entry.path().extension() == ".ppm") ++images;
  }
  EXPECT_EQ(images, 600);  // 20 classes x 30 images

  std::string d2 = fresh_dir("fg2");
  gen_finegrained(spec, d2);
  expect_trees_identical(d1, d2);

  spec.seed = 10;
  std::string d3 = fresh_dir("fg3");
  gen_finegrained(spec, d3);
  bool any_diff = false;
  for (const auto& entry : fs::recursive_directory_iterator(d1)) {
    if (!entry.is_regular_file() || entry.path().extension() != ".ppm") continue;
    fs::path rel = fs::relative(entry.path(), d1);
    if (slurp(entry.path()) != slurp(fs::path(d3) / rel)) {
      any_diff = true;
      break;
    }
  }
  EXPECT_TRUE(any_diff);

  DatasetSplit reloaded = load_finegrained(d1);
  EXPECT_EQ(reloaded.train_classes, s1.train_classes);
  ASSERT_EQ(reloaded.train.size(), s1.train.size());
  EXPECT_EQ(reloaded.train[0][0].path, s1.train[0][0].path);

  fs::remove_all(d2);
  fs::remove_all(d3);
  fs::remove_all(d1);
}

TEST(GenFinegrained, PixelCentroidClassifierBeatsChanceButNotPerfect) {
  SyntheticFinegrainedSpec spec;
  spec.seed = 21;
  std::string dir = fresh_dir("fgc");
  DatasetSplit split = gen_finegrained(spec, dir);

  int nc = static_cast<int>(split.train.size());
  int half = spec.images_per_class / 2;
  std::vector<std::vector<double>> centroids(static_cast<size_t>(nc));
  for (int c = 0; c < nc; ++c) {
    std::vector<double> acc;
    for (int i = 0; i < half; ++i) {
      Tensor img = read_ppm(split.train[static_cast<size_t>(c)][static_cast<size_t>(i)].path);
      if (acc.empty()) acc.assign(static_cast<size_t>(img.numel()), 0.0);
      for (int64_t k = 0; k < img.numel(); ++k) acc[static_cast<size_t>(k)] += img[k];
    }
    for (double& v : acc) v /= half;
    centroids[static_cast<size_t>(c)] = std::move(acc);
  }
  int correct = 0, total = 0;
  for (int c = 0; c < nc; ++c) {
    for (int i = half; i < spec.images_per_class; ++i) {
      Tensor img = read_ppm(split.train[static_cast<size_t>(c)][static_cast<size_t>(i)].path);
      int best = -1;
      double best_d = 1e300;
      for (int k = 0; k < nc; ++k) {
        double d = 0;
        for (int64_t j = 0; j < img.numel(); ++j) {
          double e = img[j] - centroids[static_cast<size_t>(k)][static_cast<size_t>(j)];
          d += e * e;
        }
        if (d < best_d) {
          best_d = d;
          best = k;
        }
      }
      correct += best == c;
      ++total;
    }
  }
  double acc = static_cast<double>(correct) / total;
  EXPECT_GT(acc, 2.0 / nc);  // images carry class signal
  EXPECT_LT(acc, 1.0);       // but raw-pixel matching cannot solve the task
  fs::remove_all(dir);
}

namespace {

SearchSceneSpec small_search_spec() {
  SearchSceneSpec spec;
  spec.num_identities = 10;
  spec.appearances_per_identity = 5;
  spec.num_scenes = 30;
  spec.gallery_size = 10;
  spec.seed = 31;
  return spec;
}

}  // namespace

TEST(GenSearchScenes, DeterministicAndWellFormed) {
  SearchSceneSpec spec = small_search_spec();
  std::string d1 = fresh_dir("ss1");
  SearchDataset ds = gen_search_scenes(spec, d1);

  EXPECT_EQ(ds.scenes.size(), 30u);
  EXPECT_EQ(ds.queries.size(), 50u);  // one per appearance

  // boxes inside the image, identities look-consistent across scenes
  std::map<int, double> hue_of;
  for (const auto& sc : ds.scenes) {
    for (const auto& p : sc.persons) {
      EXPECT_GE(p.box.x1, 0.0);
      EXPECT_GE(p.box.y1, 0.0);
      EXPECT_LE(p.box.x2, spec.image_w);
      EXPECT_LE(p.box.y2, spec.image_h);
      EXPECT_LT(p.box.x1, p.box.x2);
      EXPECT_LT(p.box.y1, p.box.y2);
      if (p.identity >= 0) {
        auto [it, fresh] = hue_of.emplace(p.identity, p.torso_hue);
        if (!fresh) EXPECT_DOUBLE_EQ(it->second, p.torso_hue);
      }
    }
  }
  EXPECT_EQ(hue_of.size(), 10u);

  for (const auto& q : ds.queries) {
    EXPECT_EQ(q.gallery.size(), 10u);
    bool has_positive = false;
    for (int g : q.gallery) {
      EXPECT_NE(g, q.scene);
      for (const auto& p : ds.scenes[static_cast<size_t>(g)].persons) {
        if (p.identity == q.identity) has_positive = true;
      }
    }
    EXPECT_TRUE(has_positive) << "identity " << q.identity;
    EXPECT_EQ(ds.scenes[static_cast<size_t>(q.scene)].persons[static_cast<size_t>(q.person)]
                  .identity,
              q.identity);
  }

  std::string d2 = fresh_dir("ss2");
  gen_search_scenes(spec, d2);
  expect_trees_identical(d1, d2);

  SearchDataset loaded = load_search_dataset(d1);
  ASSERT_EQ(loaded.scenes.size(), ds.scenes.size());
  ASSERT_EQ(loaded.queries.size(), ds.queries.size());
  EXPECT_EQ(loaded.queries[7].gallery, ds.queries[7].gallery);
  EXPECT_DOUBLE_EQ(loaded.scenes[3].persons[0].box.x1, ds.scenes[3].persons[0].box.x1);

  fs::remove_all(d1);
  fs::remove_all(d2);
}

TEST(GenSearchScenes, DistractorsShareTargetHueOftenEnough) {
  SearchSceneSpec spec = small_search_spec();
  std::string dir = fresh_dir("ss3");
  SearchDataset ds = gen_search_scenes(spec, dir);
  int sharing = 0;
  for (const auto& sc : ds.scenes) {
    std::set<double> target_hues;
    for (const auto& p : sc.persons)
      if (p.identity >= 0) target_hues.insert(p.torso_hue);
    bool shared = false;
    for (const auto& p : sc.persons)
      if (p.identity < 0 && target_hues.count(p.torso_hue)) shared = true;
    sharing += shared;
  }
  EXPECT_GE(static_cast<double>(sharing) / static_cast<double>(ds.scenes.size()), 0.3);
  fs::remove_all(dir);
}

TEST(IngestCub, CountsMatchWalkOracleAndMissingDirsReported) {
  std::string root = fresh_dir("cub");
  fs::create_directories(root + "/images");
  const char* dirs[6] = {"001.alpha", "002.beta", "003.gamma",
                         "004.delta", "005.eps",  "006.zeta"};
  int walk_counts[6] = {3, 4, 2, 5, 3, 4};
  Tensor tiny({3, 4, 4});
  for (int c = 0; c < 6; ++c) {
    fs::create_directories(root + "/images/" + dirs[c]);
    for (int i = 0; i < walk_counts[c]; ++i) {
      tiny.fill(0.25 * c + 0.01 * i);
      write_ppm(root + "/images/" + dirs[c] + "/img_" + std::to_string(i) + ".ppm", tiny);
    }
  }
  std::string split_file = root + "/split.json";
  {
    std::ofstream f(split_file);
    f << R"({"train":["001.alpha","002.beta","003.gamma"],)"
      << R"("val":["004.delta"],"test":["005.eps","006.zeta"]})";
  }
  DatasetSplit s = ingest_cub(root, split_file);
  ASSERT_EQ(s.train.size(), 3u);
  ASSERT_EQ(s.val.size(), 1u);
  ASSERT_EQ(s.test.size(), 2u);
  EXPECT_EQ(static_cast<int>(s.train[0].size()), walk_counts[0]);
  EXPECT_EQ(static_cast<int>(s.train[1].size()), walk_counts[1]);
  EXPECT_EQ(static_cast<int>(s.val[0].size()), walk_counts[3]);
  EXPECT_EQ(static_cast<int>(s.test[1].size()), walk_counts[5]);
  EXPECT_EQ(s.train_classes, (std::vector<int>{1, 2, 3}));
  EXPECT_EQ(s.test_classes, (std::vector<int>{5, 6}));
  s.check_disjoint();

  {
    std::ofstream f(split_file);
    f << R"({"train":["001.alpha","007.missing"],"val":["004.delta"],"test":["005.eps"]})";
  }
  try {
    ingest_cub(root, split_file);
    FAIL() << "expected missing-directory error";
  } catch (const std::runtime_error& e) {
    EXPECT_NE(std::string(e.what()).find("007.missing"), std::string::npos);
  }
  fs::remove_all(root);
}
