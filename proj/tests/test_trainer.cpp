#include "qgn/trainer.hpp"

#include <gtest/gtest.h>

#include <filesystem>
#include <fstream>
#include <vector>

#include <nlohmann/json.hpp>

#include "qgn/datasets.hpp"

namespace fs = std::filesystem;
using namespace qgn;

namespace {

std::string fresh_dir(const std::string& tag) {
  fs::path p = fs::path(::testing::TempDir()) / ("qgn_tr_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p.string();
}

// 12 classes -> 6 train / 3 val / 3 test, enough for 3-way episodes.
std::string small_finegrained(const std::string& tag) {
  SyntheticFinegrainedSpec spec;
  spec.num_classes = 12;
  spec.images_per_class = 6;
  spec.image_size = 16;
  spec.seed = 7;
  std::string dir = fresh_dir(tag);
  gen_finegrained(spec, dir);
  return dir;
}

std::string small_search(const std::string& tag) {
  SearchSceneSpec spec;
  spec.num_identities = 6;
  spec.appearances_per_identity = 3;
  spec.num_scenes = 10;
  spec.image_w = 64;
  spec.image_h = 48;
  spec.max_extra_distractors = 1;
  spec.gallery_size = 4;
  spec.seed = 5;
  std::string dir = fresh_dir(tag);
  gen_search_scenes(spec, dir);
  return dir;
}

Config fewshot_cfg(int steps) {
  Config cfg;
  cfg_set(cfg, "seed", 11);
  cfg_set(cfg, "model.image_size", 16);
  cfg_set(cfg, "train.steps", steps);
  cfg_set(cfg, "train.log_every", 1);
  return cfg;
}

std::vector<nlohmann::json> read_jsonl(const std::string& path) {
  std::ifstream f(path);
  std::vector<nlohmann::json> out;
  std::string line;
  while (std::getline(f, line)) {
    if (!line.empty()) out.push_back(nlohmann::json::parse(line));
  }
  return out;
}

}  // namespace

TEST(TrainerFewshot, ResumeReproducesLossTrajectory) {
  const std::string data = small_finegrained("resume_data");

  const std::string full_dir = fresh_dir("resume_full");
  train_fewshot(data, fewshot_cfg(8), full_dir);

  Config head = fewshot_cfg(4);
  const std::string head_dir = fresh_dir("resume_head");
  TrainSummary hs = train_fewshot(data, head, head_dir);
  EXPECT_EQ(hs.steps, 4);

  Config tail = fewshot_cfg(8);
  cfg_set(tail, "train.resume", hs.checkpoint_path);
  const std::string tail_dir = fresh_dir("resume_tail");
  train_fewshot(data, tail, tail_dir);

  auto full_log = read_jsonl(full_dir + "/train_log.jsonl");
  auto tail_log = read_jsonl(tail_dir + "/train_log.jsonl");
  ASSERT_EQ(full_log.size(), 8u);
  ASSERT_EQ(tail_log.size(), 4u);
  for (size_t i = 0; i < tail_log.size(); ++i) {
    const auto& a = full_log[4 + i];
    const auto& b = tail_log[i];
    EXPECT_EQ(a.at("step").get<int>(), b.at("step").get<int>());
    for (const char* key : {"total", "oim", "sim", "rot"}) {
      EXPECT_DOUBLE_EQ(a.at(key).get<double>(), b.at(key).get<double>())
          << key << " diverged at resumed step " << b.at("step").get<int>();
    }
  }
}

TEST(TrainerFewshot, LossDecreasesAndEvalIsDeterministic) {
  const std::string data = small_finegrained("train_data");
  Config cfg = fewshot_cfg(60);
  cfg_set(cfg, "train.log_every", 15);

  const std::string run_dir = fresh_dir("train_run");
  TrainSummary s = train_fewshot(data, cfg, run_dir);
  EXPECT_LT(s.last_loss, s.first_loss);
  EXPECT_TRUE(fs::exists(run_dir + "/config.json"));
  EXPECT_TRUE(fs::exists(run_dir + "/losses.csv"));
  EXPECT_TRUE(fs::exists(run_dir + "/losses.ppm"));

  Config ecfg;
  cfg_set(ecfg, "seed", 3);
  cfg_set(ecfg, "eval.episodes", 15);
  cfg_set(ecfg, "eval.way", 3);
  cfg_set(ecfg, "eval.gallery_per_class", 2);
  cfg_set(ecfg, "eval.shots", std::vector<int>{1});

  const std::string e1 = fresh_dir("eval1");
  const std::string e2 = fresh_dir("eval2");
  auto r1 = eval_fewshot(data, s.checkpoint_path, ecfg, e1);
  auto r2 = eval_fewshot(data, s.checkpoint_path, ecfg, e2);
  ASSERT_EQ(r1.size(), 1u);
  ASSERT_EQ(r2.size(), 1u);
  EXPECT_EQ(r1[0].episodes, 15);
  EXPECT_DOUBLE_EQ(r1[0].mean_accuracy, r2[0].mean_accuracy);
  EXPECT_DOUBLE_EQ(r1[0].ci95, r2[0].ci95);
  EXPECT_GE(r1[0].mean_accuracy, 0.0);
  EXPECT_LE(r1[0].mean_accuracy, 1.0);
  EXPECT_TRUE(fs::exists(e1 + "/scores_k1.csv"));
  EXPECT_TRUE(fs::exists(e1 + "/eval_fewshot.json"));
}

TEST(TrainerSearch, TrainEvalRoundTrip) {
  const std::string data = small_search("search_data");
  Config cfg;
  cfg_set(cfg, "seed", 2);
  cfg_set(cfg, "train.steps", 24);
  cfg_set(cfg, "train.log_every", 6);
  cfg_set(cfg, "train.short_side", 48);

  const std::string run_dir = fresh_dir("search_run");
  TrainSummary s = train_search(data, cfg, run_dir);
  EXPECT_EQ(s.steps, 24);
  EXPECT_TRUE(std::isfinite(s.last_loss));
  EXPECT_GT(s.last_loss, 0.0);

  auto log = read_jsonl(run_dir + "/train_log.jsonl");
  ASSERT_EQ(log.size(), 4u);
  // Two-phase schedule: query-guided terms enter at the halfway point.
  EXPECT_FALSE(log[0].at("query_terms").get<bool>());
  EXPECT_EQ(log[0].at("qrpn").get<double>(), 0.0);
  EXPECT_TRUE(log[3].at("query_terms").get<bool>());
  EXPECT_GT(log[3].at("qrpn").get<double>(), 0.0);
  EXPECT_LT(log[3].at("lr").get<double>(), log[0].at("lr").get<double>());

  Config ecfg;
  cfg_set(ecfg, "eval.max_queries", 4);
  const std::string e1 = fresh_dir("search_eval1");
  const std::string e2 = fresh_dir("search_eval2");
  SearchEvalSummary r1 = eval_search(data, s.checkpoint_path, ecfg, e1);
  SearchEvalSummary r2 = eval_search(data, s.checkpoint_path, ecfg, e2);
  EXPECT_EQ(r1.queries, 4);
  EXPECT_GE(r1.map, 0.0);
  EXPECT_LE(r1.map, 1.0);
  EXPECT_GE(r1.top5, r1.top1);
  EXPECT_DOUBLE_EQ(r1.map, r2.map);
  EXPECT_DOUBLE_EQ(r1.top1, r2.top1);
  ASSERT_EQ(r1.n_values.size(), 3u);
  for (size_t i = 0; i < r1.n_values.size(); ++i) {
    EXPECT_DOUBLE_EQ(r1.fused_hits[i], r2.fused_hits[i]);
  }
  EXPECT_TRUE(fs::exists(e1 + "/metrics.json"));
  EXPECT_TRUE(fs::exists(e1 + "/detections.csv"));
  EXPECT_TRUE(fs::exists(e1 + "/truths.csv"));
  EXPECT_TRUE(fs::exists(e1 + "/proposals.csv"));
  EXPECT_TRUE(fs::exists(e1 + "/proposals.ppm"));
}

TEST(TrainerCheckpoint, KindMismatchRefused) {
  const std::string data = small_finegrained("kind_data");
  const std::string run_dir = fresh_dir("kind_run");
  TrainSummary s = train_fewshot(data, fewshot_cfg(2), run_dir);
  EXPECT_THROW(load_search_checkpoint(s.checkpoint_path), std::runtime_error);
  EXPECT_NO_THROW(load_fewshot_checkpoint(s.checkpoint_path));
}
