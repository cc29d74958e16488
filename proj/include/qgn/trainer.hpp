#pragma once

#include <map>
#include <string>
#include <vector>

#include "qgn/config.hpp"
#include "qgn/datasets.hpp"
#include "qgn/detector.hpp"
#include "qgn/episodic.hpp"
#include "qgn/fewshot.hpp"

namespace qgn {

// Decoded-once image store; everything at desk scale fits in memory.
class ImageCache {
 public:
  const Tensor& get(const std::string& path);

 private:
  std::map<std::string, Tensor> cache_;
};

struct TrainSummary {
  std::string checkpoint_path;
  int steps = 0;
  double first_loss = 0.0;  // mean total loss over the first log window
  double last_loss = 0.0;   // ... and the last one
};

// Config keys (dotted): model.* (architecture and components), train.*
// (steps, batch, lr, augmentation, resume), plus top-level seed. Each run
// writes config.json (resolved snapshot), train_log.jsonl, losses.csv,
// losses.ppm, and model.ckpt into out_dir.
TrainSummary train_fewshot(const std::string& data_root, const Config& cfg,
                           const std::string& out_dir);
TrainSummary train_search(const std::string& data_root, const Config& cfg,
                          const std::string& out_dir);

// Rebuilds the model a checkpoint describes and loads its weights and
// buffers. Throws on schema or kind mismatch.
FewshotModel load_fewshot_checkpoint(const std::string& path);
SearchDetector load_search_checkpoint(const std::string& path);

struct FewshotEvalSummary {
  int way = 0, shot = 0, episodes = 0;
  double mean_accuracy = 0.0, ci95 = 0.0;
};

// Episodic evaluation for every K in eval.shots; writes eval_fewshot.json
// plus per-episode score matrices (scores_k<K>.csv) for later auditing.
std::vector<FewshotEvalSummary> eval_fewshot(const std::string& data_root,
                                             const std::string& ckpt_path, const Config& cfg,
                                             const std::string& out_dir);

struct SearchEvalSummary {
  int queries = 0, excluded = 0;
  double map = 0.0, top1 = 0.0, top5 = 0.0;
  std::vector<int> n_values;          // proposal budgets for the recall study
  std::vector<double> rpn_hits;       // mean query-specific proposals, plain
  std::vector<double> fused_hits;     // ... with query guidance
};

// Whole-protocol person search eval; writes metrics.json, detections.csv,
// truths.csv, and (when the model has the guided branch) proposals.csv with
// a rendered curve proposals.ppm.
SearchEvalSummary eval_search(const std::string& data_root, const std::string& ckpt_path,
                              const Config& cfg, const std::string& out_dir);

}  // namespace qgn
