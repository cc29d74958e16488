#pragma once

#include <map>
#include <string>
#include <vector>

#include "qgn/backbone.hpp"
#include "qgn/losses.hpp"
#include "qgn/nn.hpp"
#include "qgn/qsimnet.hpp"

namespace qgn {

struct FewshotConfig {
  std::string arch = "tiny";
  bool qsse = true;
  bool qsimnet = true;   // false: cosine similarity of embeddings instead
  bool rotation = true;  // four-way rotation self-supervision term
  int num_train_classes = 0;
  int oim_queue = 32;
  double oim_momentum = 0.5;
  double oim_temperature = 0.1;
  int image_size = 32;
  std::uint64_t seed = 0;
};

// Siamese classifier for N-way K-shot evaluation: shared encoder with
// pairwise channel re-calibration, instance-matching memory over the train
// classes, a learned pair-similarity head, and a rotation head.
class FewshotModel {
 public:
  static FewshotModel create(const FewshotConfig& cfg);

  struct Batch {
    Tensor imgs_q, imgs_g;            // [n,3,S,S] aligned pairs
    std::vector<int> labels_q, labels_g;  // train-class indices
    std::vector<int> same;            // 1 when the pair shares a class
    Tensor rot_q, rot_g;              // rotated copies of the pair images
    std::vector<int> rot_labels_q, rot_labels_g;  // quarter turns
  };

  struct StepLosses {
    double total = 0, oim = 0, sim = 0, rot = 0;
  };

  // Composite objective as one graph: identity memory loss on both streams,
  // pair similarity, rotation. Exposed so tests can gradient-check the exact
  // training graph. embed_q/embed_g are the live pair embeddings, used by
  // train_step to refresh the identity memory afterwards.
  struct LossGraph {
    Value total, oim, sim, rot;
    Value embed_q, embed_g;
  };
  LossGraph build_losses(Tape& tape, ParamBinder& p, const Batch& b);

  // One optimizer step on the composite objective. Returns detached values.
  StepLosses train_step(const Batch& b, AdamOptimizer& opt);

  // Similarity of one gallery image against each class given k support
  // images per class (supports grouped per class). Multi-shot supports are
  // pooled by sum + renormalize before scoring.
  std::vector<double> score_classes(const Tensor& gallery_img,
                                    const std::vector<Tensor>& supports,
                                    int num_classes, int k);

  // Evaluation-time component switches: with use_qsse false the pair gates
  // are clamped to 1 (plain residual trunk); with use_simnet false scoring
  // falls back to embedding cosine. Training is unaffected.
  void set_eval_overrides(bool use_qsse, bool use_simnet) {
    ov_qsse_ = use_qsse;
    ov_simnet_ = use_simnet;
  }

  ParamStore& params() { return params_; }
  const FewshotConfig& config() const { return cfg_; }
  OimState& oim() { return oim_; }
  QSimNet& simnet() { return simnet_; }
  const Backbone& backbone() const { return backbone_; }

  // Non-parameter state that belongs in checkpoints (identity memory,
  // similarity-head batch-norm statistics).
  std::map<std::string, Tensor> buffers() const;
  void set_buffers(const std::map<std::string, Tensor>& buffers);

 private:
  FewshotConfig cfg_;
  ParamStore params_;
  Backbone backbone_;
  QSimNet simnet_;
  LinearLayer rot_head_;
  OimState oim_;
  int embed_dim_ = 0;
  bool ov_qsse_ = true;
  bool ov_simnet_ = true;
};

}  // namespace qgn
