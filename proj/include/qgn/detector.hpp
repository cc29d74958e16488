#pragma once

#include <map>
#include <string>
#include <vector>

#include "qgn/backbone.hpp"
#include "qgn/boxgeom.hpp"
#include "qgn/losses.hpp"
#include "qgn/nn.hpp"
#include "qgn/qrpn.hpp"
#include "qgn/qsimnet.hpp"

namespace qgn {

struct DetectorConfig {
  std::string arch = "search_tiny";
  bool qsse = true;
  bool qrpn = true;     // query-guided proposal branch and its loss
  bool qsimnet = true;  // learned pair similarity (false: cosine ranking)
  int num_identities = 0;
  int oim_queue = 64;
  double oim_momentum = 0.5;
  double oim_temperature = 0.1;
  std::vector<double> anchor_scales = {16, 22, 30};
  std::vector<double> anchor_ratios = {2.0, 3.0};  // height/width, people are tall
  std::string roi_mode = "pool";                   // "pool" (max) or "align" (bilinear)
  int roi_size = 7;
  bool global_context = false;  // concat gallery global average onto ROI features
  int fc_dim = 256;
  int embed_dim = 64;
  int rpn_batch = 64;        // sampled anchors per objectness step
  double rpn_pos_iou = 0.5;  // coarse anchor grids rarely reach higher overlap
  int pre_nms_train = 48;
  int post_nms_train = 12;
  int pre_nms_eval = 128;
  int post_nms_eval = 32;
  double rpn_nms = 0.7;
  double final_nms = 0.4;   // ranked by similarity, not objectness
  double cls_filter = 0.01; // drop detections below this person probability
  int roi_batch = 16;
  int roi_max_fg = 8;
  ScoreFusion fusion = ScoreFusion::kLogit;
  std::uint64_t seed = 0;

  int num_anchors() const {
    return static_cast<int>(anchor_scales.size() * anchor_ratios.size());
  }
};

// One training example: where the query person is, and a gallery scene that
// contains the same identity plus whoever else walked through.
struct SearchExample {
  Tensor query_img;  // [3,H,W]
  Box query_box;
  int query_identity = -1;
  Tensor gallery_img;  // [3,H,W]
  Box gallery_target;  // the query identity's box in the gallery scene
  std::vector<Box> gallery_persons;     // every drawn person, target included
  std::vector<int> gallery_identities;  // aligned with gallery_persons, -1 unlabeled
};

struct Detection {
  Box box;
  double cls = 0;  // person probability
  double sim = 0;  // similarity to the query, the ranking key
};

// End-to-end person search model: shared trunk over both scenes, standard
// proposal head plus a query-gated proposal head on the gallery stream, a
// box/identity ROI head, and a learned pair-similarity ranker.
class SearchDetector {
 public:
  static SearchDetector create(const DetectorConfig& cfg);

  struct StepLosses {
    double total = 0;
    double rpn_cls = 0, rpn_reg = 0, qrpn = 0;
    double roi_cls = 0, roi_reg = 0;
    double oim = 0, sim = 0;
  };

  struct LossGraph {
    Value total;
    Value rpn_cls, rpn_reg, qrpn, roi_cls, roi_reg, oim, sim;
    Value oim_embeds;             // live embeddings for the memory refresh
    std::vector<int> oim_labels;  // aligned with oim_embeds rows
  };

  // The full composite objective on one tape. `query_terms` gates the
  // query-conditioned losses (gated proposals, pair similarity) so training
  // can warm up the plain detector first.
  LossGraph build_losses(Tape& tape, ParamBinder& p, const SearchExample& ex, bool query_terms,
                         RandomSource& rng);

  StepLosses train_step(const SearchExample& ex, SgdOptimizer& opt, bool query_terms,
                        RandomSource& rng);

  // Ranked detections for one query/gallery pair (highest similarity first).
  std::vector<Detection> search_pair(const Tensor& query_img, const Box& query_box,
                                     const Tensor& gallery_img);

  struct ProposalSet {
    std::vector<Box> boxes;  // score-ranked, NMS applied
    std::vector<double> scores;
  };
  // Proposals only, with or without query guidance, for recall studies.
  ProposalSet propose(const Tensor& query_img, const Box& query_box, const Tensor& gallery_img,
                      bool query_guided, int post_top);

  // Evaluation-time component switches: qsse off clamps the trunk gates to 1,
  // qrpn off ranks proposals by plain objectness, qsimnet off ranks
  // detections by embedding cosine. Training is unaffected.
  void set_eval_overrides(bool use_qsse, bool use_qrpn, bool use_simnet) {
    ov_qsse_ = use_qsse;
    ov_qrpn_ = use_qrpn;
    ov_simnet_ = use_simnet;
  }

  void set_fusion(ScoreFusion f) { cfg_.fusion = f; }

  std::vector<Box> anchors_for(int fh, int fw) const;
  int stride() const { return stride_; }

  ParamStore& params() { return params_; }
  const DetectorConfig& config() const { return cfg_; }
  OimState& oim() { return oim_; }
  QSimNet& simnet() { return simnet_; }
  Backbone& backbone() { return backbone_; }
  QueryGate& gate() { return gate_; }

  std::map<std::string, Tensor> buffers() const;
  void set_buffers(const std::map<std::string, Tensor>& buffers);

 private:
  struct RoiOut {
    Value cls_logits;  // [k,2]
    Value reg;         // [k,4]
    Value embed;       // [k,embed_dim], unit rows
  };
  // feature_boxes are half-open in feature-map coordinates.
  RoiOut roi_head(ParamBinder& p, Value map3d, Value map4d,
                  const std::vector<std::array<double, 4>>& feature_boxes) const;

  DetectorConfig cfg_;
  ParamStore params_;
  Backbone backbone_;
  RpnHead rpn_;
  RpnHead rpn_star_;  // objectness-only head on the gated map
  QueryGate gate_;
  LinearLayer roi_fc_, roi_cls_, roi_reg_, roi_emb_;
  QSimNet simnet_;
  OimState oim_;
  int stride_ = 8;
  int channels_ = 0;
  bool ov_qsse_ = true;
  bool ov_qrpn_ = true;
  bool ov_simnet_ = true;
};

}  // namespace qgn
