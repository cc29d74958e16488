#pragma once

#include <string>
#include <vector>

#include "qgn/nn.hpp"
#include "qgn/qsse.hpp"

namespace qgn {

/// How a residual block combines identity and residual paths when it runs
/// outside the paired (query, gallery) setting.
enum class GateMode {
  kPlain,  // identity + residual, gate == 1 (standard residual block)
  kCut,    // identity only, gate == 0 (used to verify gating reduces to skip)
};

struct StageSpec {
  int width = 0;
  int stride = 1;  // stride of the first block in the stage
  int blocks = 1;
};

struct BackboneConfig {
  int in_channels = 3;
  int stem_width = 16;
  int stem_kernel = 3;
  int stem_stride = 1;
  std::vector<StageSpec> stages;
  bool qsse = true;        // create pairwise gates (one per residual block)
  int qsse_reduction = 16;

  int out_channels() const { return stages.empty() ? stem_width : stages.back().width; }

  /// Three-stage encoder small enough to train on one CPU core.
  static BackboneConfig tiny();
  /// Stride-8 two-stage trunk for scene-level detection at desk scale.
  static BackboneConfig search_tiny();
  /// Basic-block plans mirroring the 10- and 18-layer residual classifiers.
  static BackboneConfig resnet10_like();
  static BackboneConfig resnet18_like();
  static BackboneConfig by_name(const std::string& name);
};

/// Residual convolutional encoder shared by both branches of the Siamese
/// pair (one set of weights). Produces feature maps, pooled descriptors, and
/// L2-normalized embeddings.
class Backbone {
 public:
  static Backbone create(ParamStore& ps, RandomSource& rng, const BackboneConfig& cfg,
                         const std::string& prefix = "backbone");

  struct PairOut {
    Value map_q, map_g;        // final stage maps [n,C,H,W]
    Value pooled_q, pooled_g;  // [n,C] global averages
    Value embed_q, embed_g;    // [n,C] L2-normalized
    std::vector<Value> gates;  // one [n,C_block] gate per residual block
  };
  /// Joint encode of aligned query/gallery batches with pairwise gating at
  /// every block that has a gate (plain residual blocks otherwise).
  PairOut encode_pair(ParamBinder& p, Value imgs_q, Value imgs_g) const;

  /// Same network but every gate clamped to a constant. With 0 the residual
  /// branches vanish (pure skip network); with 1 it is the plain residual
  /// network. Exists so tests can pin the gating algebra.
  PairOut encode_pair_fixed_gate(ParamBinder& p, Value imgs_q, Value imgs_g, double gate) const;

  struct SingleOut {
    Value map;
    Value pooled;
    Value embed;
  };
  /// Single-stream encode; `mode` fixes every gated block's behavior.
  SingleOut encode_single(ParamBinder& p, Value imgs, GateMode mode = GateMode::kPlain) const;

  const BackboneConfig& config() const { return cfg_; }

 private:
  struct Block {
    Conv2dLayer conv1, conv2;
    Conv2dLayer proj;  // identity projection when stride/width changes
    bool has_proj = false;
    QsseBlock qsse;
    bool has_qsse = false;
  };

  Value stem_forward(ParamBinder& p, Value x) const;
  Value block_identity(ParamBinder& p, const Block& b, Value x) const;
  Value block_residual(ParamBinder& p, const Block& b, Value x) const;
  PairOut encode_pair_impl(ParamBinder& p, Value imgs_q, Value imgs_g,
                           const double* fixed_gate) const;

  BackboneConfig cfg_;
  Conv2dLayer stem_;
  std::vector<Block> blocks_;
};

}  // namespace qgn
