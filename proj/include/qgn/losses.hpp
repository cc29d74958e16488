#pragma once

#include <vector>

#include "qgn/ops.hpp"

namespace qgn {

/// Online instance-matching memory: one slot per labeled identity plus a
/// circular queue of recent unlabeled features. The memory is non-parametric;
/// gradients flow to the compared embeddings only, and slots are refreshed
/// after each optimizer step with momentum-averaged, re-normalized features.
struct OimState {
  Tensor lut;    // [num_labels, dim]
  Tensor queue;  // [queue_size, dim]
  int queue_filled = 0;
  int queue_head = 0;
  double momentum = 0.5;
  double temperature = 0.1;

  static OimState create(int num_labels, int queue_size, int dim, double momentum = 0.5,
                         double temperature = 0.1);
  int num_labels() const { return lut.dim(0); }
  int dim() const { return lut.dim(1); }
};

/// Cross-entropy of embeddings against the memory, labels in [0,L) or -1 for
/// unlabeled rows (excluded from the loss, still pushed to the queue on
/// update). Logits are cosine scores against [lut; filled queue] over the
/// temperature.
Value oim_loss(Value embeds, const std::vector<int>& labels, const OimState& state);

/// Post-step memory refresh from the (detached) embedding values.
void oim_update(OimState& state, const Tensor& embeds, const std::vector<int>& labels);

/// Four-way rotation classification loss (labels = quarter-turn count).
Value rotation_loss(Value logits4, const std::vector<int>& quarter_turns);

/// Two-way same/different loss for the similarity head.
Value similarity_loss(Value logits2, const std::vector<int>& same_flags);

/// Mean negative log-likelihood of sampled proposal anchors under their
/// assigned foreground/background label; logits are single per-anchor scores.
Value proposal_loss(Value anchor_logits, const std::vector<double>& is_positive);

/// Composite objectives. These are plain sums; tests pin the exact
/// decomposition, so every consumer must build them through these helpers.
Value fewshot_total_loss(Value l_oim, Value l_sim, Value l_rot);
Value search_total_loss(const std::vector<Value>& terms);

}  // namespace qgn
