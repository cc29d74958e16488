#pragma once

#include "qgn/nn.hpp"

namespace qgn {

/// Learned pairwise similarity head. For embedding rows f_q, f_g it scores
/// the squared difference (f_q - f_g)^2 through batch norm and a two-way
/// classifier: column 1 of the softmax is the match probability. The squared
/// difference makes the head symmetric in its two inputs by construction.
struct QSimNet {
  std::string gamma, beta;  // batch-norm affine parameters
  LinearLayer fc;           // embed_dim -> 2 (column 0 = different, 1 = same)
  BatchNormState bn_state;  // running stats, persisted with the model
  int embed_dim = 0;

  static QSimNet create(ParamStore& ps, RandomSource& rng, const std::string& prefix,
                        int embed_dim);

  /// Paired rows fq, fg: [n,D] each -> logits [n,2].
  Value logits(ParamBinder& p, Value fq, Value fg, bool training);

  /// Match probabilities [n,2] (softmax of logits).
  Value probs(ParamBinder& p, Value fq, Value fg, bool training);

  /// Multi-shot query pooling: element-wise sum of the k support embeddings,
  /// re-normalized to unit length. Order-invariant by construction.
  static Value pool_support(Value support_embeds /*[k,D]*/);
};

}  // namespace qgn
