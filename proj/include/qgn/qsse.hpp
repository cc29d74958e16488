#pragma once

#include "qgn/nn.hpp"

namespace qgn {

/// Pairwise channel re-calibration for a Siamese stage. Channel descriptors of
/// the two streams' residual branches are pooled, concatenated, and pushed
/// through a two-layer bottleneck; the resulting per-channel gate multiplies
/// the residual branch of *both* streams before their skip additions, so the
/// query decides which channels matter and the gallery is filtered the same
/// way.
struct QsseBlock {
  LinearLayer fc1;  // 2C -> 2C/r
  LinearLayer fc2;  // 2C/r -> C
  int channels = 0;
  int reduction = 16;

  static QsseBlock create(ParamStore& ps, RandomSource& rng, const std::string& prefix,
                          int channels, int reduction = 16);

  /// Gate from already-pooled descriptors zq, zg: [n,C] each -> [n,C] in (0,1).
  Value gate_from_descriptors(ParamBinder& p, Value zq, Value zg) const;

  /// Gate straight from the two residual maps uq, ug: [n,C,H,W].
  Value gate(ParamBinder& p, Value uq, Value ug) const;
};

struct QssePairOut {
  Value xq;    // recalibrated query map [n,C,H,W]
  Value xg;    // recalibrated gallery map
  Value gate;  // [n,C]
};

/// Full re-calibrated residual step for both streams:
///   out_q = x_q + s (.) u_q,  out_g = x_g + s (.) u_g,  shared s = gate(u_q, u_g).
QssePairOut qsse_forward(ParamBinder& p, const QsseBlock& block, Value xq, Value uq, Value xg,
                         Value ug);

}  // namespace qgn
