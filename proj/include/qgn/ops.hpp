#pragma once

#include <array>
#include <vector>

#include "qgn/tape.hpp"
#include "qgn/tensor.hpp"

namespace qgn {

// Elementwise / scalar arithmetic. Shapes must match exactly (no broadcasting;
// the few broadcast-like patterns the models need have dedicated ops below).
Value add(Value a, Value b);
Value sub(Value a, Value b);
Value mul(Value a, Value b);
Value scale(Value a, double c);
Value add_n(const std::vector<Value>& xs);

Value relu(Value a);
Value sigmoid(Value a);
Value square(Value a);

// [m,k] x [k,n] -> [m,n]
Value matmul(Value a, Value b);

// x [n,d] (or [d]), w [o,d], b [o] -> [n,o] (or [o]); computes x w^T + b.
Value linear(Value x, Value w, Value b);

Value reshape(Value a, std::vector<int> shape);

// [n,p] ++ [n,q] -> [n,p+q]
Value concat_cols(Value a, Value b);
// k tensors of shape [d] -> [k,d]
Value stack_rows(const std::vector<Value>& rows);
// [n,d] row gather -> [k,d]
Value take_rows(Value x, std::vector<int> idx);
// Flat-index gather from a tensor of any shape -> [k]. Duplicate indices
// accumulate gradient. Used to pull sampled anchors out of score maps.
Value take_elements(Value x, std::vector<int64_t> idx);
// [n,d] -> [d]
Value row(Value x, int i);
// Sum of selected rows of x: [n,d], idx -> [d]. Used for multi-shot pooling.
Value sum_rows(Value x, std::vector<int> idx);

// Global average pool: [n,c,h,w] -> [n,c]
Value gap(Value x);
// Per-(sample,channel) scaling: x [n,c,h,w] * s [n,c] -> [n,c,h,w]
Value channel_scale(Value x, Value s);
// Per-channel scaling of one map: x [c,h,w] * s [c] -> [c,h,w]
Value channel_scale_single(Value x, Value s);

// x [n,ci,h,w], w [co,ci,kh,kw], b [co]; zero padding, square stride.
Value conv2d(Value x, Value w, Value b, int stride, int pad);

// Row-wise L2 normalization of [n,d] or [d]; eps keeps the zero vector finite.
Value l2_normalize_rows(Value x, double eps = 1e-12);

Value softmax_rows(Value x);  // [n,k] or [k]

Value mean_all(Value x);  // -> [1]
Value sum_all(Value x);   // -> [1]

// Mean cross-entropy over rows with labels in [0,k); label -1 rows are
// excluded from both the sum and the divisor.
Value ce_with_logits(Value logits, const std::vector<int>& labels);

// Mean binary cross-entropy over elements, targets in [0,1].
Value bce_with_logits(Value logits, const std::vector<double>& targets);

// Mean of -log(p[label]) over rows of a probability matrix (already softmaxed
// or otherwise normalized). Used where a probability, not a logit, is fused.
Value nll_rows(Value probs, const std::vector<int>& labels, double eps = 1e-12);

// Smooth-L1 (Huber, delta=1) summed over coordinates, averaged over rows.
Value smooth_l1(Value pred, const Tensor& target);

struct BatchNormState {
  Tensor running_mean;  // [d]
  Tensor running_var;   // [d]
  int64_t batches_seen = 0;
};

// Batch norm over rows of [n,d]. Training mode uses batch statistics and
// updates `state`; eval mode uses the running statistics.
Value batchnorm_rows(Value x, Value gamma, Value beta, BatchNormState* state,
                     bool training, double momentum = 0.1, double eps = 1e-5);

// Max pool over each of `boxes` on fmap [c,h,w]; boxes are half-open
// [x1,y1,x2,y2] in feature-map coordinates. Output [k, c, ph, pw].
Value roi_pool_max(Value fmap, const std::vector<std::array<double, 4>>& boxes,
                   int ph, int pw);

// Bilinear ROI alignment (2x2 samples per bin, averaged). Output [k,c,ph,pw].
Value roi_align(Value fmap, const std::vector<std::array<double, 4>>& boxes,
                int ph, int pw);

}  // namespace qgn
