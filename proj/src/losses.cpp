#include "qgn/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace qgn {

OimState OimState::create(int num_labels, int queue_size, int dim, double momentum,
                          double temperature) {
  OimState s;
  s.lut = Tensor({num_labels, dim});
  s.queue = Tensor({queue_size, dim});
  s.momentum = momentum;
  s.temperature = temperature;
  return s;
}

Value oim_loss(Value embeds, const std::vector<int>& labels, const OimState& state) {
  const Tensor& ev = embeds.val();
  if (ev.ndim() != 2 || ev.dim(1) != state.dim())
    throw std::invalid_argument("oim_loss: embedding dim mismatch");
  const int L = state.num_labels();
  const int Q = state.queue_filled;
  // Memory matrix is a constant on the tape: gradients reach embeddings only.
  Tensor mem({L + Q, state.dim()});
  for (int r = 0; r < L; ++r)
    for (int c = 0; c < state.dim(); ++c) mem.at({r, c}) = state.lut.at({r, c});
  for (int r = 0; r < Q; ++r)
    for (int c = 0; c < state.dim(); ++c) mem.at({L + r, c}) = state.queue.at({r, c});
  Tape* t = embeds.tape;
  Value logits = scale(linear(embeds, t->constant(std::move(mem)), Value{}),
                       1.0 / state.temperature);
  return ce_with_logits(logits, labels);
}

void oim_update(OimState& state, const Tensor& embeds, const std::vector<int>& labels) {
  if (embeds.ndim() != 2 || embeds.dim(1) != state.dim())
    throw std::invalid_argument("oim_update: embedding dim mismatch");
  if (static_cast<size_t>(embeds.dim(0)) != labels.size())
    throw std::invalid_argument("oim_update: labels size mismatch");
  const int d = state.dim();
  const int qsize = state.queue.dim(0);
  for (int r = 0; r < embeds.dim(0); ++r) {
    const int y = labels[static_cast<size_t>(r)];
    if (y >= 0) {
      if (y >= state.num_labels()) throw std::out_of_range("oim_update: label out of range");
      double norm_sq = 0.0;
      for (int c = 0; c < d; ++c) {
        double v = state.momentum * state.lut.at({y, c}) +
                   (1.0 - state.momentum) * embeds.at({r, c});
        state.lut.at({y, c}) = v;
        norm_sq += v * v;
      }
      const double inv = 1.0 / std::sqrt(norm_sq + 1e-12);
      for (int c = 0; c < d; ++c) state.lut.at({y, c}) *= inv;
    } else if (qsize > 0) {
      for (int c = 0; c < d; ++c) state.queue.at({state.queue_head, c}) = embeds.at({r, c});
      state.queue_head = (state.queue_head + 1) % qsize;
      state.queue_filled = std::min(state.queue_filled + 1, qsize);
    }
  }
}

Value rotation_loss(Value logits4, const std::vector<int>& quarter_turns) {
  if (logits4.val().dim(1) != 4) throw std::invalid_argument("rotation_loss: expect [n,4]");
  return ce_with_logits(logits4, quarter_turns);
}

Value similarity_loss(Value logits2, const std::vector<int>& same_flags) {
  if (logits2.val().dim(1) != 2) throw std::invalid_argument("similarity_loss: expect [n,2]");
  return ce_with_logits(logits2, same_flags);
}

Value proposal_loss(Value anchor_logits, const std::vector<double>& is_positive) {
  return bce_with_logits(anchor_logits, is_positive);
}

Value fewshot_total_loss(Value l_oim, Value l_sim, Value l_rot) {
  return add_n({l_oim, l_sim, l_rot});
}

Value search_total_loss(const std::vector<Value>& terms) {
  return add_n(terms);
}

}  // namespace qgn
