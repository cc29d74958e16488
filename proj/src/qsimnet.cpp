#include "qgn/qsimnet.hpp"

#include <numeric>

namespace qgn {

QSimNet QSimNet::create(ParamStore& ps, RandomSource& rng, const std::string& prefix,
                        int embed_dim) {
  QSimNet q;
  q.embed_dim = embed_dim;
  q.gamma = prefix + ".bn.gamma";
  q.beta = prefix + ".bn.beta";
  ps.create(q.gamma, Tensor::full({embed_dim}, 1.0));
  ps.create(q.beta, Tensor({embed_dim}));
  q.fc = LinearLayer::create(ps, rng, prefix + ".fc", embed_dim, 2);
  return q;
}

Value QSimNet::logits(ParamBinder& p, Value fq, Value fg, bool training) {
  Value d = square(sub(fq, fg));
  Value h = batchnorm_rows(d, p(gamma), p(beta), &bn_state, training);
  return fc.forward(p, h);
}

Value QSimNet::probs(ParamBinder& p, Value fq, Value fg, bool training) {
  return softmax_rows(logits(p, fq, fg, training));
}

Value QSimNet::pool_support(Value support_embeds) {
  const int k = support_embeds.val().dim(0);
  std::vector<int> all(static_cast<size_t>(k));
  std::iota(all.begin(), all.end(), 0);
  return l2_normalize_rows(sum_rows(support_embeds, all));
}

}  // namespace qgn
