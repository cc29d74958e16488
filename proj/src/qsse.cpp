#include "qgn/qsse.hpp"

#include <stdexcept>

namespace qgn {

QsseBlock QsseBlock::create(ParamStore& ps, RandomSource& rng, const std::string& prefix,
                            int channels, int reduction) {
  if (channels % reduction != 0 && 2 * channels / reduction == 0)
    throw std::invalid_argument("QsseBlock: reduction larger than 2*channels");
  QsseBlock b;
  b.channels = channels;
  b.reduction = reduction;
  const int hidden = std::max(1, 2 * channels / reduction);
  b.fc1 = LinearLayer::create(ps, rng, prefix + ".fc1", 2 * channels, hidden);
  b.fc2 = LinearLayer::create(ps, rng, prefix + ".fc2", hidden, channels);
  return b;
}

Value QsseBlock::gate_from_descriptors(ParamBinder& p, Value zq, Value zg) const {
  Value z = concat_cols(zq, zg);  // [n,2C]
  return sigmoid(fc2.forward(p, relu(fc1.forward(p, z))));
}

Value QsseBlock::gate(ParamBinder& p, Value uq, Value ug) const {
  return gate_from_descriptors(p, gap(uq), gap(ug));
}

QssePairOut qsse_forward(ParamBinder& p, const QsseBlock& block, Value xq, Value uq, Value xg,
                         Value ug) {
  Value s = block.gate(p, uq, ug);
  return {add(xq, channel_scale(uq, s)), add(xg, channel_scale(ug, s)), s};
}

}  // namespace qgn
