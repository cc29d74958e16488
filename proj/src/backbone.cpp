#include "qgn/backbone.hpp"

#include <stdexcept>

namespace qgn {

BackboneConfig BackboneConfig::tiny() {
  BackboneConfig c;
  c.stem_width = 16;
  c.stages = {{32, 2, 1}, {64, 2, 1}, {64, 2, 1}};
  return c;
}

BackboneConfig BackboneConfig::search_tiny() {
  BackboneConfig c;
  c.stem_width = 16;
  c.stem_stride = 2;
  c.stages = {{32, 2, 1}, {64, 2, 1}};
  return c;
}

BackboneConfig BackboneConfig::resnet10_like() {
  BackboneConfig c;
  c.stem_width = 64;
  c.stem_kernel = 7;
  c.stem_stride = 2;
  c.stages = {{64, 2, 1}, {128, 2, 1}, {256, 2, 1}, {512, 2, 1}};
  return c;
}

BackboneConfig BackboneConfig::resnet18_like() {
  BackboneConfig c = resnet10_like();
  for (auto& s : c.stages) s.blocks = 2;
  return c;
}

BackboneConfig BackboneConfig::by_name(const std::string& name) {
  if (name == "tiny") return tiny();
  if (name == "search_tiny") return search_tiny();
  if (name == "resnet10") return resnet10_like();
  if (name == "resnet18") return resnet18_like();
  throw std::invalid_argument("unknown backbone arch: " + name);
}

Backbone Backbone::create(ParamStore& ps, RandomSource& rng, const BackboneConfig& cfg,
                          const std::string& prefix) {
  if (cfg.stages.empty()) throw std::invalid_argument("Backbone: no stages");
  Backbone bb;
  bb.cfg_ = cfg;
  bb.stem_ = Conv2dLayer::create(ps, rng, prefix + ".stem", cfg.in_channels, cfg.stem_width,
                                 cfg.stem_kernel, cfg.stem_stride, cfg.stem_kernel / 2);
  int in_w = cfg.stem_width;
  int bi = 0;
  for (const StageSpec& st : cfg.stages) {
    for (int k = 0; k < st.blocks; ++k) {
      const int stride = k == 0 ? st.stride : 1;
      Block b;
      const std::string bp = prefix + ".block" + std::to_string(bi++);
      b.conv1 = Conv2dLayer::create(ps, rng, bp + ".conv1", in_w, st.width, 3, stride, 1);
      b.conv2 = Conv2dLayer::create(ps, rng, bp + ".conv2", st.width, st.width, 3, 1, 1);
      b.has_proj = stride != 1 || in_w != st.width;
      if (b.has_proj)
        b.proj = Conv2dLayer::create(ps, rng, bp + ".proj", in_w, st.width, 1, stride, 0);
      b.has_qsse = cfg.qsse;
      if (cfg.qsse)
        b.qsse = QsseBlock::create(ps, rng, bp + ".qsse", st.width, cfg.qsse_reduction);
      bb.blocks_.push_back(std::move(b));
      in_w = st.width;
    }
  }
  return bb;
}

Value Backbone::stem_forward(ParamBinder& p, Value x) const {
  return relu(stem_.forward(p, x));
}

Value Backbone::block_identity(ParamBinder& p, const Block& b, Value x) const {
  return b.has_proj ? b.proj.forward(p, x) : x;
}

Value Backbone::block_residual(ParamBinder& p, const Block& b, Value x) const {
  return b.conv2.forward(p, relu(b.conv1.forward(p, x)));
}

Backbone::PairOut Backbone::encode_pair(ParamBinder& p, Value imgs_q, Value imgs_g) const {
  return encode_pair_impl(p, imgs_q, imgs_g, nullptr);
}

Backbone::PairOut Backbone::encode_pair_fixed_gate(ParamBinder& p, Value imgs_q, Value imgs_g,
                                                   double gate) const {
  return encode_pair_impl(p, imgs_q, imgs_g, &gate);
}

Backbone::PairOut Backbone::encode_pair_impl(ParamBinder& p, Value imgs_q, Value imgs_g,
                                             const double* fixed_gate) const {
  PairOut out;
  Value xq = stem_forward(p, imgs_q);
  Value xg = stem_forward(p, imgs_g);
  const int n = imgs_q.val().dim(0);
  for (const Block& b : blocks_) {
    Value iq = block_identity(p, b, xq);
    Value ig = block_identity(p, b, xg);
    Value uq = block_residual(p, b, xq);
    Value ug = block_residual(p, b, xg);
    if (b.has_qsse) {
      Value s = fixed_gate
                    ? p.tape().constant(Tensor::full({n, uq.val().dim(1)}, *fixed_gate))
                    : b.qsse.gate(p, uq, ug);
      out.gates.push_back(s);
      xq = relu(add(iq, channel_scale(uq, s)));
      xg = relu(add(ig, channel_scale(ug, s)));
    } else {
      xq = relu(add(iq, uq));
      xg = relu(add(ig, ug));
    }
  }
  out.map_q = xq;
  out.map_g = xg;
  out.pooled_q = gap(xq);
  out.pooled_g = gap(xg);
  out.embed_q = l2_normalize_rows(out.pooled_q);
  out.embed_g = l2_normalize_rows(out.pooled_g);
  return out;
}

Backbone::SingleOut Backbone::encode_single(ParamBinder& p, Value imgs, GateMode mode) const {
  Value x = stem_forward(p, imgs);
  for (const Block& b : blocks_) {
    Value idn = block_identity(p, b, x);
    if (mode == GateMode::kCut && b.has_qsse) {
      x = relu(idn);
      continue;
    }
    x = relu(add(idn, block_residual(p, b, x)));
  }
  SingleOut out;
  out.map = x;
  out.pooled = gap(x);
  out.embed = l2_normalize_rows(out.pooled);
  return out;
}

}  // namespace qgn
