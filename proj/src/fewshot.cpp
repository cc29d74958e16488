#include "qgn/fewshot.hpp"

#include <stdexcept>

namespace qgn {

FewshotModel FewshotModel::create(const FewshotConfig& cfg) {
  if (cfg.num_train_classes < 1) {
    throw std::invalid_argument("FewshotModel: num_train_classes must be set");
  }
  FewshotModel m;
  m.cfg_ = cfg;
  RandomSource rng(derive_seed(cfg.seed, 0xB00F));
  BackboneConfig bc = BackboneConfig::by_name(cfg.arch);
  bc.qsse = cfg.qsse;
  m.backbone_ = Backbone::create(m.params_, rng, bc);
  m.embed_dim_ = bc.out_channels();
  m.simnet_ = QSimNet::create(m.params_, rng, "simnet", m.embed_dim_);
  m.rot_head_ = LinearLayer::create(m.params_, rng, "rot_head", m.embed_dim_, 4);
  m.oim_ = OimState::create(cfg.num_train_classes, cfg.oim_queue, m.embed_dim_,
                            cfg.oim_momentum, cfg.oim_temperature);
  return m;
}

FewshotModel::LossGraph FewshotModel::build_losses(Tape& tape, ParamBinder& p, const Batch& b) {
  LossGraph g;
  auto enc = backbone_.encode_pair(p, tape.constant(b.imgs_q), tape.constant(b.imgs_g));
  g.embed_q = enc.embed_q;
  g.embed_g = enc.embed_g;
  g.oim = scale(add(oim_loss(enc.embed_q, b.labels_q, oim_),
                    oim_loss(enc.embed_g, b.labels_g, oim_)),
                0.5);

  if (cfg_.qsimnet) {
    Value logits = simnet_.logits(p, enc.embed_q, enc.embed_g, true);
    g.sim = similarity_loss(logits, b.same);
  } else {
    g.sim = tape.constant(Tensor::scalar(0.0));
  }

  if (cfg_.rotation) {
    auto rot = backbone_.encode_pair(p, tape.constant(b.rot_q), tape.constant(b.rot_g));
    Value logits_q = rot_head_.forward(p, rot.embed_q);
    Value logits_g = rot_head_.forward(p, rot.embed_g);
    g.rot = scale(add(rotation_loss(logits_q, b.rot_labels_q),
                      rotation_loss(logits_g, b.rot_labels_g)),
                  0.5);
  } else {
    g.rot = tape.constant(Tensor::scalar(0.0));
  }

  g.total = fewshot_total_loss(g.oim, g.sim, g.rot);
  return g;
}

FewshotModel::StepLosses FewshotModel::train_step(const Batch& b, AdamOptimizer& opt) {
  Tape tape(true);
  ParamBinder p(&tape, &params_, true);
  LossGraph g = build_losses(tape, p, b);
  tape.backward(g.total);
  opt.step(params_, p.grads());

  oim_update(oim_, g.embed_q.val(), b.labels_q);
  oim_update(oim_, g.embed_g.val(), b.labels_g);

  StepLosses out;
  out.total = g.total.val().item();
  out.oim = g.oim.val().item();
  out.sim = g.sim.val().item();
  out.rot = g.rot.val().item();
  return out;
}

std::vector<double> FewshotModel::score_classes(const Tensor& gallery_img,
                                                const std::vector<Tensor>& supports,
                                                int num_classes, int k) {
  if (static_cast<int>(supports.size()) != num_classes * k) {
    throw std::invalid_argument("score_classes: supports size != classes * k");
  }
  const int n = num_classes * k;
  const int64_t per = gallery_img.numel();
  std::vector<int> shape = {n, 3, cfg_.image_size, cfg_.image_size};
  Tensor qs(shape), gs(shape);
  for (int i = 0; i < n; ++i) {
    const Tensor& s = supports[static_cast<size_t>(i)];
    if (s.numel() != per) throw std::invalid_argument("score_classes: support shape mismatch");
    for (int64_t j = 0; j < per; ++j) {
      qs[i * per + j] = s[j];
      gs[i * per + j] = gallery_img[j];
    }
  }

  Tape tape(false);
  ParamBinder p(&tape, &params_, false);
  auto enc = ov_qsse_ ? backbone_.encode_pair(p, tape.constant(qs), tape.constant(gs))
                      : backbone_.encode_pair_fixed_gate(p, tape.constant(qs),
                                                         tape.constant(gs), 1.0);

  // Multi-shot supports pool by sum + renormalize; the k gallery copies pool
  // the same way on their side, which for identical rows is a no-op.
  std::vector<Value> fq_rows, fg_rows;
  fq_rows.reserve(static_cast<size_t>(num_classes));
  fg_rows.reserve(static_cast<size_t>(num_classes));
  for (int c = 0; c < num_classes; ++c) {
    std::vector<int> rows(static_cast<size_t>(k));
    for (int i = 0; i < k; ++i) rows[static_cast<size_t>(i)] = c * k + i;
    fq_rows.push_back(l2_normalize_rows(sum_rows(enc.embed_q, rows)));
    fg_rows.push_back(l2_normalize_rows(sum_rows(enc.embed_g, rows)));
  }
  Value fq = stack_rows(fq_rows);
  Value fg = stack_rows(fg_rows);

  std::vector<double> scores(static_cast<size_t>(num_classes), 0.0);
  if (cfg_.qsimnet && ov_simnet_) {
    Value probs = simnet_.probs(p, fq, fg, false);
    for (int c = 0; c < num_classes; ++c) scores[static_cast<size_t>(c)] = probs.val().at({c, 1});
  } else {
    const Tensor& a = fq.val();
    const Tensor& b = fg.val();
    for (int c = 0; c < num_classes; ++c) {
      double dot = 0;
      for (int j = 0; j < embed_dim_; ++j) {
        dot += a[static_cast<int64_t>(c) * embed_dim_ + j] *
               b[static_cast<int64_t>(c) * embed_dim_ + j];
      }
      scores[static_cast<size_t>(c)] = dot;
    }
  }
  return scores;
}

std::map<std::string, Tensor> FewshotModel::buffers() const {
  std::map<std::string, Tensor> out;
  out["oim.lut"] = oim_.lut;
  out["oim.queue"] = oim_.queue;
  out["oim.state"] = Tensor::from(
      {2}, {static_cast<double>(oim_.queue_filled), static_cast<double>(oim_.queue_head)});
  out["simnet.bn.mean"] = simnet_.bn_state.running_mean;
  out["simnet.bn.var"] = simnet_.bn_state.running_var;
  out["simnet.bn.count"] = Tensor::scalar(static_cast<double>(simnet_.bn_state.batches_seen));
  return out;
}

void FewshotModel::set_buffers(const std::map<std::string, Tensor>& buffers) {
  oim_.lut = buffers.at("oim.lut");
  oim_.queue = buffers.at("oim.queue");
  const Tensor& st = buffers.at("oim.state");
  oim_.queue_filled = static_cast<int>(st[0]);
  oim_.queue_head = static_cast<int>(st[1]);
  simnet_.bn_state.running_mean = buffers.at("simnet.bn.mean");
  simnet_.bn_state.running_var = buffers.at("simnet.bn.var");
  simnet_.bn_state.batches_seen = static_cast<int64_t>(buffers.at("simnet.bn.count").item());
}

}  // namespace qgn
