#include "qgn/detector.hpp"

#include <algorithm>
#include <stdexcept>

namespace qgn {

namespace {

// Image-space box to half-open feature-map coordinates, clipped.
std::array<double, 4> to_feature(const Box& b, int stride, int fh, int fw) {
  const double s = static_cast<double>(stride);
  Box f = clip_box(Box{b.x1 / s, b.y1 / s, b.x2 / s, b.y2 / s}, fw, fh);
  return {f.x1, f.y1, f.x2, f.y2};
}

double best_iou_index(const Box& roi, const std::vector<Box>& gts, int* best) {
  double v = 0.0;
  *best = -1;
  for (size_t j = 0; j < gts.size(); ++j) {
    const double o = iou(roi, gts[j]);
    if (o > v) {
      v = o;
      *best = static_cast<int>(j);
    }
  }
  return v;
}

}  // namespace

SearchDetector SearchDetector::create(const DetectorConfig& cfg) {
  if (cfg.num_identities < 1) {
    throw std::invalid_argument("SearchDetector: num_identities must be set");
  }
  if (cfg.roi_mode != "pool" && cfg.roi_mode != "align") {
    throw std::invalid_argument("SearchDetector: roi_mode must be 'pool' or 'align'");
  }
  SearchDetector d;
  d.cfg_ = cfg;
  RandomSource rng(derive_seed(cfg.seed, 0xDE7EC7));
  BackboneConfig bc = BackboneConfig::by_name(cfg.arch);
  bc.qsse = cfg.qsse;
  d.backbone_ = Backbone::create(d.params_, rng, bc);
  d.channels_ = bc.out_channels();
  d.stride_ = bc.stem_stride;
  for (const StageSpec& st : bc.stages) d.stride_ *= st.stride;

  const int A = cfg.num_anchors();
  d.rpn_ = RpnHead::create(d.params_, rng, "rpn", d.channels_, A, true);
  if (cfg.qrpn) {
    d.rpn_star_ = RpnHead::create(d.params_, rng, "rpn_star", d.channels_, A, false);
    d.gate_ = QueryGate::create(d.params_, rng, "query_gate", d.channels_, 3, 4);
  }
  int roi_in = d.channels_ * cfg.roi_size * cfg.roi_size;
  if (cfg.global_context) roi_in += d.channels_;
  d.roi_fc_ = LinearLayer::create(d.params_, rng, "roi.fc", roi_in, cfg.fc_dim);
  d.roi_cls_ = LinearLayer::create(d.params_, rng, "roi.cls", cfg.fc_dim, 2);
  d.roi_reg_ = LinearLayer::create(d.params_, rng, "roi.reg", cfg.fc_dim, 4);
  d.roi_emb_ = LinearLayer::create(d.params_, rng, "roi.emb", cfg.fc_dim, cfg.embed_dim);
  if (cfg.qsimnet) d.simnet_ = QSimNet::create(d.params_, rng, "simnet", cfg.embed_dim);
  d.oim_ = OimState::create(cfg.num_identities, cfg.oim_queue, cfg.embed_dim, cfg.oim_momentum,
                            cfg.oim_temperature);
  return d;
}

std::vector<Box> SearchDetector::anchors_for(int fh, int fw) const {
  return make_anchors(fh, fw, stride_, cfg_.anchor_scales, cfg_.anchor_ratios);
}

SearchDetector::RoiOut SearchDetector::roi_head(
    ParamBinder& p, Value map3d, Value map4d,
    const std::vector<std::array<double, 4>>& feature_boxes) const {
  const int k = static_cast<int>(feature_boxes.size());
  Value feats = cfg_.roi_mode == "align"
                    ? roi_align(map3d, feature_boxes, cfg_.roi_size, cfg_.roi_size)
                    : roi_pool_max(map3d, feature_boxes, cfg_.roi_size, cfg_.roi_size);
  Value flat = reshape(feats, {k, channels_ * cfg_.roi_size * cfg_.roi_size});
  if (cfg_.global_context) {
    Value ctx = gap(map4d);  // [1,C]
    flat = concat_cols(flat, take_rows(ctx, std::vector<int>(static_cast<size_t>(k), 0)));
  }
  Value h = relu(roi_fc_.forward(p, flat));
  RoiOut out;
  out.cls_logits = roi_cls_.forward(p, h);
  out.reg = roi_reg_.forward(p, h);
  out.embed = l2_normalize_rows(roi_emb_.forward(p, h));
  return out;
}

SearchDetector::LossGraph SearchDetector::build_losses(Tape& tape, ParamBinder& p,
                                                       const SearchExample& ex, bool query_terms,
                                                       RandomSource& rng) {
  LossGraph g;
  const int imgH = ex.gallery_img.dim(1), imgW = ex.gallery_img.dim(2);
  Value q4 = reshape(tape.constant(ex.query_img),
                     {1, 3, ex.query_img.dim(1), ex.query_img.dim(2)});
  Value g4 = reshape(tape.constant(ex.gallery_img), {1, 3, imgH, imgW});
  auto enc = backbone_.encode_pair(p, q4, g4);
  const int C = channels_;
  const int fh = enc.map_g.val().dim(2), fw = enc.map_g.val().dim(3);
  const int fhq = enc.map_q.val().dim(2), fwq = enc.map_q.val().dim(3);
  Value map_q3 = reshape(enc.map_q, {C, fhq, fwq});
  Value map_g3 = reshape(enc.map_g, {C, fh, fw});
  const std::vector<Box> anchors = anchors_for(fh, fw);
  const int A = cfg_.num_anchors();

  auto rpn = rpn_.forward(p, enc.map_g);
  Value cls_flat = reshape(rpn.cls_logits, {A * fh * fw});
  Value reg_flat = reshape(rpn.reg_deltas, {4 * A * fh * fw});

  // Plain objectness over sampled anchors.
  AnchorSample rs = sample_rpn_anchors(anchors, ex.gallery_persons, rng, cfg_.rpn_batch, 0.5,
                                       cfg_.rpn_pos_iou, 0.3);
  {
    std::vector<int64_t> idx;
    std::vector<double> lbl;
    for (int i : rs.pos) {
      idx.push_back(i);
      lbl.push_back(1.0);
    }
    for (int i : rs.neg) {
      idx.push_back(i);
      lbl.push_back(0.0);
    }
    g.rpn_cls = bce_with_logits(take_elements(cls_flat, std::move(idx)), lbl);
  }

  // Box regression on the positive anchors, each against its best overlap.
  if (!rs.pos.empty()) {
    const int P = static_cast<int>(rs.pos.size());
    std::vector<int64_t> ridx;
    ridx.reserve(static_cast<size_t>(P) * 4);
    Tensor tgt({P, 4});
    for (int n = 0; n < P; ++n) {
      const int i = rs.pos[static_cast<size_t>(n)];
      int best = -1;
      best_iou_index(anchors[static_cast<size_t>(i)], ex.gallery_persons, &best);
      const Box& gt = ex.gallery_persons[static_cast<size_t>(best < 0 ? 0 : best)];
      const auto d = encode_box_delta(anchors[static_cast<size_t>(i)], gt);
      for (int k = 0; k < 4; ++k) tgt.at({n, k}) = d[static_cast<size_t>(k)];
      const int a = i / (fh * fw), rem = i % (fh * fw);
      const int r = rem / fw, c = rem % fw;
      for (int k = 0; k < 4; ++k) ridx.push_back((((a * 4 + k) * fh) + r) * fw + c);
    }
    g.rpn_reg = smooth_l1(reshape(take_elements(reg_flat, std::move(ridx)), {P, 4}), tgt);
  } else {
    g.rpn_reg = tape.constant(Tensor::scalar(0.0));
  }

  // Query-gated objectness. Negatives avoid every labeled person, so the
  // head learns "this person", not "a person".
  const bool use_query = query_terms && cfg_.qrpn;
  if (use_query) {
    const auto fqbox = to_feature(ex.query_box, stride_, fhq, fwq);
    Value gate = gate_.gate_from_roi(p, map_q3, Box{fqbox[0], fqbox[1], fqbox[2], fqbox[3]});
    Value gated = channel_scale_single(map_g3, gate);
    auto star = rpn_star_.forward(p, reshape(gated, {1, C, fh, fw}));
    Value star_flat = reshape(star.cls_logits, {A * fh * fw});

    std::vector<Box> others;
    for (size_t j = 0; j < ex.gallery_persons.size(); ++j) {
      if (ex.gallery_identities[j] != ex.query_identity) others.push_back(ex.gallery_persons[j]);
    }
    Box jit = jitter_box(ex.gallery_target, rng);
    AnchorSample qs = sample_query_anchors(anchors, ex.gallery_target, jit, others, rng);
    std::vector<int64_t> idx;
    std::vector<double> lbl;
    for (int i : qs.pos) {
      idx.push_back(i);
      lbl.push_back(1.0);
    }
    for (int i : qs.neg) {
      idx.push_back(i);
      lbl.push_back(0.0);
    }
    g.qrpn = proposal_loss(take_elements(star_flat, std::move(idx)), lbl);
  } else {
    g.qrpn = tape.constant(Tensor::scalar(0.0));
  }

  // ROI stage on detached proposals plus the annotated boxes.
  std::vector<Box> rois;
  {
    std::vector<Box> decoded = decode_anchor_deltas(
        anchors, rpn.reg_deltas.val().reshaped({4 * A, fh, fw}), imgW, imgH);
    std::vector<double> obj =
        flatten_anchor_scores(rpn.cls_logits.val().reshaped({A, fh, fw}), true);
    std::vector<int> keep = select_proposals(decoded, obj, cfg_.pre_nms_train,
                                             cfg_.post_nms_train, cfg_.rpn_nms);
    for (int i : keep) rois.push_back(decoded[static_cast<size_t>(i)]);
    for (const Box& b : ex.gallery_persons) rois.push_back(clip_box(b, imgW, imgH));
  }

  std::vector<int> fg, bg, fg_match;
  for (size_t i = 0; i < rois.size(); ++i) {
    int best = -1;
    const double v = best_iou_index(rois[i], ex.gallery_persons, &best);
    if (v >= 0.5) {
      fg.push_back(static_cast<int>(i));
      fg_match.push_back(best);
    } else if (v < 0.4) {
      bg.push_back(static_cast<int>(i));
    }
  }
  if (static_cast<int>(fg.size()) > cfg_.roi_max_fg) {
    std::vector<int> pick =
        rng.sample_without_replacement(static_cast<int>(fg.size()), cfg_.roi_max_fg);
    std::vector<int> nfg, nmatch;
    for (int j : pick) {
      nfg.push_back(fg[static_cast<size_t>(j)]);
      nmatch.push_back(fg_match[static_cast<size_t>(j)]);
    }
    fg.swap(nfg);
    fg_match.swap(nmatch);
  }
  const int bg_budget = cfg_.roi_batch - static_cast<int>(fg.size());
  if (static_cast<int>(bg.size()) > bg_budget && bg_budget >= 0) {
    std::vector<int> pick = rng.sample_without_replacement(static_cast<int>(bg.size()), bg_budget);
    std::vector<int> nbg;
    for (int j : pick) nbg.push_back(bg[static_cast<size_t>(j)]);
    bg.swap(nbg);
  }

  std::vector<std::array<double, 4>> fboxes;
  std::vector<int> roi_labels;
  std::vector<Box> roi_boxes;
  for (int i : fg) {
    fboxes.push_back(to_feature(rois[static_cast<size_t>(i)], stride_, fh, fw));
    roi_boxes.push_back(rois[static_cast<size_t>(i)]);
    roi_labels.push_back(1);
  }
  for (int i : bg) {
    fboxes.push_back(to_feature(rois[static_cast<size_t>(i)], stride_, fh, fw));
    roi_boxes.push_back(rois[static_cast<size_t>(i)]);
    roi_labels.push_back(0);
  }
  RoiOut ro = roi_head(p, map_g3, enc.map_g, fboxes);
  g.roi_cls = ce_with_logits(ro.cls_logits, roi_labels);

  const int nfg = static_cast<int>(fg.size());
  if (nfg > 0) {
    std::vector<int> fg_rows(static_cast<size_t>(nfg));
    Tensor tgt({nfg, 4});
    for (int n = 0; n < nfg; ++n) {
      fg_rows[static_cast<size_t>(n)] = n;  // fg rows come first
      const Box& gt = ex.gallery_persons[static_cast<size_t>(fg_match[static_cast<size_t>(n)])];
      const auto d = encode_box_delta(roi_boxes[static_cast<size_t>(n)], gt);
      for (int k = 0; k < 4; ++k) tgt.at({n, k}) = d[static_cast<size_t>(k)];
    }
    g.roi_reg = smooth_l1(take_rows(ro.reg, fg_rows), tgt);
  } else {
    g.roi_reg = tape.constant(Tensor::scalar(0.0));
  }

  // Identity memory over the query person plus matched gallery people.
  const auto qfbox = to_feature(ex.query_box, stride_, fhq, fwq);
  RoiOut qro = roi_head(p, map_q3, enc.map_q, {qfbox});
  {
    std::vector<Value> rows = {row(qro.embed, 0)};
    std::vector<int> labels = {ex.query_identity};
    for (int n = 0; n < nfg; ++n) {
      rows.push_back(row(ro.embed, n));
      labels.push_back(ex.gallery_identities[static_cast<size_t>(fg_match[static_cast<size_t>(n)])]);
    }
    g.oim_embeds = stack_rows(rows);
    g.oim_labels = labels;
    g.oim = oim_loss(g.oim_embeds, labels, oim_);
  }

  // Pair similarity: the query against each sampled ROI; only the target
  // instance counts as a match, capped at three negatives per positive.
  if (query_terms && cfg_.qsimnet) {
    std::vector<int> pair_rows, same;
    int npos = 0;
    for (size_t n = 0; n < roi_boxes.size(); ++n) {
      if (iou(roi_boxes[n], ex.gallery_target) >= 0.5) {
        pair_rows.push_back(static_cast<int>(n));
        same.push_back(1);
        ++npos;
      }
    }
    int nneg = 0;
    for (size_t n = 0; n < roi_boxes.size() && nneg < 3 * std::max(npos, 1); ++n) {
      if (iou(roi_boxes[n], ex.gallery_target) < 0.5) {
        pair_rows.push_back(static_cast<int>(n));
        same.push_back(0);
        ++nneg;
      }
    }
    Value fq = take_rows(qro.embed, std::vector<int>(pair_rows.size(), 0));
    Value fgv = take_rows(ro.embed, pair_rows);
    g.sim = similarity_loss(simnet_.logits(p, fq, fgv, true), same);
  } else {
    g.sim = tape.constant(Tensor::scalar(0.0));
  }

  g.total = search_total_loss(
      {g.rpn_cls, g.rpn_reg, g.qrpn, g.roi_cls, g.roi_reg, g.oim, g.sim});
  return g;
}

SearchDetector::StepLosses SearchDetector::train_step(const SearchExample& ex, SgdOptimizer& opt,
                                                      bool query_terms, RandomSource& rng) {
  Tape tape(true);
  ParamBinder p(&tape, &params_, true);
  LossGraph g = build_losses(tape, p, ex, query_terms, rng);
  tape.backward(g.total);
  opt.step(params_, p.grads());
  oim_update(oim_, g.oim_embeds.val(), g.oim_labels);

  StepLosses out;
  out.total = g.total.val().item();
  out.rpn_cls = g.rpn_cls.val().item();
  out.rpn_reg = g.rpn_reg.val().item();
  out.qrpn = g.qrpn.val().item();
  out.roi_cls = g.roi_cls.val().item();
  out.roi_reg = g.roi_reg.val().item();
  out.oim = g.oim.val().item();
  out.sim = g.sim.val().item();
  return out;
}

std::vector<Detection> SearchDetector::search_pair(const Tensor& query_img, const Box& query_box,
                                                   const Tensor& gallery_img) {
  Tape tape(false);
  ParamBinder p(&tape, &params_, false);
  const int imgH = gallery_img.dim(1), imgW = gallery_img.dim(2);
  Value q4 = reshape(tape.constant(query_img), {1, 3, query_img.dim(1), query_img.dim(2)});
  Value g4 = reshape(tape.constant(gallery_img), {1, 3, imgH, imgW});
  auto enc = ov_qsse_ ? backbone_.encode_pair(p, q4, g4)
                      : backbone_.encode_pair_fixed_gate(p, q4, g4, 1.0);
  const int C = channels_;
  const int fh = enc.map_g.val().dim(2), fw = enc.map_g.val().dim(3);
  const int fhq = enc.map_q.val().dim(2), fwq = enc.map_q.val().dim(3);
  Value map_q3 = reshape(enc.map_q, {C, fhq, fwq});
  Value map_g3 = reshape(enc.map_g, {C, fh, fw});
  const std::vector<Box> anchors = anchors_for(fh, fw);
  const int A = cfg_.num_anchors();

  const auto qfbox = to_feature(query_box, stride_, fhq, fwq);
  RoiOut qro = roi_head(p, map_q3, enc.map_q, {qfbox});

  auto rpn = rpn_.forward(p, enc.map_g);
  Tensor obj_map = rpn.cls_logits.val().reshaped({A, fh, fw});
  std::vector<double> scores;
  if (cfg_.qrpn && ov_qrpn_) {
    Value gate = gate_.gate_from_roi(p, map_q3, Box{qfbox[0], qfbox[1], qfbox[2], qfbox[3]});
    Value gated = channel_scale_single(map_g3, gate);
    auto star = rpn_star_.forward(p, reshape(gated, {1, C, fh, fw}));
    scores = fuse_scores(obj_map, star.cls_logits.val().reshaped({A, fh, fw}), cfg_.fusion);
  } else {
    scores = flatten_anchor_scores(obj_map, true);
  }
  std::vector<Box> decoded =
      decode_anchor_deltas(anchors, rpn.reg_deltas.val().reshaped({4 * A, fh, fw}), imgW, imgH);
  std::vector<int> keep =
      select_proposals(decoded, scores, cfg_.pre_nms_eval, cfg_.post_nms_eval, cfg_.rpn_nms);
  if (keep.empty()) return {};

  std::vector<std::array<double, 4>> fboxes;
  std::vector<Box> props;
  for (int i : keep) {
    props.push_back(decoded[static_cast<size_t>(i)]);
    fboxes.push_back(to_feature(decoded[static_cast<size_t>(i)], stride_, fh, fw));
  }
  RoiOut ro = roi_head(p, map_g3, enc.map_g, fboxes);
  Value cls_probs = softmax_rows(ro.cls_logits);

  const int k = static_cast<int>(props.size());
  std::vector<double> sims(static_cast<size_t>(k), 0.0);
  if (cfg_.qsimnet && ov_simnet_) {
    Value probs =
        simnet_.probs(p, take_rows(qro.embed, std::vector<int>(static_cast<size_t>(k), 0)),
                      ro.embed, false);
    for (int i = 0; i < k; ++i) sims[static_cast<size_t>(i)] = probs.val().at({i, 1});
  } else {
    const Tensor& fq = qro.embed.val();
    const Tensor& fe = ro.embed.val();
    for (int i = 0; i < k; ++i) {
      double dot = 0;
      for (int j = 0; j < cfg_.embed_dim; ++j)
        dot += fq[j] * fe[static_cast<int64_t>(i) * cfg_.embed_dim + j];
      sims[static_cast<size_t>(i)] = dot;
    }
  }

  std::vector<Box> refined;
  std::vector<double> keep_sims, keep_cls;
  for (int i = 0; i < k; ++i) {
    const double pc = cls_probs.val().at({i, 1});
    if (pc < cfg_.cls_filter) continue;
    std::array<double, 4> d;
    for (int j = 0; j < 4; ++j) d[static_cast<size_t>(j)] = ro.reg.val().at({i, j});
    refined.push_back(clip_box(decode_box_delta(props[static_cast<size_t>(i)], d), imgW, imgH));
    keep_sims.push_back(sims[static_cast<size_t>(i)]);
    keep_cls.push_back(pc);
  }
  if (refined.empty()) return {};

  std::vector<int> final_keep = nms(refined, keep_sims, cfg_.final_nms);
  std::vector<Detection> out;
  for (int i : final_keep) {
    Detection det;
    det.box = refined[static_cast<size_t>(i)];
    det.cls = keep_cls[static_cast<size_t>(i)];
    det.sim = keep_sims[static_cast<size_t>(i)];
    out.push_back(det);
  }
  std::stable_sort(out.begin(), out.end(),
                   [](const Detection& a, const Detection& b) { return a.sim > b.sim; });
  return out;
}

SearchDetector::ProposalSet SearchDetector::propose(const Tensor& query_img, const Box& query_box,
                                                    const Tensor& gallery_img, bool query_guided,
                                                    int post_top) {
  if (query_guided && !cfg_.qrpn) {
    throw std::logic_error("propose: query guidance requested but the branch is disabled");
  }
  Tape tape(false);
  ParamBinder p(&tape, &params_, false);
  const int imgH = gallery_img.dim(1), imgW = gallery_img.dim(2);
  Value q4 = reshape(tape.constant(query_img), {1, 3, query_img.dim(1), query_img.dim(2)});
  Value g4 = reshape(tape.constant(gallery_img), {1, 3, imgH, imgW});
  // The unguided branch measures what the detector proposes without the query:
  // trunk re-calibration is query-conditioned, so it is fixed open here too.
  auto enc = (query_guided && ov_qsse_) ? backbone_.encode_pair(p, q4, g4)
                                        : backbone_.encode_pair_fixed_gate(p, q4, g4, 1.0);
  const int C = channels_;
  const int fh = enc.map_g.val().dim(2), fw = enc.map_g.val().dim(3);
  const int fhq = enc.map_q.val().dim(2), fwq = enc.map_q.val().dim(3);
  const std::vector<Box> anchors = anchors_for(fh, fw);
  const int A = cfg_.num_anchors();

  auto rpn = rpn_.forward(p, enc.map_g);
  Tensor obj_map = rpn.cls_logits.val().reshaped({A, fh, fw});
  std::vector<double> scores;
  if (query_guided) {
    Value map_q3 = reshape(enc.map_q, {C, fhq, fwq});
    const auto qfbox = to_feature(query_box, stride_, fhq, fwq);
    Value gate = gate_.gate_from_roi(p, map_q3, Box{qfbox[0], qfbox[1], qfbox[2], qfbox[3]});
    Value gated = channel_scale_single(reshape(enc.map_g, {C, fh, fw}), gate);
    auto star = rpn_star_.forward(p, reshape(gated, {1, C, fh, fw}));
    scores = fuse_scores(obj_map, star.cls_logits.val().reshaped({A, fh, fw}), cfg_.fusion);
  } else {
    scores = flatten_anchor_scores(obj_map, true);
  }
  std::vector<Box> decoded =
      decode_anchor_deltas(anchors, rpn.reg_deltas.val().reshaped({4 * A, fh, fw}), imgW, imgH);
  const int pre = std::max(cfg_.pre_nms_eval, post_top * 3);
  std::vector<int> keep = select_proposals(decoded, scores, pre, post_top, cfg_.rpn_nms);

  ProposalSet out;
  for (int i : keep) {
    out.boxes.push_back(decoded[static_cast<size_t>(i)]);
    out.scores.push_back(scores[static_cast<size_t>(i)]);
  }
  return out;
}

std::map<std::string, Tensor> SearchDetector::buffers() const {
  std::map<std::string, Tensor> out;
  out["oim.lut"] = oim_.lut;
  out["oim.queue"] = oim_.queue;
  out["oim.state"] = Tensor::from(
      {2}, {static_cast<double>(oim_.queue_filled), static_cast<double>(oim_.queue_head)});
  if (cfg_.qsimnet) {
    out["simnet.bn.mean"] = simnet_.bn_state.running_mean;
    out["simnet.bn.var"] = simnet_.bn_state.running_var;
    out["simnet.bn.count"] = Tensor::scalar(static_cast<double>(simnet_.bn_state.batches_seen));
  }
  return out;
}

void SearchDetector::set_buffers(const std::map<std::string, Tensor>& buffers) {
  oim_.lut = buffers.at("oim.lut");
  oim_.queue = buffers.at("oim.queue");
  const Tensor& st = buffers.at("oim.state");
  oim_.queue_filled = static_cast<int>(st[0]);
  oim_.queue_head = static_cast<int>(st[1]);
  if (cfg_.qsimnet) {
    simnet_.bn_state.running_mean = buffers.at("simnet.bn.mean");
    simnet_.bn_state.running_var = buffers.at("simnet.bn.var");
    simnet_.bn_state.batches_seen = static_cast<int64_t>(buffers.at("simnet.bn.count").item());
  }
}

}  // namespace qgn
