#include "qgn/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "qgn/checkpoint.hpp"
#include "qgn/image.hpp"
#include "qgn/metrics.hpp"
#include "qgn/report.hpp"

namespace fs = std::filesystem;

namespace qgn {

const Tensor& ImageCache::get(const std::string& path) {
  auto it = cache_.find(path);
  if (it != cache_.end()) return it->second;
  return cache_.emplace(path, read_ppm(path)).first->second;
}

namespace {

double clamp01(double v) { return v < 0.0 ? 0.0 : (v > 1.0 ? 1.0 : v); }

Tensor adjust_brightness(const Tensor& img, double factor) {
  Tensor out = img;
  for (int64_t i = 0; i < out.numel(); ++i) out[i] = clamp01(out[i] * factor);
  return out;
}

// Random flip, jittered crop back to native size, brightness wobble.
Tensor augment_classification(const Tensor& img, RandomSource& rng) {
  Tensor out = img;
  if (rng.uniform() < 0.5) out = hflip(out);
  const int s = out.dim(1);
  const double scale = rng.uniform(0.85, 1.0);
  const double cs = s * scale;
  const double x0 = rng.uniform(0.0, s - cs);
  const double y0 = rng.uniform(0.0, s - cs);
  out = crop_resize(out, x0, y0, x0 + cs, y0 + cs, s, s);
  return adjust_brightness(out, rng.uniform(0.9, 1.1));
}

Box mirror_box(const Box& b, double img_w) { return Box{img_w - b.x2, b.y1, img_w - b.x1, b.y2}; }

// Scale so the shorter image side hits `short_side` (identity when equal).
Tensor resize_short_side(const Tensor& img, int short_side, double* sx, double* sy) {
  const int h = img.dim(1), w = img.dim(2);
  const int s = std::min(h, w);
  if (s == short_side) {
    *sx = 1.0;
    *sy = 1.0;
    return img;
  }
  const double r = static_cast<double>(short_side) / s;
  const int oh = static_cast<int>(std::llround(h * r));
  const int ow = static_cast<int>(std::llround(w * r));
  *sx = static_cast<double>(ow) / w;
  *sy = static_cast<double>(oh) / h;
  return crop_resize(img, 0, 0, w, h, oh, ow);
}

Box scale_box(const Box& b, double sx, double sy) {
  return Box{b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy};
}

FewshotConfig fewshot_config_from(const Config& cfg, int num_train_classes, uint64_t seed) {
  FewshotConfig fc;
  fc.arch = cfg_get<std::string>(cfg, "model.arch", "tiny");
  fc.qsse = cfg_get<bool>(cfg, "model.qsse", true);
  fc.qsimnet = cfg_get<bool>(cfg, "model.qsimnet", true);
  fc.rotation = cfg_get<bool>(cfg, "model.rotation", true);
  fc.num_train_classes = num_train_classes;
  fc.oim_queue = cfg_get<int>(cfg, "model.oim_queue", 32);
  fc.oim_momentum = cfg_get<double>(cfg, "model.oim_momentum", 0.5);
  fc.oim_temperature = cfg_get<double>(cfg, "model.oim_temperature", 0.1);
  fc.image_size = cfg_get<int>(cfg, "model.image_size", 32);
  fc.seed = seed;
  return fc;
}

nlohmann::json fewshot_config_json(const FewshotConfig& c) {
  return {{"arch", c.arch},
          {"qsse", c.qsse},
          {"qsimnet", c.qsimnet},
          {"rotation", c.rotation},
          {"num_train_classes", c.num_train_classes},
          {"oim_queue", c.oim_queue},
          {"oim_momentum", c.oim_momentum},
          {"oim_temperature", c.oim_temperature},
          {"image_size", c.image_size},
          {"seed", c.seed}};
}

FewshotConfig fewshot_config_from_meta(const nlohmann::json& j) {
  FewshotConfig c;
  c.arch = j.at("arch").get<std::string>();
  c.qsse = j.at("qsse").get<bool>();
  c.qsimnet = j.at("qsimnet").get<bool>();
  c.rotation = j.at("rotation").get<bool>();
  c.num_train_classes = j.at("num_train_classes").get<int>();
  c.oim_queue = j.at("oim_queue").get<int>();
  c.oim_momentum = j.at("oim_momentum").get<double>();
  c.oim_temperature = j.at("oim_temperature").get<double>();
  c.image_size = j.at("image_size").get<int>();
  c.seed = j.at("seed").get<uint64_t>();
  return c;
}

// Table-8 style ROI flag: pool7, pool14, or align14.
void parse_roi_flag(const std::string& flag, DetectorConfig* dc) {
  if (flag == "pool7") {
    dc->roi_mode = "pool";
    dc->roi_size = 7;
  } else if (flag == "pool14") {
    dc->roi_mode = "pool";
    dc->roi_size = 14;
  } else if (flag == "align14") {
    dc->roi_mode = "align";
    dc->roi_size = 14;
  } else {
    throw std::invalid_argument("model.roi must be pool7, pool14, or align14; got " + flag);
  }
}

DetectorConfig detector_config_from(const Config& cfg, int num_identities, uint64_t seed) {
  DetectorConfig dc;
  dc.arch = cfg_get<std::string>(cfg, "model.arch", "search_tiny");
  dc.qsse = cfg_get<bool>(cfg, "model.qsse", true);
  dc.qrpn = cfg_get<bool>(cfg, "model.qrpn", true);
  dc.qsimnet = cfg_get<bool>(cfg, "model.qsimnet", true);
  dc.num_identities = num_identities;
  dc.oim_queue = cfg_get<int>(cfg, "model.oim_queue", 64);
  dc.oim_momentum = cfg_get<double>(cfg, "model.oim_momentum", 0.5);
  dc.oim_temperature = cfg_get<double>(cfg, "model.oim_temperature", 0.1);
  parse_roi_flag(cfg_get<std::string>(cfg, "model.roi", "pool7"), &dc);
  dc.global_context = cfg_get<bool>(cfg, "model.global_context", false);
  dc.fc_dim = cfg_get<int>(cfg, "model.fc_dim", 256);
  dc.embed_dim = cfg_get<int>(cfg, "model.embed_dim", 64);
  dc.rpn_batch = cfg_get<int>(cfg, "model.rpn_batch", dc.rpn_batch);
  dc.rpn_pos_iou = cfg_get<double>(cfg, "model.rpn_pos_iou", dc.rpn_pos_iou);
  dc.fusion = cfg_get<std::string>(cfg, "model.fusion", "logit") == "probability"
                  ? ScoreFusion::kProbability
                  : ScoreFusion::kLogit;
  dc.seed = seed;
  return dc;
}

nlohmann::json detector_config_json(const DetectorConfig& c) {
  return {{"arch", c.arch},
          {"qsse", c.qsse},
          {"qrpn", c.qrpn},
          {"qsimnet", c.qsimnet},
          {"num_identities", c.num_identities},
          {"oim_queue", c.oim_queue},
          {"oim_momentum", c.oim_momentum},
          {"oim_temperature", c.oim_temperature},
          {"roi_mode", c.roi_mode},
          {"roi_size", c.roi_size},
          {"global_context", c.global_context},
          {"fc_dim", c.fc_dim},
          {"embed_dim", c.embed_dim},
          {"rpn_batch", c.rpn_batch},
          {"rpn_pos_iou", c.rpn_pos_iou},
          {"fusion", c.fusion == ScoreFusion::kProbability ? "probability" : "logit"},
          {"seed", c.seed}};
}

DetectorConfig detector_config_from_meta(const nlohmann::json& j) {
  DetectorConfig c;
  c.arch = j.at("arch").get<std::string>();
  c.qsse = j.at("qsse").get<bool>();
  c.qrpn = j.at("qrpn").get<bool>();
  c.qsimnet = j.at("qsimnet").get<bool>();
  c.num_identities = j.at("num_identities").get<int>();
  c.oim_queue = j.at("oim_queue").get<int>();
  c.oim_momentum = j.at("oim_momentum").get<double>();
  c.oim_temperature = j.at("oim_temperature").get<double>();
  c.roi_mode = j.at("roi_mode").get<std::string>();
  c.roi_size = j.at("roi_size").get<int>();
  c.global_context = j.at("global_context").get<bool>();
  c.fc_dim = j.at("fc_dim").get<int>();
  c.embed_dim = j.at("embed_dim").get<int>();
  c.rpn_batch = j.value("rpn_batch", c.rpn_batch);
  c.rpn_pos_iou = j.value("rpn_pos_iou", c.rpn_pos_iou);
  c.fusion = j.value("fusion", std::string("logit")) == "probability"
                 ? ScoreFusion::kProbability
                 : ScoreFusion::kLogit;
  c.seed = j.at("seed").get<uint64_t>();
  return c;
}

void merge_adam_state(std::map<std::string, Tensor>* buffers, AdamOptimizer& opt) {
  for (auto& [name, mv] : opt.moments()) {
    (*buffers)["adam.m." + name] = mv.first;
    (*buffers)["adam.v." + name] = mv.second;
  }
  (*buffers)["adam.t"] = Tensor::scalar(static_cast<double>(opt.steps()));
}

void restore_adam_state(const std::map<std::string, Tensor>& buffers, AdamOptimizer* opt) {
  for (const auto& [key, t] : buffers) {
    if (key.rfind("adam.m.", 0) == 0) {
      opt->moments()[key.substr(7)].first = t;
    } else if (key.rfind("adam.v.", 0) == 0) {
      opt->moments()[key.substr(7)].second = t;
    }
  }
  auto it = buffers.find("adam.t");
  if (it != buffers.end()) opt->restore(static_cast<int64_t>(it->second.item()));
}

void merge_sgd_state(std::map<std::string, Tensor>* buffers, SgdOptimizer& opt) {
  for (auto& [name, v] : opt.velocity()) (*buffers)["sgd.v." + name] = v;
}

void restore_sgd_state(const std::map<std::string, Tensor>& buffers, SgdOptimizer* opt) {
  for (const auto& [key, t] : buffers) {
    if (key.rfind("sgd.v.", 0) == 0) opt->velocity()[key.substr(6)] = t;
  }
}

struct StepLog {
  std::ofstream stream;
  explicit StepLog(const std::string& path, bool append)
      : stream(path, append ? std::ios::app : std::ios::trunc) {
    if (!stream) throw std::runtime_error("cannot open log " + path);
  }
  void write(const nlohmann::json& rec) { stream << rec.dump() << "\n"; }
};

void write_loss_outputs(const std::string& out_dir, const std::vector<std::string>& names,
                        const std::vector<std::vector<double>>& rows) {
  write_csv_numeric(out_dir + "/losses.csv", names, rows);
  std::vector<ChartSeries> series;
  for (size_t c = 1; c < names.size(); ++c) {
    ChartSeries s;
    s.name = names[c];
    for (const auto& r : rows) {
      s.x.push_back(r[0]);
      s.y.push_back(r[c]);
    }
    series.push_back(std::move(s));
  }
  render_line_chart(out_dir + "/losses.ppm", "TRAINING LOSS", series);
}

int label_index(const std::vector<int>& classes, int label) {
  auto it = std::find(classes.begin(), classes.end(), label);
  if (it == classes.end()) throw std::logic_error("label not in train classes");
  return static_cast<int>(it - classes.begin());
}

}  // namespace

TrainSummary train_fewshot(const std::string& data_root, const Config& cfg,
                           const std::string& out_dir) {
  fs::create_directories(out_dir);
  DatasetSplit split = load_finegrained(data_root);
  const uint64_t seed = cfg_get<uint64_t>(cfg, "seed", 0);
  const int n_train = static_cast<int>(split.train_classes.size());
  FewshotConfig fc = fewshot_config_from(cfg, n_train, seed);

  int steps = cfg_get<int>(cfg, "train.steps", 0);
  const int batch = cfg_get<int>(cfg, "train.batch", 8);
  const int neg_ratio = cfg_get<int>(cfg, "train.neg_ratio", 3);
  const double lr = cfg_get<double>(cfg, "train.lr", 1e-3);
  const int log_every = std::max(1, cfg_get<int>(cfg, "train.log_every", 25));
  const int ckpt_every = cfg_get<int>(cfg, "train.checkpoint_every", 0);
  const bool augment = cfg_get<bool>(cfg, "train.augment", true);
  const std::string resume = cfg_get<std::string>(cfg, "train.resume", "");
  if (steps <= 0) {
    int64_t total = 0;
    for (const auto& cls : split.train) total += static_cast<int64_t>(cls.size());
    const int epochs = cfg_get<int>(cfg, "train.epochs", 2);
    steps = static_cast<int>(epochs * ((total + batch - 1) / batch));
  }

  Config resolved = cfg;
  cfg_set(resolved, "seed", seed);
  cfg_set(resolved, "data_root", data_root);
  cfg_set(resolved, "model.resolved", fewshot_config_json(fc));
  cfg_set(resolved, "train.steps", steps);
  cfg_set(resolved, "train.batch", batch);
  cfg_set(resolved, "train.neg_ratio", neg_ratio);
  cfg_set(resolved, "train.lr", lr);
  save_config(out_dir + "/config.json", resolved);

  FewshotModel model = FewshotModel::create(fc);
  AdamOptimizer opt(lr);
  int start_step = 0;
  if (!resume.empty()) {
    std::map<std::string, Tensor> buffers;
    CheckpointMeta meta = load_checkpoint(resume, &model.params(), &buffers);
    CheckpointMeta expect;
    expect.kind = "fewshot";
    expect.arch = fc.arch;
    expect.embed_dim = BackboneConfig::by_name(fc.arch).out_channels();
    expect.qsse = fc.qsse;
    expect.qrpn = false;
    expect.qsimnet = fc.qsimnet;
    require_compatible(meta, expect);
    model.set_buffers(buffers);
    restore_adam_state(buffers, &opt);
    start_step = static_cast<int>(meta.step);
  }

  ImageCache cache;
  RandomSource root(derive_seed(seed, 0x7A17));
  StepLog log(out_dir + "/train_log.jsonl", start_step > 0);
  std::vector<std::vector<double>> loss_rows;

  auto save = [&](int step_count) {
    CheckpointMeta meta;
    meta.kind = "fewshot";
    meta.arch = fc.arch;
    meta.embed_dim = BackboneConfig::by_name(fc.arch).out_channels();
    meta.qsse = fc.qsse;
    meta.qrpn = false;
    meta.qsimnet = fc.qsimnet;
    meta.step = step_count;
    meta.extra["fewshot"] = fewshot_config_json(fc);
    std::map<std::string, Tensor> buffers = model.buffers();
    merge_adam_state(&buffers, opt);
    save_checkpoint(out_dir + "/model.ckpt", meta, model.params(), buffers);
  };

  TrainSummary summary;
  double window_sum = 0.0;
  int window_n = 0;
  bool first_window_done = false;
  const int s_img = fc.image_size;
  for (int s = start_step; s < steps; ++s) {
    RandomSource rng = root.child(static_cast<uint64_t>(s) + 1);
    std::vector<TrainPair> pairs = make_train_pairs(split, batch, neg_ratio, rng);

    FewshotModel::Batch b;
    b.imgs_q = Tensor({batch, 3, s_img, s_img});
    b.imgs_g = Tensor({batch, 3, s_img, s_img});
    b.rot_q = Tensor({batch, 3, s_img, s_img});
    b.rot_g = Tensor({batch, 3, s_img, s_img});
    const int64_t per = 3LL * s_img * s_img;
    for (int i = 0; i < batch; ++i) {
      const TrainPair& pr = pairs[static_cast<size_t>(i)];
      Tensor iq = cache.get(pr.query.path);
      Tensor ig = cache.get(pr.gallery.path);
      if (augment) {
        iq = augment_classification(iq, rng);
        ig = augment_classification(ig, rng);
      }
      const int kq = static_cast<int>(rng.randint(0, 3));
      const int kg = static_cast<int>(rng.randint(0, 3));
      Tensor rq = rot90(iq, kq);
      Tensor rg = rot90(ig, kg);
      for (int64_t j = 0; j < per; ++j) {
        b.imgs_q[i * per + j] = iq[j];
        b.imgs_g[i * per + j] = ig[j];
        b.rot_q[i * per + j] = rq[j];
        b.rot_g[i * per + j] = rg[j];
      }
      b.labels_q.push_back(label_index(split.train_classes, pr.query.label));
      b.labels_g.push_back(label_index(split.train_classes, pr.gallery.label));
      b.same.push_back(pr.same_class);
      b.rot_labels_q.push_back(kq);
      b.rot_labels_g.push_back(kg);
    }

    auto losses = model.train_step(b, opt);
    window_sum += losses.total;
    ++window_n;
    if ((s + 1) % log_every == 0 || s + 1 == steps) {
      log.write({{"step", s + 1},
                 {"total", losses.total},
                 {"oim", losses.oim},
                 {"sim", losses.sim},
                 {"rot", losses.rot},
                 {"lr", opt.lr()}});
      loss_rows.push_back({static_cast<double>(s + 1), losses.total, losses.oim, losses.sim,
                           losses.rot});
      if (!first_window_done) {
        summary.first_loss = window_sum / window_n;
        first_window_done = true;
      }
      summary.last_loss = window_sum / window_n;
      window_sum = 0.0;
      window_n = 0;
    }
    if (ckpt_every > 0 && (s + 1) % ckpt_every == 0) save(s + 1);
  }
  save(steps);
  write_loss_outputs(out_dir, {"step", "total", "oim", "sim", "rot"}, loss_rows);

  summary.checkpoint_path = out_dir + "/model.ckpt";
  summary.steps = steps;
  return summary;
}

FewshotModel load_fewshot_checkpoint(const std::string& path) {
  CheckpointMeta meta = peek_checkpoint(path);
  if (meta.kind != "fewshot") {
    throw std::runtime_error("checkpoint kind is '" + meta.kind + "', expected 'fewshot'");
  }
  FewshotModel model = FewshotModel::create(fewshot_config_from_meta(meta.extra.at("fewshot")));
  std::map<std::string, Tensor> buffers;
  load_checkpoint(path, &model.params(), &buffers);
  model.set_buffers(buffers);
  return model;
}

std::vector<FewshotEvalSummary> eval_fewshot(const std::string& data_root,
                                             const std::string& ckpt_path, const Config& cfg,
                                             const std::string& out_dir) {
  fs::create_directories(out_dir);
  DatasetSplit split = load_finegrained(data_root);
  FewshotModel model = load_fewshot_checkpoint(ckpt_path);
  const bool use_qsse = cfg_get<bool>(cfg, "eval.use_qsse", true);
  const bool use_simnet = cfg_get<bool>(cfg, "eval.use_qsimnet", true);
  model.set_eval_overrides(use_qsse, use_simnet);

  const uint64_t seed = cfg_get<uint64_t>(cfg, "seed", 0);
  const int episodes = cfg_get<int>(cfg, "eval.episodes", 600);
  const int way = cfg_get<int>(cfg, "eval.way", 5);
  const int gallery_l = cfg_get<int>(cfg, "eval.gallery_per_class", 2);
  std::vector<int> shots = cfg_get<std::vector<int>>(cfg, "eval.shots", {1, 5});

  ImageCache cache;
  std::vector<FewshotEvalSummary> out;
  nlohmann::json report = nlohmann::json::array();
  for (int shot : shots) {
    PairScorer scorer = [&](const ItemRef& gallery_item, const std::vector<ItemRef>& queries,
                            const std::vector<int>& classes, int k) {
      std::vector<Tensor> sup;
      sup.reserve(queries.size());
      for (const ItemRef& q : queries) sup.push_back(cache.get(q.path));
      return model.score_classes(cache.get(gallery_item.path), sup,
                                 static_cast<int>(classes.size()), k);
    };
    RandomSource rng(derive_seed(seed, 0xE7A1 + static_cast<uint64_t>(shot)));

    // evaluate_protocol drives sampling; rerun per episode here to also
    // export the raw score matrices.
    std::vector<double> per_episode;
    std::vector<std::vector<std::string>> score_rows;
    for (int e = 0; e < episodes; ++e) {
      RandomSource erng = rng.child(static_cast<uint64_t>(e) + 1);
      Episode ep = sample_episode(split, way, shot, gallery_l, erng);
      EpisodeResult res = classify_episode(scorer, ep);
      per_episode.push_back(res.accuracy);
      for (size_t gi = 0; gi < ep.gallery.size(); ++gi) {
        std::vector<std::string> row = {std::to_string(e), std::to_string(gi),
                                        std::to_string(static_cast<int>(gi) / ep.l),
                                        std::to_string(res.predicted[gi])};
        for (double v : res.scores[gi]) row.push_back(format_double(v));
        score_rows.push_back(std::move(row));
      }
    }
    double mean = 0.0;
    for (double a : per_episode) mean += a;
    mean /= episodes;
    double var = 0.0;
    for (double a : per_episode) var += (a - mean) * (a - mean);
    const double ci = episodes > 1 ? 1.96 * std::sqrt(var / (episodes - 1) / episodes) : 0.0;

    std::vector<std::string> header = {"episode", "item", "truth", "predicted"};
    for (int c = 0; c < way; ++c) header.push_back("score_" + std::to_string(c));
    write_csv(out_dir + "/scores_k" + std::to_string(shot) + ".csv", header, score_rows);

    FewshotEvalSummary s;
    s.way = way;
    s.shot = shot;
    s.episodes = episodes;
    s.mean_accuracy = mean;
    s.ci95 = ci;
    out.push_back(s);
    report.push_back({{"way", way},
                      {"shot", shot},
                      {"episodes", episodes},
                      {"mean_accuracy", mean},
                      {"ci95", ci}});
  }
  nlohmann::json top = {{"results", report},
                        {"checkpoint", ckpt_path},
                        {"seed", seed},
                        {"use_qsse", use_qsse},
                        {"use_qsimnet", use_simnet}};
  save_config(out_dir + "/eval_fewshot.json", top);
  return out;
}

TrainSummary train_search(const std::string& data_root, const Config& cfg,
                          const std::string& out_dir) {
  fs::create_directories(out_dir);
  SearchDataset ds = load_search_dataset(data_root);
  const uint64_t seed = cfg_get<uint64_t>(cfg, "seed", 0);
  int num_identities = 0;
  for (const SearchScene& sc : ds.scenes)
    for (const PersonInstance& pi : sc.persons)
      num_identities = std::max(num_identities, pi.identity + 1);
  DetectorConfig dc = detector_config_from(cfg, num_identities, seed);

  const int steps = cfg_get<int>(cfg, "train.steps", 400);
  const double lr = cfg_get<double>(cfg, "train.lr", 1e-3);
  const double warmup_frac = cfg_get<double>(cfg, "train.warmup_frac", 0.5);
  const double lr_drop_frac = cfg_get<double>(cfg, "train.lr_drop_frac", 0.5);
  const int log_every = std::max(1, cfg_get<int>(cfg, "train.log_every", 20));
  const int ckpt_every = cfg_get<int>(cfg, "train.checkpoint_every", 0);
  const bool augment = cfg_get<bool>(cfg, "train.augment", true);
  const bool joint_flip = cfg_get<bool>(cfg, "train.joint_flip", true);
  const int short_side = cfg_get<int>(cfg, "train.short_side", 600);
  const std::string resume = cfg_get<std::string>(cfg, "train.resume", "");

  Config resolved = cfg;
  cfg_set(resolved, "seed", seed);
  cfg_set(resolved, "data_root", data_root);
  cfg_set(resolved, "model.resolved", detector_config_json(dc));
  cfg_set(resolved, "train.steps", steps);
  cfg_set(resolved, "train.lr", lr);
  cfg_set(resolved, "train.short_side", short_side);
  save_config(out_dir + "/config.json", resolved);

  SearchDetector model = SearchDetector::create(dc);
  SgdOptimizer opt(lr);
  int start_step = 0;
  if (!resume.empty()) {
    std::map<std::string, Tensor> buffers;
    CheckpointMeta meta = load_checkpoint(resume, &model.params(), &buffers);
    CheckpointMeta expect;
    expect.kind = "search";
    expect.arch = dc.arch;
    expect.embed_dim = dc.embed_dim;
    expect.qsse = dc.qsse;
    expect.qrpn = dc.qrpn;
    expect.qsimnet = dc.qsimnet;
    require_compatible(meta, expect);
    model.set_buffers(buffers);
    restore_sgd_state(buffers, &opt);
    start_step = static_cast<int>(meta.step);
  }

  // identity -> (scene index, person index) appearances
  std::vector<std::vector<std::pair<int, int>>> appearances(
      static_cast<size_t>(num_identities));
  for (size_t si = 0; si < ds.scenes.size(); ++si) {
    const SearchScene& sc = ds.scenes[si];
    for (size_t pi = 0; pi < sc.persons.size(); ++pi) {
      const int id = sc.persons[pi].identity;
      if (id >= 0)
        appearances[static_cast<size_t>(id)].push_back(
            {static_cast<int>(si), static_cast<int>(pi)});
    }
  }
  std::vector<int> eligible;
  for (int id = 0; id < num_identities; ++id)
    if (appearances[static_cast<size_t>(id)].size() >= 2) eligible.push_back(id);
  if (eligible.empty()) throw std::runtime_error("train_search: no identity appears twice");

  ImageCache cache;
  RandomSource root(derive_seed(seed, 0x5EA7));
  StepLog log(out_dir + "/train_log.jsonl", start_step > 0);
  std::vector<std::vector<double>> loss_rows;

  auto save = [&](int step_count) {
    CheckpointMeta meta;
    meta.kind = "search";
    meta.arch = dc.arch;
    meta.embed_dim = dc.embed_dim;
    meta.qsse = dc.qsse;
    meta.qrpn = dc.qrpn;
    meta.qsimnet = dc.qsimnet;
    meta.step = step_count;
    meta.extra["search"] = detector_config_json(dc);
    std::map<std::string, Tensor> buffers = model.buffers();
    merge_sgd_state(&buffers, opt);
    save_checkpoint(out_dir + "/model.ckpt", meta, model.params(), buffers);
  };

  TrainSummary summary;
  double window_sum = 0.0;
  int window_n = 0;
  bool first_window_done = false;
  for (int s = start_step; s < steps; ++s) {
    RandomSource rng = root.child(static_cast<uint64_t>(s) + 1);
    const int id = eligible[static_cast<size_t>(rng.randint(
        0, static_cast<int>(eligible.size()) - 1))];
    const auto& apps = appearances[static_cast<size_t>(id)];
    std::vector<int> two =
        rng.sample_without_replacement(static_cast<int>(apps.size()), 2);
    const auto [qs, qp] = apps[static_cast<size_t>(two[0])];
    const auto [gs, gp] = apps[static_cast<size_t>(two[1])];

    SearchExample ex;
    ex.query_identity = id;
    ex.query_img = cache.get(ds.scenes[static_cast<size_t>(qs)].path);
    ex.query_box = ds.scenes[static_cast<size_t>(qs)].persons[static_cast<size_t>(qp)].box;
    const SearchScene& gscene = ds.scenes[static_cast<size_t>(gs)];
    ex.gallery_img = cache.get(gscene.path);
    ex.gallery_target = gscene.persons[static_cast<size_t>(gp)].box;
    for (const PersonInstance& pi : gscene.persons) {
      ex.gallery_persons.push_back(pi.box);
      ex.gallery_identities.push_back(pi.identity);
    }

    if (augment) {
      const bool flip = rng.uniform() < 0.5;
      const bool flip_q = joint_flip ? flip : (rng.uniform() < 0.5);
      const bool flip_g = joint_flip ? flip : (rng.uniform() < 0.5);
      if (flip_q) {
        ex.query_img = hflip(ex.query_img);
        ex.query_box = mirror_box(ex.query_box, ex.query_img.dim(2));
      }
      if (flip_g) {
        ex.gallery_img = hflip(ex.gallery_img);
        const double w = ex.gallery_img.dim(2);
        ex.gallery_target = mirror_box(ex.gallery_target, w);
        for (Box& b : ex.gallery_persons) b = mirror_box(b, w);
      }
      ex.query_img = adjust_brightness(ex.query_img, rng.uniform(0.9, 1.1));
      ex.gallery_img = adjust_brightness(ex.gallery_img, rng.uniform(0.9, 1.1));
    }
    {
      double sx = 1.0, sy = 1.0;
      ex.query_img = resize_short_side(ex.query_img, short_side, &sx, &sy);
      ex.query_box = scale_box(ex.query_box, sx, sy);
      ex.gallery_img = resize_short_side(ex.gallery_img, short_side, &sx, &sy);
      ex.gallery_target = scale_box(ex.gallery_target, sx, sy);
      for (Box& b : ex.gallery_persons) b = scale_box(b, sx, sy);
    }

    const bool query_terms = s >= static_cast<int>(warmup_frac * steps);
    opt.set_lr(s >= static_cast<int>(lr_drop_frac * steps) ? lr * 0.1 : lr);
    auto losses = model.train_step(ex, opt, query_terms, rng);

    window_sum += losses.total;
    ++window_n;
    if ((s + 1) % log_every == 0 || s + 1 == steps) {
      log.write({{"step", s + 1},
                 {"total", losses.total},
                 {"rpn_cls", losses.rpn_cls},
                 {"rpn_reg", losses.rpn_reg},
                 {"qrpn", losses.qrpn},
                 {"roi_cls", losses.roi_cls},
                 {"roi_reg", losses.roi_reg},
                 {"oim", losses.oim},
                 {"sim", losses.sim},
                 {"lr", opt.lr()},
                 {"query_terms", query_terms}});
      loss_rows.push_back({static_cast<double>(s + 1), losses.total, losses.rpn_cls,
                           losses.rpn_reg, losses.qrpn, losses.roi_cls, losses.roi_reg,
                           losses.oim, losses.sim});
      if (!first_window_done) {
        summary.first_loss = window_sum / window_n;
        first_window_done = true;
      }
      summary.last_loss = window_sum / window_n;
      window_sum = 0.0;
      window_n = 0;
    }
    if (ckpt_every > 0 && (s + 1) % ckpt_every == 0) save(s + 1);
  }
  save(steps);
  write_loss_outputs(
      out_dir,
      {"step", "total", "rpn_cls", "rpn_reg", "qrpn", "roi_cls", "roi_reg", "oim", "sim"},
      loss_rows);

  summary.checkpoint_path = out_dir + "/model.ckpt";
  summary.steps = steps;
  return summary;
}

SearchDetector load_search_checkpoint(const std::string& path) {
  CheckpointMeta meta = peek_checkpoint(path);
  if (meta.kind != "search") {
    throw std::runtime_error("checkpoint kind is '" + meta.kind + "', expected 'search'");
  }
  SearchDetector model =
      SearchDetector::create(detector_config_from_meta(meta.extra.at("search")));
  std::map<std::string, Tensor> buffers;
  load_checkpoint(path, &model.params(), &buffers);
  model.set_buffers(buffers);
  return model;
}

SearchEvalSummary eval_search(const std::string& data_root, const std::string& ckpt_path,
                              const Config& cfg, const std::string& out_dir) {
  fs::create_directories(out_dir);
  SearchDataset ds = load_search_dataset(data_root);
  SearchDetector model = load_search_checkpoint(ckpt_path);
  const bool use_qsse = cfg_get<bool>(cfg, "eval.use_qsse", true);
  const bool use_qrpn = cfg_get<bool>(cfg, "eval.use_qrpn", true);
  const bool use_simnet = cfg_get<bool>(cfg, "eval.use_qsimnet", true);
  model.set_eval_overrides(use_qsse, use_qrpn, use_simnet);
  const std::string fusion = cfg_get<std::string>(cfg, "eval.fusion", "");
  if (!fusion.empty()) {
    model.set_fusion(fusion == "probability" ? ScoreFusion::kProbability : ScoreFusion::kLogit);
  }

  const int max_queries =
      cfg_get<int>(cfg, "eval.max_queries", static_cast<int>(ds.queries.size()));
  const int nq = std::min<int>(max_queries, static_cast<int>(ds.queries.size()));
  const bool proposal_study =
      cfg_get<bool>(cfg, "eval.proposal_study", true) && model.config().qrpn && use_qrpn;
  std::vector<int> ns = cfg_get<std::vector<int>>(cfg, "eval.proposal_ns", {10, 50, 100});

  ImageCache cache;
  std::vector<std::vector<RankedDetection>> dets_per_query(static_cast<size_t>(nq));
  std::vector<std::vector<QueryTruth>> truths_per_query(static_cast<size_t>(nq));
  std::vector<std::vector<RankedDetection>> plain_units, guided_units;
  std::vector<Box> unit_targets;
  std::vector<std::vector<std::string>> det_rows, truth_rows;

  const int max_n = ns.empty() ? 100 : *std::max_element(ns.begin(), ns.end());
  for (int qi = 0; qi < nq; ++qi) {
    const SearchQuery& q = ds.queries[static_cast<size_t>(qi)];
    const SearchScene& qscene = ds.scenes[static_cast<size_t>(q.scene)];
    const Tensor& qimg = cache.get(qscene.path);
    const Box qbox = qscene.persons[static_cast<size_t>(q.person)].box;

    for (int g : q.gallery) {
      const SearchScene& gscene = ds.scenes[static_cast<size_t>(g)];
      const Tensor& gimg = cache.get(gscene.path);
      const Box* target = nullptr;
      for (const PersonInstance& pi : gscene.persons) {
        if (pi.identity == q.identity) {
          truths_per_query[static_cast<size_t>(qi)].push_back({g, pi.box});
          target = &pi.box;
        }
      }
      auto dets = model.search_pair(qimg, qbox, gimg);
      for (const Detection& d : dets)
        dets_per_query[static_cast<size_t>(qi)].push_back({g, d.box, d.sim});

      if (proposal_study && target != nullptr) {
        auto plain = model.propose(qimg, qbox, gimg, false, max_n);
        auto guided = model.propose(qimg, qbox, gimg, true, max_n);
        std::vector<RankedDetection> pu, gu;
        for (size_t i = 0; i < plain.boxes.size(); ++i)
          pu.push_back({g, plain.boxes[i], plain.scores[i]});
        for (size_t i = 0; i < guided.boxes.size(); ++i)
          gu.push_back({g, guided.boxes[i], guided.scores[i]});
        plain_units.push_back(std::move(pu));
        guided_units.push_back(std::move(gu));
        unit_targets.push_back(*target);
      }
    }

    auto& dets = dets_per_query[static_cast<size_t>(qi)];
    std::stable_sort(dets.begin(), dets.end(),
                     [](const RankedDetection& a, const RankedDetection& b) {
                       return a.score > b.score;
                     });
    std::vector<int> hits =
        match_ranked_detections(dets, truths_per_query[static_cast<size_t>(qi)]);
    for (size_t i = 0; i < dets.size(); ++i) {
      det_rows.push_back({std::to_string(qi), std::to_string(dets[i].scene),
                          format_double(dets[i].box.x1), format_double(dets[i].box.y1),
                          format_double(dets[i].box.x2), format_double(dets[i].box.y2),
                          format_double(dets[i].score), std::to_string(hits[i])});
    }
    for (const QueryTruth& t : truths_per_query[static_cast<size_t>(qi)]) {
      truth_rows.push_back({std::to_string(qi), std::to_string(t.scene),
                            format_double(t.box.x1), format_double(t.box.y1),
                            format_double(t.box.x2), format_double(t.box.y2)});
    }
  }

  SearchEvalSummary s;
  s.queries = nq;
  s.map = mean_ap(dets_per_query, truths_per_query, 0.5, &s.excluded);
  std::vector<std::vector<int>> hits_per_query;
  for (int qi = 0; qi < nq; ++qi) {
    hits_per_query.push_back(match_ranked_detections(dets_per_query[static_cast<size_t>(qi)],
                                                     truths_per_query[static_cast<size_t>(qi)]));
  }
  s.top1 = cmc_topk(hits_per_query, 1);
  s.top5 = cmc_topk(hits_per_query, 5);

  write_csv(out_dir + "/detections.csv",
            {"query", "scene", "x1", "y1", "x2", "y2", "score", "hit"}, det_rows);
  write_csv(out_dir + "/truths.csv", {"query", "scene", "x1", "y1", "x2", "y2"}, truth_rows);

  nlohmann::json metrics = {{"queries", nq},          {"excluded", s.excluded},
                            {"map", s.map},           {"top1", s.top1},
                            {"top5", s.top5},         {"checkpoint", ckpt_path},
                            {"use_qsse", use_qsse},   {"use_qrpn", use_qrpn},
                            {"use_qsimnet", use_simnet}};
  if (proposal_study && !plain_units.empty()) {
    s.n_values = ns;
    s.rpn_hits = mean_query_specific_counts(plain_units, unit_targets, ns);
    s.fused_hits = mean_query_specific_counts(guided_units, unit_targets, ns);
    std::vector<std::vector<double>> rows;
    for (size_t i = 0; i < ns.size(); ++i)
      rows.push_back({static_cast<double>(ns[i]), s.rpn_hits[i], s.fused_hits[i]});
    write_csv_numeric(out_dir + "/proposals.csv", {"n", "rpn", "rpn_qrpn"}, rows);
    ChartSeries a{"RPN", {}, {}}, b{"RPN+QRPN", {}, {}};
    for (size_t i = 0; i < ns.size(); ++i) {
      a.x.push_back(ns[i]);
      a.y.push_back(s.rpn_hits[i]);
      b.x.push_back(ns[i]);
      b.y.push_back(s.fused_hits[i]);
    }
    render_line_chart(out_dir + "/proposals.ppm", "QUERY-SPECIFIC PROPOSALS IN TOP N", {a, b});
    metrics["proposal_ns"] = ns;
    metrics["rpn_hits"] = s.rpn_hits;
    metrics["rpn_qrpn_hits"] = s.fused_hits;
  }
  save_config(out_dir + "/metrics.json", metrics);
  return s;
}

}  // namespace qgn
