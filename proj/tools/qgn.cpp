// Command-line front end: dataset generation, training, evaluation, and
// report cross-checking for the query-guided network library.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "qgn/checkpoint.hpp"
#include "qgn/config.hpp"
#include "qgn/datasets.hpp"
#include "qgn/metrics.hpp"
#include "qgn/report.hpp"
#include "qgn/trainer.hpp"

namespace fs = std::filesystem;
using qgn::Config;

namespace {

Config load_or_empty(const std::string& path) {
  if (path.empty()) return Config::object();
  return qgn::load_config(path);
}

std::vector<std::vector<std::string>> read_csv(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("cannot open " + path);
  std::vector<std::vector<std::string>> rows;
  std::string line;
  while (std::getline(f, line)) {
    if (line.empty()) continue;
    std::vector<std::string> row;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) row.push_back(cell);
    rows.push_back(std::move(row));
  }
  if (rows.empty()) throw std::runtime_error(path + " is empty");
  return rows;
}

int run_gen_data(const Config& cfg, const std::string& out) {
  const std::string kind = qgn::cfg_get<std::string>(cfg, "data.kind", "finegrained");
  qgn::save_config(out + "/config.json", cfg);
  if (kind == "finegrained") {
    qgn::SyntheticFinegrainedSpec spec;
    spec.num_classes = qgn::cfg_get<int>(cfg, "data.num_classes", spec.num_classes);
    spec.images_per_class =
        qgn::cfg_get<int>(cfg, "data.images_per_class", spec.images_per_class);
    spec.image_size = qgn::cfg_get<int>(cfg, "data.image_size", spec.image_size);
    spec.train_frac = qgn::cfg_get<double>(cfg, "data.train_frac", spec.train_frac);
    spec.val_frac = qgn::cfg_get<double>(cfg, "data.val_frac", spec.val_frac);
    spec.seed = qgn::cfg_get<uint64_t>(cfg, "seed", 0);
    qgn::DatasetSplit split = qgn::gen_finegrained(spec, out);
    std::printf("finegrained dataset at %s\n", out.c_str());
    std::printf("  classes: %d (train %zu, val %zu, test %zu)\n", spec.num_classes,
                split.train_classes.size(), split.val_classes.size(),
                split.test_classes.size());
    std::printf("  images: %d\n", spec.num_classes * spec.images_per_class);
    return 0;
  }
  if (kind == "search") {
    qgn::SearchSceneSpec spec;
    spec.num_identities = qgn::cfg_get<int>(cfg, "data.num_identities", spec.num_identities);
    spec.appearances_per_identity = qgn::cfg_get<int>(cfg, "data.appearances_per_identity",
                                                      spec.appearances_per_identity);
    spec.num_scenes = qgn::cfg_get<int>(cfg, "data.num_scenes", spec.num_scenes);
    spec.image_w = qgn::cfg_get<int>(cfg, "data.image_w", spec.image_w);
    spec.image_h = qgn::cfg_get<int>(cfg, "data.image_h", spec.image_h);
    spec.max_extra_distractors = qgn::cfg_get<int>(cfg, "data.max_extra_distractors",
                                                   spec.max_extra_distractors);
    spec.hue_share_prob = qgn::cfg_get<double>(cfg, "data.hue_share_prob", spec.hue_share_prob);
    spec.gallery_size = qgn::cfg_get<int>(cfg, "data.gallery_size", spec.gallery_size);
    spec.seed = qgn::cfg_get<uint64_t>(cfg, "seed", 0);
    qgn::SearchDataset ds = qgn::gen_search_scenes(spec, out);
    int labeled = 0, distractors = 0;
    for (const auto& sc : ds.scenes)
      for (const auto& p : sc.persons) (p.identity >= 0 ? labeled : distractors)++;
    std::printf("search dataset at %s\n", out.c_str());
    std::printf("  scenes: %zu, identities: %d, queries: %zu\n", ds.scenes.size(),
                spec.num_identities, ds.queries.size());
    std::printf("  labeled persons: %d, distractors: %d\n", labeled, distractors);
    return 0;
  }
  throw std::runtime_error("data.kind must be finegrained or search, got " + kind);
}

int run_train(bool fewshot, const Config& cfg, const std::string& data,
              const std::string& out) {
  qgn::TrainSummary s = fewshot ? qgn::train_fewshot(data, cfg, out)
                                : qgn::train_search(data, cfg, out);
  std::printf("trained %d steps -> %s\n", s.steps, s.checkpoint_path.c_str());
  std::printf("  mean total loss: first window %.4f, last window %.4f\n", s.first_loss,
              s.last_loss);
  return 0;
}

int run_eval(const Config& cfg, const std::string& data, const std::string& ckpt,
             const std::string& out) {
  qgn::save_config(out + "/config.json", cfg);
  const qgn::CheckpointMeta meta = qgn::peek_checkpoint(ckpt);
  if (meta.kind == "fewshot") {
    auto results = qgn::eval_fewshot(data, ckpt, cfg, out);
    for (const auto& r : results) {
      std::printf("%d-way %d-shot: %.4f +- %.4f (%d episodes)\n", r.way, r.shot,
                  r.mean_accuracy, r.ci95, r.episodes);
    }
    return 0;
  }
  if (meta.kind == "search") {
    qgn::SearchEvalSummary r = qgn::eval_search(data, ckpt, cfg, out);
    std::printf("mAP %.4f, top-1 %.4f, top-5 %.4f (%d queries, %d excluded)\n", r.map, r.top1,
                r.top5, r.queries, r.excluded);
    for (size_t i = 0; i < r.n_values.size(); ++i) {
      std::printf("  top-%d query-specific proposals: %.3f plain, %.3f query-guided\n",
                  r.n_values[i], r.rpn_hits[i], r.fused_hits[i]);
    }
    return 0;
  }
  throw std::runtime_error("checkpoint kind '" + meta.kind + "' is not evaluable");
}

// --- report: recompute metrics from exported artifacts and cross-check ---

constexpr double kReportTol = 1e-9;

bool close_enough(double a, double b) { return std::fabs(a - b) <= kReportTol; }

int recheck_fewshot_scores(const std::string& from, nlohmann::json* report) {
  int mismatches = 0;
  Config stored = qgn::load_config(from + "/eval_fewshot.json");
  for (const auto& entry : fs::directory_iterator(from)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind("scores_k", 0) != 0 || entry.path().extension() != ".csv") continue;
    const int shot = std::stoi(name.substr(8));
    auto rows = read_csv(entry.path().string());
    const size_t ncol = rows[0].size();

    std::map<int, std::pair<int, int>> per_episode;  // episode -> (correct, total)
    int pred_mismatch = 0;
    for (size_t i = 1; i < rows.size(); ++i) {
      const auto& r = rows[i];
      const int episode = std::stoi(r[0]);
      const int truth = std::stoi(r[2]);
      int best = 0;
      double best_v = std::stod(r[4]);
      for (size_t c = 5; c < ncol; ++c) {
        const double v = std::stod(r[c]);
        if (v > best_v) {
          best_v = v;
          best = static_cast<int>(c - 4);
        }
      }
      if (best != std::stoi(r[3])) ++pred_mismatch;
      auto& [correct, total] = per_episode[episode];
      correct += (best == truth) ? 1 : 0;
      ++total;
    }
    std::vector<double> acc;
    for (const auto& [ep, ct] : per_episode)
      acc.push_back(static_cast<double>(ct.first) / ct.second);
    double mean = 0.0;
    for (double a : acc) mean += a;
    mean /= static_cast<double>(acc.size());
    double var = 0.0;
    for (double a : acc) var += (a - mean) * (a - mean);
    const double n = static_cast<double>(acc.size());
    const double ci = acc.size() > 1 ? 1.96 * std::sqrt(var / (n - 1) / n) : 0.0;

    double stored_mean = -1.0, stored_ci = -1.0;
    for (const auto& res : stored.at("results")) {
      if (res.at("shot").get<int>() == shot) {
        stored_mean = res.at("mean_accuracy").get<double>();
        stored_ci = res.at("ci95").get<double>();
      }
    }
    const bool ok =
        pred_mismatch == 0 && close_enough(mean, stored_mean) && close_enough(ci, stored_ci);
    mismatches += ok ? 0 : 1;
    std::printf("fewshot %d-shot: stored %.6f +- %.6f, recomputed %.6f +- %.6f  [%s]\n", shot,
                stored_mean, stored_ci, mean, ci, ok ? "OK" : "MISMATCH");
    (*report)["fewshot"].push_back({{"shot", shot},
                                    {"stored_mean", stored_mean},
                                    {"recomputed_mean", mean},
                                    {"stored_ci95", stored_ci},
                                    {"recomputed_ci95", ci},
                                    {"prediction_mismatches", pred_mismatch},
                                    {"ok", ok}});
  }
  return mismatches;
}

int recheck_search_metrics(const std::string& from, nlohmann::json* report) {
  Config stored = qgn::load_config(from + "/metrics.json");
  auto drows = read_csv(from + "/detections.csv");
  auto trows = read_csv(from + "/truths.csv");

  std::map<int, std::vector<qgn::RankedDetection>> dets;
  std::map<int, std::vector<int>> stored_hits;
  for (size_t i = 1; i < drows.size(); ++i) {
    const auto& r = drows[i];
    const int q = std::stoi(r[0]);
    dets[q].push_back({std::stoi(r[1]),
                       qgn::Box{std::stod(r[2]), std::stod(r[3]), std::stod(r[4]),
                                std::stod(r[5])},
                       std::stod(r[6])});
    stored_hits[q].push_back(std::stoi(r[7]));
  }
  std::map<int, std::vector<qgn::QueryTruth>> truths;
  for (size_t i = 1; i < trows.size(); ++i) {
    const auto& r = trows[i];
    truths[std::stoi(r[0])].push_back(
        {std::stoi(r[1]),
         qgn::Box{std::stod(r[2]), std::stod(r[3]), std::stod(r[4]), std::stod(r[5])}});
  }
  const int nq = stored.at("queries").get<int>();
  std::vector<std::vector<qgn::RankedDetection>> dets_v(static_cast<size_t>(nq));
  std::vector<std::vector<qgn::QueryTruth>> truths_v(static_cast<size_t>(nq));
  for (auto& [q, v] : dets) dets_v[static_cast<size_t>(q)] = std::move(v);
  for (auto& [q, v] : truths) truths_v[static_cast<size_t>(q)] = std::move(v);

  int hit_mismatch = 0;
  std::vector<std::vector<int>> hits(static_cast<size_t>(nq));
  for (int q = 0; q < nq; ++q) {
    hits[static_cast<size_t>(q)] =
        qgn::match_ranked_detections(dets_v[static_cast<size_t>(q)],
                                     truths_v[static_cast<size_t>(q)]);
    if (hits[static_cast<size_t>(q)] != stored_hits[q]) ++hit_mismatch;
  }
  int excluded = 0;
  const double map = qgn::mean_ap(dets_v, truths_v, 0.5, &excluded);
  const double top1 = qgn::cmc_topk(hits, 1);
  const double top5 = qgn::cmc_topk(hits, 5);

  const double s_map = stored.at("map").get<double>();
  const double s_top1 = stored.at("top1").get<double>();
  const double s_top5 = stored.at("top5").get<double>();
  const bool ok = hit_mismatch == 0 && close_enough(map, s_map) &&
                  close_enough(top1, s_top1) && close_enough(top5, s_top5);
  std::printf("search: stored mAP %.6f top1 %.6f top5 %.6f\n", s_map, s_top1, s_top5);
  std::printf("    recomputed mAP %.6f top1 %.6f top5 %.6f  [%s]\n", map, top1, top5,
              ok ? "OK" : "MISMATCH");
  (*report)["search"] = {{"stored_map", s_map},       {"recomputed_map", map},
                         {"stored_top1", s_top1},     {"recomputed_top1", top1},
                         {"stored_top5", s_top5},     {"recomputed_top5", top5},
                         {"hit_mismatches", hit_mismatch}, {"ok", ok}};
  return ok ? 0 : 1;
}

// Rebuilds a line chart from a numeric CSV (x = first column).
void rerender_chart(const std::string& csv, const std::string& ppm, const std::string& title) {
  auto rows = read_csv(csv);
  std::vector<qgn::ChartSeries> series(rows[0].size() - 1);
  for (size_t c = 1; c < rows[0].size(); ++c) series[c - 1].name = rows[0][c];
  for (size_t i = 1; i < rows.size(); ++i) {
    const double x = std::stod(rows[i][0]);
    for (size_t c = 1; c < rows[i].size(); ++c) {
      series[c - 1].x.push_back(x);
      series[c - 1].y.push_back(std::stod(rows[i][c]));
    }
  }
  qgn::render_line_chart(ppm, title, series);
  std::printf("rendered %s\n", ppm.c_str());
}

int run_report(const std::string& from, const std::string& out) {
  fs::create_directories(out);
  nlohmann::json report;
  report["from"] = from;
  int mismatches = 0;
  bool found = false;
  if (fs::exists(from + "/eval_fewshot.json")) {
    mismatches += recheck_fewshot_scores(from, &report);
    found = true;
  }
  if (fs::exists(from + "/metrics.json") && fs::exists(from + "/detections.csv")) {
    mismatches += recheck_search_metrics(from, &report);
    found = true;
  }
  if (fs::exists(from + "/proposals.csv")) {
    rerender_chart(from + "/proposals.csv", out + "/proposals.ppm",
                   "QUERY-SPECIFIC PROPOSALS IN TOP N");
    found = true;
  }
  if (fs::exists(from + "/losses.csv")) {
    rerender_chart(from + "/losses.csv", out + "/losses.ppm", "TRAINING LOSS");
    found = true;
  }
  if (!found) throw std::runtime_error("nothing to report on under " + from);
  report["mismatches"] = mismatches;
  qgn::save_config(out + "/report.json", report);
  if (mismatches > 0) {
    std::fprintf(stderr, "report: %d metric(s) failed the cross-check\n", mismatches);
    return 1;
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"query-guided few-shot recognition and person search"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_dir, ckpt_path, resume_path, from_dir;
  long long seed = 0;
  int steps = 0, short_side = 0;
  std::string roi_flag, kind;
  bool no_qsse = false, no_qrpn = false, no_qsimnet = false, no_rotation = false;
  bool gcat = false;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "JSON config file");
    cmd->add_option("--seed", seed, "RNG seed (overrides config)");
    cmd->add_option("--out", out_dir, "output directory")->required();
  };

  CLI::App* gen = app.add_subcommand("gen-data", "write a synthetic dataset");
  add_common(gen);
  gen->add_option("--kind", kind, "finegrained or search (overrides config)");

  CLI::App* trf = app.add_subcommand("train-fewshot", "train the episodic recognizer");
  add_common(trf);
  trf->add_option("--data", data_dir, "dataset root")->required();
  trf->add_option("--steps", steps, "optimizer steps (overrides config)");
  trf->add_option("--resume", resume_path, "checkpoint to continue from");
  trf->add_flag("--no-qsse", no_qsse, "disable channel re-calibration");
  trf->add_flag("--no-qsimnet", no_qsimnet, "score pairs by cosine instead");
  trf->add_flag("--no-rotation", no_rotation, "drop the self-supervised term");

  CLI::App* trs = app.add_subcommand("train-search", "train the person search detector");
  add_common(trs);
  trs->add_option("--data", data_dir, "dataset root")->required();
  trs->add_option("--steps", steps, "optimizer steps (overrides config)");
  trs->add_option("--resume", resume_path, "checkpoint to continue from");
  trs->add_option("--short-side", short_side, "resize so the short image side matches");
  trs->add_option("--roi", roi_flag, "region feature mode: pool7, pool14, align14");
  trs->add_flag("--gcat", gcat, "append a global scene descriptor to region features");
  trs->add_flag("--no-qsse", no_qsse, "disable channel re-calibration");
  trs->add_flag("--no-qrpn", no_qrpn, "disable query-guided proposals");
  trs->add_flag("--no-qsimnet", no_qsimnet, "rank matches by cosine instead");

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(ev);
  ev->add_option("--data", data_dir, "dataset root")->required();
  ev->add_option("--ckpt", ckpt_path, "checkpoint file")->required();
  ev->add_flag("--no-qsse", no_qsse, "evaluate with trunk gates clamped to 1");
  ev->add_flag("--no-qrpn", no_qrpn, "rank proposals by plain objectness");
  ev->add_flag("--no-qsimnet", no_qsimnet, "rank matches by cosine instead");

  CLI::App* rep = app.add_subcommand("report", "recompute metrics from exported artifacts");
  rep->add_option("--from", from_dir, "run directory to audit")->required();
  rep->add_option("--out", out_dir, "output directory (defaults to --from)");

  CLI11_PARSE(app, argc, argv);

  try {
    Config cfg = load_or_empty(config_path);
    auto seed_override = [&](CLI::App* cmd) {
      if (cmd->count("--seed")) qgn::cfg_set(cfg, "seed", static_cast<uint64_t>(seed));
    };

    if (gen->parsed()) {
      seed_override(gen);
      if (gen->count("--kind")) qgn::cfg_set(cfg, "data.kind", kind);
      fs::create_directories(out_dir);
      return run_gen_data(cfg, out_dir);
    }
    if (trf->parsed()) {
      seed_override(trf);
      if (trf->count("--steps")) qgn::cfg_set(cfg, "train.steps", steps);
      if (trf->count("--resume")) qgn::cfg_set(cfg, "train.resume", resume_path);
      if (no_qsse) qgn::cfg_set(cfg, "model.qsse", false);
      if (no_qsimnet) qgn::cfg_set(cfg, "model.qsimnet", false);
      if (no_rotation) qgn::cfg_set(cfg, "model.rotation", false);
      return run_train(true, cfg, data_dir, out_dir);
    }
    if (trs->parsed()) {
      seed_override(trs);
      if (trs->count("--steps")) qgn::cfg_set(cfg, "train.steps", steps);
      if (trs->count("--resume")) qgn::cfg_set(cfg, "train.resume", resume_path);
      if (trs->count("--short-side")) qgn::cfg_set(cfg, "train.short_side", short_side);
      if (trs->count("--roi")) qgn::cfg_set(cfg, "model.roi", roi_flag);
      if (gcat) qgn::cfg_set(cfg, "model.global_context", true);
      if (no_qsse) qgn::cfg_set(cfg, "model.qsse", false);
      if (no_qrpn) qgn::cfg_set(cfg, "model.qrpn", false);
      if (no_qsimnet) qgn::cfg_set(cfg, "model.qsimnet", false);
      return run_train(false, cfg, data_dir, out_dir);
    }
    if (ev->parsed()) {
      seed_override(ev);
      if (no_qsse) qgn::cfg_set(cfg, "eval.use_qsse", false);
      if (no_qrpn) qgn::cfg_set(cfg, "eval.use_qrpn", false);
      if (no_qsimnet) qgn::cfg_set(cfg, "eval.use_qsimnet", false);
      fs::create_directories(out_dir);
      return run_eval(cfg, data_dir, ckpt_path, out_dir);
    }
    if (rep->parsed()) {
      return run_report(from_dir, out_dir.empty() ? from_dir : out_dir);
    }
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
