#include "qgn/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

#include <nlohmann/json.hpp>

#include "qgn/image.hpp"
#include "qgn/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace qgn {

namespace {

void hsv_to_rgb(double h, double s, double v, double* r, double* g, double* b) {
  h -= std::floor(h);
  double c = v * s;
  double hp = h * 6.0;
  double x = c * (1.0 - std::fabs(std::fmod(hp, 2.0) - 1.0));
  double r1 = 0, g1 = 0, b1 = 0;
  switch (static_cast<int>(hp) % 6) {
    case 0: r1 = c; g1 = x; break;
    case 1: r1 = x; g1 = c; break;
    case 2: g1 = c; b1 = x; break;
    case 3: g1 = x; b1 = c; break;
    case 4: r1 = x; b1 = c; break;
    default: r1 = c; b1 = x; break;
  }
  double m = v - c;
  *r = r1 + m;
  *g = g1 + m;
  *b = b1 + m;
}

double clamp01(double v) { return std::min(1.0, std::max(0.0, v)); }

void write_text(const std::string& path, const std::string& content) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path + " for writing");
  f << content;
  if (!f) throw std::runtime_error("write failed: " + path);
}

json read_json(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw std::runtime_error("cannot open " + path);
  json j;
  f >> j;
  return j;
}

}  // namespace

// ---------------------------------------------------------------------------
// Fine-grained generator
// ---------------------------------------------------------------------------

ClassAttributes class_attributes(int class_id) {
  if (class_id < 0 || class_id >= max_finegrained_classes()) {
    throw std::invalid_argument("class_attributes: id out of range");
  }
  ClassAttributes a;
  a.shape = class_id % kShapeCount;
  class_id /= kShapeCount;
  a.hue = class_id % kHueCount;
  class_id /= kHueCount;
  a.stripe = class_id % kStripeCount;
  class_id /= kStripeCount;
  a.accent = class_id % kAccentCount;
  return a;
}

namespace {

// Point-in-shape test in the shape's unit frame (y grows downward).
bool in_shape(int shape, double x, double y) {
  switch (shape) {
    case 0: return x * x + y * y <= 1.0;
    case 1: return std::fabs(x) <= 0.85 && std::fabs(y) <= 0.85;
    case 2: {  // triangle pointing up
      if (y < -1.0 || y > 0.75) return false;
      // sides from apex (0,-1) to base corners (+-0.95, 0.75)
      double t = (y + 1.0) / 1.75;
      return std::fabs(x) <= 0.95 * t;
    }
    default: return std::fabs(x) + std::fabs(y) <= 1.1;  // diamond
  }
}

bool in_stripe(int stripe, double x, double y) {
  const double freq = 2.2;
  double coord;
  switch (stripe) {
    case 1: coord = y; break;
    case 2: coord = x; break;
    case 3: coord = (x + y) * 0.7071; break;
    default: return false;
  }
  return (static_cast<long long>(std::floor(coord * freq + 100.0)) % 2) == 0;
}

}  // namespace

Tensor render_finegrained_image(const SyntheticFinegrainedSpec& spec,
                                int class_id, std::uint64_t image_seed) {
  const int s = spec.image_size;
  ClassAttributes attr = class_attributes(class_id);
  RandomSource rng(image_seed);

  double bg = rng.uniform(0.70, 0.88);
  double grad = rng.uniform(-0.06, 0.06);
  double cx = s * 0.5 + rng.uniform(-s * 0.12, s * 0.12);
  double cy = s * 0.5 + rng.uniform(-s * 0.12, s * 0.12);
  double radius = s * rng.uniform(0.26, 0.36);
  double theta = rng.uniform(-0.35, 0.35);
  double hue = attr.hue / static_cast<double>(kHueCount) + rng.uniform(-0.025, 0.025);
  double sat = rng.uniform(0.72, 0.92);
  double val = rng.uniform(0.68, 0.88);
  double ct = std::cos(theta), st = std::sin(theta);

  double fr, fg, fb;
  hsv_to_rgb(hue, sat, val, &fr, &fg, &fb);
  double sr, sg, sb;  // stripe shade: same hue, darker
  hsv_to_rgb(hue, sat, val * 0.55, &sr, &sg, &sb);

  Tensor img({3, s, s});
  for (int y = 0; y < s; ++y) {
    for (int x = 0; x < s; ++x) {
      double accr = 0, accg = 0, accb = 0;
      // 2x2 supersampling for softer edges
      for (int sy = 0; sy < 2; ++sy) {
        for (int sx = 0; sx < 2; ++sx) {
          double px = x + 0.25 + 0.5 * sx;
          double py = y + 0.25 + 0.5 * sy;
          double dx = (px - cx) / radius, dy = (py - cy) / radius;
          double ux = ct * dx + st * dy;   // rotate into shape frame
          double uy = -st * dx + ct * dy;
          double r, g, b;
          if (in_shape(attr.shape, ux, uy)) {
            if (in_stripe(attr.stripe, ux, uy)) {
              r = sr; g = sg; b = sb;
            } else {
              r = fr; g = fg; b = fb;
            }
            if (attr.accent != 0) {
              double ax = attr.accent == 1 ? -0.45 : 0.45;
              double ay = attr.accent == 1 ? -0.45 : 0.45;
              double ddx = ux - ax, ddy = uy - ay;
              if (ddx * ddx + ddy * ddy <= 0.18 * 0.18) {
                r = g = b = 0.12;
              }
            }
          } else {
            double base = bg + grad * (py / s - 0.5);
            r = g = b = base;
          }
          accr += r; accg += g; accb += b;
        }
      }
      double noise = rng.uniform(-0.02, 0.02);
      img.at({0, y, x}) = clamp01(accr / 4 + noise);
      img.at({1, y, x}) = clamp01(accg / 4 + noise);
      img.at({2, y, x}) = clamp01(accb / 4 + noise);
    }
  }
  return img;
}

namespace {

DatasetSplit load_split_files(const std::string& root) {
  DatasetSplit out;
  const char* names[3] = {"train", "val", "test"};
  std::vector<std::vector<ItemRef>>* parts[3] = {&out.train, &out.val, &out.test};
  std::vector<int>* class_lists[3] = {&out.train_classes, &out.val_classes, &out.test_classes};
  for (int p = 0; p < 3; ++p) {
    json j = read_json(root + "/splits/" + names[p] + ".json");
    std::map<int, std::vector<ItemRef>> by_class;
    for (const auto& item : j.at("items")) {
      ItemRef ref;
      ref.path = root + "/" + item.at("path").get<std::string>();
      ref.label = item.at("label").get<int>();
      by_class[ref.label].push_back(std::move(ref));
    }
    for (auto& [cls, items] : by_class) {
      class_lists[p]->push_back(cls);
      parts[p]->push_back(std::move(items));
    }
  }
  out.check_disjoint();
  return out;
}

}  // namespace

DatasetSplit gen_finegrained(const SyntheticFinegrainedSpec& spec,
                             const std::string& out_dir) {
  if (spec.num_classes < 2 || spec.num_classes > max_finegrained_classes()) {
    throw std::invalid_argument("gen_finegrained: num_classes out of range");
  }
  if (spec.images_per_class < 1 || spec.image_size < 8) {
    throw std::invalid_argument("gen_finegrained: degenerate spec");
  }
  fs::create_directories(out_dir + "/images");
  fs::create_directories(out_dir + "/splits");

  // Class split: shuffled by seed, then cut by fractions.
  RandomSource split_rng = RandomSource(spec.seed).child(0xC1A55);
  std::vector<int> order(static_cast<size_t>(spec.num_classes));
  for (int i = 0; i < spec.num_classes; ++i) order[static_cast<size_t>(i)] = i;
  split_rng.shuffle(order);
  int n_train = std::max(1, static_cast<int>(std::llround(spec.train_frac * spec.num_classes)));
  int n_val = std::max(1, static_cast<int>(std::llround(spec.val_frac * spec.num_classes)));
  if (n_train + n_val >= spec.num_classes) {
    throw std::invalid_argument("gen_finegrained: split fractions leave no test classes");
  }
  std::set<int> train_set(order.begin(), order.begin() + n_train);
  std::set<int> val_set(order.begin() + n_train, order.begin() + n_train + n_val);

  json splits[3];
  for (auto& j : splits) {
    j["schema"] = 1;
    j["items"] = json::array();
  }
  for (int c = 0; c < spec.num_classes; ++c) {
    char cdir[64];
    std::snprintf(cdir, sizeof(cdir), "images/class_%03d", c);
    fs::create_directories(out_dir + "/" + cdir);
    int part = train_set.count(c) ? 0 : (val_set.count(c) ? 1 : 2);
    for (int i = 0; i < spec.images_per_class; ++i) {
      std::uint64_t stream =
          static_cast<std::uint64_t>(c) * static_cast<std::uint64_t>(spec.images_per_class) + i + 1;
      Tensor img = render_finegrained_image(spec, c, derive_seed(spec.seed, stream));
      char fname[96];
      std::snprintf(fname, sizeof(fname), "%s/img_%03d.ppm", cdir, i);
      write_ppm(out_dir + "/" + fname, img);
      splits[part]["items"].push_back({{"path", fname}, {"label", c}});
    }
  }
  const char* names[3] = {"train", "val", "test"};
  for (int p = 0; p < 3; ++p) {
    write_text(out_dir + "/splits/" + names[p] + ".json", splits[p].dump(2) + "\n");
  }
  json meta = {{"schema", 1},
               {"kind", "finegrained"},
               {"num_classes", spec.num_classes},
               {"images_per_class", spec.images_per_class},
               {"image_size", spec.image_size},
               {"train_frac", spec.train_frac},
               {"val_frac", spec.val_frac},
               {"seed", spec.seed}};
  write_text(out_dir + "/spec.json", meta.dump(2) + "\n");
  return load_split_files(out_dir);
}

DatasetSplit load_finegrained(const std::string& root) {
  return load_split_files(root);
}

// ---------------------------------------------------------------------------
// Person-search scenes
// ---------------------------------------------------------------------------

namespace {

struct IdentityLook {
  double torso_hue, torso_sat, torso_val;
  double leg_hue, leg_sat, leg_val;
  double build;      // width / height
  double head_tone;
};

IdentityLook identity_look(std::uint64_t seed, int identity, int num_identities) {
  RandomSource rng(derive_seed(seed, 0x1D000000ULL + static_cast<std::uint64_t>(identity)));
  IdentityLook look;
  // Evenly spaced torso hues keep identities separable; the rest is random.
  look.torso_hue = (identity + 0.5) / std::max(1, num_identities);
  look.torso_sat = rng.uniform(0.65, 0.9);
  look.torso_val = rng.uniform(0.55, 0.85);
  look.leg_hue = rng.uniform(0.0, 1.0);
  look.leg_sat = rng.uniform(0.4, 0.8);
  look.leg_val = rng.uniform(0.25, 0.6);
  look.build = rng.uniform(0.32, 0.52);
  look.head_tone = rng.uniform(0.5, 0.8);
  return look;
}

struct Placement {
  Box box;
  IdentityLook look;
  int identity;
  double brightness;
};

void draw_person(Tensor& img, const Placement& p) {
  int h = img.dim(1), w = img.dim(2);
  double bw = p.box.x2 - p.box.x1, bh = p.box.y2 - p.box.y1;
  double cx = 0.5 * (p.box.x1 + p.box.x2);
  double head_cy = p.box.y1 + 0.12 * bh;
  double head_r = 0.11 * bh;
  double torso_y1 = p.box.y1 + 0.22 * bh, torso_y2 = p.box.y1 + 0.62 * bh;
  double legs_y2 = p.box.y2;
  double tr, tg, tb, lr, lg, lb;
  hsv_to_rgb(p.look.torso_hue, p.look.torso_sat, clamp01(p.look.torso_val * p.brightness), &tr,
             &tg, &tb);
  hsv_to_rgb(p.look.leg_hue, p.look.leg_sat, clamp01(p.look.leg_val * p.brightness), &lr, &lg,
             &lb);
  double head = clamp01(p.look.head_tone * p.brightness);

  int y1 = std::max(0, static_cast<int>(std::floor(p.box.y1)));
  int y2 = std::min(h, static_cast<int>(std::ceil(p.box.y2)));
  int x1 = std::max(0, static_cast<int>(std::floor(p.box.x1)));
  int x2 = std::min(w, static_cast<int>(std::ceil(p.box.x2)));
  for (int y = y1; y < y2; ++y) {
    for (int x = x1; x < x2; ++x) {
      double px = x + 0.5, py = y + 0.5;
      double r, g, b;
      bool hit = false;
      double hdx = px - cx, hdy = py - head_cy;
      if (hdx * hdx + hdy * hdy <= head_r * head_r) {
        r = head; g = head * 0.82; b = head * 0.7;
        hit = true;
      } else if (py >= torso_y1 && py < torso_y2 && std::fabs(px - cx) <= 0.42 * bw) {
        r = tr; g = tg; b = tb;
        hit = true;
      } else if (py >= torso_y2 && py < legs_y2 && std::fabs(px - cx) <= 0.3 * bw) {
        r = lr; g = lg; b = lb;
        hit = true;
      } else {
        r = g = b = 0;
      }
      if (hit) {
        img.at({0, y, x}) = r;
        img.at({1, y, x}) = g;
        img.at({2, y, x}) = b;
      }
    }
  }
}

SearchDataset load_search_from_json(const std::string& root) {
  SearchDataset ds;
  json sc = read_json(root + "/scenes.json");
  ds.image_w = sc.at("image_w").get<int>();
  ds.image_h = sc.at("image_h").get<int>();
  for (const auto& js : sc.at("scenes")) {
    SearchScene scene;
    scene.id = js.at("id").get<int>();
    scene.path = root + "/" + js.at("path").get<std::string>();
    for (const auto& jp : js.at("persons")) {
      PersonInstance pi;
      auto bx = jp.at("box");
      pi.box = {bx[0].get<double>(), bx[1].get<double>(), bx[2].get<double>(),
                bx[3].get<double>()};
      pi.identity = jp.at("identity").get<int>();
      pi.torso_hue = jp.at("torso_hue").get<double>();
      scene.persons.push_back(pi);
    }
    ds.scenes.push_back(std::move(scene));
  }
  json pr = read_json(root + "/protocol.json");
  for (const auto& jq : pr.at("queries")) {
    SearchQuery q;
    q.scene = jq.at("scene").get<int>();
    q.person = jq.at("person").get<int>();
    q.identity = jq.at("identity").get<int>();
    for (const auto& g : jq.at("gallery")) q.gallery.push_back(g.get<int>());
    ds.queries.push_back(std::move(q));
  }
  return ds;
}

}  // namespace

SearchDataset gen_search_scenes(const SearchSceneSpec& spec,
                                const std::string& out_dir) {
  if (spec.num_identities < 2 || spec.num_scenes < 2) {
    throw std::invalid_argument("gen_search_scenes: degenerate spec");
  }
  if (spec.appearances_per_identity < 2 ||
      spec.appearances_per_identity > spec.num_scenes) {
    throw std::invalid_argument(
        "gen_search_scenes: appearances_per_identity must be in [2, num_scenes]");
  }
  if (spec.gallery_size > spec.num_scenes - 1) {
    throw std::invalid_argument("gen_search_scenes: gallery larger than scene pool");
  }
  fs::create_directories(out_dir + "/scenes");

  // Which scenes each identity shows up in.
  RandomSource assign_rng = RandomSource(spec.seed).child(0xA551);
  std::vector<std::vector<int>> appearances(static_cast<size_t>(spec.num_identities));
  std::vector<std::vector<int>> scene_ids(static_cast<size_t>(spec.num_scenes));
  for (int i = 0; i < spec.num_identities; ++i) {
    appearances[static_cast<size_t>(i)] = assign_rng.sample_without_replacement(
        spec.num_scenes, spec.appearances_per_identity);
    std::sort(appearances[static_cast<size_t>(i)].begin(),
              appearances[static_cast<size_t>(i)].end());
    for (int s : appearances[static_cast<size_t>(i)])
      scene_ids[static_cast<size_t>(s)].push_back(i);
  }

  std::vector<IdentityLook> looks;
  looks.reserve(static_cast<size_t>(spec.num_identities));
  for (int i = 0; i < spec.num_identities; ++i) {
    looks.push_back(identity_look(spec.seed, i, spec.num_identities));
  }

  SearchDataset ds;
  ds.image_w = spec.image_w;
  ds.image_h = spec.image_h;

  json jscenes = json::array();
  for (int s = 0; s < spec.num_scenes; ++s) {
    RandomSource rng(derive_seed(spec.seed, 0x5CE0000ULL + static_cast<std::uint64_t>(s)));
    SearchScene scene;
    scene.id = s;

    const int w = spec.image_w, h = spec.image_h;
    Tensor img({3, h, w});
    double bg_hue = rng.uniform(0.0, 1.0);
    double bg_sat = rng.uniform(0.08, 0.22);
    double bg_val = rng.uniform(0.45, 0.7);
    double floor_y = h * rng.uniform(0.7, 0.85);
    double br, bgc, bb;
    hsv_to_rgb(bg_hue, bg_sat, bg_val, &br, &bgc, &bb);
    for (int y = 0; y < h; ++y) {
      double shade = 1.0 - 0.25 * (static_cast<double>(y) / h);
      double fl = y >= floor_y ? 0.75 : 1.0;
      for (int x = 0; x < w; ++x) {
        img.at({0, y, x}) = clamp01(br * shade * fl);
        img.at({1, y, x}) = clamp01(bgc * shade * fl);
        img.at({2, y, x}) = clamp01(bb * shade * fl);
      }
    }
    // clutter blocks
    int blocks = static_cast<int>(rng.randint(1, 3));
    for (int bkt = 0; bkt < blocks; ++bkt) {
      double bx1 = rng.uniform(0, w * 0.8), by1 = rng.uniform(0, h * 0.5);
      double bw = rng.uniform(w * 0.08, w * 0.25), bh = rng.uniform(h * 0.1, h * 0.35);
      double chue = rng.uniform(0.0, 1.0);
      double cr, cg, cb;
      hsv_to_rgb(chue, 0.15, rng.uniform(0.35, 0.75), &cr, &cg, &cb);
      for (int y = std::max(0, static_cast<int>(by1));
           y < std::min(h, static_cast<int>(by1 + bh)); ++y)
        for (int x = std::max(0, static_cast<int>(bx1));
             x < std::min(w, static_cast<int>(bx1 + bw)); ++x) {
          img.at({0, y, x}) = cr;
          img.at({1, y, x}) = cg;
          img.at({2, y, x}) = cb;
        }
    }

    // labeled persons, then distractors
    std::vector<Placement> placements;
    auto place_box = [&](double build) -> Box {
      for (int attempt = 0; attempt < 24; ++attempt) {
        double ph = h * rng.uniform(0.42, 0.72);
        double pw = ph * build * rng.uniform(0.9, 1.1);
        double x1 = rng.uniform(1.0, w - pw - 1.0);
        double feet = rng.uniform(floor_y - 2.0, h - 1.0);
        double y1 = feet - ph;
        if (y1 < 1.0) y1 = 1.0;
        Box b{x1, y1, x1 + pw, y1 + ph};
        bool ok = true;
        for (const auto& p : placements) {
          if (iou(b, p.box) > 0.25) {
            ok = false;
            break;
          }
        }
        if (ok || attempt == 23) return b;
      }
      return {1, 1, 10, 20};  // unreachable
    };

    for (int ident : scene_ids[static_cast<size_t>(s)]) {
      Placement p;
      p.look = looks[static_cast<size_t>(ident)];
      p.identity = ident;
      p.brightness = rng.uniform(0.88, 1.12);
      p.box = place_box(p.look.build);
      placements.push_back(p);
    }
    int extras = static_cast<int>(rng.randint(1, std::max(1, spec.max_extra_distractors)));
    for (int d = 0; d < extras; ++d) {
      Placement p;
      RandomSource drng = rng.child(0xD15 + static_cast<std::uint64_t>(d));
      p.look.torso_hue = drng.uniform(0.0, 1.0);
      p.look.torso_sat = drng.uniform(0.6, 0.9);
      p.look.torso_val = drng.uniform(0.5, 0.85);
      p.look.leg_hue = drng.uniform(0.0, 1.0);
      p.look.leg_sat = drng.uniform(0.4, 0.8);
      p.look.leg_val = drng.uniform(0.25, 0.6);
      p.look.build = drng.uniform(0.32, 0.52);
      p.look.head_tone = drng.uniform(0.5, 0.8);
      // hardness knob: copy a target's clothing hue
      if (!scene_ids[static_cast<size_t>(s)].empty() &&
          rng.uniform() < spec.hue_share_prob) {
        int pick = scene_ids[static_cast<size_t>(s)][static_cast<size_t>(
            rng.randint(0, static_cast<int>(scene_ids[static_cast<size_t>(s)].size()) - 1))];
        p.look.torso_hue = looks[static_cast<size_t>(pick)].torso_hue;
      }
      p.identity = -1;
      p.brightness = rng.uniform(0.88, 1.12);
      p.box = place_box(p.look.build);
      placements.push_back(p);
    }

    // farther (smaller y2) persons drawn first so nearer ones occlude
    std::stable_sort(placements.begin(), placements.end(),
                     [](const Placement& a, const Placement& b) {
                       return a.box.y2 < b.box.y2;
                     });
    for (const auto& p : placements) draw_person(img, p);

    char fname[64];
    std::snprintf(fname, sizeof(fname), "scenes/scene_%04d.ppm", s);
    write_ppm(out_dir + "/" + std::string(fname), img);

    scene.path = out_dir + "/" + std::string(fname);
    json jpersons = json::array();
    for (const auto& p : placements) {
      PersonInstance pi{p.box, p.identity, p.look.torso_hue};
      scene.persons.push_back(pi);
      jpersons.push_back({{"box", {p.box.x1, p.box.y1, p.box.x2, p.box.y2}},
                          {"identity", p.identity},
                          {"torso_hue", p.look.torso_hue}});
    }
    jscenes.push_back({{"id", s}, {"path", fname}, {"persons", jpersons}});
    ds.scenes.push_back(std::move(scene));
  }

  json jsc = {{"schema", 1},
              {"image_w", spec.image_w},
              {"image_h", spec.image_h},
              {"scenes", jscenes}};
  write_text(out_dir + "/scenes.json", jsc.dump(2) + "\n");

  // protocol: one query per appearance; gallery excludes the query scene and
  // always contains at least one other scene where the identity appears
  RandomSource proto_rng = RandomSource(spec.seed).child(0x9807);
  json jqueries = json::array();
  for (int ident = 0; ident < spec.num_identities; ++ident) {
    const auto& app = appearances[static_cast<size_t>(ident)];
    for (size_t a = 0; a < app.size(); ++a) {
      int qscene = app[a];
      int person_idx = -1;
      for (size_t pi = 0; pi < ds.scenes[static_cast<size_t>(qscene)].persons.size(); ++pi) {
        if (ds.scenes[static_cast<size_t>(qscene)].persons[pi].identity == ident) {
          person_idx = static_cast<int>(pi);
          break;
        }
      }
      if (person_idx < 0) throw std::logic_error("identity missing from its own scene");

      std::vector<int> pool;
      for (int s = 0; s < spec.num_scenes; ++s)
        if (s != qscene) pool.push_back(s);
      std::vector<int> chosen_idx =
          proto_rng.sample_without_replacement(static_cast<int>(pool.size()), spec.gallery_size);
      std::vector<int> gallery;
      gallery.reserve(static_cast<size_t>(spec.gallery_size));
      for (int ci : chosen_idx) gallery.push_back(pool[static_cast<size_t>(ci)]);
      bool has_pos = false;
      for (int g : gallery) {
        if (std::find(app.begin(), app.end(), g) != app.end()) {
          has_pos = true;
          break;
        }
      }
      if (!has_pos) {
        // swap a random slot for another appearance scene of this identity
        std::vector<int> others;
        for (int s2 : app)
          if (s2 != qscene) others.push_back(s2);
        int victim = static_cast<int>(proto_rng.randint(0, spec.gallery_size - 1));
        gallery[static_cast<size_t>(victim)] =
            others[static_cast<size_t>(proto_rng.randint(0, static_cast<int>(others.size()) - 1))];
      }

      SearchQuery q;
      q.scene = qscene;
      q.person = person_idx;
      q.identity = ident;
      q.gallery = gallery;
      ds.queries.push_back(q);
      jqueries.push_back({{"scene", qscene},
                          {"person", person_idx},
                          {"identity", ident},
                          {"gallery", gallery}});
    }
  }
  json jpr = {{"schema", 1}, {"gallery_size", spec.gallery_size}, {"queries", jqueries}};
  write_text(out_dir + "/protocol.json", jpr.dump(2) + "\n");

  json meta = {{"schema", 1},
               {"kind", "search"},
               {"num_identities", spec.num_identities},
               {"appearances_per_identity", spec.appearances_per_identity},
               {"num_scenes", spec.num_scenes},
               {"image_w", spec.image_w},
               {"image_h", spec.image_h},
               {"max_extra_distractors", spec.max_extra_distractors},
               {"hue_share_prob", spec.hue_share_prob},
               {"gallery_size", spec.gallery_size},
               {"seed", spec.seed}};
  write_text(out_dir + "/spec.json", meta.dump(2) + "\n");
  return ds;
}

SearchDataset load_search_dataset(const std::string& root) {
  return load_search_from_json(root);
}

// ---------------------------------------------------------------------------
// CUB-style ingestion
// ---------------------------------------------------------------------------

DatasetSplit ingest_cub(const std::string& root, const std::string& split_file) {
  json spl = read_json(split_file);
  DatasetSplit out;
  const char* names[3] = {"train", "val", "test"};
  std::vector<std::vector<ItemRef>>* parts[3] = {&out.train, &out.val, &out.test};
  std::vector<int>* class_lists[3] = {&out.train_classes, &out.val_classes, &out.test_classes};

  std::vector<std::string> missing;
  int next_id = 0;
  int total_images = 0;
  int total_classes = 0;
  for (int p = 0; p < 3; ++p) {
    for (const auto& jname : spl.at(names[p])) {
      std::string cname = jname.get<std::string>();
      fs::path cdir = fs::path(root) / "images" / cname;
      // class id: numeric prefix of the directory name when present
      int cid = next_id;
      auto dot = cname.find('.');
      if (dot != std::string::npos && dot > 0 &&
          std::all_of(cname.begin(), cname.begin() + static_cast<long>(dot),
                      [](char c) { return c >= '0' && c <= '9'; })) {
        cid = std::stoi(cname.substr(0, dot));
      }
      next_id = std::max(next_id, cid + 1);
      if (!fs::is_directory(cdir)) {
        missing.push_back(cname);
        continue;
      }
      std::vector<std::string> files;
      for (const auto& entry : fs::directory_iterator(cdir)) {
        if (entry.is_regular_file() && entry.path().extension() == ".ppm") {
          files.push_back(entry.path().string());
        }
      }
      std::sort(files.begin(), files.end());
      std::vector<ItemRef> items;
      items.reserve(files.size());
      for (const auto& f : files) items.push_back({f, cid});
      total_images += static_cast<int>(items.size());
      ++total_classes;
      class_lists[p]->push_back(cid);
      parts[p]->push_back(std::move(items));
    }
  }
  if (!missing.empty()) {
    std::string msg = "ingest_cub: missing class directories:";
    for (const auto& m : missing) msg += " " + m;
    throw std::runtime_error(msg);
  }
  if (total_classes == 200 && total_images != 11788) {
    throw std::runtime_error(
        "ingest_cub: full 200-class set should hold 11788 images, found " +
        std::to_string(total_images));
  }
  out.check_disjoint();
  return out;
}

}  // namespace qgn
