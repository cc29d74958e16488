#include "qgn/episodic.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <sstream>
#include <stdexcept>

namespace qgn {

void DatasetSplit::check_disjoint() const {
  std::set<int> seen;
  auto absorb = [&](const std::vector<int>& ids, const char* part) {
    for (int id : ids) {
      if (!seen.insert(id).second) {
        throw std::runtime_error("class " + std::to_string(id) +
                                 " appears in multiple partitions (" + part +
                                 ")");
      }
    }
  };
  absorb(train_classes, "train");
  absorb(val_classes, "val");
  absorb(test_classes, "test");
}

Episode sample_episode(const DatasetSplit& split, int c_novel, int k, int l,
                       RandomSource& rng) {
  if (c_novel < 1 || k < 1 || l < 1) {
    throw std::invalid_argument("sample_episode: c_novel, k, l must be >= 1");
  }
  std::vector<int> eligible;
  for (int c = 0; c < static_cast<int>(split.test.size()); ++c) {
    if (static_cast<int>(split.test[c].size()) >= k + l) eligible.push_back(c);
  }
  if (static_cast<int>(eligible.size()) < c_novel) {
    throw std::runtime_error("sample_episode: only " +
                             std::to_string(eligible.size()) +
                             " classes have >= k+l items, need " +
                             std::to_string(c_novel));
  }
  std::vector<int> picked =
      rng.sample_without_replacement(static_cast<int>(eligible.size()), c_novel);

  Episode ep;
  ep.k = k;
  ep.l = l;
  ep.seed = rng.seed();
  for (int pi : picked) {
    int c = eligible[pi];
    ep.classes.push_back(split.test_classes[c]);
    const auto& items = split.test[c];
    std::vector<int> idx = rng.sample_without_replacement(
        static_cast<int>(items.size()), k + l);
    for (int i = 0; i < k; ++i) ep.queries.push_back(items[idx[i]]);
    for (int i = k; i < k + l; ++i) ep.gallery.push_back(items[idx[i]]);
  }
  return ep;
}

std::vector<TrainPair> make_train_pairs(const DatasetSplit& split, int batch,
                                        int neg_ratio, RandomSource& rng) {
  int num_classes = static_cast<int>(split.train.size());
  if (num_classes < 2) {
    throw std::runtime_error("make_train_pairs: need >= 2 training classes");
  }
  if (batch % (neg_ratio + 1) != 0) {
    throw std::invalid_argument(
        "make_train_pairs: batch must be divisible by neg_ratio + 1");
  }
  int pos = batch / (neg_ratio + 1);

  auto pick = [&rng](int n) { return static_cast<int>(rng.randint(0, n - 1)); };

  std::vector<TrainPair> out;
  out.reserve(batch);
  for (int i = 0; i < pos; ++i) {
    int c = pick(num_classes);
    while (static_cast<int>(split.train[c].size()) < 2) c = pick(num_classes);
    const auto& items = split.train[c];
    std::vector<int> two =
        rng.sample_without_replacement(static_cast<int>(items.size()), 2);
    out.push_back({items[two[0]], items[two[1]], 1});
  }
  for (int i = pos; i < batch; ++i) {
    int cq = pick(num_classes);
    int cg = pick(num_classes);
    while (cg == cq) cg = pick(num_classes);
    const auto& qs = split.train[cq];
    const auto& gs = split.train[cg];
    if (qs.empty() || gs.empty()) {
      throw std::runtime_error("make_train_pairs: empty training class");
    }
    out.push_back(
        {qs[pick(static_cast<int>(qs.size()))],
         gs[pick(static_cast<int>(gs.size()))], 0});
  }
  return out;
}

EpisodeResult classify_episode(const PairScorer& scorer, const Episode& ep) {
  EpisodeResult res;
  int n = static_cast<int>(ep.gallery.size());
  int c = static_cast<int>(ep.classes.size());
  res.predicted.resize(n);
  res.scores.resize(n);
  int correct = 0;
  for (int g = 0; g < n; ++g) {
    std::vector<double> s = scorer(ep.gallery[g], ep.queries, ep.classes, ep.k);
    if (static_cast<int>(s.size()) != c) {
      throw std::runtime_error("classify_episode: scorer returned " +
                               std::to_string(s.size()) + " scores, expected " +
                               std::to_string(c));
    }
    int best = 0;
    for (int j = 1; j < c; ++j) {
      if (s[j] > s[best]) best = j;  // strict: ties keep the lowest index
    }
    res.predicted[g] = best;
    res.scores[g] = std::move(s);
    int truth = g / ep.l;
    if (best == truth) ++correct;
  }
  res.accuracy = n > 0 ? static_cast<double>(correct) / n : 0.0;
  return res;
}

ProtocolResult evaluate_protocol(const PairScorer& scorer,
                                 const DatasetSplit& split, int episodes,
                                 int c_novel, int k, int l,
                                 RandomSource& rng) {
  if (episodes < 1) {
    throw std::invalid_argument("evaluate_protocol: episodes must be >= 1");
  }
  ProtocolResult res;
  res.per_episode.reserve(episodes);
  double sum = 0.0;
  for (int e = 0; e < episodes; ++e) {
    RandomSource ep_rng = rng.child(static_cast<std::uint64_t>(e) + 1);
    Episode ep = sample_episode(split, c_novel, k, l, ep_rng);
    double acc = classify_episode(scorer, ep).accuracy;
    res.per_episode.push_back(acc);
    sum += acc;
  }
  res.mean_accuracy = sum / episodes;
  double var = 0.0;
  for (double a : res.per_episode) {
    double d = a - res.mean_accuracy;
    var += d * d;
  }
  if (episodes > 1) {
    var /= (episodes - 1);
    res.ci95 = 1.96 * std::sqrt(var / episodes);
  }
  return res;
}

std::string episode_manifest(const Episode& ep) {
  std::ostringstream os;
  os << "episode seed=" << ep.seed << " k=" << ep.k << " l=" << ep.l << "\n";
  for (size_t c = 0; c < ep.classes.size(); ++c) {
    os << "class " << ep.classes[c] << "\n";
    for (int i = 0; i < ep.k; ++i) {
      os << "  query " << ep.queries[c * ep.k + i].path << "\n";
    }
    for (int i = 0; i < ep.l; ++i) {
      os << "  gallery " << ep.gallery[c * ep.l + i].path << "\n";
    }
  }
  return os.str();
}

}  // namespace qgn
