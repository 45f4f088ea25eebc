#pragma once

#include <algorithm>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include "relcbm/dataset.hpp"
#include "relcbm/error.hpp"
#include "relcbm/nn.hpp"

namespace relcbm {

namespace detail {

// 60/20/20 split by world position.
inline Split split_for(std::size_t i, std::size_t n) {
  if (i * 10 < n * 6) return Split::kTrain;
  if (i * 10 < n * 8) return Split::kVal;
  return Split::kTest;
}

}  // namespace detail

// ---- Tower of Hanoi -------------------------------------------------------------

struct HanoiTower {
  std::vector<int> sizes;  // bottom to top
};

/// A disk is well placed iff the disk below (if any) is larger and the disk above (if any) is smaller.
inline std::vector<bool> hanoi_correct(const HanoiTower& t) {
  const std::size_t k = t.sizes.size();
  std::vector<bool> ok(k, true);
  for (std::size_t i = 0; i < k; ++i) {
    if (i > 0 && t.sizes[i - 1] <= t.sizes[i]) ok[i] = false;
    if (i + 1 < k && t.sizes[i + 1] >= t.sizes[i]) ok[i] = false;
  }
  return ok;
}

inline Schema hanoi_schema() {
  return Schema({{"larger", 2, PredicateKind::kConcept},
                 {"top", 2, PredicateKind::kConcept},
                 {"correct", 1, PredicateKind::kTask}});
}

/// Builds one world. Entity ids d0..d{k-1} are assigned to tower positions in
/// a random order; features are (size, height) plus gaussian jitter.
inline World hanoi_world(int id, const HanoiTower& tower, Rng& rng, double jitter = 0.1) {
  const std::size_t k = tower.sizes.size();
  std::vector<std::size_t> slot(k);  // entity index of the disk at height h
  std::iota(slot.begin(), slot.end(), 0);
  std::shuffle(slot.begin(), slot.end(), rng);
  std::vector<std::size_t> height(k);
  for (std::size_t h = 0; h < k; ++h) height[slot[h]] = h;

  std::normal_distribution<double> noise(0.0, jitter);
  World w;
  w.id = id;
  for (std::size_t e = 0; e < k; ++e) {
    const double size = tower.sizes[height[e]];
    const double hx = static_cast<double>(height[e]);
    w.add_entity("d" + std::to_string(e), {size + noise(rng), hx + noise(rng)});
  }
  auto correct = hanoi_correct(tower);
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = 0; b < k; ++b) {
      const bool larger = tower.sizes[height[a]] > tower.sizes[height[b]];
      w.concepts.push_back({"larger", {a, b}, larger ? 1.0 : 0.0, {}});
    }
  }
  for (std::size_t a = 0; a < k; ++a) {
    for (std::size_t b = 0; b < k; ++b) {
      const bool top = height[a] == height[b] + 1;
      w.concepts.push_back({"top", {a, b}, top ? 1.0 : 0.0, {}});
    }
  }
  for (std::size_t e = 0; e < k; ++e) w.tasks.push_back({"correct", {e}, correct[height[e]] ? 1.0 : 0.0, {}});
  return w;
}

inline RelationalDataset gen_hanoi(std::size_t n_worlds, std::size_t disks_per_world, std::uint64_t seed) {
  if (disks_per_world < 2) throw Error(ErrorCode::kInvalidCount, "disks_per_world ≥ 2");
  if (n_worlds < 1) throw Error(ErrorCode::kInvalidCount, "n_worlds >= 1");
  Rng rng(seed);
  RelationalDataset ds;
  ds.name = "hanoi";
  ds.schema = hanoi_schema();
  for (std::size_t i = 0; i < n_worlds; ++i) {
    HanoiTower t;
    t.sizes.resize(disks_per_world);
    std::iota(t.sizes.begin(), t.sizes.end(), 1);
    std::shuffle(t.sizes.begin(), t.sizes.end(), rng);
    World w = hanoi_world(static_cast<int>(i), t, rng);
    w.split = detail::split_for(i, n_worlds);
    ds.worlds.push_back(std::move(w));
  }
  return ds;
}

// ---- Rock-Paper-Scissors ------------------------------------------------------------

enum class Sign { kRock = 0, kPaper = 1, kScissors = 2 };

inline const char* sign_name(Sign s) {
  switch (s) {
    case Sign::kRock: return "rock";
    case Sign::kPaper: return "paper";
    case Sign::kScissors: return "scissors";
  }
  return "?";
}

// +1 if a beats b, -1 if b beats a, 0 on a tie.
inline int rps_outcome(Sign a, Sign b) {
  const int x = static_cast<int>(a);
  const int y = static_cast<int>(b);
  if (x == y) return 0;
  return (x - y + 3) % 3 == 1 ? 1 : -1;
}

/// Opponent sign for which `task` (wins, loses or ties) holds when the player shows `v`.
inline Sign rps_opponent_for(const std::string& task, Sign v) {
  const int target = task == "wins" ? 1 : task == "loses" ? -1 : 0;
  if (task != "wins" && task != "loses" && task != "ties") throw Error(ErrorCode::kUnknownAtom, task);
  for (int b = 0; b < 3; ++b) {
    if (rps_outcome(v, static_cast<Sign>(b)) == target) return static_cast<Sign>(b);
  }
  return v;
}

/// One-hot ground-truth rule body over variables v and u, e.g. for wins with v = paper:
/// ~rock(v), paper(v), ~scissors(v), rock(u), ~paper(u), ~scissors(u).
inline std::vector<std::pair<Atom, bool>> rps_rule_literals(const std::string& task, Sign v) {
  const Sign u = rps_opponent_for(task, v);
  std::vector<std::pair<Atom, bool>> lits;
  for (const auto& [var, sign] : {std::pair{"v", v}, std::pair{"u", u}}) {
    for (int s = 0; s < 3; ++s) {
      lits.push_back({make_atom(sign_name(static_cast<Sign>(s)), {var}), static_cast<Sign>(s) == sign});
    }
  }
  return lits;
}

inline Schema rps_schema() {
  Schema s({{"rock", 1, PredicateKind::kConcept},
            {"paper", 1, PredicateKind::kConcept},
            {"scissors", 1, PredicateKind::kConcept},
            {"wins", 1, PredicateKind::kTask},
            {"loses", 1, PredicateKind::kTask},
            {"ties", 1, PredicateKind::kTask}});
  s.exclusive_groups = {{"wins", "loses", "ties"}};
  return s;
}

inline World rps_world(int id, Sign a, Sign b, Rng& rng, double noise = 0.3) {
  std::uniform_real_distribution<double> u(-noise, noise);
  World w;
  w.id = id;
  const Sign signs[2] = {a, b};
  for (int p = 0; p < 2; ++p) {
    std::vector<double> x(3, 0.0);
    x[static_cast<std::size_t>(signs[p])] = 1.0;
    for (auto& v : x) v += u(rng);
    w.add_entity("p" + std::to_string(p), std::move(x));
  }
  for (std::size_t p = 0; p < 2; ++p) {
    for (int s = 0; s < 3; ++s) {
      w.concepts.push_back({sign_name(static_cast<Sign>(s)), {p}, signs[p] == static_cast<Sign>(s) ? 1.0 : 0.0, {}});
    }
  }
  for (std::size_t p = 0; p < 2; ++p) {
    const int o = rps_outcome(signs[p], signs[1 - p]);
    w.tasks.push_back({"wins", {p}, o == 1 ? 1.0 : 0.0, {}});
    w.tasks.push_back({"loses", {p}, o == -1 ? 1.0 : 0.0, {}});
    w.tasks.push_back({"ties", {p}, o == 0 ? 1.0 : 0.0, {}});
  }
  return w;
}

inline RelationalDataset gen_rps(std::size_t n_matches, std::uint64_t seed) {
  if (n_matches < 1) throw Error(ErrorCode::kInvalidCount, "n_matches >= 1");
  Rng rng(seed);
  std::uniform_int_distribution<int> sign(0, 2);
  RelationalDataset ds;
  ds.name = "rps";
  ds.schema = rps_schema();
  for (std::size_t i = 0; i < n_matches; ++i) {
    Sign a = static_cast<Sign>(sign(rng));
    Sign b = static_cast<Sign>(sign(rng));
    World w = rps_world(static_cast<int>(i), a, b, rng);
    w.split = detail::split_for(i, n_matches);
    ds.worlds.push_back(std::move(w));
  }
  return ds;
}

// ---- family trees ---------------------------------------------------------------------

inline Schema family_schema() {
  return Schema({{"parent", 2, PredicateKind::kConcept}, {"grandparent", 2, PredicateKind::kTask}});
}

/// Labels parent/2 and grandparent/2 on every ordered pair of `names` from a
/// parent edge list. Features are N(0,1) vectors of dimension `dim`.
inline World family_world(int id, const std::vector<std::string>& names,
                          const std::vector<std::pair<std::size_t, std::size_t>>& edges, Rng& rng,
                          std::size_t dim = 8) {
  const std::size_t n = names.size();
  std::vector<std::vector<char>> par(n, std::vector<char>(n, 0));
  for (auto [a, b] : edges) par[a][b] = 1;
  std::normal_distribution<double> g(0.0, 1.0);
  World w;
  w.id = id;
  for (const auto& name : names) {
    std::vector<double> x(dim);
    for (auto& v : x) v = g(rng);
    w.add_entity(name, std::move(x));
  }
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) w.concepts.push_back({"parent", {a, b}, par[a][b] ? 1.0 : 0.0, {}});
  }
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      bool gp = false;
      for (std::size_t u = 0; u < n && !gp; ++u) gp = par[a][u] && par[u][b];
      w.tasks.push_back({"grandparent", {a, b}, gp ? 1.0 : 0.0, {}});
    }
  }
  return w;
}

/// Random trees with `depth` generations; each non-leaf has one or two children.
inline RelationalDataset gen_family(std::size_t n_trees, std::size_t depth, std::uint64_t seed) {
  if (n_trees < 1) throw Error(ErrorCode::kInvalidCount, "n_trees >= 1");
  if (depth < 1) throw Error(ErrorCode::kInvalidCount, "depth >= 1");
  Rng rng(seed);
  std::uniform_int_distribution<int> kids(1, 2);
  RelationalDataset ds;
  ds.name = "family";
  ds.schema = family_schema();
  for (std::size_t i = 0; i < n_trees; ++i) {
    std::vector<std::string> names{"f0"};
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    std::vector<std::size_t> frontier{0};
    for (std::size_t level = 1; level < depth; ++level) {
      std::vector<std::size_t> next;
      for (auto p : frontier) {
        const int c = kids(rng);
        for (int j = 0; j < c; ++j) {
          names.push_back("f" + std::to_string(names.size()));
          edges.emplace_back(p, names.size() - 1);
          next.push_back(names.size() - 1);
        }
      }
      frontier = std::move(next);
    }
    World w = family_world(static_cast<int>(i), names, edges, rng);
    w.split = detail::split_for(i, n_trees);
    ds.worlds.push_back(std::move(w));
  }
  return ds;
}

// ---- citation graph ---------------------------------------------------------------------

inline std::string class_name(std::size_t i) { return "class_" + std::to_string(i); }

/// Per-document split used by the citation toy: 50% train, 20% val, 30% test.
inline Split citation_split(std::size_t i, std::size_t n) {
  if (i * 10 < n * 5) return Split::kTrain;
  if (i * 10 < n * 7) return Split::kVal;
  return Split::kTest;
}

struct CitationOptions {
  double word_on = 0.5;    // probability of a class word for docs of that class
  double word_off = 0.2;   // probability of any other word
  std::size_t min_cites = 1;
  std::size_t max_cites = 3;
};

/// Single world of documents. Each document cites 1..3 others; a cite stays
/// within the class with probability `homophily`.
inline RelationalDataset gen_citation_toy(std::size_t n_docs, std::size_t n_classes, double homophily,
                                          std::uint64_t seed, CitationOptions opt = {}) {
  if (n_classes < 2) throw Error(ErrorCode::kInvalidCount, "n_classes >= 2");
  if (!(homophily > 0.5 && homophily <= 1.0)) throw Error(ErrorCode::kInvalidCount, "homophily in (0.5, 1]");
  if (n_docs < 2 * n_classes) throw Error(ErrorCode::kInvalidCount, "n_docs >= 2 * n_classes");
  Rng rng(seed);
  RelationalDataset ds;
  ds.name = "citation";
  ds.metric = "accuracy";
  std::vector<PredicateSig> preds;
  for (std::size_t c = 0; c < n_classes; ++c) preds.push_back({class_name(c), 1, PredicateKind::kConcept});
  for (std::size_t c = 0; c < n_classes; ++c) preds.push_back({class_name(c), 1, PredicateKind::kTask});
  preds.push_back({"cite", 2, PredicateKind::kRelation});
  ds.schema = Schema(std::move(preds));
  std::vector<std::string> group;
  for (std::size_t c = 0; c < n_classes; ++c) group.push_back(class_name(c));
  ds.schema.exclusive_groups = {group};

  // Every class gets at least two documents so same-class and cross-class cites exist.
  std::vector<std::size_t> label(n_docs);
  std::uniform_int_distribution<std::size_t> pick_class(0, n_classes - 1);
  for (std::size_t i = 0; i < n_docs; ++i) label[i] = i < 2 * n_classes ? i % n_classes : pick_class(rng);
  std::shuffle(label.begin(), label.end(), rng);

  std::vector<std::vector<std::size_t>> members(n_classes);
  for (std::size_t i = 0; i < n_docs; ++i) members[label[i]].push_back(i);

  World w;
  w.id = 0;
  w.split = Split::kTrain;
  const std::size_t d = 4 * n_classes;
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  for (std::size_t i = 0; i < n_docs; ++i) {
    std::vector<double> x(d);
    for (std::size_t j = 0; j < d; ++j) {
      const double p = j / 4 == label[i] ? opt.word_on : opt.word_off;
      x[j] = unit(rng) < p ? 1.0 : 0.0;
    }
    w.add_entity("doc" + std::to_string(i), std::move(x));
  }

  std::uniform_int_distribution<std::size_t> n_cites(opt.min_cites, opt.max_cites);
  for (std::size_t i = 0; i < n_docs; ++i) {
    const std::size_t k = n_cites(rng);
    std::vector<std::size_t> cited;
    for (std::size_t attempt = 0; cited.size() < k && attempt < 50 * k; ++attempt) {
      const bool same = unit(rng) < homophily;
      std::size_t target;
      if (same) {
        const auto& pool = members[label[i]];
        target = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
      } else {
        std::size_t other = pick_class(rng);
        if (other == label[i]) continue;
        const auto& pool = members[other];
        target = pool[std::uniform_int_distribution<std::size_t>(0, pool.size() - 1)(rng)];
      }
      if (target == i || std::find(cited.begin(), cited.end(), target) != cited.end()) continue;
      cited.push_back(target);
    }
    std::sort(cited.begin(), cited.end());
    for (auto t : cited) w.relations.push_back({"cite", {i, t}});
  }

  for (std::size_t i = 0; i < n_docs; ++i) {
    const Split s = citation_split(i, n_docs);
    for (std::size_t c = 0; c < n_classes; ++c) {
      w.concepts.push_back({class_name(c), {i}, label[i] == c ? 1.0 : 0.0, s});
    }
  }
  for (std::size_t i = 0; i < n_docs; ++i) {
    const Split s = citation_split(i, n_docs);
    for (std::size_t c = 0; c < n_classes; ++c) {
      w.tasks.push_back({class_name(c), {i}, label[i] == c ? 1.0 : 0.0, s});
    }
  }
  ds.worlds.push_back(std::move(w));
  return ds;
}

// ---- countries --------------------------------------------------------------------------

/// Entity layout: countries c*, then regions r*, then continents k*.
/// Concepts locatedIn/2 and neighborOf/2 over all ordered pairs, except that
/// the continent links of held-out countries are unlabeled. Tasks are the
/// country-to-continent locatedIn atoms; held-out countries form the test split.
inline RelationalDataset gen_countries_toy(std::size_t n_countries, std::size_t n_regions, std::size_t n_continents,
                                           double missing_fraction, std::uint64_t seed) {
  if (n_countries < 4 || n_regions < 2 || n_continents < 1) {
    throw Error(ErrorCode::kInvalidCount, "hierarchy sizes must be at least (4, 2, 1)");
  }
  if (n_regions > n_countries || n_continents > n_regions) {
    throw Error(ErrorCode::kInvalidCount, "need countries >= regions >= continents");
  }
  if (!(missing_fraction >= 0.0 && missing_fraction < 1.0)) {
    throw Error(ErrorCode::kInvalidCount, "missing_fraction in [0, 1)");
  }
  Rng rng(seed);
  RelationalDataset ds;
  ds.name = "countries";
  ds.metric = "mrr";
  ds.schema = Schema({{"locatedIn", 2, PredicateKind::kConcept},
                      {"neighborOf", 2, PredicateKind::kConcept},
                      {"locatedIn", 2, PredicateKind::kTask}});

  // Round-robin assignment after a shuffle keeps every region and continent populated.
  std::vector<std::size_t> region_of(n_countries), continent_of(n_regions);
  for (std::size_t i = 0; i < n_countries; ++i) region_of[i] = i % n_regions;
  for (std::size_t r = 0; r < n_regions; ++r) continent_of[r] = r % n_continents;
  std::shuffle(region_of.begin(), region_of.end(), rng);
  std::shuffle(continent_of.begin(), continent_of.end(), rng);

  std::vector<std::size_t> order(n_countries);
  std::iota(order.begin(), order.end(), 0);
  std::shuffle(order.begin(), order.end(), rng);
  const auto n_missing = static_cast<std::size_t>(missing_fraction * static_cast<double>(n_countries) + 0.5);
  std::vector<char> held_out(n_countries, 0);
  for (std::size_t i = 0; i < n_missing; ++i) held_out[order[i]] = 1;

  World w;
  w.id = 0;
  w.split = Split::kTrain;
  // one-hot identities, so the entity embedder acts as a learned embedding table
  const std::size_t n_total = n_countries + n_regions + n_continents;
  auto features = [&](std::size_t i) {
    std::vector<double> x(n_total, 0.0);
    x[i] = 1.0;
    return x;
  };
  for (std::size_t i = 0; i < n_countries; ++i) w.add_entity("c" + std::to_string(i), features(i));
  for (std::size_t r = 0; r < n_regions; ++r) w.add_entity("r" + std::to_string(r), features(n_countries + r));
  for (std::size_t k = 0; k < n_continents; ++k) {
    w.add_entity("k" + std::to_string(k), features(n_countries + n_regions + k));
  }
  const std::size_t n = w.entities.size();
  const std::size_t r0 = n_countries, k0 = n_countries + n_regions;

  auto located = [&](std::size_t a, std::size_t b) {
    if (a < r0) {
      if (b >= r0 && b < k0) return region_of[a] == b - r0;
      if (b >= k0) return continent_of[region_of[a]] == b - k0;
      return false;
    }
    if (a < k0 && b >= k0) return continent_of[a - r0] == b - k0;
    return false;
  };
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      if (a < r0 && b >= k0 && held_out[a]) continue;
      w.concepts.push_back({"locatedIn", {a, b}, located(a, b) ? 1.0 : 0.0, {}});
    }
  }
  for (std::size_t a = 0; a < n; ++a) {
    for (std::size_t b = 0; b < n; ++b) {
      const bool nb = a != b && a < r0 && b < r0 && region_of[a] == region_of[b];
      w.concepts.push_back({"neighborOf", {a, b}, nb ? 1.0 : 0.0, {}});
    }
  }
  for (std::size_t c = 0; c < n_countries; ++c) {
    for (std::size_t k = k0; k < n; ++k) {
      w.tasks.push_back({"locatedIn", {c, k}, located(c, k) ? 1.0 : 0.0, held_out[c] ? Split::kTest : Split::kTrain});
    }
  }
  ds.worlds.push_back(std::move(w));
  return ds;
}

}  // namespace relcbm
