#pragma once

// Exhaustive and randomized property checks used by the test suite, the
// acceptance binary and `relcbm gradcheck`. Each returns a pass flag and a detail line.

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <random>
#include <string>
#include <vector>

#include "relcbm/generators.hpp"
#include "relcbm/loss.hpp"
#include "relcbm/model.hpp"
#include "relcbm/template_parser.hpp"

namespace relcbm::props {

struct Result {
  bool passed = true;
  std::string detail;
};

inline Result fail(std::string why) { return {false, std::move(why)}; }

/// |Θ| = |X|^w for |X| ≤ 5, w ≤ 3, tuples distinct and lexicographic.
inline Result grounding_counts() {
  Schema s({{"c", 1, PredicateKind::kConcept}, {"y", 1, PredicateKind::kTask}});
  std::size_t cases = 0;
  for (std::size_t w = 0; w <= 3; ++w) {
    std::string body = "c(v)";
    for (std::size_t k = 1; k <= w; ++k) body += ", c(u" + std::to_string(k) + ")";
    auto t = parse_template("y(v) :- " + body + ".", s);
    for (std::size_t n = 1; n <= 5; ++n) {
      for (std::size_t v = 0; v < n; ++v) {
        const std::vector<std::size_t> head{v};
        auto g = enumerate_grounding_tuples(t, n, head, nullptr);
        const auto expected = static_cast<std::size_t>(std::pow(n, w));
        if (g.size() != expected) {
          return fail("n=" + std::to_string(n) + " w=" + std::to_string(w) + ": " + std::to_string(g.size()));
        }
        if (!std::is_sorted(g.begin(), g.end()) || std::adjacent_find(g.begin(), g.end()) != g.end()) {
          return fail("tuples not strictly lexicographic at n=" + std::to_string(n));
        }
        ++cases;
      }
    }
  }
  return {true, std::to_string(cases) + " (|X|, w, v) cases"};
}

/// ⊕ is invariant under permutation and monotone in every argument.
inline Result aggregation(std::uint64_t seed = 1) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::size_t cases = 0;
  for (auto agg : {AggregatorKind::kMax, AggregatorKind::kMin}) {
    for (int rep = 0; rep < 300; ++rep) {
      std::vector<double> x(1 + rep % 7);
      for (auto& v : x) v = u(rng);
      const double base = aggregate(agg, x);
      auto p = x;
      for (int k = 0; k < 5; ++k) {
        std::shuffle(p.begin(), p.end(), rng);
        if (aggregate(agg, p) != base) return fail(std::string(to_string(agg)) + " not permutation invariant");
        const auto t = aggregate(agg, ad::Tensor::vector(p));
        if (t.item() != base) return fail(std::string(to_string(agg)) + " tensor form differs");
      }
      for (std::size_t i = 0; i < x.size(); ++i) {
        auto up = x;
        up[i] += u(rng);
        if (aggregate(agg, up) < base) return fail(std::string(to_string(agg)) + " not monotone");
      }
      ++cases;
    }
  }
  return {true, std::to_string(cases) + " random vectors"};
}

/// Crisp DCR evaluation equals the boolean conjunction of relevant literals for p ≤ 4.
inline Result dcr_boolean() {
  std::size_t cases = 0;
  for (std::size_t p = 1; p <= 4; ++p) {
    const std::size_t n = std::size_t{1} << p;
    for (std::size_t rm = 0; rm < n; ++rm) {
      for (std::size_t sm = 0; sm < n; ++sm) {
        for (std::size_t cm = 0; cm < n; ++cm) {
          std::vector<double> r(p), s(p), c(p);
          bool truth = true;
          for (std::size_t q = 0; q < p; ++q) {
            r[q] = (rm >> q) & 1;
            s[q] = (sm >> q) & 1;
            c[q] = (cm >> q) & 1;
            if (r[q] == 1.0) truth = truth && (s[q] == c[q]);
          }
          const double v = dcr_evaluate_rule(r, s, c);
          const double tv = dcr_evaluate_rule(ad::Tensor::matrix(1, p, r), ad::Tensor::matrix(1, p, s),
                                              ad::Tensor::matrix(1, p, c))
                                .item();
          if (v != (truth ? 1.0 : 0.0) || tv != v) return fail("p=" + std::to_string(p) + " disagrees");
          ++cases;
        }
      }
    }
  }
  return {true, std::to_string(cases) + " assignments"};
}

/// Reverse-mode gradients agree with central differences to 1e-4 relative error.
inline Result autodiff(std::uint64_t seed = 3) {
  Rng rng(seed);
  std::uniform_real_distribution<double> u(-1.0, 1.0), pos(0.05, 0.95);
  auto draw = [&](ad::Shape shape, auto& dist) {
    std::vector<double> v(ad::numel(shape));
    for (auto& x : v) x = dist(rng);
    return ad::Tensor(std::move(shape), std::move(v));
  };
  ParameterStore store;
  Mlp mlp(store, "m", {5, 7, 3}, rng);
  LinearPredictor lin(store, "lin", 4, 1.0, rng);
  const auto r = draw({5, 4}, pos), s = draw({5, 4}, pos);
  const auto target = ad::Tensor::vector({1, 0, 1, 1, 0});
  using Fn = std::function<ad::Tensor(const ad::Tensor&)>;
  const std::vector<std::pair<std::string, Fn>> fs{
      {"mlp", [&](const ad::Tensor& x) { return ad::sum_all(ad::tanh(mlp(ad::reshape(x, {4, 5})))); }},
      {"softmax-ce",
       [&](const ad::Tensor& x) { return ad::ce_loss(ad::softmax(ad::reshape(x, {5, 4})), {0, 1, 2, 3, 1}); }},
      {"linear-bce", [&](const ad::Tensor& x) { return ad::bce_loss(lin(ad::reshape(x, {5, 4})), target); }},
      {"dcr", [&](const ad::Tensor& x) { return ad::sum_all(dcr_evaluate_rule(r, s, ad::sigmoid(ad::reshape(x, {5, 4})))); }},
      {"segments",
       [&](const ad::Tensor& x) {
         return ad::sum_all(aggregate_segments(AggregatorKind::kMax, ad::sigmoid(x), {0, 3, 9, 20}));
       }},
  };
  double worst = 0.0;
  std::size_t checked = 0;
  for (const auto& [name, f] : fs) {
    for (int rep = 0; rep < 3; ++rep) {
      auto report = gradient_check(f, draw({20}, u), 1e-4);
      if (report.non_differentiable) continue;
      worst = std::max(worst, report.max_relative_error);
      checked += report.checked;
      if (!report.passed) return fail(name + ": relative error " + std::to_string(report.max_relative_error));
    }
  }
  char buf[96];
  std::snprintf(buf, sizeof buf, "%zu coordinates, max relative error %.2e", checked, worst);
  return {true, buf};
}

namespace detail {

inline std::map<std::vector<std::size_t>, double> labels_of(const std::vector<LabeledAtom>& atoms,
                                                            const std::string& pred) {
  std::map<std::vector<std::size_t>, double> out;
  for (const auto& a : atoms) {
    if (a.pred == pred) out[a.args] = a.y;
  }
  return out;
}

inline double get(const std::map<std::vector<std::size_t>, double>& m, std::vector<std::size_t> k) {
  auto it = m.find(k);
  return it == m.end() ? 0.0 : it->second;
}

}  // namespace detail

/// Task labels of every generator are re-derived from its concept labels by the ground-truth rule.
inline Result oracle_consistency(std::uint64_t seed = 5) {
  std::size_t checked = 0;
  for (std::size_t disks = 2; disks <= 7; ++disks) {
    for (const auto& w : gen_hanoi(30, disks, seed + disks).worlds) {
      auto larger = detail::labels_of(w.concepts, "larger");
      auto top = detail::labels_of(w.concepts, "top");
      for (const auto& t : w.tasks) {
        const auto v = t.args[0];
        bool ok = true;
        for (std::size_t u = 0; u < w.entities.size(); ++u) {
          if (detail::get(top, {v, u}) == 1.0 && detail::get(larger, {u, v}) != 1.0) ok = false;
          if (detail::get(top, {u, v}) == 1.0 && detail::get(larger, {v, u}) != 1.0) ok = false;
        }
        if (t.y != (ok ? 1.0 : 0.0)) return fail("hanoi world " + std::to_string(w.id));
        ++checked;
      }
    }
  }
  for (const auto& w : gen_rps(100, seed).worlds) {
    std::size_t sign[2] = {0, 0};
    for (const auto& c : w.concepts) {
      for (int s = 0; s < 3; ++s) {
        if (c.y == 1.0 && c.pred == sign_name(static_cast<Sign>(s))) sign[c.args[0]] = static_cast<std::size_t>(s);
      }
    }
    for (const auto& t : w.tasks) {
      const auto a = sign[t.args[0]], b = sign[1 - t.args[0]];
      // paper(1) beats rock(0), scissors(2) beats paper(1), rock(0) beats scissors(2)
      const bool win = (a + 3 - b) % 3 == 1, tie = a == b;
      const bool expected = t.pred == "wins" ? win : t.pred == "ties" ? tie : (!win && !tie);
      if (t.y != (expected ? 1.0 : 0.0)) return fail("rps world " + std::to_string(w.id));
      ++checked;
    }
  }
  auto two_hop = [&](const World& w, const std::string& rel, const std::vector<LabeledAtom>& tasks,
                     const std::string& what) -> Result {
    auto c = detail::labels_of(w.concepts, rel);
    for (const auto& t : tasks) {
      bool hop = false;
      for (std::size_t u = 0; u < w.entities.size() && !hop; ++u) {
        hop = detail::get(c, {t.args[0], u}) == 1.0 && detail::get(c, {u, t.args[1]}) == 1.0;
      }
      if (t.y != (hop ? 1.0 : 0.0)) return fail(what + " world " + std::to_string(w.id));
      ++checked;
    }
    return {};
  };
  for (const auto& w : gen_family(20, 4, seed).worlds) {
    if (auto r = two_hop(w, "parent", w.tasks, "family"); !r.passed) return r;
  }
  {
    const auto ds = gen_countries_toy(24, 8, 4, 0.25, seed);
    if (auto r = two_hop(ds.worlds[0], "locatedIn", ds.worlds[0].tasks, "countries"); !r.passed) return r;
  }
  {
    const auto ds = gen_citation_toy(120, 4, 0.8, seed);
    const auto& w = ds.worlds[0];
    for (const auto& t : w.tasks) {
      if (detail::get(detail::labels_of(w.concepts, t.pred), t.args) != t.y) return fail("citation doc");
      ++checked;
    }
  }
  return {true, std::to_string(checked) + " task labels across five generators"};
}

/// A width-0 unary template reproduces the plain CBM prediction bit for bit.
inline Result subsumption(std::uint64_t seed = 2) {
  auto ds = gen_rps(30, seed);
  std::vector<Template> ts;
  for (const auto& task : ds.schema.of_kind(PredicateKind::kTask)) {
    ts.push_back(parse_template(task.name + "(v) :- rock(v), paper(v), scissors(v).", ds.schema));
  }
  const std::pair<ModelKind, ModelKind> pairs[] = {{ModelKind::kRCbmLinear, ModelKind::kCbmLinear},
                                                   {ModelKind::kRCbmDeep, ModelKind::kCbmDeep},
                                                   {ModelKind::kRDcr, ModelKind::kDcr}};
  std::size_t compared = 0;
  for (auto [rel_kind, plain_kind] : pairs) {
    Model rel(ds.schema, ds.feature_dim(), ts, {.kind = rel_kind, .seed = seed});
    Model plain(ds.schema, ds.feature_dim(), {}, {.kind = plain_kind, .seed = seed});
    const PlanOptions all{{Split::kTrain, Split::kVal, Split::kTest}, false};
    auto a = rel.forward(rel.compile(ds, all));
    auto b = plain.forward(plain.compile(ds, all));
    for (std::size_t j = 0; j < a.task_scores.size(); ++j) {
      const auto x = a.task_scores[j].data();
      const auto y = b.task_scores[j].data();
      if (!std::equal(x.begin(), x.end(), y.begin(), y.end())) {
        return fail(std::string(to_string(rel_kind)) + " differs from " + to_string(plain_kind));
      }
      compared += x.size();
    }
  }
  return {true, std::to_string(compared) + " predictions identical across three model pairs"};
}

struct Named {
  std::string name;
  std::function<Result()> run;
};

inline std::vector<Named> all() {
  return {{"grounding counts", [] { return grounding_counts(); }},
          {"aggregation invariance", [] { return aggregation(); }},
          {"dcr boolean semantics", [] { return dcr_boolean(); }},
          {"autodiff vs finite differences", [] { return autodiff(); }},
          {"oracle self-consistency", [] { return oracle_consistency(); }},
          {"width-0 subsumption", [] { return subsumption(); }}};
}

}  // namespace relcbm::props
