#pragma once

#include <algorithm>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "relcbm/error.hpp"
#include "relcbm/grounding.hpp"
#include "relcbm/logic.hpp"
#include "relcbm/nn.hpp"
#include "relcbm/tensor.hpp"

namespace relcbm {

enum class AggregatorKind { kMax, kMin };

inline const char* to_string(AggregatorKind a) { return a == AggregatorKind::kMax ? "max" : "min"; }

inline AggregatorKind parse_aggregator(const std::string& s) {
  if (s == "max") return AggregatorKind::kMax;
  if (s == "min") return AggregatorKind::kMin;
  throw Error(ErrorCode::kSchemaMismatch, "unknown aggregator '" + s + "'");
}

inline double aggregate(AggregatorKind agg, const std::vector<double>& scores) {
  if (scores.empty()) throw Error(ErrorCode::kEmptyGroundingSet, "aggregate over no groundings");
  return agg == AggregatorKind::kMax ? *std::max_element(scores.begin(), scores.end())
                                     : *std::min_element(scores.begin(), scores.end());
}

/// ⊕ over a 1-D tensor of per-grounding scores; gradient flows to the selected element.
inline ad::Tensor aggregate(AggregatorKind agg, const ad::Tensor& scores) {
  if (scores.size() == 0) throw Error(ErrorCode::kEmptyGroundingSet, "aggregate over no groundings");
  auto flat = ad::reshape(scores, {scores.size()});
  return agg == AggregatorKind::kMax ? ad::max_reduce(flat, 0) : ad::min_reduce(flat, 0);
}

/// ⊕ over consecutive groups of groundings, one group per query.
inline ad::Tensor aggregate_segments(AggregatorKind agg, const ad::Tensor& scores,
                                     const std::vector<std::size_t>& offsets) {
  return ad::segment_reduce(scores, offsets, agg == AggregatorKind::kMax);
}

// ---- per-grounding predictors --------------------------------------------------------------

/// σ(b·W + w0).
struct LinearPredictor {
  Dense linear;

  LinearPredictor() = default;
  LinearPredictor(ParameterStore& store, const std::string& name, std::size_t p, double init_sign, Rng& rng) {
    // weights start at init_sign * U(0.5, 0.6)
    std::uniform_real_distribution<double> u(0.5, 0.6);
    std::vector<double> w(p);
    for (auto& x : w) x = init_sign * u(rng);
    linear.weight = store.create(name + ".w", {p, 1}, std::move(w));
    linear.bias = store.create_bias(name + ".b", 1);
  }

  std::size_t inputs() const { return linear.in(); }

  ad::Tensor operator()(const ad::Tensor& body) const {
    if (body.cols() != inputs()) throw Error(ErrorCode::kDimMismatch, "linear predictor over " + ad::shape_str(body.shape()));
    auto z = ad::sigmoid(linear(body));
    return ad::reshape(z, {z.rows()});
  }
};

/// MLP(p → hidden → 1) with a sigmoid output.
struct DeepPredictor {
  Mlp mlp;

  DeepPredictor() = default;
  DeepPredictor(ParameterStore& store, const std::string& name, std::size_t p, std::size_t hidden, Rng& rng)
      : mlp(store, name, {p, hidden, 1}, rng) {}

  std::size_t inputs() const { return mlp.in(); }

  ad::Tensor operator()(const ad::Tensor& body) const {
    if (body.cols() != inputs()) throw Error(ErrorCode::kDimMismatch, "deep predictor over " + ad::shape_str(body.shape()));
    auto z = ad::sigmoid(mlp(body));
    return ad::reshape(z, {z.rows()});
  }
};

struct RuleTensors {
  ad::Tensor relevance;  // G × p
  ad::Tensor polarity;   // G × p
};

/// xnor(a, b) = a·b + (1−a)·(1−b).
inline ad::Tensor fuzzy_xnor(const ad::Tensor& a, const ad::Tensor& b) {
  return ad::add(ad::mul(a, b), ad::mul(ad::one_minus(a), ad::one_minus(b)));
}

/// min_q max(1 − r_q, xnor(s_q, c_q)) row by row; all inputs are G × p.
inline ad::Tensor dcr_evaluate_rule(const ad::Tensor& r, const ad::Tensor& s, const ad::Tensor& c) {
  if (r.shape() != s.shape() || r.shape() != c.shape()) {
    throw Error(ErrorCode::kDimMismatch, "rule evaluation on " + ad::shape_str(r.shape()) + ", " +
                                             ad::shape_str(s.shape()) + ", " + ad::shape_str(c.shape()));
  }
  auto lit = ad::maximum(ad::one_minus(r), fuzzy_xnor(s, c));
  return ad::min_reduce(lit, lit.dim() - 1);
}

inline double dcr_evaluate_rule(const std::vector<double>& r, const std::vector<double>& s,
                                const std::vector<double>& c) {
  if (r.size() != s.size() || r.size() != c.size() || r.empty()) {
    throw Error(ErrorCode::kDimMismatch, "rule evaluation needs equal nonempty lengths");
  }
  double out = 1.0;
  for (std::size_t q = 0; q < r.size(); ++q) {
    const double x = s[q] * c[q] + (1.0 - s[q]) * (1.0 - c[q]);
    out = std::min(out, std::max(1.0 - r[q], x));
  }
  return out;
}

/// Relevance and polarity heads read the concatenated embeddings of all p body
/// atoms of a grounding and emit one value per body position.
struct DcrPredictor {
  Dense relevance;
  Dense polarity;
  std::size_t positions = 0;
  std::size_t embed_dim = 0;

  DcrPredictor() = default;
  DcrPredictor(ParameterStore& store, const std::string& name, std::size_t p, std::size_t h, double relevance_bias,
               Rng& rng)
      : positions(p), embed_dim(h) {
    // relevance starts uniform at sigmoid(relevance_bias)
    relevance.weight = store.create(name + ".r.w", {p * h, p}, std::vector<double>(p * h * p, 0.0));
    relevance.bias = store.create_bias(name + ".r.b", p, relevance_bias);
    polarity.weight = store.create_weight(name + ".s.w", p * h, p, rng);
    polarity.bias = store.create_bias(name + ".s.b", p);
  }

  RuleTensors generate(const ad::Tensor& embeddings) const {
    if (embeddings.dim() != 2 || embeddings.cols() != positions * embed_dim) {
      throw Error(ErrorCode::kDimMismatch, "rule generator expects " + std::to_string(positions) + " embeddings of " +
                                               std::to_string(embed_dim) + ", got " +
                                               ad::shape_str(embeddings.shape()));
    }
    return {ad::sigmoid(relevance(embeddings)), ad::sigmoid(polarity(embeddings))};
  }
};

/// Linear map over the fixed flat layout of all concept atoms.
struct FlatPredictor {
  Dense linear;

  FlatPredictor() = default;
  FlatPredictor(ParameterStore& store, const std::string& name, std::size_t layout_size, Rng& rng)
      : linear(store, name, layout_size, 1, rng) {}

  ad::Tensor operator()(const ad::Tensor& atoms) const {
    if (atoms.cols() != linear.in()) throw Error(ErrorCode::kDimMismatch, "flat predictor over " + ad::shape_str(atoms.shape()));
    auto z = ad::sigmoid(linear(atoms));
    return ad::reshape(z, {z.rows()});
  }
};

enum class PredictorKind { kLinear, kDeep, kDcr, kFlat };

/// One task predictor f_j; exactly one member is populated according to `kind`.
struct TaskPredictor {
  PredictorKind kind = PredictorKind::kLinear;
  LinearPredictor linear;
  DeepPredictor deep;
  DcrPredictor dcr;
  FlatPredictor flat;

  std::size_t inputs() const {
    switch (kind) {
      case PredictorKind::kLinear: return linear.inputs();
      case PredictorKind::kDeep: return deep.inputs();
      case PredictorKind::kDcr: return dcr.positions;
      case PredictorKind::kFlat: return flat.linear.in();
    }
    return 0;
  }
};

/// f on a single grounding given its p body scores (and, for DCR, p embeddings of size h).
inline double predict_grounding(const TaskPredictor& f, const std::vector<double>& body_scores,
                                const std::optional<std::vector<std::vector<double>>>& body_embeddings = std::nullopt) {
  if (body_scores.size() != f.inputs()) {
    throw Error(ErrorCode::kDimMismatch, "predictor expects " + std::to_string(f.inputs()) + " body scores, got " +
                                             std::to_string(body_scores.size()));
  }
  auto b = ad::Tensor::matrix(1, body_scores.size(), body_scores);
  switch (f.kind) {
    case PredictorKind::kLinear: return f.linear(b).item();
    case PredictorKind::kDeep: return f.deep(b).item();
    case PredictorKind::kFlat: return f.flat(b).item();
    case PredictorKind::kDcr: {
      if (!body_embeddings) throw Error(ErrorCode::kMissingEmbeddings, "DCR needs body embeddings");
      if (body_embeddings->size() != body_scores.size()) {
        throw Error(ErrorCode::kDimMismatch, "one embedding per body position expected");
      }
      std::vector<double> flat;
      for (const auto& e : *body_embeddings) flat.insert(flat.end(), e.begin(), e.end());
      auto rule = f.dcr.generate(ad::Tensor::matrix(1, flat.size(), flat));
      return dcr_evaluate_rule(rule.relevance, rule.polarity, b).item();
    }
  }
  return 0.0;
}

/// (r, s) for one grounding from its p body embeddings.
inline std::pair<std::vector<double>, std::vector<double>> dcr_generate_rule(
    const DcrPredictor& dcr, const std::vector<std::vector<double>>& body_embeddings) {
  if (body_embeddings.size() != dcr.positions) {
    throw Error(ErrorCode::kDimMismatch, "expected " + std::to_string(dcr.positions) + " embeddings, got " +
                                             std::to_string(body_embeddings.size()));
  }
  std::vector<double> flat;
  for (const auto& e : body_embeddings) {
    if (e.size() != dcr.embed_dim) throw Error(ErrorCode::kDimMismatch, "embedding size " + std::to_string(e.size()));
    flat.insert(flat.end(), e.begin(), e.end());
  }
  auto rule = dcr.generate(ad::Tensor::matrix(1, flat.size(), flat));
  return {{rule.relevance.data().begin(), rule.relevance.data().end()},
          {rule.polarity.data().begin(), rule.polarity.data().end()}};
}

// ---- rules ----------------------------------------------------------------------------------

struct Literal {
  Atom atom;  // over template variables
  bool positive = true;
  std::size_t position = 0;  // index into the template body

  bool operator==(const Literal&) const = default;
};

struct ExtractedRule {
  Atom head;
  std::vector<std::string> head_vars;
  std::vector<std::string> extra_vars;
  std::vector<Literal> literals;
  Guard guard;
  // Provenance: the ground query, the grounding selected by ⊕, and its score.
  Atom query;
  Substitution theta;
  double score = 0.0;
  std::vector<double> relevance;  // per body position, before thresholding
  std::vector<double> polarity;

  std::set<std::string> literal_set() const {
    std::set<std::string> out;
    for (const auto& l : literals) out.insert((l.positive ? "" : "~") + to_string(l.atom));
    return out;
  }
};

/// `forall v exists u: head :- lit, ~lit [guard].`
inline std::string to_string(const ExtractedRule& r) {
  std::string s = "forall";
  for (const auto& v : r.head_vars) s += " " + v;
  if (!r.extra_vars.empty()) {
    s += " exists";
    for (const auto& u : r.extra_vars) s += " " + u;
  }
  s += ": " + to_string(r.head) + " :- ";
  if (r.literals.empty()) s += "true";
  for (std::size_t i = 0; i < r.literals.size(); ++i) {
    if (i) s += ", ";
    s += (r.literals[i].positive ? "" : "~") + to_string(r.literals[i].atom);
  }
  if (!r.guard.empty()) {
    s += " [";
    bool first = true;
    if (r.guard.distinct) {
      s += "distinct";
      first = false;
    }
    for (const auto& m : r.guard.memberships) {
      if (!first) s += ", ";
      s += to_string(m);
      first = false;
    }
    s += "]";
  }
  return s + ".";
}

/// Crisp rule from one grounding's (r, s): literal q kept iff r_q > threshold,
/// positive iff s_q > threshold (both strict).
inline ExtractedRule crisp_rule(const Template& t, const std::vector<double>& r, const std::vector<double>& s,
                                double threshold = 0.5) {
  ExtractedRule rule;
  rule.relevance = r;
  rule.polarity = s;
  rule.head = t.head;
  rule.head_vars = t.head_vars;
  rule.extra_vars = t.extra_vars;
  rule.guard = t.guard;
  for (std::size_t q = 0; q < t.body.size(); ++q) {
    if (r.at(q) > threshold) rule.literals.push_back({t.body[q], s.at(q) > threshold, q});
  }
  return rule;
}

}  // namespace relcbm
