#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <utility>
#include <vector>

#include "relcbm/error.hpp"

namespace relcbm {

// Relations are known ground facts (e.g. a citation edge list); they are never
// predicted and only appear in grounding guards.
enum class PredicateKind { kConcept, kTask, kRelation };

inline const char* to_string(PredicateKind kind) {
  switch (kind) {
    case PredicateKind::kConcept: return "concept";
    case PredicateKind::kTask: return "task";
    case PredicateKind::kRelation: return "relation";
  }
  return "?";
}

inline PredicateKind parse_kind(const std::string& s) {
  if (s == "concept") return PredicateKind::kConcept;
  if (s == "task") return PredicateKind::kTask;
  if (s == "relation") return PredicateKind::kRelation;
  throw Error(ErrorCode::kSchemaMismatch, "unknown predicate kind '" + s + "'");
}

struct PredicateSig {
  std::string name;
  int arity = 1;
  PredicateKind kind = PredicateKind::kConcept;

  bool operator==(const PredicateSig&) const = default;
};

/// Ordered collection of predicate signatures. A name may be reused across
/// kinds (a task and a concept may share a name) but is unique within a kind.
class Schema {
 public:
  Schema() = default;
  explicit Schema(std::vector<PredicateSig> preds) {
    for (auto& p : preds) add(std::move(p));
  }

  void add(PredicateSig sig) {
    if (sig.arity < 1) {
      throw Error(ErrorCode::kArityMismatch, "predicate '" + sig.name + "' must have arity >= 1");
    }
    if (find(sig.name, sig.kind)) {
      throw Error(ErrorCode::kSchemaMismatch, "duplicate " + std::string(to_string(sig.kind)) +
                                                  " predicate '" + sig.name + "'");
    }
    preds_.push_back(std::move(sig));
  }

  const PredicateSig* find(const std::string& name, PredicateKind kind) const {
    for (const auto& p : preds_) {
      if (p.name == name && p.kind == kind) return &p;
    }
    return nullptr;
  }

  // First signature with this name, preferring `preferred` when several kinds match.
  const PredicateSig* find_any(const std::string& name, PredicateKind preferred) const {
    if (const auto* p = find(name, preferred)) return p;
    for (const auto& p : preds_) {
      if (p.name == name) return &p;
    }
    return nullptr;
  }

  std::vector<PredicateSig> of_kind(PredicateKind kind) const {
    std::vector<PredicateSig> out;
    for (const auto& p : preds_) {
      if (p.kind == kind) out.push_back(p);
    }
    return out;
  }

  // Index of a concept predicate among concepts (schema order).
  std::optional<std::size_t> concept_index(const std::string& name) const {
    std::size_t i = 0;
    for (const auto& p : preds_) {
      if (p.kind != PredicateKind::kConcept) continue;
      if (p.name == name) return i;
      ++i;
    }
    return std::nullopt;
  }

  const std::vector<PredicateSig>& predicates() const { return preds_; }
  std::size_t size() const { return preds_.size(); }

  // Groups of mutually exclusive task predicates (multiclass tasks).
  std::vector<std::vector<std::string>> exclusive_groups;

  bool operator==(const Schema&) const = default;

 private:
  std::vector<PredicateSig> preds_;
};

struct Term {
  enum class Kind { kVar, kConst };
  Kind kind = Kind::kVar;
  std::string name;  // variable name or entity id

  static Term var(std::string n) { return Term{Kind::kVar, std::move(n)}; }
  static Term constant(std::string id) { return Term{Kind::kConst, std::move(id)}; }
  bool is_var() const { return kind == Kind::kVar; }

  bool operator==(const Term&) const = default;
  auto operator<=>(const Term&) const = default;
};

struct Atom {
  std::string predicate;
  std::vector<Term> args;

  bool is_ground() const {
    return std::none_of(args.begin(), args.end(), [](const Term& t) { return t.is_var(); });
  }

  bool operator==(const Atom&) const = default;
  auto operator<=>(const Atom&) const = default;
};

inline Atom make_atom(std::string pred, const std::vector<std::string>& vars) {
  Atom a{std::move(pred), {}};
  for (const auto& v : vars) a.args.push_back(Term::var(v));
  return a;
}

inline Atom make_ground_atom(std::string pred, const std::vector<std::string>& ids) {
  Atom a{std::move(pred), {}};
  for (const auto& v : ids) a.args.push_back(Term::constant(v));
  return a;
}

inline std::string to_string(const Atom& a) {
  std::string s = a.predicate + "(";
  for (std::size_t i = 0; i < a.args.size(); ++i) {
    if (i) s += ",";
    s += a.args[i].name;
  }
  return s + ")";
}

/// Guards prune the grounding set: `distinct` requires all template variables
/// to bind pairwise-distinct entities, each membership atom must be a known fact.
struct Guard {
  bool distinct = false;
  std::vector<Atom> memberships;

  bool empty() const { return !distinct && memberships.empty(); }
  bool operator==(const Guard&) const = default;
};

struct Template {
  Atom head;
  std::vector<std::string> head_vars;   // v̄
  std::vector<std::string> extra_vars;  // ū, first-appearance order in the body
  std::vector<Atom> body;
  Guard guard;

  std::size_t arity() const { return head_vars.size(); }
  std::size_t width() const { return extra_vars.size(); }
  std::size_t body_size() const { return body.size(); }

  bool operator==(const Template&) const = default;
};

inline std::string to_string(const Template& t) {
  std::string s = to_string(t.head) + " :- ";
  for (std::size_t i = 0; i < t.body.size(); ++i) {
    if (i) s += ", ";
    s += to_string(t.body[i]);
  }
  if (!t.guard.empty()) {
    s += " [";
    bool first = true;
    if (t.guard.distinct) {
      s += "distinct";
      first = false;
    }
    for (const auto& m : t.guard.memberships) {
      if (!first) s += ", ";
      s += to_string(m);
      first = false;
    }
    s += "]";
  }
  return s + ".";
}

struct Substitution {
  std::map<std::string, std::string> bindings;

  std::optional<std::string> lookup(const std::string& var) const {
    auto it = bindings.find(var);
    if (it == bindings.end()) return std::nullopt;
    return it->second;
  }
  bool operator==(const Substitution&) const = default;
};

inline std::string to_string(const Substitution& s) {
  std::string out = "{";
  bool first = true;
  for (const auto& [k, v] : s.bindings) {
    if (!first) out += ", ";
    out += k + "/" + v;
    first = false;
  }
  return out + "}";
}

/// Grounds every atom with θ. Constants pass through unchanged.
inline std::vector<Atom> apply_substitution(const std::vector<Atom>& atoms, const Substitution& theta) {
  std::vector<Atom> out;
  out.reserve(atoms.size());
  for (const auto& a : atoms) {
    Atom g{a.predicate, {}};
    g.args.reserve(a.args.size());
    for (const auto& t : a.args) {
      if (!t.is_var()) {
        g.args.push_back(t);
        continue;
      }
      auto bound = theta.lookup(t.name);
      if (!bound) throw Error(ErrorCode::kUnboundVariable, t.name);
      g.args.push_back(Term::constant(*bound));
    }
    out.push_back(std::move(g));
  }
  return out;
}

}  // namespace relcbm
