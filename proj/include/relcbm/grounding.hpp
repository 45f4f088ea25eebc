#pragma once

#include <algorithm>
#include <cstddef>
#include <map>
#include <set>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "relcbm/error.hpp"
#include "relcbm/logic.hpp"

namespace relcbm {

/// Known ground facts of relation predicates, indexed by entity position.
class FactSet {
 public:
  void add(const std::string& pred, std::vector<std::size_t> args) { facts_[pred].insert(std::move(args)); }

  bool contains(const std::string& pred, const std::vector<std::size_t>& args) const {
    auto it = facts_.find(pred);
    return it != facts_.end() && it->second.count(args) > 0;
  }

  std::size_t count(const std::string& pred) const {
    auto it = facts_.find(pred);
    return it == facts_.end() ? 0 : it->second.size();
  }

 private:
  std::map<std::string, std::set<std::vector<std::size_t>>> facts_;
};

/// Variable layout of a template: v̄ followed by ū, with every body and guard
/// argument resolved to its position in that layout.
struct VariableLayout {
  std::vector<std::string> vars;
  std::vector<std::vector<std::size_t>> body_args;
  std::vector<std::vector<std::size_t>> guard_args;

  explicit VariableLayout(const Template& t) {
    vars = t.head_vars;
    vars.insert(vars.end(), t.extra_vars.begin(), t.extra_vars.end());
    auto pos = [&](const std::string& v) {
      for (std::size_t i = 0; i < vars.size(); ++i) {
        if (vars[i] == v) return i;
      }
      throw Error(ErrorCode::kUnboundVariable, v);
    };
    for (const auto& a : t.body) {
      std::vector<std::size_t> p;
      for (const auto& term : a.args) p.push_back(pos(term.name));
      body_args.push_back(std::move(p));
    }
    for (const auto& a : t.guard.memberships) {
      std::vector<std::size_t> p;
      for (const auto& term : a.args) p.push_back(pos(term.name));
      guard_args.push_back(std::move(p));
    }
  }
};

struct GroundingSet {
  std::vector<std::string> vars;                   // ū
  std::vector<std::vector<std::size_t>> tuples;    // entity positions, one per u_i
  std::vector<std::string> universe;

  std::size_t size() const { return tuples.size(); }
  std::size_t universe_size() const { return universe.size(); }

  Substitution substitution(std::size_t i) const {
    Substitution s;
    for (std::size_t k = 0; k < vars.size(); ++k) s.bindings[vars[k]] = universe[tuples[i][k]];
    return s;
  }
  std::vector<Substitution> substitutions() const {
    std::vector<Substitution> out;
    out.reserve(size());
    for (std::size_t i = 0; i < size(); ++i) out.push_back(substitution(i));
    return out;
  }
};

namespace detail {

inline bool guard_allows(const Guard& guard, const VariableLayout& layout, const std::vector<std::size_t>& binding,
                         const FactSet* facts) {
  if (guard.distinct) {
    for (std::size_t i = 0; i < binding.size(); ++i) {
      for (std::size_t j = i + 1; j < binding.size(); ++j) {
        if (binding[i] == binding[j]) return false;
      }
    }
  }
  for (std::size_t m = 0; m < guard.memberships.size(); ++m) {
    if (!facts) return false;
    std::vector<std::size_t> args;
    for (auto p : layout.guard_args[m]) args.push_back(binding[p]);
    if (!facts->contains(guard.memberships[m].predicate, args)) return false;
  }
  return true;
}

}  // namespace detail

/// Enumerates ū-tuples in lexicographic order (u_1 most significant) over
/// entity positions 0..universe_size-1, keeping those accepted by `guard`.
inline std::vector<std::vector<std::size_t>> enumerate_grounding_tuples(const Template& t,
                                                                        std::size_t universe_size,
                                                                        std::span<const std::size_t> head,
                                                                        const Guard* guard,
                                                                        const FactSet* facts = nullptr) {
  const std::size_t w = t.width();
  if (head.size() != t.arity()) {
    throw Error(ErrorCode::kUnboundVariable, "head binding has " + std::to_string(head.size()) +
                                                 " entities, template arity is " + std::to_string(t.arity()));
  }
  if (w == 0) return {std::vector<std::size_t>{}};
  if (universe_size == 0) throw Error(ErrorCode::kEmptyUniverse, "template of width " + std::to_string(w));

  std::vector<std::vector<std::size_t>> out;
  const bool check = guard && !guard->empty();
  VariableLayout layout(t);
  std::vector<std::size_t> binding(head.begin(), head.end());
  binding.resize(t.arity() + w, 0);
  std::vector<std::size_t> digits(w, 0);
  while (true) {
    for (std::size_t k = 0; k < w; ++k) binding[t.arity() + k] = digits[k];
    if (!check || detail::guard_allows(*guard, layout, binding, facts)) out.push_back(digits);
    std::size_t k = w;
    while (k > 0) {
      --k;
      if (++digits[k] < universe_size) break;
      digits[k] = 0;
      if (k == 0) return out;
    }
  }
}

inline std::unordered_map<std::string, std::size_t> index_universe(const std::vector<std::string>& universe) {
  std::unordered_map<std::string, std::size_t> idx;
  for (std::size_t i = 0; i < universe.size(); ++i) idx.emplace(universe[i], i);
  return idx;
}

inline std::vector<std::size_t> resolve_head(const Template& t, const std::vector<std::string>& universe,
                                             const Substitution& head_binding) {
  auto idx = index_universe(universe);
  std::vector<std::size_t> head;
  for (const auto& v : t.head_vars) {
    auto id = head_binding.lookup(v);
    if (!id) throw Error(ErrorCode::kUnboundVariable, v);
    auto it = idx.find(*id);
    if (it == idx.end()) throw Error(ErrorCode::kUnknownAtom, "entity '" + *id + "' not in universe");
    head.push_back(it->second);
  }
  return head;
}

/// Θ for one head binding.
inline GroundingSet enumerate_substitutions(const Template& t, const std::vector<std::string>& universe,
                                            const Guard* guard, const Substitution& head_binding,
                                            const FactSet* facts = nullptr) {
  auto head = resolve_head(t, universe, head_binding);
  GroundingSet g;
  g.vars = t.extra_vars;
  g.universe = universe;
  g.tuples = enumerate_grounding_tuples(t, universe.size(), head, guard, facts);
  return g;
}

struct GroundedBody {
  Substitution theta;  // over ū only
  std::vector<Atom> atoms;
};

/// One row per element of Θ, each holding the p ground body atoms.
inline std::vector<GroundedBody> instantiate_bodies(const Template& t, const Substitution& head_binding,
                                                    const std::vector<std::string>& universe,
                                                    const Guard* guard, const FactSet* facts = nullptr) {
  GroundingSet g = enumerate_substitutions(t, universe, guard, head_binding, facts);
  std::vector<GroundedBody> out;
  out.reserve(g.size());
  for (std::size_t i = 0; i < g.size(); ++i) {
    GroundedBody row;
    row.theta = g.substitution(i);
    Substitution full = row.theta;
    for (const auto& [k, v] : head_binding.bindings) full.bindings[k] = v;
    row.atoms = apply_substitution(t.body, full);
    out.push_back(std::move(row));
  }
  return out;
}

/// Every concept predicate applied to every ordered tuple of entity slots,
/// ordered by predicate (schema order) then lexicographically by slot tuple.
/// Slots are positional: for a query, slot order is the head entities first,
/// then the remaining entities in universe order.
struct FlatLayout {
  std::vector<std::string> universe;
  std::vector<std::string> predicates;                 // per body atom
  std::vector<std::vector<std::size_t>> slots;         // per body atom

  std::size_t size() const { return slots.size(); }

  void check_universe(const std::vector<std::string>& other) const {
    if (other != universe) {
      throw Error(ErrorCode::kUniverseMismatch, "flat layout built on " + std::to_string(universe.size()) +
                                                    " entities, evaluated on " + std::to_string(other.size()));
    }
  }

  // Slot → entity position map for a query with the given head entities.
  std::vector<std::size_t> slot_order(std::span<const std::size_t> head) const {
    std::vector<std::size_t> order(head.begin(), head.end());
    for (std::size_t e = 0; e < universe.size(); ++e) {
      if (std::find(order.begin(), order.end(), e) == order.end()) order.push_back(e);
    }
    return order;
  }

  std::vector<Atom> ground(std::span<const std::size_t> head) const {
    auto order = slot_order(head);
    std::vector<Atom> out;
    out.reserve(size());
    for (std::size_t i = 0; i < size(); ++i) {
      Atom a{predicates[i], {}};
      for (auto s : slots[i]) a.args.push_back(Term::constant(universe[order[s]]));
      out.push_back(std::move(a));
    }
    return out;
  }
};

inline FlatLayout build_flat_template(const Schema& schema, const std::vector<std::string>& universe) {
  FlatLayout layout;
  layout.universe = universe;
  const std::size_t n = universe.size();
  for (const auto& c : schema.of_kind(PredicateKind::kConcept)) {
    std::vector<std::size_t> digits(static_cast<std::size_t>(c.arity), 0);
    if (n == 0) continue;
    while (true) {
      layout.predicates.push_back(c.name);
      layout.slots.push_back(digits);
      std::size_t k = digits.size();
      bool done = true;
      while (k > 0) {
        --k;
        if (++digits[k] < n) {
          done = false;
          break;
        }
        digits[k] = 0;
      }
      if (done) break;
    }
  }
  return layout;
}

}  // namespace relcbm
