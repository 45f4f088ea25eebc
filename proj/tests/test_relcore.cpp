#include <gtest/gtest.h>

#include <algorithm>
#include <sstream>

#include "relcbm/grounding.hpp"
#include "relcbm/template_parser.hpp"
#include "test_util.hpp"

using namespace relcbm;

namespace {

Schema family() {
  return Schema({{"parent", 2, PredicateKind::kConcept},
                 {"grandparent", 2, PredicateKind::kTask},
                 {"cite", 2, PredicateKind::kRelation}});
}

Schema toy() {
  return Schema({{"c1", 1, PredicateKind::kConcept},
                 {"c2", 1, PredicateKind::kConcept},
                 {"c", 2, PredicateKind::kConcept},
                 {"y", 1, PredicateKind::kTask},
                 {"cite", 2, PredicateKind::kRelation}});
}

Schema toy2() {
  return Schema({{"c1", 1, PredicateKind::kConcept}, {"c", 2, PredicateKind::kConcept}, {"y", 2, PredicateKind::kTask}});
}

Template grandparent() {
  return parse_template("grandparent(v1,v2) :- parent(v1,u), parent(u,v2).", family());
}

Substitution bind(std::initializer_list<std::pair<std::string, std::string>> kv) {
  Substitution s;
  for (const auto& [k, v] : kv) s.bindings[k] = v;
  return s;
}

std::vector<std::string> universe(std::size_t n) {
  std::vector<std::string> u;
  for (std::size_t i = 0; i < n; ++i) u.push_back("e" + std::to_string(i));
  return u;
}

std::size_t ipow(std::size_t b, std::size_t e) {
  std::size_t r = 1;
  while (e--) r *= b;
  return r;
}

}  // namespace

TEST(Parse, GrandparentShape) {
  auto t = grandparent();
  EXPECT_EQ(t.arity(), 2u);
  EXPECT_EQ(t.width(), 1u);
  EXPECT_EQ(t.body_size(), 2u);
  EXPECT_EQ(t.extra_vars, std::vector<std::string>{"u"});
}

TEST(Parse, PlainCbmTemplateHasNoExtraVariables) {
  auto t = parse_template("y(v) :- c1(v), c2(v).", toy());
  EXPECT_EQ(t.arity(), 1u);
  EXPECT_EQ(t.width(), 0u);
  EXPECT_EQ(t.body_size(), 2u);
}

TEST(Parse, ExtraVariablesInFirstAppearanceOrder) {
  auto t = parse_template("y(v1,v2) :- c(v1,v3), c(v3,v4).", toy2());
  EXPECT_EQ(t.width(), 2u);
  EXPECT_EQ(t.extra_vars, (std::vector<std::string>{"v3", "v4"}));
}

TEST(Parse, Errors) {
  EXPECT_CODE(parse_template("y(v) :- nope(v).", toy()), ErrorCode::kUnknownPredicate);
  EXPECT_CODE(parse_template("y(v) :- c1(v,v).", toy()), ErrorCode::kArityMismatch);
  EXPECT_CODE(parse_template("y(v,v) :- c(v,v).", toy2()), ErrorCode::kDuplicateHeadVariable);
  EXPECT_CODE(parse_template("y(v) :- .", toy()), ErrorCode::kEmptyBody);
  EXPECT_CODE(parse_template("y(v) :- c1(v)", toy()), ErrorCode::kParseError);
}

TEST(Parse, ErrorNamesPosition) {
  try {
    parse_template("y(v) :- c1(v), nope(v).", toy());
    FAIL();
  } catch (const Error& e) {
    EXPECT_NE(std::string(e.what()).find("position 15"), std::string::npos) << e.what();
  }
}

TEST(Parse, Guards) {
  auto t = parse_template("y(v) :- c1(u), c2(u) [cite(v,u)].", toy());
  ASSERT_EQ(t.guard.memberships.size(), 1u);
  EXPECT_FALSE(t.guard.distinct);
  auto d = parse_template("y(v1,v2) :- c(v1,u), c(u,v2) [distinct].", toy2());
  EXPECT_TRUE(d.guard.distinct);
}

TEST(Parse, RoundTrip) {
  for (const char* text : {"grandparent(v1,v2) :- parent(v1,u), parent(u,v2).",
                           "grandparent(v1,v2) :- parent(v1,u), parent(u,v2), parent(u,u) [distinct, cite(v1,u)]."}) {
    auto t = parse_template(text, family());
    EXPECT_EQ(parse_template(to_string(t), family()), t) << to_string(t);
  }
}

TEST(Parse, FileSkipsCommentsAndReportsLine) {
  std::istringstream ok("# header\n\ny(v) :- c1(v).  # trailing\ny(v) :- c(v,u).\n");
  EXPECT_EQ(parse_template_file(ok, toy()).size(), 2u);
  std::istringstream bad("y(v) :- c1(v).\ny(v) :- zz(v).\n");
  try {
    parse_template_file(bad, toy());
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kUnknownPredicate);
    EXPECT_NE(std::string(e.what()).find("line 2"), std::string::npos);
  }
}

TEST(Validate, ValidTemplateHasNoViolations) { EXPECT_TRUE(validate_template(grandparent(), family()).empty()); }

TEST(Validate, DuplicateHeadVariable) {
  auto t = grandparent();
  t.head.args[1] = Term::var("v1");
  t.head_vars[1] = "v1";
  auto v = validate_template(t, family());
  ASSERT_FALSE(v.empty());
  EXPECT_TRUE(std::any_of(v.begin(), v.end(), [](auto& x) { return x.kind == ViolationKind::kDuplicateHeadVariable; }));
}

TEST(Validate, TaskInBody) {
  auto t = grandparent();
  t.body[0].predicate = "grandparent";
  auto v = validate_template(t, family());
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].kind, ViolationKind::kNonConceptBody);
}

TEST(Validate, EmptyBody) {
  auto t = grandparent();
  t.body.clear();
  t.extra_vars.clear();
  auto v = validate_template(t, family());
  ASSERT_EQ(v.size(), 1u);
  EXPECT_EQ(v[0].kind, ViolationKind::kEmptyBody);
}

TEST(Substitute, GroundsAtoms) {
  std::vector<Atom> atoms{make_atom("parent", {"v1", "v2"}), make_atom("parent", {"v2", "v3"})};
  auto out = apply_substitution(atoms, bind({{"v1", "Abe"}, {"v2", "Homer"}, {"v3", "Bart"}}));
  ASSERT_EQ(out.size(), 2u);
  EXPECT_EQ(to_string(out[0]), "parent(Abe,Homer)");
  EXPECT_EQ(to_string(out[1]), "parent(Homer,Bart)");
  for (const auto& a : out) EXPECT_TRUE(a.is_ground());
}

TEST(Substitute, EmptyAndGroundInputs) {
  EXPECT_TRUE(apply_substitution({}, bind({{"v", "x"}})).empty());
  std::vector<Atom> ground{make_ground_atom("parent", {"Abe", "Homer"})};
  EXPECT_EQ(apply_substitution(ground, {}), ground);
}

TEST(Substitute, Unbound) {
  EXPECT_CODE(apply_substitution({make_atom("parent", {"v1", "u"})}, bind({{"v1", "Abe"}})),
              ErrorCode::kUnboundVariable);
}

TEST(Grounding, SimpsonsTheta) {
  std::vector<std::string> x{"Abe", "Homer", "Bart"};
  auto g = enumerate_substitutions(grandparent(), x, nullptr, bind({{"v1", "Abe"}, {"v2", "Bart"}}));
  ASSERT_EQ(g.size(), 3u);
  EXPECT_EQ(to_string(g.substitution(0)), "{u/Abe}");
  EXPECT_EQ(to_string(g.substitution(1)), "{u/Homer}");
  EXPECT_EQ(to_string(g.substitution(2)), "{u/Bart}");
}

TEST(Grounding, CountWithoutGuard) {
  auto t = parse_template("y(v1,v2) :- c(v1,v3), c(v3,v4).", toy2());
  auto g = enumerate_substitutions(t, universe(3), nullptr, bind({{"v1", "e0"}, {"v2", "e1"}}));
  EXPECT_EQ(g.size(), 9u);
}

TEST(Grounding, DistinctGuardMatchesFilterOracle) {
  auto t = parse_template("y(v) :- c(v,u1), c(u1,u2) [distinct].", toy());
  const auto x = universe(3);
  auto g = enumerate_substitutions(t, x, &t.guard, bind({{"v", "e1"}}));
  std::vector<std::vector<std::size_t>> oracle;
  for (std::size_t a = 0; a < 3; ++a) {
    for (std::size_t b = 0; b < 3; ++b) {
      if (a != b && a != 1 && b != 1) oracle.push_back({a, b});
    }
  }
  EXPECT_EQ(g.tuples, oracle);
}

TEST(Grounding, MembershipGuard) {
  auto t = parse_template("y(v) :- c1(u), c2(u) [cite(v,u)].", toy());
  FactSet facts;
  facts.add("cite", {0, 2});
  facts.add("cite", {0, 1});
  facts.add("cite", {1, 0});
  auto g = enumerate_substitutions(t, universe(3), &t.guard, bind({{"v", "e0"}}), &facts);
  EXPECT_EQ(g.tuples, (std::vector<std::vector<std::size_t>>{{1}, {2}}));
}

TEST(Grounding, EmptyUniverse) {
  EXPECT_CODE(enumerate_grounding_tuples(grandparent(), 0, std::vector<std::size_t>{0, 0}, nullptr),
              ErrorCode::kEmptyUniverse);
}

TEST(Grounding, WidthZeroIsSingleEmptySubstitution) {
  auto t = parse_template("y(v) :- c1(v), c2(v).", toy());
  auto rows = instantiate_bodies(t, bind({{"v", "e0"}}), universe(4), nullptr);
  ASSERT_EQ(rows.size(), 1u);
  EXPECT_TRUE(rows[0].theta.bindings.empty());
  EXPECT_EQ(to_string(rows[0].atoms[1]), "c2(e0)");
}

TEST(Grounding, InstantiateGrandparentBodies) {
  std::vector<std::string> x{"A", "H", "B"};
  auto rows = instantiate_bodies(grandparent(), bind({{"v1", "A"}, {"v2", "B"}}), x, nullptr);
  ASSERT_EQ(rows.size(), 3u);
  auto show = [](const GroundedBody& r) { return to_string(r.atoms[0]) + "," + to_string(r.atoms[1]); };
  EXPECT_EQ(show(rows[0]), "parent(A,A),parent(A,B)");
  EXPECT_EQ(show(rows[1]), "parent(A,H),parent(H,B)");
  EXPECT_EQ(show(rows[2]), "parent(A,B),parent(B,B)");
}

TEST(Grounding, Deterministic) {
  auto t = parse_template("y(v1,v2) :- c(v1,v3), c(v3,v4) [distinct].", toy2());
  auto a = enumerate_substitutions(t, universe(4), &t.guard, bind({{"v1", "e0"}, {"v2", "e3"}}));
  auto b = enumerate_substitutions(t, universe(4), &t.guard, bind({{"v1", "e0"}, {"v2", "e3"}}));
  EXPECT_EQ(a.tuples, b.tuples);
}

TEST(Grounding, GuardKeepsSurvivorOrder) {
  auto t = parse_template("y(v1,v2) :- c(v1,v3), c(v3,v4) [distinct].", toy2());
  auto all = enumerate_grounding_tuples(t, 4, std::vector<std::size_t>{0, 3}, nullptr);
  auto kept = enumerate_grounding_tuples(t, 4, std::vector<std::size_t>{0, 3}, &t.guard);
  EXPECT_LE(kept.size(), all.size());
  EXPECT_TRUE(std::includes(all.begin(), all.end(), kept.begin(), kept.end()));
}

TEST(Grounding, CountExhaustive) {
  const char* texts[] = {"y(v) :- c1(v).", "y(v) :- c1(u1).", "y(v) :- c(u1,u2).", "y(v) :- c(u1,u2), c1(u3)."};
  for (const char* text : texts) {
    auto t = parse_template(text, toy());
    for (std::size_t n = 1; n <= 5; ++n) {
      auto tuples = enumerate_grounding_tuples(t, n, std::vector<std::size_t>{0}, nullptr);
      EXPECT_EQ(tuples.size(), ipow(n, t.width())) << text << " |X|=" << n;
    }
  }
}

TEST(Flat, BodyLengths) {
  Schema s1({{"c", 2, PredicateKind::kConcept}, {"y", 1, PredicateKind::kTask}});
  EXPECT_EQ(build_flat_template(s1, universe(2)).size(), 4u);
  Schema s2({{"a", 1, PredicateKind::kConcept}, {"b", 1, PredicateKind::kConcept}, {"y", 1, PredicateKind::kTask}});
  EXPECT_EQ(build_flat_template(s2, universe(3)).size(), 6u);
  Schema s3({{"a", 1, PredicateKind::kConcept}, {"c", 2, PredicateKind::kConcept}, {"y", 1, PredicateKind::kTask}});
  auto layout = build_flat_template(s3, universe(3));
  EXPECT_EQ(layout.size(), 1u * 3 + 1u * 9);
  EXPECT_EQ(layout.ground(std::vector<std::size_t>{0}).size(), 12u);
}

TEST(Flat, LayoutIsStable) {
  Schema s({{"a", 1, PredicateKind::kConcept}, {"c", 2, PredicateKind::kConcept}, {"y", 1, PredicateKind::kTask}});
  auto l1 = build_flat_template(s, universe(3));
  auto l2 = build_flat_template(s, universe(3));
  EXPECT_EQ(l1.slots, l2.slots);
  EXPECT_EQ(l1.predicates, l2.predicates);
}

TEST(Flat, UniverseMismatch) {
  Schema s({{"a", 1, PredicateKind::kConcept}, {"y", 1, PredicateKind::kTask}});
  auto layout = build_flat_template(s, universe(3));
  EXPECT_NO_THROW(layout.check_universe(universe(3)));
  EXPECT_CODE(layout.check_universe(universe(4)), ErrorCode::kUniverseMismatch);
}
