#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <sstream>

#include "relcbm/dataset.hpp"
#include "relcbm/generators.hpp"
#include "relcbm/grounding.hpp"
#include "relcbm/template_parser.hpp"
#include "test_util.hpp"

using namespace relcbm;

namespace {

double label(const std::vector<LabeledAtom>& atoms, const std::string& pred, std::vector<std::size_t> args) {
  for (const auto& a : atoms) {
    if (a.pred == pred && a.args == args) return a.y;
  }
  ADD_FAILURE() << "no label for " << pred;
  return -1.0;
}

std::map<std::string, double> tower_labels(std::vector<int> sizes) {
  Rng rng(0);
  auto w = hanoi_world(0, HanoiTower{sizes}, rng);
  std::map<std::string, double> out;
  for (std::size_t e = 0; e < sizes.size(); ++e) {
    const auto h = static_cast<std::size_t>(std::lround(w.entities[e].x[1]));
    out["size" + std::to_string(sizes[h])] = label(w.tasks, "correct", {e});
  }
  return out;
}

std::string dump(const RelationalDataset& ds) {
  std::ostringstream out;
  write_dataset(out, ds);
  return out.str();
}

}  // namespace

TEST(Hanoi, OrderedTowerAllCorrect) {
  auto l = tower_labels({3, 2, 1});
  for (const auto& [k, v] : l) EXPECT_EQ(v, 1.0) << k;
}

TEST(Hanoi, MisplacedDisks) {
  auto l = tower_labels({3, 1, 2});
  EXPECT_EQ(l["size3"], 1.0);
  EXPECT_EQ(l["size1"], 0.0);
  EXPECT_EQ(l["size2"], 0.0);
}

TEST(Hanoi, LargerIsAntisymmetric) {
  auto ds = gen_hanoi(20, 4, 3);
  for (const auto& w : ds.worlds) {
    for (std::size_t a = 0; a < 4; ++a) {
      for (std::size_t b = 0; b < 4; ++b) {
        if (a == b) {
          EXPECT_EQ(label(w.concepts, "larger", {a, b}), 0.0);
          continue;
        }
        EXPECT_EQ(label(w.concepts, "larger", {a, b}) + label(w.concepts, "larger", {b, a}), 1.0);
        // feature 0 is the size plus jitter; sizes differ by at least 1
        const bool bigger = w.entities[a].x[0] > w.entities[b].x[0];
        if (std::abs(w.entities[a].x[0] - w.entities[b].x[0]) > 0.8) {
          EXPECT_EQ(label(w.concepts, "larger", {a, b}), bigger ? 1.0 : 0.0);
        }
      }
    }
  }
}

TEST(Hanoi, InvalidDisks) { EXPECT_CODE(gen_hanoi(10, 1, 0), ErrorCode::kInvalidCount); }

TEST(Hanoi, SchemaIndependentOfDisks) {
  for (std::size_t d = 3; d <= 7; ++d) EXPECT_EQ(gen_hanoi(2, d, 1).schema, gen_hanoi(2, 3, 1).schema);
}

TEST(Rps, PaperBeatsRock) {
  Rng rng(1);
  auto w = rps_world(0, Sign::kPaper, Sign::kRock, rng);
  EXPECT_EQ(label(w.tasks, "wins", {0}), 1.0);
  EXPECT_EQ(label(w.tasks, "loses", {1}), 1.0);
  EXPECT_EQ(label(w.tasks, "ties", {0}), 0.0);
  EXPECT_EQ(label(w.tasks, "ties", {1}), 0.0);
}

TEST(Rps, RockRockTies) {
  Rng rng(1);
  auto w = rps_world(0, Sign::kRock, Sign::kRock, rng);
  EXPECT_EQ(label(w.tasks, "ties", {0}), 1.0);
  EXPECT_EQ(label(w.tasks, "ties", {1}), 1.0);
}

TEST(Rps, ExactlyOneOutcome) {
  Rng rng(2);
  for (int a = 0; a < 3; ++a) {
    for (int b = 0; b < 3; ++b) {
      auto w = rps_world(0, static_cast<Sign>(a), static_cast<Sign>(b), rng);
      for (std::size_t p = 0; p < 2; ++p) {
        EXPECT_EQ(label(w.tasks, "wins", {p}) + label(w.tasks, "loses", {p}) + label(w.tasks, "ties", {p}), 1.0);
      }
    }
  }
}

TEST(Rps, FeaturesAreNoisyOneHot) {
  auto ds = gen_rps(50, 4);
  for (const auto& w : ds.worlds) {
    for (std::size_t p = 0; p < 2; ++p) {
      for (std::size_t s = 0; s < 3; ++s) {
        const double base = label(w.concepts, sign_name(static_cast<Sign>(s)), {p});
        EXPECT_LE(std::abs(w.entities[p].x[s] - base), 0.3);
      }
    }
  }
}

TEST(Family, SimpsonsChain) {
  Rng rng(0);
  auto w = family_world(0, {"Abe", "Homer", "Bart"}, {{0, 1}, {1, 2}}, rng);
  for (std::size_t a = 0; a < 3; ++a) {
    for (std::size_t b = 0; b < 3; ++b) {
      EXPECT_EQ(label(w.tasks, "grandparent", {a, b}), (a == 0 && b == 2) ? 1.0 : 0.0);
    }
  }
}

TEST(Family, DepthTwoHasNoGrandparents) {
  auto ds = gen_family(10, 2, 5);
  for (const auto& w : ds.worlds) {
    for (const auto& t : w.tasks) EXPECT_EQ(t.y, 0.0);
  }
}

TEST(Family, PositivesEqualPathCount) {
  auto ds = gen_family(8, 4, 6);
  for (const auto& w : ds.worlds) {
    std::vector<std::pair<std::size_t, std::size_t>> edges;
    for (const auto& c : w.concepts) {
      if (c.y == 1.0) edges.emplace_back(c.args[0], c.args[1]);
    }
    std::size_t paths = 0;
    for (auto [a, b] : edges) {
      for (auto [c, d] : edges) paths += (b == c);
    }
    std::size_t pos = 0;
    for (const auto& t : w.tasks) pos += t.y == 1.0;
    EXPECT_EQ(pos, paths);  // trees: each grandparent pair has one path
  }
}

TEST(Citation, FullHomophily) {
  auto ds = gen_citation_toy(120, 3, 1.0, 4);
  const auto& w = ds.worlds[0];
  std::vector<std::size_t> cls(w.entities.size());
  for (const auto& c : w.concepts) {
    if (c.y == 1.0) cls[c.args[0]] = std::stoul(c.pred.substr(6));
  }
  for (const auto& r : w.relations) EXPECT_EQ(cls[r.args[0]], cls[r.args[1]]);
}

TEST(Citation, GuardLimitsGroundingsToOutDegree) {
  auto ds = gen_citation_toy(60, 2, 0.8, 1);
  const auto& w = ds.worlds[0];
  auto t = parse_template("class_0(v) :- class_0(u), class_1(u) [cite(v,u)].", ds.schema);
  const auto facts = w.facts();
  for (std::size_t v = 0; v < w.entities.size(); ++v) {
    std::size_t degree = 0;
    for (const auto& r : w.relations) degree += r.args[0] == v;
    const std::vector<std::size_t> head{v};
    auto g = enumerate_grounding_tuples(t, w.entities.size(), head, &t.guard, &facts);
    EXPECT_EQ(g.size(), degree);
    EXPECT_EQ(enumerate_grounding_tuples(t, w.entities.size(), head, nullptr).size(),
              w.entities.size());
  }
}

TEST(Citation, ClassMarginalsRoughlyUniform) {
  const std::size_t m = 4, n = 400;
  auto ds = gen_citation_toy(n, m, 0.8, 9);
  std::vector<double> counts(m, 0.0);
  for (const auto& c : ds.worlds[0].concepts) {
    if (c.y == 1.0) counts[std::stoul(c.pred.substr(6))] += 1.0;
  }
  double chi2 = 0.0;
  const double e = static_cast<double>(n) / m;
  for (double c : counts) chi2 += (c - e) * (c - e) / e;
  EXPECT_LT(chi2, 16.27);  // 0.999 quantile, 3 degrees of freedom
}

TEST(Citation, FeatureDim) { EXPECT_EQ(gen_citation_toy(40, 5, 0.7, 0).feature_dim(), 20u); }

TEST(Countries, TwoHopOracle) {
  auto ds = gen_countries_toy(12, 4, 2, 0.25, 3);
  const auto& w = ds.worlds[0];
  const std::size_t n = w.entities.size();
  std::map<std::pair<std::size_t, std::size_t>, double> loc;
  for (const auto& c : w.concepts) {
    if (c.pred == "locatedIn") loc[{c.args[0], c.args[1]}] = c.y;
  }
  for (const auto& t : w.tasks) {
    double hop = 0.0;
    for (std::size_t u = 0; u < n; ++u) {
      auto a = loc.find({t.args[0], u});
      auto b = loc.find({u, t.args[1]});
      if (a != loc.end() && b != loc.end() && a->second == 1.0 && b->second == 1.0) hop = 1.0;
    }
    EXPECT_EQ(t.y, hop);
  }
}

TEST(Countries, NoCountryToCountryLinks) {
  auto ds = gen_countries_toy(12, 4, 2, 0.25, 3);
  for (const auto& c : ds.worlds[0].concepts) {
    if (c.pred == "locatedIn" && c.args[0] < 12 && c.args[1] < 12) {
      EXPECT_EQ(c.y, 0.0);
    }
  }
}

TEST(Countries, HeldOutFraction) {
  auto ds = gen_countries_toy(40, 8, 4, 0.25, 3);
  std::size_t test = 0, all = 0;
  for (const auto& t : ds.worlds[0].tasks) {
    ++all;
    test += ds.worlds[0].split_of(t) == Split::kTest;
  }
  EXPECT_NEAR(static_cast<double>(test) / all, 0.25, 0.02);
}

TEST(Countries, TooSmall) { EXPECT_CODE(gen_countries_toy(3, 2, 1, 0.25, 0), ErrorCode::kInvalidCount); }

TEST(DatasetIo, RoundTrip) {
  for (const auto& ds : {gen_hanoi(5, 3, 1), gen_rps(4, 2), gen_citation_toy(30, 2, 0.8, 1)}) {
    std::istringstream in(dump(ds));
    EXPECT_EQ(read_dataset(in), ds);
  }
}

TEST(DatasetIo, SeedDeterminism) {
  EXPECT_EQ(dump(gen_hanoi(30, 4, 11)), dump(gen_hanoi(30, 4, 11)));
  EXPECT_NE(dump(gen_hanoi(30, 4, 11)), dump(gen_hanoi(30, 4, 12)));
  EXPECT_EQ(dump(gen_family(5, 3, 2)), dump(gen_family(5, 3, 2)));
}

TEST(DatasetIo, RecordShape) {
  RelationalDataset ds;
  ds.schema = family_schema();
  Rng rng(0);
  ds.worlds.push_back(family_world(0, {"Abe", "Homer"}, {{0, 1}}, rng, 1));
  std::istringstream in(dump(ds));
  std::string line;
  std::getline(in, line);
  EXPECT_EQ(line.rfind("{\"t\":\"schema\",\"preds\":[{\"name\":\"parent\",\"arity\":2,\"kind\":\"concept\"}", 0), 0u)
      << line;
  std::getline(in, line);
  EXPECT_EQ(line.rfind("{\"t\":\"world\",\"id\":0,\"split\":\"train\"", 0), 0u) << line;
  std::getline(in, line);
  EXPECT_EQ(line.rfind("{\"t\":\"entity\",\"world\":0,\"id\":\"Abe\",\"x\":[", 0), 0u) << line;
  std::string all = dump(ds);
  EXPECT_NE(all.find("{\"t\":\"concept\",\"world\":0,\"pred\":\"parent\",\"args\":[\"Abe\",\"Homer\"],\"y\":1"),
            std::string::npos);
}

TEST(DatasetIo, TruncatedFile) {
  auto text = dump(gen_rps(3, 1));
  text.resize(text.find("\"y\"", text.size() / 2));
  std::istringstream in(text);
  try {
    read_dataset(in);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::kParseError);
    EXPECT_NE(std::string(e.what()).find("line"), std::string::npos);
  }
}

TEST(DatasetIo, UndeclaredPredicate) {
  std::istringstream in(
      "{\"t\":\"schema\",\"preds\":[{\"name\":\"a\",\"arity\":1,\"kind\":\"concept\"}]}\n"
      "{\"t\":\"world\",\"id\":0,\"split\":\"train\"}\n"
      "{\"t\":\"entity\",\"world\":0,\"id\":\"e\",\"x\":[1]}\n"
      "{\"t\":\"concept\",\"world\":0,\"pred\":\"b\",\"args\":[\"e\"],\"y\":1}\n");
  EXPECT_CODE(read_dataset(in), ErrorCode::kSchemaMismatch);
}
