#include <gtest/gtest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>

#include "relcbm/generators.hpp"
#include "relcbm/model.hpp"
#include "test_util.hpp"

using namespace relcbm;
using ad::Tensor;

namespace {

void set_param(Model& m, const std::string& name, std::vector<double> v) {
  for (auto& p : m.params().all()) {
    if (p.name != name) continue;
    ASSERT_EQ(p.tensor.size(), v.size()) << name;
    std::copy(v.begin(), v.end(), p.tensor.mutable_data().begin());
    return;
  }
  FAIL() << "no parameter " << name;
}

void fill_param(ParameterStore& store, const std::string& name, double v) {
  for (auto& p : store.all()) {
    if (p.name == name) std::fill(p.tensor.mutable_data().begin(), p.tensor.mutable_data().end(), v);
  }
}

// Abe -> Homer -> Bart, one-hot features.
RelationalDataset simpsons() {
  RelationalDataset ds;
  ds.name = "simpsons";
  ds.schema = family_schema();
  World w;
  w.add_entity("Abe", {1, 0, 0});
  w.add_entity("Homer", {0, 1, 0});
  w.add_entity("Bart", {0, 0, 1});
  for (std::size_t a = 0; a < 3; ++a) {
    for (std::size_t b = 0; b < 3; ++b) {
      w.concepts.push_back({"parent", {a, b}, (a + 1 == b) ? 1.0 : 0.0, {}});
      w.tasks.push_back({"grandparent", {a, b}, (a == 0 && b == 2) ? 1.0 : 0.0, {}});
    }
  }
  ds.worlds.push_back(w);
  return ds;
}

std::vector<Template> gp_templates(const Schema& s) {
  return {parse_template("grandparent(v1,v2) :- parent(v1,u), parent(u,v2).", s)};
}

// Plan edits that replace every parent atom with its oracle label.
PlanEdits oracle_edits(const Plan& plan, const RelationalDataset& ds) {
  PlanEdits e;
  for (const auto& a : ds.worlds[0].concepts) {
    e.concept_index.push_back(plan.atom_index(0, 0, a.args));
    e.concept_value.push_back(a.y);
  }
  return e;
}

std::size_t query_of(const TaskBlock& b, std::vector<std::size_t> args) {
  for (std::size_t q = 0; q < b.queries(); ++q) {
    if (b.query_args[q] == args) return q;
  }
  return b.queries();
}

}  // namespace

// ---- encoders -----------------------------------------------------------------

TEST(Embedder, ZeroWeightsGiveZeroEmbedding) {
  ParameterStore store;
  Rng rng(0);
  EntityEmbedder psi(store, 3, 4, rng);
  fill_param(store, "psi.w", 0.0);
  EXPECT_EQ(psi.embed({0.3, -1.0, 2.0}), std::vector<double>(4, 0.0));
}

TEST(Embedder, IdentityPassesInputThrough) {
  ParameterStore store;
  Rng rng(0);
  EntityEmbedder psi(store, 3, 3, rng);
  auto& w = store.all()[0].tensor;
  std::vector<double> eye{1, 0, 0, 0, 1, 0, 0, 0, 1};
  std::copy(eye.begin(), eye.end(), w.mutable_data().begin());
  auto out = psi.pre_activation(Tensor::matrix(1, 3, {0.5, -2.0, 7.0}));
  EXPECT_EQ(std::vector<double>(out.data().begin(), out.data().end()), (std::vector<double>{0.5, -2.0, 7.0}));
}

TEST(Embedder, SeedReproducible) {
  auto embed = [](std::uint64_t seed) {
    ParameterStore store;
    Rng rng(seed);
    EntityEmbedder psi(store, 4, 5, rng);
    return psi.embed({1.0, 0.5, -0.5, 2.0});
  };
  EXPECT_EQ(embed(9), embed(9));
  EXPECT_NE(embed(9), embed(10));
}

TEST(Embedder, DimMismatch) {
  ParameterStore store;
  Rng rng(0);
  EntityEmbedder psi(store, 3, 4, rng);
  EXPECT_CODE(psi.embed({1.0, 2.0}), ErrorCode::kDimMismatch);
}

TEST(Encoder, OrderSensitive) {
  Schema s({{"c", 2, PredicateKind::kConcept}, {"y", 1, PredicateKind::kTask}});
  ParameterStore store;
  Rng rng(1);
  EncoderConfig cfg{8, 16};
  ConceptEncoder enc(store, s, 2, cfg, rng);
  // first argument slot only: rows of the second slot in the first head layer are zeroed
  for (auto& p : store.all()) {
    if (p.name != "g.c.0.w") continue;
    auto d = p.tensor.mutable_data();
    for (std::size_t i = cfg.embed_dim * cfg.hidden; i < d.size(); ++i) d[i] = 0.0;
  }
  std::vector<double> a{1.0, 0.0}, b{0.0, 1.0};
  EXPECT_NE(enc.encode(0, {a, b}).first, enc.encode(0, {b, a}).first);
}

TEST(Encoder, ZeroFinalLayerScoresHalf) {
  Schema s({{"c", 1, PredicateKind::kConcept}, {"y", 1, PredicateKind::kTask}});
  ParameterStore store;
  Rng rng(1);
  ConceptEncoder enc(store, s, 3, {}, rng);
  fill_param(store, "g.c.2.w", 0.0);
  EXPECT_EQ(enc.encode(0, {{4.0, -1.0, 0.2}}).first, 0.5);
}

TEST(Encoder, ArityDispatch) {
  Schema s({{"a", 1, PredicateKind::kConcept}, {"b", 2, PredicateKind::kConcept}, {"y", 1, PredicateKind::kTask}});
  ParameterStore store;
  Rng rng(1);
  ConceptEncoder enc(store, s, 2, {}, rng);
  ASSERT_EQ(enc.size(), 2u);
  EXPECT_CODE(enc.encode(0, {{1, 0}, {0, 1}}), ErrorCode::kArityMismatch);
  EXPECT_CODE(enc.encode(1, {{1, 0}}), ErrorCode::kArityMismatch);
  auto [score, emb] = enc.encode(1, {{1, 0}, {0, 1}});
  EXPECT_GT(score, 0.0);
  EXPECT_LT(score, 1.0);
  EXPECT_EQ(emb.size(), enc.config().embed_dim);
}

TEST(Encoder, ParameterCount) {
  Schema s({{"a", 1, PredicateKind::kConcept}, {"b", 2, PredicateKind::kConcept}, {"y", 1, PredicateKind::kTask}});
  ParameterStore store;
  Rng rng(1);
  EncoderConfig cfg{5, 7};
  ConceptEncoder enc(store, s, 3, cfg, rng);
  // psi 3*5+5; head a: 5*7+7 + 7*5+5 + 5+1; head b: 10*7+7 + 7*5+5 + 5+1
  const std::size_t independent = 20 + 88 + 123;
  EXPECT_EQ(store.count(), independent);
  EXPECT_EQ(encoder_parameter_count(3, cfg, {1, 2}), independent);
}

TEST(Harden, ThresholdAndStraightThrough) {
  auto x = Tensor::vector({0.7, 0.3, 0.5, 0.51}, true);
  auto h = harden_concepts(x);
  EXPECT_EQ(std::vector<double>(h.data().begin(), h.data().end()), (std::vector<double>{1, 0, 0, 1}));
  ad::backward(ad::sum_all(h));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), std::vector<double>(4, 1.0));
}

// ---- predictors ---------------------------------------------------------------

TEST(Linear, ZeroWeights) {
  ParameterStore store;
  Rng rng(0);
  TaskPredictor f;
  f.linear = LinearPredictor(store, "f", 3, 1.0, rng);
  fill_param(store, "f.w", 0.0);
  EXPECT_EQ(predict_grounding(f, {0.2, 0.9, 0.4}), 0.5);
}

TEST(Linear, Conjunction) {
  ParameterStore store;
  Rng rng(0);
  TaskPredictor f;
  f.linear = LinearPredictor(store, "f", 2, 1.0, rng);
  fill_param(store, "f.w", 10.0);
  fill_param(store, "f.b", -15.0);
  EXPECT_NEAR(predict_grounding(f, {1.0, 1.0}), 1.0 / (1.0 + std::exp(-5.0)), 1e-15);
  EXPECT_NEAR(predict_grounding(f, {1.0, 1.0}), 0.9933, 1e-4);
}

TEST(Predictor, Errors) {
  ParameterStore store;
  Rng rng(0);
  TaskPredictor f;
  f.kind = PredictorKind::kDcr;
  f.dcr = DcrPredictor(store, "f", 2, 3, 0.0, rng);
  EXPECT_CODE(predict_grounding(f, {1.0, 0.0}), ErrorCode::kMissingEmbeddings);
  EXPECT_CODE(predict_grounding(f, {1.0}), ErrorCode::kDimMismatch);
  EXPECT_CODE(dcr_generate_rule(f.dcr, {{1, 2, 3}}), ErrorCode::kDimMismatch);
  EXPECT_CODE(dcr_evaluate_rule(std::vector<double>{1}, std::vector<double>{1, 1}, std::vector<double>{1}),
              ErrorCode::kDimMismatch);
}

TEST(Dcr, ZeroHeadsGiveHalf) {
  ParameterStore store;
  Rng rng(0);
  DcrPredictor dcr(store, "f", 2, 3, 0.0, rng);
  fill_param(store, "f.s.w", 0.0);
  auto [r, s] = dcr_generate_rule(dcr, {{1, 2, 3}, {-1, 0, 4}});
  EXPECT_EQ(r, std::vector<double>(2, 0.5));
  EXPECT_EQ(s, std::vector<double>(2, 0.5));
}

TEST(Dcr, DistinctGroundingsDistinctRules) {
  ParameterStore store;
  Rng rng(3);
  DcrPredictor dcr(store, "f", 2, 3, 0.0, rng);
  auto a = dcr_generate_rule(dcr, {{1, 0, 0}, {0, 1, 0}});
  auto b = dcr_generate_rule(dcr, {{0, 0, 1}, {1, 1, 0}});
  EXPECT_NE(a.second, b.second);
}

TEST(Dcr, EvaluateExamples) {
  EXPECT_EQ(dcr_evaluate_rule({1, 1}, {1, 1}, {1, 1}), 1.0);
  EXPECT_EQ(dcr_evaluate_rule({0, 1}, {0.3, 1}, {0, 1}), 1.0);
  EXPECT_EQ(dcr_evaluate_rule({1, 1}, {1, 0}, {1, 0}), 1.0);
  EXPECT_EQ(dcr_evaluate_rule({1, 1}, {1, 0}, {1, 1}), 0.0);
}

TEST(Dcr, AllRelevantReducesToMinXnor) {
  Rng rng(4);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  for (int t = 0; t < 50; ++t) {
    std::vector<double> s(3), c(3);
    double expect = 1.0;
    for (int q = 0; q < 3; ++q) {
      s[q] = u(rng);
      c[q] = u(rng);
      expect = std::min(expect, s[q] * c[q] + (1 - s[q]) * (1 - c[q]));
    }
    EXPECT_DOUBLE_EQ(dcr_evaluate_rule({1, 1, 1}, s, c), expect);
  }
}

TEST(Aggregate, Examples) {
  std::vector<double> v{0.1, 0.9, 0.2};
  EXPECT_EQ(aggregate(AggregatorKind::kMax, v), 0.9);
  EXPECT_EQ(aggregate(AggregatorKind::kMin, v), 0.1);
  for (auto agg : {AggregatorKind::kMax, AggregatorKind::kMin}) EXPECT_EQ(aggregate(agg, {0.42}), 0.42);
  EXPECT_CODE(aggregate(AggregatorKind::kMax, std::vector<double>{}), ErrorCode::kEmptyGroundingSet);
}

TEST(Aggregate, GradientToSelected) {
  auto x = Tensor::vector({0.1, 0.9, 0.2}, true);
  ad::backward(aggregate(AggregatorKind::kMax, x));
  EXPECT_EQ(std::vector<double>(x.grad().begin(), x.grad().end()), (std::vector<double>{0, 1, 0}));
}

// ---- model ------------------------------------------------------------------

TEST(Model, KindNames) {
  for (auto k : kAllModelKinds) EXPECT_EQ(parse_model_kind(to_string(k)), k);
  EXPECT_CODE(parse_model_kind("gcn"), ErrorCode::kParseError);
}

TEST(Model, TemplateMismatches) {
  auto ds = simpsons();
  ModelConfig cfg{.kind = ModelKind::kRCbmLinear};
  EXPECT_CODE(Model(ds.schema, 3, {}, cfg), ErrorCode::kSchemaMismatch);
  Schema other({{"parent", 2, PredicateKind::kConcept}, {"grandparent", 1, PredicateKind::kTask}});
  auto unary = parse_template("grandparent(v) :- parent(v,u).", other);
  EXPECT_CODE(Model(ds.schema, 3, {unary}, cfg), ErrorCode::kTemplateArityMismatch);
}

TEST(Model, GrandparentQuery) {
  auto ds = simpsons();
  Model m(ds.schema, 3, gp_templates(ds.schema), {.kind = ModelKind::kRCbmLinear});
  set_param(m, "f.grandparent.w", {10.0, 10.0});
  set_param(m, "f.grandparent.b", {-15.0});
  auto plan = m.compile(ds);
  auto edits = oracle_edits(plan, ds);
  auto fw = m.forward(plan, &edits);
  const auto& b = plan.blocks[0];
  const auto q = query_of(b, {0, 2});
  EXPECT_GT(fw.task_scores[0][q], 0.9);
  std::size_t best = b.offsets[q];
  for (std::size_t k = b.offsets[q]; k < b.offsets[q + 1]; ++k) {
    if (fw.grounding_scores[0][k] > fw.grounding_scores[0][best]) best = k;
  }
  EXPECT_EQ(best - b.offsets[q], 1u);  // u = Homer

  for (std::size_t i = 0; i < edits.concept_index.size(); ++i) {
    if (edits.concept_index[i] == plan.atom_index(0, 0, {1, 2})) edits.concept_value[i] = 0.0;
  }
  auto cut = m.forward(plan, &edits);
  EXPECT_LT(cut.task_scores[0][q], 0.5);
}

// Batched forward equals per-grounding evaluation through the grounding engine.
TEST(Model, BatchedEqualsPerGrounding) {
  auto ds = simpsons();
  for (auto kind : {ModelKind::kRCbmLinear, ModelKind::kRCbmDeep, ModelKind::kRDcr}) {
    Model m(ds.schema, 3, gp_templates(ds.schema), {.kind = kind, .seed = 3});
    auto plan = m.compile(ds);
    auto fw = m.forward(plan);
    const auto& w = ds.worlds[0];
    const auto& b = plan.blocks[0];
    for (std::size_t q = 0; q < b.queries(); ++q) {
      Substitution head;
      head.bindings["v1"] = w.entities[b.query_args[q][0]].id;
      head.bindings["v2"] = w.entities[b.query_args[q][1]].id;
      std::vector<double> per;
      for (const auto& row : instantiate_bodies(m.templates()[0], head, w.universe(), nullptr)) {
        std::vector<double> scores;
        std::vector<std::vector<double>> embs;
        for (const auto& atom : row.atoms) {
          std::vector<std::vector<double>> xs;
          for (const auto& t : atom.args) {
            for (const auto& e : w.entities) {
              if (e.id == t.name) xs.push_back(e.x);
            }
          }
          auto [s, e] = m.encoder().encode(0, xs);
          scores.push_back(s);
          embs.push_back(e);
        }
        per.push_back(kind == ModelKind::kRDcr ? predict_grounding(m.predictor(0), scores, embs)
                                               : predict_grounding(m.predictor(0), scores));
      }
      EXPECT_NEAR(fw.task_scores[0][q], aggregate(AggregatorKind::kMax, per), 1e-12) << to_string(kind);
    }
  }
}

// A width-0 unary template is a plain concept bottleneck model.
TEST(Model, PlainCbmSubsumption) {
  auto ds = gen_rps(12, 5);
  Schema s = ds.schema;
  std::vector<Template> ts;
  for (const auto& task : s.of_kind(PredicateKind::kTask)) {
    ts.push_back(parse_template(task.name + "(v) :- rock(v), paper(v), scissors(v).", s));
  }
  Model rel(s, ds.feature_dim(), ts, {.kind = ModelKind::kRCbmLinear, .seed = 2});
  Model plain(s, ds.feature_dim(), {}, {.kind = ModelKind::kCbmLinear, .seed = 2});
  auto plan = rel.compile(ds, {{Split::kTrain, Split::kVal, Split::kTest}, false});
  auto a = rel.forward(plan);
  auto b = plain.forward(plain.compile(ds, {{Split::kTrain, Split::kVal, Split::kTest}, false}));
  for (std::size_t j = 0; j < a.task_scores.size(); ++j) {
    const auto& blk = plan.blocks[j];
    for (std::size_t q = 0; q < blk.queries(); ++q) {
      const auto& w = ds.worlds[plan.worlds[blk.query_world[q]]];
      std::vector<double> c;
      for (std::size_t k = 0; k < 3; ++k) c.push_back(plain.encoder().encode(k, {w.entities[blk.query_args[q][0]].x}).first);
      const double direct = predict_grounding(plain.predictor(j), c);
      EXPECT_EQ(a.task_scores[j][q], direct);
      EXPECT_EQ(b.task_scores[j][q], direct);
    }
  }
}

TEST(Model, FlatRejectsOtherUniverse) {
  auto ds3 = gen_hanoi(4, 3, 1);
  auto ds4 = gen_hanoi(4, 4, 1);
  Model flat(ds3.schema, ds3.feature_dim(), {}, {.kind = ModelKind::kFlatCbm}, ds3.worlds[0].universe());
  EXPECT_NO_THROW(flat.forward(flat.compile(ds3)));
  EXPECT_CODE(flat.compile(ds4), ErrorCode::kUniverseMismatch);
}

TEST(Model, RelationalHandlesAnyUniverseSize) {
  auto ds = gen_hanoi(4, 3, 1);
  std::vector<Template> ts{parse_template("correct(v) :- top(v,u), larger(v,u), larger(u,v) [distinct].", ds.schema)};
  for (std::size_t d = 2; d <= 7; ++d) {
    auto other = gen_hanoi(3, d, d);
    for (auto kind : {ModelKind::kRCbmLinear, ModelKind::kRCbmDeep, ModelKind::kRDcr}) {
      Model m(ds.schema, ds.feature_dim(), ts, {.kind = kind});
      EXPECT_NO_THROW(m.forward(m.compile(other, {{Split::kTrain, Split::kVal, Split::kTest}, false})));
    }
  }
}

TEST(Checkpoint, RoundTripAndMissing) {
  auto ds = simpsons();
  Model m(ds.schema, 3, gp_templates(ds.schema), {.kind = ModelKind::kRDcr, .seed = 8});
  const auto path = (std::filesystem::temp_directory_path() / "relcbm_ckpt_test.json").string();
  save_checkpoint(path, m);
  auto back = load_checkpoint(path);
  std::remove(path.c_str());
  auto plan = m.compile(ds);
  auto a = m.forward(plan).task_scores[0];
  auto b = back.forward(back.compile(ds)).task_scores[0];
  EXPECT_EQ(std::vector<double>(a.data().begin(), a.data().end()), std::vector<double>(b.data().begin(), b.data().end()));
  EXPECT_CODE(load_checkpoint(path), ErrorCode::kIoError);
}
