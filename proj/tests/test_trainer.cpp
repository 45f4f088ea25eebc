#include <gtest/gtest.h>

#include <atomic>
#include <random>
#include <sstream>

#include "relcbm/generators.hpp"
#include "relcbm/trainer.hpp"
#include "test_util.hpp"

using namespace relcbm;

namespace {

double brute_auc(const std::vector<double>& s, const std::vector<double>& y) {
  double hits = 0.0, pairs = 0.0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[i] != 1.0 || y[j] != 0.0) continue;
      pairs += 1.0;
      hits += s[i] > s[j] ? 1.0 : s[i] == s[j] ? 0.5 : 0.0;
    }
  }
  return hits / pairs;
}

RelationalDataset family_four() {
  RelationalDataset ds;
  ds.schema = family_schema();
  Rng rng(3);
  ds.worlds.push_back(family_world(0, {"a", "b", "c", "d"}, {{0, 1}, {1, 2}, {2, 3}}, rng, 4));
  return ds;
}

std::vector<Template> templates_from(const std::string& path, const Schema& s) {
  return load_templates(std::string(RELCBM_SOURCE_DIR) + "/configs/templates/" + path, s);
}

std::size_t train_labels(const RelationalDataset& ds, const std::string& pred) {
  std::size_t n = 0;
  for (const auto& w : ds.worlds) {
    for (const auto& a : w.concepts) n += a.pred == pred && w.split_of(a) == Split::kTrain;
  }
  return n;
}

}  // namespace

TEST(Metrics, AucExamples) {
  EXPECT_EQ(roc_auc({0.9, 0.1}, {1, 0}), 1.0);
  EXPECT_EQ(roc_auc({0.1, 0.9}, {1, 0}), 0.0);
  EXPECT_EQ(roc_auc({0.5, 0.5}, {1, 0}), 0.5);
  EXPECT_CODE(roc_auc({0.3, 0.4}, {1, 1}), ErrorCode::kDegenerateLabels);
}

TEST(Metrics, AucMatchesPairCounting) {
  Rng rng(17);
  std::uniform_int_distribution<int> level(0, 6), coin(0, 1);
  for (std::size_t n = 2; n <= 50; ++n) {
    for (int rep = 0; rep < 20; ++rep) {
      std::vector<double> s(n), y(n);
      for (std::size_t i = 0; i < n; ++i) {
        s[i] = level(rng) / 6.0;
        y[i] = coin(rng);
      }
      y[0] = 1.0;
      y[1] = 0.0;
      EXPECT_NEAR(roc_auc(s, y), brute_auc(s, y), 1e-12);
    }
  }
}

TEST(Metrics, Mrr) {
  EXPECT_EQ(mrr({{0.9, 0.1}, {0.2, 0.8}}, {0, 1}), 1.0);
  EXPECT_NEAR(mrr({{0.2, 0.9, 0.5}}, {0}), 1.0 / 3.0, 1e-15);
  Rng rng(2);
  std::uniform_real_distribution<double> u;
  std::vector<std::vector<double>> c(30, std::vector<double>(5));
  std::vector<std::size_t> t(30);
  for (std::size_t i = 0; i < 30; ++i) {
    for (auto& v : c[i]) v = u(rng);
    t[i] = i % 5;
  }
  const double m = mrr(c, t);
  EXPECT_GT(m, 0.0);
  EXPECT_LE(m, 1.0);
  EXPECT_CODE(mrr({}, {}), ErrorCode::kEmptyBatch);
}

TEST(Metrics, Accuracy) {
  EXPECT_EQ(accuracy({0, 1, 2, 2}, {0, 1, 2, 0}), 0.75);
  EXPECT_CODE(accuracy({0}, {0, 1}), ErrorCode::kShapeMismatch);
}

TEST(Loss, DecompositionIsExact) {
  auto ds = gen_rps(20, 1);
  Model m(ds.schema, ds.feature_dim(), templates_from("rps.tmpl", ds.schema), {.kind = ModelKind::kRDcr, .seed = 4});
  auto plan = m.compile(ds, {{Split::kTrain}, true});
  auto fw = m.forward(plan);
  for (double lambda : {0.0, 0.1, 1.0, 3.5}) {
    auto with = compute_loss_parts(m, plan, fw, {lambda});
    auto without = compute_loss_parts(m, plan, fw, {0.0});
    EXPECT_EQ(with.total.item(), without.total.item() + lambda * with.task_loss.item());
  }
  EXPECT_CODE(compute_loss(m, plan, {-1.0}), ErrorCode::kInvalidTarget);
}

TEST(Intervene, Locality) {
  auto ds = family_four();
  auto ts = templates_from("family.tmpl", ds.schema);
  for (auto kind : {ModelKind::kRCbmLinear, ModelKind::kRCbmDeep, ModelKind::kRDcr}) {
    Model m(ds.schema, ds.feature_dim(), ts, {.kind = kind, .seed = 1});
    const auto& w = ds.worlds[0];
    auto base = intervene(m, ds, 0, {});
    // parent(d,a) is in no body of grandparent(a,c): bodies are parent(a,u), parent(u,c)
    InterventionSet far;
    far.concepts.push_back({0, w.ground_atom("parent", {3, 0}), 1.0});
    auto q = w.ground_atom("grandparent", {0, 2});
    EXPECT_EQ(intervene(m, ds, 0, far)(q), base(q)) << to_string(kind);
  }
}

TEST(Intervene, Idempotent) {
  auto ds = family_four();
  auto ts = templates_from("family.tmpl", ds.schema);
  Model m(ds.schema, ds.feature_dim(), ts, {.kind = ModelKind::kRDcr, .seed = 2});
  auto once = ground_truth_concepts(ds, {Split::kTrain, Split::kVal, Split::kTest});
  auto twice = once;
  twice.concepts.insert(twice.concepts.end(), once.concepts.begin(), once.concepts.end());
  auto a = intervene(m, ds, 0, once);
  auto b = intervene(m, ds, 0, twice);
  for (const auto& t : ds.worlds[0].tasks) {
    auto q = ds.worlds[0].ground_atom(t.pred, t.args);
    EXPECT_EQ(a(q), b(q));
  }
}

TEST(Intervene, UnknownAtomAndNotDcr) {
  auto ds = family_four();
  Model m(ds.schema, ds.feature_dim(), templates_from("family.tmpl", ds.schema), {.kind = ModelKind::kRCbmDeep});
  InterventionSet bad;
  bad.concepts.push_back({0, make_ground_atom("parent", {"a", "zed"}), 1.0});
  EXPECT_CODE(intervene(m, ds, 0, bad), ErrorCode::kUnknownAtom);
  InterventionSet rule;
  rule.rules.push_back({0, make_ground_atom("grandparent", {"a", "c"}), {1, 1}, {1, 1}});
  EXPECT_CODE(intervene(m, ds, 0, rule), ErrorCode::kNotDCR);
  EXPECT_CODE(extract_rule(m, ds, 0, make_ground_atom("grandparent", {"a", "c"})), ErrorCode::kNotDCR);
}

TEST(Intervene, RuleMasks) {
  auto ds = gen_rps(3, 0);
  auto ts = templates_from("rps.tmpl", ds.schema);
  auto [r, s] = rule_masks(ts[0], rps_rule_literals("wins", Sign::kPaper));
  EXPECT_EQ(r, (std::vector<double>{1, 1, 1, 1, 1, 1}));
  EXPECT_EQ(s, (std::vector<double>{0, 1, 0, 1, 0, 0}));
  auto [r2, s2] = rule_masks(ts[2], rps_rule_literals("ties", Sign::kRock));
  EXPECT_EQ(s2, (std::vector<double>{1, 0, 0, 1, 0, 0}));
  const std::vector<std::pair<Atom, bool>> stray{{make_atom("rock", {"w"}), true}};
  EXPECT_CODE(rule_masks(ts[0], stray), ErrorCode::kUnknownAtom);
}

TEST(Supervision, MaskDeterminism) {
  auto ds = gen_citation_toy(100, 3, 0.8, 1);
  auto a = mask_supervision(ds, 0.25, 9);
  EXPECT_EQ(a, mask_supervision(ds, 0.25, 9));
  EXPECT_NE(a, mask_supervision(ds, 0.25, 10));
  EXPECT_EQ(mask_supervision(ds, 1.0, 9), ds);
  std::size_t train_tasks = 0;
  for (const auto& t : a.worlds[0].tasks) train_tasks += a.worlds[0].split_of(t) == Split::kTrain;
  EXPECT_EQ(train_tasks, 3u * 13u);  // 50 train docs, a quarter kept
  EXPECT_EQ(train_labels(a, "class_0"), 13u);
  EXPECT_CODE(mask_supervision(ds, 0.0, 1), ErrorCode::kInvalidCount);
}

TEST(Supervision, ConceptCap) {
  auto ds = gen_rps(200, 3);
  EXPECT_EQ(subsample_concept_supervision(ds, 100000, 1), ds);
  auto capped = subsample_concept_supervision(ds, 5, 1);
  for (const char* c : {"rock", "paper", "scissors"}) {
    EXPECT_EQ(train_labels(capped, c), 5u) << c;
    EXPECT_EQ(train_labels(ds, c), 240u) << c;
  }
  EXPECT_EQ(capped, subsample_concept_supervision(ds, 5, 1));
  EXPECT_NE(capped, subsample_concept_supervision(ds, 5, 2));
  EXPECT_CODE(subsample_concept_supervision(ds, 0, 1), ErrorCode::kInvalidCount);
}

TEST(Supervision, ConceptFraction) {
  auto ds = gen_rps(100, 3);
  auto half = subsample_concept_fraction(ds, 0.5, 4);
  EXPECT_EQ(train_labels(half, "rock"), 60u);
  EXPECT_EQ(subsample_concept_fraction(ds, 1.0, 4), ds);
}

TEST(Train, RejectsZeroEpochs) {
  auto ds = gen_rps(10, 1);
  Model m(ds.schema, ds.feature_dim(), {}, {.kind = ModelKind::kCbmLinear});
  EXPECT_CODE(train(m, ds, {.epochs = 0}), ErrorCode::kInvalidCount);
}

TEST(Train, SeedReplay) {
  auto run = [] {
    auto ds = gen_hanoi(20, 3, 1);
    Model m(ds.schema, ds.feature_dim(), templates_from("hanoi.tmpl", ds.schema),
            {.kind = ModelKind::kRCbmLinear, .seed = 3});
    auto r = train(m, ds, {.epochs = 30});
    std::ostringstream csv;
    write_epoch_csv(csv, r.log);
    return std::make_pair(csv.str(), m.params().to_json().dump());
  };
  auto a = run();
  EXPECT_EQ(a, run());
  EXPECT_EQ(a.first.rfind("epoch,concept_loss,task_loss,val_metric\n1,", 0), 0u);
}

TEST(Train, ReducesLoss) {
  auto ds = gen_rps(60, 2);
  Model m(ds.schema, ds.feature_dim(), templates_from("rps.tmpl", ds.schema), {.kind = ModelKind::kRCbmDeep});
  auto r = train(m, ds, {.epochs = 200, .eval_every = 100});
  EXPECT_LT(r.log.back().concept_loss, r.log.front().concept_loss);
  EXPECT_LT(r.log.back().task_loss, r.log.front().task_loss);
  EXPECT_TRUE(r.log[99].val_metric.has_value());
  EXPECT_FALSE(r.log[98].val_metric.has_value());
}

TEST(Corruption, NoiseDependsOnlyOnSeed) {
  auto ds = gen_rps(10, 2);
  auto a = add_uniform_noise(ds, 0.5, 7);
  auto b = add_uniform_noise(ds, 1.0, 7);
  for (std::size_t w = 0; w < ds.worlds.size(); ++w) {
    for (std::size_t e = 0; e < 2; ++e) {
      for (std::size_t k = 0; k < 3; ++k) {
        const double x = ds.worlds[w].entities[e].x[k];
        EXPECT_NEAR(2.0 * (a.worlds[w].entities[e].x[k] - x), b.worlds[w].entities[e].x[k] - x, 1e-12);
      }
    }
  }
}

TEST(Corruption, SearchLandsInBand) {
  auto ds = gen_rps(100, 2);
  Model m(ds.schema, ds.feature_dim(), templates_from("rps.tmpl", ds.schema), {.kind = ModelKind::kRCbmDeep});
  train(m, ds, {.epochs = 300});
  ASSERT_LT(concept_error(m, ds, Split::kTest), 0.4);
  auto c = corrupt_features(ds, m, {.seed = 5});
  EXPECT_GE(c.concept_error, 0.4);
  EXPECT_LE(c.concept_error, 0.6);
  EXPECT_GT(c.amplitude, 0.0);
  EXPECT_EQ(concept_error(m, add_uniform_noise(ds, c.amplitude, c.noise_seed), Split::kTest), c.concept_error);
  EXPECT_CODE(corrupt_features(ds, m, {.seed = 5, .min_error = 0.999, .max_error = 0.9999, .max_doublings = 2, .max_draws = 2}),
              ErrorCode::kSearchFailed);
}

TEST(Protocol, FlatOodIsUnavailableBeyondTrainingSize) {
  RunSpec run{"flat", {.kind = ModelKind::kFlatCbm}, {}, {.epochs = 5}, {}};
  auto curve = ood_protocol(run, {.train_worlds = 20, .test_worlds = 10});
  ASSERT_EQ(curve.size(), 5u);
  EXPECT_TRUE(curve[0].auc.has_value());
  for (std::size_t i = 1; i < curve.size(); ++i) {
    EXPECT_FALSE(curve[i].auc.has_value());
    EXPECT_EQ(curve[i].reason, "UniverseMismatch");
  }
}

TEST(Protocol, DataEfficiencyGrid) {
  auto ds = gen_citation_toy(40, 2, 0.9, 1);
  auto ts = std::vector<Template>{
      parse_template("class_0(v) :- class_0(u), class_1(u) [cite(v,u)].", ds.schema),
      parse_template("class_1(v) :- class_0(u), class_1(u) [cite(v,u)].", ds.schema)};
  std::vector<RunSpec> runs{{"lin", {.kind = ModelKind::kRCbmLinear}, ts, {.epochs = 5}, {}},
                            {"bb", {.kind = ModelKind::kBlackBoxRel}, ts, {.epochs = 5}, {}}};
  auto a = data_efficiency_protocol(ds, runs, {1.0, 0.25}, 2);
  auto b = data_efficiency_protocol(ds, runs, {1.0, 0.25}, 1);
  ASSERT_EQ(a.size(), 4u);
  for (std::size_t i = 0; i < a.size(); ++i) {
    EXPECT_EQ(a[i].model, b[i].model);
    EXPECT_EQ(a[i].accuracy, b[i].accuracy);
  }
  EXPECT_EQ(a[3].model, "bb");
  EXPECT_EQ(a[3].fraction, 0.25);
}

TEST(Protocol, ParallelForCoversAndRethrows) {
  std::vector<std::atomic<int>> hits(37);
  parallel_for(hits.size(), 4, [&](std::size_t i) { hits[i]++; });
  for (const auto& h : hits) EXPECT_EQ(h.load(), 1);
  EXPECT_CODE(parallel_for(10, 3, [](std::size_t i) {
                if (i == 6) throw Error(ErrorCode::kIoError, "boom");
              }),
              ErrorCode::kIoError);
}

TEST(Protocol, Summary) {
  auto s = summarize({1.0, 2.0, 3.0});
  EXPECT_EQ(s.mean, 2.0);
  EXPECT_NEAR(s.half_width, 1.96 / std::sqrt(3.0), 1e-12);
  EXPECT_EQ(summarize({4.0}).half_width, 0.0);
}
