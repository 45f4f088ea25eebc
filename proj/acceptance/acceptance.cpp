// Reproduction checks. Prints one PASS/FAIL line per criterion on stdout and
// per-seed measurements on stderr.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "relcbm/properties.hpp"
#include "relcbm/config.hpp"

using namespace relcbm;

namespace {

struct Options {
  std::string configs = RELCBM_SOURCE_DIR "/configs";
  std::size_t seeds = 5;
  std::vector<int> only;
  bool strict = false;
};

struct Verdict {
  bool passed = false;
  std::string detail;
};

Options opt;

Config load(const std::string& name, std::uint64_t seed) {
  Config c;
  c.load(opt.configs + "/" + name);
  c.set("seed", std::to_string(seed));
  return c;
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

double mean(const std::vector<double>& v) { return summarize(v).mean; }

std::string mean_str(const std::vector<double>& v) {
  auto s = summarize(v);
  return fmt("%.3f", s.mean) + fmt(" ± %.3f", s.half_width);
}

void note(const std::string& s) { std::cerr << "  " << s << "\n" << std::flush; }

// Trains the configured model and returns its test metric.
double train_and_test(const Config& cfg, Model* keep = nullptr) {
  auto ds = make_dataset(cfg);
  auto model = make_model(cfg, ds);
  train(model, ds, train_config(cfg), loss_config(cfg));
  const double v = evaluate(model, ds, {Split::kTest}, parse_metric(ds.metric));
  if (keep) *keep = model;
  return v;
}

Verdict hanoi_gap() {
  std::vector<double> rel, flat;
  double slowest = 0.0;
  for (std::size_t s = 0; s < opt.seeds; ++s) {
    const auto t0 = std::chrono::steady_clock::now();
    auto cfg = load("hanoi.cfg", s);
    rel.push_back(train_and_test(cfg));
    cfg.set("model", "cbm_linear");
    flat.push_back(train_and_test(cfg));
    slowest = std::max(slowest, seconds_since(t0));
    note("hanoi seed " + std::to_string(s) + ": r_cbm_linear " + fmt("%.3f", rel.back()) + ", cbm_linear " +
         fmt("%.3f", flat.back()));
  }
  const bool ok = mean(rel) >= 0.98 && mean(flat) <= 0.65 && slowest <= 600.0;
  return {ok, "r_cbm_linear roc_auc " + mean_str(rel) + " (>= 0.98), cbm_linear " + mean_str(flat) +
                  " (<= 0.65), slowest seed " + fmt("%.0f s", slowest) + " (<= 600 s)"};
}

Verdict rps_nonlinearity() {
  std::map<std::string, std::vector<double>> auc;
  for (std::size_t s = 0; s < opt.seeds; ++s) {
    for (const char* kind : {"r_cbm_linear", "r_cbm_deep", "r_dcr"}) {
      auto cfg = load("rps.cfg", s);
      cfg.set("model", kind);
      auc[kind].push_back(train_and_test(cfg));
      note(std::string("rps seed ") + std::to_string(s) + ": " + kind + " " + fmt("%.3f", auc[kind].back()));
    }
  }
  const bool ok = mean(auc["r_cbm_linear"]) <= 0.70 && mean(auc["r_cbm_deep"]) >= 0.95 && mean(auc["r_dcr"]) >= 0.95;
  return {ok, "roc_auc r_cbm_linear " + mean_str(auc["r_cbm_linear"]) + " (<= 0.70), r_cbm_deep " +
                  mean_str(auc["r_cbm_deep"]) + " (>= 0.95), r_dcr " + mean_str(auc["r_dcr"]) + " (>= 0.95)"};
}

OodOptions ood_options(const Config& cfg) {
  OodOptions o;
  o.train_disks = cfg.count("disks");
  o.train_worlds = cfg.count("worlds");
  o.test_worlds = cfg.count("test_worlds");
  o.test_disks.clear();
  for (double d : cfg.numbers("test_disks")) o.test_disks.push_back(static_cast<std::size_t>(d));
  o.data_seed = cfg.data_seed();
  return o;
}

Verdict ood_curve() {
  std::map<std::size_t, std::vector<double>> curve;
  for (std::size_t s = 0; s < opt.seeds; ++s) {
    auto cfg = load("hanoi.cfg", s);
    std::string line = "ood seed " + std::to_string(s) + ":";
    for (const auto& p : ood_protocol(run_spec(cfg, hanoi_schema()), ood_options(cfg))) {
      curve[p.disks].push_back(p.auc.value_or(std::nan("")));
      line += " " + std::to_string(p.disks) + "→" + (p.auc ? fmt("%.3f", *p.auc) : "NA");
    }
    note(line);
  }
  auto cfg = load("hanoi.cfg", 0);
  cfg.set("model", "flat_cbm");
  bool flat_ok = true;
  std::string flat = "flat_cbm:";
  for (const auto& p : ood_protocol(run_spec(cfg, hanoi_schema()), ood_options(cfg))) {
    flat += " " + std::to_string(p.disks) + "→" + (p.auc ? fmt("%.3f", *p.auc) : "NA(" + p.reason + ")");
    if (p.disks == 3) flat_ok = flat_ok && p.auc.has_value();
    if (p.disks > 3) flat_ok = flat_ok && !p.auc && p.reason == "UniverseMismatch";
  }
  note(flat);
  std::string pts;
  for (const auto& [d, v] : curve) pts += (pts.empty() ? "" : ", ") + std::to_string(d) + ": " + fmt("%.3f", mean(v));
  const bool ok = curve.count(7) && mean(curve[7]) >= 0.80 && flat_ok;
  return {ok, "r_cbm_linear roc_auc by disks {" + pts + "}, 7 disks " + mean_str(curve[7]) +
                  " (>= 0.80); flat_cbm NA beyond 3 disks: " + (flat_ok ? "yes" : "no")};
}

Verdict interventions() {
  std::map<std::string, std::vector<double>> after;
  std::vector<double> errors;
  for (std::size_t s = 0; s < opt.seeds; ++s) {
    for (const char* kind : {"r_cbm_deep", "r_dcr", "cbm_linear", "cbm_deep", "dcr"}) {
      auto cfg = load("rps.cfg", s);
      cfg.set("model", kind);
      auto ds = make_dataset(cfg);
      auto model = make_model(cfg, ds);
      train(model, ds, train_config(cfg), loss_config(cfg));
      NoiseSpec noise;
      noise.seed = s;
      const bool rules = std::string(kind) == "r_dcr";
      auto rep = intervention_protocol(model, ds, noise,
                                       rules ? rps_rule_interventions
                                             : std::function<InterventionSet(const Model&, const RelationalDataset&,
                                                                             const std::set<Split>&)>{});
      errors.push_back(rep.concept_error);
      after[kind].push_back(rules ? rep.after_rules.value_or(0.0) : rep.after_concepts);
      note(std::string("interventions seed ") + std::to_string(s) + ": " + kind + " concept error " +
           fmt("%.3f", rep.concept_error) + ", accuracy " + fmt("%.3f", rep.before) + " → " +
           fmt("%.3f", rep.after_concepts) + (rep.after_rules ? " → rules " + fmt("%.3f", *rep.after_rules) : ""));
    }
  }
  bool band = true;
  for (double e : errors) band = band && e >= 0.4 && e <= 0.6;
  const double nonrel = std::max({mean(after["cbm_linear"]), mean(after["cbm_deep"]), mean(after["dcr"])});
  const bool ok = band && mean(after["r_cbm_deep"]) >= 0.75 && std::abs(mean(after["r_dcr"]) - 1.0) <= 0.02 &&
                  nonrel <= 0.60;
  return {ok, std::string("concept error in [0.4, 0.6]: ") + (band ? "yes" : "no") + "; after edits r_cbm_deep " +
                  mean_str(after["r_cbm_deep"]) + " (>= 0.75), r_dcr with rules " + mean_str(after["r_dcr"]) +
                  " (1.00 ± 0.02), best non-relational " + fmt("%.3f", nonrel) + " (<= 0.60)"};
}

bool rps_rules_match(const Model& model, const RelationalDataset& ds, std::string& shown) {
  bool all = true;
  for (auto [task, v] : {std::pair{"wins", Sign::kPaper}, std::pair{"loses", Sign::kScissors},
                         std::pair{"ties", Sign::kRock}}) {
    const Sign u = rps_opponent_for(task, v);
    std::optional<std::size_t> world;
    for (std::size_t w = 0; w < ds.worlds.size() && !world; ++w) {
      const auto& W = ds.worlds[w];
      if (W.split != Split::kTest) continue;
      bool pv = false, pu = false;
      for (const auto& c : W.concepts) {
        pv = pv || (c.args[0] == 0 && c.y > 0.5 && c.pred == sign_name(v));
        pu = pu || (c.args[0] == 1 && c.y > 0.5 && c.pred == sign_name(u));
      }
      if (pv && pu) world = w;
    }
    if (!world) {
      shown += std::string(" no test match for ") + task;
      all = false;
      continue;
    }
    const auto rule = extract_rule(model, ds, *world, ds.worlds[*world].ground_atom(task, {0}));
    std::set<std::string> expected;
    for (const auto& [atom, positive] : rps_rule_literals(task, v)) {
      expected.insert((positive ? "" : "~") + to_string(atom));
    }
    const bool match = rule.literal_set() == expected;
    all = all && match;
    shown += "\n    " + to_string(rule) + (match ? "" : "  (differs)");
  }
  return all;
}

Verdict rule_recovery() {
  std::size_t rps_ok = 0, countries_ok = 0;
  const std::set<std::string> target{"locatedIn(v1,u)", "locatedIn(u,v2)"};
  std::vector<double> mrr;
  for (std::size_t s = 0; s < opt.seeds; ++s) {
    {
      auto cfg = load("rps_rules.cfg", s);
      auto ds = make_dataset(cfg);
      auto model = make_model(cfg, ds);
      train(model, ds, train_config(cfg), loss_config(cfg));
      std::string shown;
      const bool ok = rps_rules_match(model, ds, shown);
      rps_ok += ok;
      note("rps rules seed " + std::to_string(s) + (ok ? ": match" : ": mismatch") + shown);
    }
    {
      auto cfg = load("countries.cfg", s);
      auto ds = make_dataset(cfg);
      auto model = make_model(cfg, ds);
      train(model, ds, train_config(cfg), loss_config(cfg));
      mrr.push_back(evaluate(model, ds, {Split::kTest}, MetricKind::kMrr));
      std::map<std::set<std::string>, std::size_t> votes;
      std::map<std::set<std::string>, std::string> text;
      const auto& W = ds.worlds[0];
      for (const auto& a : W.tasks) {
        if (a.y <= 0.5 || W.split_of(a) != Split::kTest) continue;
        auto rule = extract_rule(model, ds, 0, W.ground_atom(a.pred, a.args));
        votes[rule.literal_set()]++;
        text[rule.literal_set()] = to_string(rule);
      }
      std::set<std::string> modal;
      std::size_t best = 0;
      for (const auto& [lits, n] : votes) {
        if (n > best) {
          best = n;
          modal = lits;
        }
      }
      countries_ok += modal == target;
      note("countries seed " + std::to_string(s) + ": test mrr " + fmt("%.3f", mrr.back()) + ", modal rule " +
           text[modal] + " (" + std::to_string(best) + " queries)");
    }
  }
  const auto need = static_cast<std::size_t>(std::ceil(0.8 * static_cast<double>(opt.seeds)));
  const bool ok = rps_ok >= need && countries_ok >= need;
  return {ok, "rps wins/loses/ties literal sets exact on " + std::to_string(rps_ok) + "/" +
                  std::to_string(opt.seeds) + " seeds; countries modal rule locatedIn(v1,u), locatedIn(u,v2) on " +
                  std::to_string(countries_ok) + "/" + std::to_string(opt.seeds) + " seeds (need " +
                  std::to_string(need) + "); countries test mrr " + mean_str(mrr)};
}

Verdict data_efficiency() {
  std::map<std::pair<std::string, double>, std::vector<double>> acc;
  std::vector<std::string> models;
  std::vector<double> fractions;
  for (std::size_t s = 0; s < opt.seeds; ++s) {
    auto cfg = load("citation.cfg", s);
    auto ds = make_dataset(cfg);
    models = cfg.list("models");
    fractions = cfg.numbers("fractions");
    std::vector<RunSpec> runs;
    for (const auto& m : models) {
      auto c = cfg;
      c.set("model", m);
      runs.push_back(run_spec(c, ds.schema));
    }
    std::string line = "citation seed " + std::to_string(s) + ":";
    for (const auto& cell : data_efficiency_protocol(ds, runs, fractions)) {
      acc[{cell.model, cell.fraction}].push_back(cell.accuracy);
      line += " " + cell.model + "@" + fmt("%g", cell.fraction) + "=" + fmt("%.3f", cell.accuracy);
    }
    note(line);
  }
  const std::string bb = "black_box_rel";
  bool low_ok = true, full_ok = true;
  std::string detail;
  for (double f : {1.0, 0.25}) {
    detail += fmt(detail.empty() ? "at %g%%:" : "; at %g%%:", f * 100);
    for (const auto& m : models) {
      detail += " " + m + " " + fmt("%.3f", mean(acc[{m, f}]));
      if (m == bb) continue;
      const double gap = mean(acc[{m, f}]) - mean(acc[{bb, f}]);
      if (f == 0.25) low_ok = low_ok && gap >= 0.05;
      if (f == 1.0) full_ok = full_ok && std::abs(gap) <= 0.05;
    }
  }
  return {low_ok && full_ok, "accuracy " + detail + " (at 25% every relational CBM >= black box + 0.05: " +
                                 (low_ok ? "yes" : "no") + "; at 100% within 0.05: " + (full_ok ? "yes" : "no") + ")"};
}

Verdict low_supervision() {
  std::vector<double> auc;
  for (std::size_t s = 0; s < opt.seeds; ++s) {
    auto cfg = load("rps_low.cfg", s);
    auc.push_back(train_and_test(cfg));
    note("r_dcr_low seed " + std::to_string(s) + ": " + fmt("%.3f", auc.back()));
  }
  return {mean(auc) >= 0.90, "r_dcr_low with 5 labels per concept roc_auc " + mean_str(auc) + " (>= 0.90)"};
}

Verdict properties() {
  const auto t0 = std::chrono::steady_clock::now();
  bool ok = true;
  std::string failed;
  for (const auto& p : props::all()) {
    auto r = p.run();
    note(p.name + ": " + (r.passed ? "ok, " : "FAILED, ") + r.detail);
    if (!r.passed) failed += " " + p.name;
    ok = ok && r.passed;
  }
  const double sec = seconds_since(t0);
  ok = ok && sec < 60.0;
  return {ok, std::to_string(props::all().size()) + " suites " + (failed.empty() ? "pass" : "fail:" + failed) +
                  " in " + fmt("%.2f s", sec) + " (< 60 s)"};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Reproduction checks for relational concept bottleneck models"};
  app.add_option("--configs", opt.configs, "directory with the shipped configs")->capture_default_str();
  app.add_option("--seeds", opt.seeds, "seeds per experiment")->capture_default_str()->check(CLI::Range(1, 100));
  app.add_option("--only", opt.only, "run only these criteria")->delimiter(',')->check(CLI::Range(1, 8));
  app.add_flag("--strict", opt.strict, "exit 1 when any criterion fails");
  CLI11_PARSE(app, argc, argv);

  const std::vector<std::pair<const char*, Verdict (*)()>> criteria{
      {"relational vs non-relational gap (hanoi)", hanoi_gap},
      {"non-linearity gap (rps)", rps_nonlinearity},
      {"ood curve (hanoi 3 to 7 disks)", ood_curve},
      {"interventions (rps)", interventions},
      {"rule recovery (rps, countries)", rule_recovery},
      {"data efficiency (citation)", data_efficiency},
      {"r_dcr_low (rps)", low_supervision},
      {"property suites", properties},
  };
  std::size_t passed = 0, run = 0;
  bool crashed = false;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    const int id = static_cast<int>(i + 1);
    if (!opt.only.empty() && std::find(opt.only.begin(), opt.only.end(), id) == opt.only.end()) continue;
    ++run;
    const auto t0 = std::chrono::steady_clock::now();
    std::cerr << "criterion " << id << ": " << criteria[i].first << "\n";
    Verdict v;
    try {
      v = criteria[i].second();
    } catch (const std::exception& e) {
      v = {false, std::string("error: ") + e.what()};
      crashed = true;
    }
    passed += v.passed;
    std::cout << "criterion " << id << " " << (v.passed ? "PASS" : "FAIL") << "  " << criteria[i].first << ": "
              << v.detail << fmt("  [%.0f s]", seconds_since(t0)) << "\n"
              << std::flush;
  }
  std::cout << passed << "/" << run << " criteria passed\n";
  if (crashed) return 1;
  return opt.strict && passed != run ? 1 : 0;
}
