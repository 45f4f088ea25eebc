// relcbm: data generation, training, evaluation and the experiment protocols.

#include <spdlog/sinks/stdout_color_sinks.h>
#include <spdlog/spdlog.h>

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "relcbm/config.hpp"
#include "relcbm/properties.hpp"

namespace fs = std::filesystem;
using namespace relcbm;
using ojson = nlohmann::ordered_json;

namespace {

// Errors raised while reading templates count as template mismatches.
struct TemplateError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

int exit_code(ErrorCode c) {
  switch (c) {
    case ErrorCode::kParseError:
    case ErrorCode::kInvalidCount: return 2;
    case ErrorCode::kSchemaMismatch:
    case ErrorCode::kTemplateArityMismatch:
    case ErrorCode::kUnknownPredicate:
    case ErrorCode::kArityMismatch:
    case ErrorCode::kNonConceptBody:
    case ErrorCode::kDimMismatch: return 3;
    case ErrorCode::kIoError: return 4;
    default: return 1;
  }
}

struct Cli {
  Config cfg;
  std::string config_file;
  std::map<std::string, std::string> overrides;
  std::string out;
  std::string checkpoint;
  std::size_t jobs = 1;
  std::string command;
};

void setup_logging() {
  auto logger = spdlog::stderr_color_mt("relcbm");
  logger->set_pattern("[%l] %v");
  spdlog::set_default_logger(logger);
  const char* env = std::getenv("RELCBM_LOG");
  const std::string level = env ? env : "info";
  if (level == "error") {
    spdlog::set_level(spdlog::level::err);
  } else if (level == "debug") {
    spdlog::set_level(spdlog::level::debug);
  } else {
    spdlog::set_level(spdlog::level::info);
  }
}

std::string run_dir(const Cli& cli) { return cli.out.empty() ? "run" : cli.out; }

std::string prepare_dir(const Cli& cli) {
  const auto dir = run_dir(cli);
  fs::create_directories(dir);
  const auto name = cli.command == "train" ? "config.txt" : cli.command + ".config.txt";
  std::ofstream(fs::path(dir) / name) << cli.cfg.snapshot();
  return dir;
}

std::string run_name(const Cli& cli) { return fs::path(run_dir(cli)).lexically_normal().filename().string(); }

void emit(const Cli& cli, ojson rec, bool truncate = false) {
  const auto path = fs::path(run_dir(cli)) / "metrics.jsonl";
  std::ofstream out(path, truncate ? std::ios::trunc : std::ios::app);
  out << rec.dump() << "\n";
  std::cout << rec.dump() << "\n";
}

ojson metric_record(const Cli& cli, const std::string& model, const std::string& dataset, const std::string& metric,
                    std::optional<double> value) {
  ojson r;
  r["run"] = run_name(cli);
  r["model"] = model;
  r["dataset"] = dataset;
  r["metric"] = metric;
  if (value) {
    r["value"] = *value;
  } else {
    r["value"] = "NA";
  }
  r["seed"] = cli.cfg.seed();
  return r;
}

std::vector<Template> templates_for(const Config& cfg, const Schema& schema) {
  try {
    return config_templates(cfg, schema);
  } catch (const Error& e) {
    if (e.code() == ErrorCode::kIoError) throw;
    throw TemplateError(e.what());
  }
}

Model build_model(const Config& cfg, const RelationalDataset& ds) {
  const auto mc = model_config(cfg);
  train_config(cfg);
  const auto templates = templates_for(cfg, ds.schema);
  std::vector<std::string> universe;
  if (mc.kind == ModelKind::kFlatCbm) universe = ds.worlds.at(0).universe();
  try {
    return Model(ds.schema, ds.feature_dim(), templates, mc, universe);
  } catch (const Error& e) {
    if (exit_code(e.code()) == 3 || e.code() == ErrorCode::kEmptyGroundingSet) throw TemplateError(e.what());
    throw;
  }
}

std::string checkpoint_path(const Cli& cli) {
  return cli.checkpoint.empty() ? (fs::path(run_dir(cli)) / "checkpoint.json").string() : cli.checkpoint;
}

RelationalDataset dataset(const Config& cfg) {
  auto ds = make_dataset(cfg);
  spdlog::debug("dataset {}: {} worlds, feature dim {}", ds.name, ds.worlds.size(), ds.feature_dim());
  return ds;
}

int cmd_generate(Cli& cli) {
  if (cli.out.empty()) throw Error(ErrorCode::kInvalidCount, "generate needs -o FILE");
  const auto ds = dataset(cli.cfg);
  save_dataset(cli.out, ds);
  std::size_t entities = 0;
  std::map<std::string, std::pair<std::size_t, std::size_t>> rate;  // positives, labeled
  for (const auto& w : ds.worlds) {
    entities += w.entities.size();
    for (const auto* group : {&w.concepts, &w.tasks}) {
      for (const auto& a : *group) {
        if (std::isnan(a.y)) continue;
        rate[a.pred].first += a.y > 0.5;
        rate[a.pred].second += 1;
      }
    }
  }
  std::printf("%s: %zu worlds, %zu entities -> %s\n", ds.name.c_str(), ds.worlds.size(), entities, cli.out.c_str());
  std::printf("%-16s %-8s %10s %10s\n", "predicate", "kind", "labeled", "positive");
  for (const auto& p : ds.schema.predicates()) {
    const auto [pos, n] = rate[p.name];
    std::printf("%-16s %-8s %10zu %10.3f\n", p.name.c_str(), to_string(p.kind), n,
                n ? static_cast<double>(pos) / static_cast<double>(n) : 0.0);
  }
  return 0;
}

int cmd_train(Cli& cli) {
  const auto ds = dataset(cli.cfg);
  auto model = build_model(cli.cfg, ds);
  const auto dir = prepare_dir(cli);
  spdlog::info("training {} on {} for {} epochs", cli.cfg.str("model"), ds.name, cli.cfg.count("epochs"));
  const auto result = train(model, ds, train_config(cli.cfg), loss_config(cli.cfg));
  std::ofstream csv(fs::path(dir) / "epochs.csv");
  write_epoch_csv(csv, result.log);
  save_checkpoint((fs::path(dir) / "checkpoint.json").string(), model);
  const auto metric = parse_metric(ds.metric);
  const double value = evaluate(model, ds, {Split::kTest}, metric);
  spdlog::info("wrote {}/checkpoint.json, epochs.csv, metrics.jsonl", dir);
  emit(cli, metric_record(cli, cli.cfg.str("model"), ds.name, to_string(metric), value), true);
  return 0;
}

int cmd_evaluate(Cli& cli) {
  const auto model = load_checkpoint(checkpoint_path(cli));
  const auto ds = dataset(cli.cfg);
  model.check_compatible(ds);
  prepare_dir(cli);
  const auto metric = parse_metric(ds.metric);
  auto rec = metric_record(cli, to_string(model.kind()), ds.name, to_string(metric), std::nullopt);
  try {
    rec["value"] = evaluate(model, ds, {Split::kTest}, metric);
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kUniverseMismatch) throw;
    rec["reason"] = "UniverseMismatch";
    spdlog::info("{}", e.what());
  }
  emit(cli, rec);
  return 0;
}

int cmd_intervene(Cli& cli) {
  const auto model = load_checkpoint(checkpoint_path(cli));
  const auto ds = dataset(cli.cfg);
  model.check_compatible(ds);
  const bool rules = cli.cfg.flag("rules");
  if (rules && ds.name != "rps") throw Error(ErrorCode::kInvalidCount, "rule edits are defined for rps only");
  prepare_dir(cli);
  NoiseSpec noise;
  noise.seed = cli.cfg.has("noise_seed") ? cli.cfg.count("noise_seed") : cli.cfg.seed();
  std::function<InterventionSet(const Model&, const RelationalDataset&, const std::set<Split>&)> rule_edits;
  if (rules) rule_edits = rps_rule_interventions;
  const auto rep = intervention_protocol(model, ds, noise, rule_edits);
  std::printf("%-28s %8s\n", "stage", "value");
  std::printf("%-28s %8.3f\n", "noise amplitude", rep.amplitude);
  std::printf("%-28s %8.3f\n", "concept error", rep.concept_error);
  std::printf("%-28s %8.3f\n", "accuracy before", rep.before);
  std::printf("%-28s %8.3f\n", "accuracy after concepts", rep.after_concepts);
  if (rep.after_rules) std::printf("%-28s %8.3f\n", "accuracy after rules", *rep.after_rules);
  const auto kind = to_string(model.kind());
  emit(cli, metric_record(cli, kind, ds.name, "concept_error", rep.concept_error));
  emit(cli, metric_record(cli, kind, ds.name, "accuracy_before", rep.before));
  emit(cli, metric_record(cli, kind, ds.name, "accuracy_after_concepts", rep.after_concepts));
  if (rep.after_rules) emit(cli, metric_record(cli, kind, ds.name, "accuracy_after_rules", *rep.after_rules));
  return 0;
}

int cmd_ood(Cli& cli) {
  const auto& cfg = cli.cfg;
  OodOptions o;
  o.train_disks = cfg.count("train_disks");
  o.train_worlds = cfg.count("worlds");
  o.test_worlds = cfg.count("test_worlds");
  o.data_seed = cfg.data_seed();
  o.test_disks.clear();
  for (double d : cfg.numbers("test_disks")) o.test_disks.push_back(static_cast<std::size_t>(d));
  prepare_dir(cli);
  RunSpec run{cfg.str("model"), model_config(cfg), templates_for(cfg, hanoi_schema()), train_config(cfg),
              loss_config(cfg)};
  spdlog::info("training {} on {}-disk towers", run.name, o.train_disks);
  const auto curve = ood_protocol(run, o);
  std::printf("%6s %10s\n", "disks", "roc_auc");
  for (const auto& p : curve) {
    if (p.auc) {
      std::printf("%6zu %10.3f\n", p.disks, *p.auc);
    } else {
      std::printf("%6zu %10s  (%s)\n", p.disks, "NA", p.reason.c_str());
    }
  }
  for (const auto& p : curve) {
    auto rec = metric_record(cli, run.name, "hanoi", "roc_auc", p.auc);
    rec["disks"] = p.disks;
    if (!p.auc) rec["reason"] = p.reason;
    emit(cli, rec);
  }
  return 0;
}

int cmd_data_efficiency(Cli& cli) {
  const auto ds = dataset(cli.cfg);
  std::vector<RunSpec> runs;
  for (const auto& m : cli.cfg.list("models")) {
    auto c = cli.cfg;
    c.set("model", m);
    runs.push_back({m, model_config(c), templates_for(c, ds.schema), train_config(c), loss_config(c)});
  }
  const auto fractions = cli.cfg.numbers("fractions");
  prepare_dir(cli);
  spdlog::info("{} models x {} fractions on {} threads", runs.size(), fractions.size(), cli.jobs);
  const auto cells = data_efficiency_protocol(ds, runs, fractions, cli.jobs);
  std::printf("%-16s", "model");
  for (double f : fractions) std::printf(" %8.0f%%", f * 100);
  std::printf("\n");
  for (const auto& r : runs) {
    std::printf("%-16s", r.name.c_str());
    for (const auto& c : cells) {
      if (c.model == r.name) std::printf(" %9.3f", c.accuracy);
    }
    std::printf("\n");
  }
  for (const auto& c : cells) {
    auto rec = metric_record(cli, c.model, ds.name, "accuracy", c.accuracy);
    rec["fraction"] = c.fraction;
    emit(cli, rec);
  }
  return 0;
}

int cmd_extract_rules(Cli& cli) {
  const auto model = load_checkpoint(checkpoint_path(cli));
  const auto ds = dataset(cli.cfg);
  model.check_compatible(ds);
  const auto dir = prepare_dir(cli);
  const double threshold = cli.cfg.num("threshold");
  std::map<std::string, std::map<std::string, std::size_t>> counts;
  std::map<std::string, std::string> example;
  std::ofstream text(fs::path(dir) / "rules.txt");
  for (std::size_t w = 0; w < ds.worlds.size(); ++w) {
    const auto& world = ds.worlds[w];
    for (const auto& a : world.tasks) {
      if (!(a.y > 0.5) || world.split_of(a) != Split::kTest) continue;
      const auto query = world.ground_atom(a.pred, a.args);
      const auto rule = extract_rule(model, ds, w, query, threshold);
      const auto s = to_string(rule);
      if (!counts[a.pred][s]++) example[s] = to_string(query) + " " + to_string(rule.theta);
      text << w << "\t" << to_string(query) << "\t" << to_string(rule.theta) << "\t" << s << "\n";
    }
  }
  for (const auto& [task, rules] : counts) {
    std::printf("%s\n", task.c_str());
    std::vector<std::pair<std::size_t, std::string>> sorted;
    for (const auto& [r, n] : rules) sorted.push_back({n, r});
    std::sort(sorted.rbegin(), sorted.rend());
    for (const auto& [n, r] : sorted) std::printf("  %5zu  %s\n         e.g. %s\n", n, r.c_str(), example[r].c_str());
  }
  spdlog::info("per-query rules in {}/rules.txt", dir);
  return 0;
}

int cmd_gradcheck(Cli& cli) {
  const auto r = props::autodiff(cli.cfg.seed());
  std::printf("%s\n", r.detail.c_str());
  std::printf("max relative error ≤ 1e-4: %s\n", r.passed ? "PASS" : "FAIL");
  return r.passed ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
  setup_logging();
  Cli cli;
  CLI::App app{"Relational concept bottleneck models"};
  app.require_subcommand(1);
  app.fallthrough();
  app.add_option("--config", cli.config_file, "key = value config file; flags override it")->check(CLI::ExistingFile);
  app.add_option("-o,--out", cli.out, "output file (generate) or run directory (default ./run)");
  app.add_option("--checkpoint", cli.checkpoint, "checkpoint file (default <run directory>/checkpoint.json)");
  app.add_option("--jobs", cli.jobs, "parallel training runs")->check(CLI::PositiveNumber)->capture_default_str();
  for (const auto& k : kConfigKeys) {
    std::string flag = k.name;
    std::replace(flag.begin(), flag.end(), '_', '-');
    std::string help = k.help;
    if (*k.fallback) help += " [" + std::string(k.fallback) + "]";
    app.add_option_function<std::string>(
        "--" + flag, [&cli, key = std::string(k.name)](const std::string& v) { cli.overrides[key] = v; }, help);
  }
  const std::vector<std::pair<const char*, const char*>> commands{
      {"generate", "write a generated dataset as JSONL"},
      {"train", "train a model; writes checkpoint, epochs.csv and metrics.jsonl"},
      {"evaluate", "score a checkpoint on a dataset's test split"},
      {"intervene", "corrupt inputs, then apply ground-truth concept (and rule) edits"},
      {"ood", "train on one hanoi height and test on taller towers"},
      {"data-efficiency", "test accuracy per model and supervised fraction"},
      {"extract-rules", "rules behind each positive test query of a DCR checkpoint"},
      {"gradcheck", "compare reverse-mode gradients with finite differences"},
  };
  for (const auto& [name, help] : commands) {
    app.add_subcommand(name, help)->callback([&cli, n = std::string(name)] { cli.command = n; });
  }
  CLI11_PARSE(app, argc, argv);

  try {
    try {
      if (!cli.config_file.empty()) cli.cfg.load(cli.config_file);
      for (const auto& [k, v] : cli.overrides) cli.cfg.set(k, v);
      if (cli.command == "generate") return cmd_generate(cli);
      if (cli.command == "train") return cmd_train(cli);
      if (cli.command == "evaluate") return cmd_evaluate(cli);
      if (cli.command == "intervene") return cmd_intervene(cli);
      if (cli.command == "ood") return cmd_ood(cli);
      if (cli.command == "data-efficiency") return cmd_data_efficiency(cli);
      if (cli.command == "extract-rules") return cmd_extract_rules(cli);
      if (cli.command == "gradcheck") return cmd_gradcheck(cli);
    } catch (const Error& e) {
      spdlog::error("{}", e.what());
      return exit_code(e.code());
    } catch (const TemplateError& e) {
      spdlog::error("{}", e.what());
      return 3;
    }
  } catch (const std::exception& e) {
    spdlog::error("{}", e.what());
    return 1;
  }
  return 1;
}
