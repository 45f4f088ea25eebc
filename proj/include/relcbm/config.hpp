#pragma once

#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "relcbm/dataset.hpp"
#include "relcbm/error.hpp"
#include "relcbm/generators.hpp"
#include "relcbm/model.hpp"
#include "relcbm/template_parser.hpp"
#include "relcbm/trainer.hpp"

namespace relcbm {

struct ConfigKey {
  const char* name;
  const char* fallback;  // empty: unset
  const char* help;
};

// Every key accepted in a config file; the CLI exposes each one as --<key> with '_' spelled '-'.
inline constexpr ConfigKey kConfigKeys[] = {
    {"dataset", "", "generator: hanoi, rps, family, citation or countries"},
    {"data", "", "JSONL dataset file; replaces the generator"},
    {"worlds", "200", "hanoi towers, rps matches or family trees"},
    {"disks", "3", "disks per hanoi tower"},
    {"depth", "3", "family tree generations"},
    {"docs", "200", "citation documents"},
    {"classes", "4", "citation classes"},
    {"homophily", "0.8", "citation probability that a cite stays in class"},
    {"countries", "24", "countries toy: countries"},
    {"regions", "8", "countries toy: regions"},
    {"continents", "4", "countries toy: continents"},
    {"missing", "0.25", "countries toy: held-out fraction of countries"},
    {"template", "", "template file"},
    {"model", "r_cbm_linear", "model kind"},
    {"aggregator", "max", "max or min"},
    {"embed_dim", "16", "entity and concept embedding size"},
    {"hidden", "32", "concept head hidden width"},
    {"task_hidden", "32", "deep predictor hidden width"},
    {"relevance_bias", "2.0", "initial DCR relevance logit"},
    {"hard_concepts", "false", "threshold concepts at 0.5 with straight-through gradients"},
    {"epochs", "2000", "full-batch epochs"},
    {"optimizer", "adam", "adam or sgd"},
    {"lr", "0.001", "learning rate"},
    {"lambda", "0.1", "task loss weight"},
    {"task_loss", "bce", "bce or ce"},
    {"concept_cap", "", "keep at most this many train labels per concept"},
    {"concept_fraction", "1.0", "keep this share of train labels per concept"},
    {"relevance_warmup", "0", "epochs with every DCR literal relevant"},
    {"eval_every", "0", "validation period in epochs; 0 validates once at the end"},
    {"seed", "0", "model, training and data seed"},
    {"data_seed", "", "generator seed; defaults to seed"},
    {"train_disks", "3", "ood: tower height used for training"},
    {"test_disks", "3,4,5,6,7", "ood: evaluated tower heights"},
    {"test_worlds", "100", "ood: towers per evaluated height"},
    {"fractions", "1,0.75,0.5,0.25", "data-efficiency: supervised node fractions"},
    {"models", "r_cbm_linear,r_cbm_deep,r_dcr,black_box_rel", "data-efficiency: model kinds"},
    {"rules", "false", "intervene: add ground-truth rule edits (rps only)"},
    {"noise_seed", "", "intervene: corruption seed; defaults to seed"},
    {"threshold", "0.5", "extract-rules: relevance and polarity threshold"},
};

/// key=value settings; later assignments override earlier ones.
class Config {
 public:
  Config() {
    for (const auto& k : kConfigKeys) {
      if (*k.fallback) values_[k.name] = k.fallback;
    }
  }

  static bool known(const std::string& key) {
    for (const auto& k : kConfigKeys) {
      if (key == k.name) return true;
    }
    return false;
  }

  void set(const std::string& key, const std::string& value) {
    if (!known(key)) throw Error(ErrorCode::kParseError, "unknown config key '" + key + "'");
    values_[key] = value;
  }

  /// Parses `key = value` lines; '#' starts a comment. Relative paths resolve against the file.
  void load(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw Error(ErrorCode::kIoError, "cannot read config " + path);
    const auto dir = std::filesystem::path(path).parent_path();
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (auto h = line.find('#'); h != std::string::npos) line.resize(h);
      const auto eq = line.find('=');
      if (trim(line).empty()) continue;
      if (eq == std::string::npos) {
        throw Error(ErrorCode::kParseError, path + ":" + std::to_string(lineno) + ": expected key = value");
      }
      const auto key = trim(line.substr(0, eq));
      auto value = trim(line.substr(eq + 1));
      if ((key == "template" || key == "data") && !value.empty() && std::filesystem::path(value).is_relative()) {
        value = (dir / value).lexically_normal().string();
      }
      try {
        set(key, value);
      } catch (const Error& e) {
        throw Error(ErrorCode::kParseError, path + ":" + std::to_string(lineno) + ": " + e.what());
      }
    }
  }

  bool has(const std::string& key) const { return values_.count(key) && !values_.at(key).empty(); }

  std::string str(const std::string& key) const {
    if (!has(key)) throw Error(ErrorCode::kInvalidCount, "missing setting '" + key + "'");
    return values_.at(key);
  }

  double num(const std::string& key) const {
    const auto s = str(key);
    try {
      std::size_t used = 0;
      double v = std::stod(s, &used);
      if (used == s.size()) return v;
    } catch (const std::exception&) {
    }
    throw Error(ErrorCode::kInvalidCount, key + " must be a number, got '" + s + "'");
  }

  std::size_t count(const std::string& key) const {
    const double v = num(key);
    if (v < 0 || v != static_cast<double>(static_cast<std::size_t>(v))) {
      throw Error(ErrorCode::kInvalidCount, key + " must be a nonnegative integer");
    }
    return static_cast<std::size_t>(v);
  }

  bool flag(const std::string& key) const {
    const auto s = str(key);
    if (s == "true" || s == "1" || s == "yes") return true;
    if (s == "false" || s == "0" || s == "no") return false;
    throw Error(ErrorCode::kInvalidCount, key + " must be true or false");
  }

  std::vector<std::string> list(const std::string& key) const {
    std::vector<std::string> out;
    std::stringstream ss(str(key));
    std::string item;
    while (std::getline(ss, item, ',')) {
      if (!trim(item).empty()) out.push_back(trim(item));
    }
    return out;
  }

  std::vector<double> numbers(const std::string& key) const {
    std::vector<double> out;
    for (const auto& s : list(key)) {
      try {
        out.push_back(std::stod(s));
      } catch (const std::exception&) {
        throw Error(ErrorCode::kInvalidCount, key + ": '" + s + "' is not a number");
      }
    }
    return out;
  }

  std::uint64_t seed() const { return count("seed"); }
  std::uint64_t data_seed() const { return has("data_seed") ? count("data_seed") : seed(); }

  /// One `key = value` line per set key, in declaration order.
  std::string snapshot() const {
    std::string out;
    for (const auto& k : kConfigKeys) {
      if (has(k.name)) out += std::string(k.name) + " = " + values_.at(k.name) + "\n";
    }
    return out;
  }

 private:
  static std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return "";
    return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
  }

  std::map<std::string, std::string> values_;
};

inline RelationalDataset make_dataset(const Config& cfg) {
  if (cfg.has("data")) return load_dataset(cfg.str("data"));
  const auto name = cfg.str("dataset");
  const auto seed = cfg.data_seed();
  if (name == "hanoi") return gen_hanoi(cfg.count("worlds"), cfg.count("disks"), seed);
  if (name == "rps") return gen_rps(cfg.count("worlds"), seed);
  if (name == "family") return gen_family(cfg.count("worlds"), cfg.count("depth"), seed);
  if (name == "citation") return gen_citation_toy(cfg.count("docs"), cfg.count("classes"), cfg.num("homophily"), seed);
  if (name == "countries") {
    return gen_countries_toy(cfg.count("countries"), cfg.count("regions"), cfg.count("continents"), cfg.num("missing"),
                             seed);
  }
  throw Error(ErrorCode::kInvalidCount, "unknown dataset '" + name + "'");
}

inline ModelConfig model_config(const Config& cfg) {
  ModelConfig m;
  m.kind = parse_model_kind(cfg.str("model"));
  m.aggregator = parse_aggregator(cfg.str("aggregator"));
  m.encoder.embed_dim = cfg.count("embed_dim");
  m.encoder.hidden = cfg.count("hidden");
  m.task_hidden = cfg.count("task_hidden");
  m.relevance_bias = cfg.num("relevance_bias");
  m.hard_concepts = cfg.flag("hard_concepts");
  m.seed = cfg.seed();
  return m;
}

inline TrainConfig train_config(const Config& cfg) {
  TrainConfig t;
  t.epochs = cfg.count("epochs");
  const auto opt = cfg.str("optimizer");
  if (opt != "adam" && opt != "sgd") throw Error(ErrorCode::kInvalidCount, "optimizer must be adam or sgd");
  t.optimizer.kind = opt == "adam" ? OptimizerKind::kAdam : OptimizerKind::kSgd;
  t.optimizer.learning_rate = cfg.num("lr");
  t.seed = cfg.seed();
  t.concept_fraction = cfg.num("concept_fraction");
  if (cfg.has("concept_cap")) t.concept_cap = cfg.count("concept_cap");
  t.hard_concepts = cfg.flag("hard_concepts");
  t.eval_every = cfg.count("eval_every");
  t.relevance_warmup = cfg.count("relevance_warmup");
  return t;
}

inline LossConfig loss_config(const Config& cfg) { return {cfg.num("lambda"), parse_task_loss(cfg.str("task_loss"))}; }

inline std::vector<Template> config_templates(const Config& cfg, const Schema& schema) {
  const auto kind = parse_model_kind(cfg.str("model"));
  if (!uses_file_templates(kind)) return {};
  if (!cfg.has("template")) throw Error(ErrorCode::kSchemaMismatch, cfg.str("model") + " needs a template file");
  return load_templates(cfg.str("template"), schema);
}

inline RunSpec run_spec(const Config& cfg, const Schema& schema) {
  return {cfg.str("model"), model_config(cfg), config_templates(cfg, schema), train_config(cfg), loss_config(cfg)};
}

/// A model ready for training on `ds`; Flat-CBM fixes its layout to the first world.
inline Model make_model(const Config& cfg, const RelationalDataset& ds) {
  auto run = run_spec(cfg, ds.schema);
  std::vector<std::string> universe;
  if (run.model.kind == ModelKind::kFlatCbm) {
    if (ds.worlds.empty()) throw Error(ErrorCode::kEmptyUniverse, "flat_cbm needs a world");
    universe = ds.worlds.front().universe();
  }
  return Model(ds.schema, ds.feature_dim(), run.templates, run.model, universe);
}

}  // namespace relcbm
