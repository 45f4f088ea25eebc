#pragma once

#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "relcbm/error.hpp"
#include "relcbm/grounding.hpp"
#include "relcbm/logic.hpp"

namespace relcbm {

enum class Split { kTrain, kVal, kTest };

inline const char* to_string(Split s) {
  switch (s) {
    case Split::kTrain: return "train";
    case Split::kVal: return "val";
    case Split::kTest: return "test";
  }
  return "?";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::kTrain;
  if (s == "val") return Split::kVal;
  if (s == "test") return Split::kTest;
  throw Error(ErrorCode::kSchemaMismatch, "unknown split '" + s + "'");
}

struct Entity {
  std::string id;
  std::vector<double> x;

  bool operator==(const Entity&) const = default;
};

/// A labeled ground atom; arguments are entity positions within the world.
/// `split` overrides the world split (used by single-world datasets).
struct LabeledAtom {
  std::string pred;
  std::vector<std::size_t> args;
  double y = 0.0;
  std::optional<Split> split;

  bool operator==(const LabeledAtom&) const = default;
};

struct RelationFact {
  std::string pred;
  std::vector<std::size_t> args;

  bool operator==(const RelationFact&) const = default;
};

struct World {
  int id = 0;
  Split split = Split::kTrain;
  std::vector<Entity> entities;
  std::vector<LabeledAtom> concepts;
  std::vector<LabeledAtom> tasks;
  std::vector<RelationFact> relations;

  std::vector<std::string> universe() const {
    std::vector<std::string> ids;
    ids.reserve(entities.size());
    for (const auto& e : entities) ids.push_back(e.id);
    return ids;
  }

  FactSet facts() const {
    FactSet f;
    for (const auto& r : relations) f.add(r.pred, r.args);
    return f;
  }

  Split split_of(const LabeledAtom& a) const { return a.split.value_or(split); }

  std::size_t add_entity(std::string id, std::vector<double> x) {
    entities.push_back({std::move(id), std::move(x)});
    return entities.size() - 1;
  }

  Atom ground_atom(const std::string& pred, const std::vector<std::size_t>& args) const {
    Atom a{pred, {}};
    for (auto i : args) a.args.push_back(Term::constant(entities[i].id));
    return a;
  }

  bool operator==(const World&) const = default;
};

struct RelationalDataset {
  std::string name;
  std::string metric = "roc_auc";  // roc_auc | accuracy | mrr
  Schema schema;
  std::vector<World> worlds;

  std::size_t feature_dim() const {
    for (const auto& w : worlds) {
      if (!w.entities.empty()) return w.entities.front().x.size();
    }
    return 0;
  }

  bool operator==(const RelationalDataset&) const = default;
};

/// Checks entity references and feature-dimension uniformity.
inline void validate_dataset(const RelationalDataset& ds) {
  const std::size_t d = ds.feature_dim();
  for (const auto& w : ds.worlds) {
    for (const auto& e : w.entities) {
      if (e.x.size() != d) throw Error(ErrorCode::kSchemaMismatch, "entity " + e.id + " has feature dim " +
                                                                      std::to_string(e.x.size()));
    }
    auto check = [&](const std::string& pred, const std::vector<std::size_t>& args, PredicateKind kind) {
      const auto* sig = ds.schema.find(pred, kind);
      if (!sig) throw Error(ErrorCode::kSchemaMismatch, "undeclared " + std::string(to_string(kind)) + " " + pred);
      if (static_cast<std::size_t>(sig->arity) != args.size()) {
        throw Error(ErrorCode::kSchemaMismatch, "arity of " + pred);
      }
      for (auto a : args) {
        if (a >= w.entities.size()) throw Error(ErrorCode::kSchemaMismatch, "entity index out of range in " + pred);
      }
    };
    for (const auto& a : w.concepts) check(a.pred, a.args, PredicateKind::kConcept);
    for (const auto& a : w.tasks) check(a.pred, a.args, PredicateKind::kTask);
    for (const auto& r : w.relations) check(r.pred, r.args, PredicateKind::kRelation);
  }
}

// ---- JSONL serialization ------------------------------------------------------

namespace detail {

inline std::string json_str(const std::string& s) { return nlohmann::json(s).dump(); }

inline std::string fmt_double(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string fmt_label(double y) {
  if (y == static_cast<double>(static_cast<long long>(y))) return std::to_string(static_cast<long long>(y));
  return fmt_double(y);
}

inline std::string args_json(const World& w, const std::vector<std::size_t>& args) {
  std::string s = "[";
  for (std::size_t i = 0; i < args.size(); ++i) {
    if (i) s += ",";
    s += json_str(w.entities[args[i]].id);
  }
  return s + "]";
}

}  // namespace detail

/// Writes one record per line with a fixed field order; floats use 17 significant digits.
inline void write_dataset(std::ostream& out, const RelationalDataset& ds) {
  out << "{\"t\":\"schema\",\"preds\":[";
  const auto& preds = ds.schema.predicates();
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (i) out << ",";
    out << "{\"name\":" << detail::json_str(preds[i].name) << ",\"arity\":" << preds[i].arity << ",\"kind\":\""
        << to_string(preds[i].kind) << "\"}";
  }
  out << "]";
  if (!ds.schema.exclusive_groups.empty()) out << ",\"exclusive\":" << nlohmann::json(ds.schema.exclusive_groups).dump();
  out << ",\"name\":" << detail::json_str(ds.name) << ",\"metric\":" << detail::json_str(ds.metric) << "}\n";

  for (const auto& w : ds.worlds) {
    out << "{\"t\":\"world\",\"id\":" << w.id << ",\"split\":\"" << to_string(w.split) << "\"}\n";
    for (const auto& e : w.entities) {
      out << "{\"t\":\"entity\",\"world\":" << w.id << ",\"id\":" << detail::json_str(e.id) << ",\"x\":[";
      for (std::size_t i = 0; i < e.x.size(); ++i) {
        if (i) out << ",";
        out << detail::fmt_double(e.x[i]);
      }
      out << "]}\n";
    }
    for (const auto& r : w.relations) {
      out << "{\"t\":\"relation\",\"world\":" << w.id << ",\"pred\":" << detail::json_str(r.pred)
          << ",\"args\":" << detail::args_json(w, r.args) << "}\n";
    }
    auto labeled = [&](const char* tag, const LabeledAtom& a) {
      out << "{\"t\":\"" << tag << "\",\"world\":" << w.id << ",\"pred\":" << detail::json_str(a.pred)
          << ",\"args\":" << detail::args_json(w, a.args) << ",\"y\":" << detail::fmt_label(a.y);
      if (a.split) out << ",\"split\":\"" << to_string(*a.split) << "\"";
      out << "}\n";
    };
    for (const auto& a : w.concepts) labeled("concept", a);
    for (const auto& a : w.tasks) labeled("task", a);
  }
}

inline RelationalDataset read_dataset(std::istream& in) {
  RelationalDataset ds;
  std::unordered_map<int, std::size_t> world_index;
  std::vector<std::unordered_map<std::string, std::size_t>> entity_index;
  bool have_schema = false;
  std::string line;
  std::size_t lineno = 0;

  auto world_of = [&](const nlohmann::json& j) -> std::size_t {
    int id = j.at("world").get<int>();
    auto it = world_index.find(id);
    if (it == world_index.end()) {
      throw Error(ErrorCode::kSchemaMismatch, "line " + std::to_string(lineno) + ": unknown world " + std::to_string(id));
    }
    return it->second;
  };
  auto resolve = [&](std::size_t w, const nlohmann::json& args) {
    std::vector<std::size_t> out;
    for (const auto& a : args) {
      auto id = a.get<std::string>();
      auto it = entity_index[w].find(id);
      if (it == entity_index[w].end()) {
        throw Error(ErrorCode::kSchemaMismatch, "line " + std::to_string(lineno) + ": unknown entity '" + id + "'");
      }
      out.push_back(it->second);
    }
    return out;
  };

  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kParseError, "line " + std::to_string(lineno) + ": " + e.what());
    }
    try {
      const auto t = j.at("t").get<std::string>();
      if (t == "schema") {
        std::vector<PredicateSig> preds;
        for (const auto& p : j.at("preds")) {
          preds.push_back({p.at("name").get<std::string>(), p.at("arity").get<int>(),
                           parse_kind(p.at("kind").get<std::string>())});
        }
        ds.schema = Schema(std::move(preds));
        if (j.contains("exclusive")) {
          ds.schema.exclusive_groups = j.at("exclusive").get<std::vector<std::vector<std::string>>>();
        }
        if (j.contains("name")) ds.name = j.at("name").get<std::string>();
        if (j.contains("metric")) ds.metric = j.at("metric").get<std::string>();
        have_schema = true;
      } else if (!have_schema) {
        throw Error(ErrorCode::kSchemaMismatch, "line " + std::to_string(lineno) + ": record before schema");
      } else if (t == "world") {
        World w;
        w.id = j.at("id").get<int>();
        w.split = parse_split(j.at("split").get<std::string>());
        world_index[w.id] = ds.worlds.size();
        ds.worlds.push_back(std::move(w));
        entity_index.emplace_back();
      } else if (t == "entity") {
        auto w = world_of(j);
        auto id = j.at("id").get<std::string>();
        entity_index[w][id] = ds.worlds[w].entities.size();
        ds.worlds[w].add_entity(id, j.at("x").get<std::vector<double>>());
      } else if (t == "relation") {
        auto w = world_of(j);
        ds.worlds[w].relations.push_back({j.at("pred").get<std::string>(), resolve(w, j.at("args"))});
      } else if (t == "concept" || t == "task") {
        auto w = world_of(j);
        LabeledAtom a{j.at("pred").get<std::string>(), resolve(w, j.at("args")), j.at("y").get<double>(), {}};
        if (j.contains("split")) a.split = parse_split(j.at("split").get<std::string>());
        (t == "concept" ? ds.worlds[w].concepts : ds.worlds[w].tasks).push_back(std::move(a));
      } else {
        throw Error(ErrorCode::kParseError, "line " + std::to_string(lineno) + ": unknown record type '" + t + "'");
      }
    } catch (const nlohmann::json::exception& e) {
      throw Error(ErrorCode::kParseError, "line " + std::to_string(lineno) + ": " + e.what());
    }
  }
  if (!have_schema) throw Error(ErrorCode::kParseError, "line " + std::to_string(lineno) + ": missing schema record");
  try {
    validate_dataset(ds);
  } catch (const Error& e) {
    throw Error(ErrorCode::kSchemaMismatch, e.what());
  }
  return ds;
}

inline void save_dataset(const std::string& path, const RelationalDataset& ds) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path);
  write_dataset(out, ds);
}

inline RelationalDataset load_dataset(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::kIoError, "cannot open " + path);
  return read_dataset(in);
}

}  // namespace relcbm
