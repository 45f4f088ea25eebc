#pragma once

#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "json.hpp"
#include "relcbm/dataset.hpp"
#include "relcbm/encoders.hpp"
#include "relcbm/error.hpp"
#include "relcbm/grounding.hpp"
#include "relcbm/logic.hpp"
#include "relcbm/nn.hpp"
#include "relcbm/predictors.hpp"
#include "relcbm/template_parser.hpp"

namespace relcbm {

enum class ModelKind {
  kCbmLinear,
  kCbmDeep,
  kDcr,
  kRCbmLinear,
  kRCbmDeep,
  kRDcr,
  kRDcrLow,
  kFlatCbm,
  kBlackBoxFf,
  kBlackBoxRel,
};

inline constexpr ModelKind kAllModelKinds[] = {
    ModelKind::kCbmLinear, ModelKind::kCbmDeep,  ModelKind::kDcr,     ModelKind::kRCbmLinear, ModelKind::kRCbmDeep,
    ModelKind::kRDcr,      ModelKind::kRDcrLow,  ModelKind::kFlatCbm, ModelKind::kBlackBoxFf, ModelKind::kBlackBoxRel,
};

inline const char* to_string(ModelKind k) {
  switch (k) {
    case ModelKind::kCbmLinear: return "cbm_linear";
    case ModelKind::kCbmDeep: return "cbm_deep";
    case ModelKind::kDcr: return "dcr";
    case ModelKind::kRCbmLinear: return "r_cbm_linear";
    case ModelKind::kRCbmDeep: return "r_cbm_deep";
    case ModelKind::kRDcr: return "r_dcr";
    case ModelKind::kRDcrLow: return "r_dcr_low";
    case ModelKind::kFlatCbm: return "flat_cbm";
    case ModelKind::kBlackBoxFf: return "black_box_ff";
    case ModelKind::kBlackBoxRel: return "black_box_rel";
  }
  return "?";
}

inline ModelKind parse_model_kind(const std::string& s) {
  for (auto k : kAllModelKinds) {
    if (s == to_string(k)) return k;
  }
  throw Error(ErrorCode::kParseError, "unknown model kind '" + s + "'");
}

inline bool uses_file_templates(ModelKind k) {
  return k == ModelKind::kRCbmLinear || k == ModelKind::kRCbmDeep || k == ModelKind::kRDcr ||
         k == ModelKind::kRDcrLow || k == ModelKind::kBlackBoxRel;
}

inline bool is_black_box(ModelKind k) { return k == ModelKind::kBlackBoxFf || k == ModelKind::kBlackBoxRel; }

inline PredictorKind predictor_kind(ModelKind k) {
  switch (k) {
    case ModelKind::kCbmLinear:
    case ModelKind::kRCbmLinear: return PredictorKind::kLinear;
    case ModelKind::kDcr:
    case ModelKind::kRDcr:
    case ModelKind::kRDcrLow: return PredictorKind::kDcr;
    case ModelKind::kFlatCbm: return PredictorKind::kFlat;
    default: return PredictorKind::kDeep;
  }
}

/// Width-0 template for a task: every concept applied to every tuple of distinct head
/// variables. For a unary task only unary concepts remain: y(v) :- c_1(v), ..., c_k(v).
inline Template nonrelational_template(const Schema& schema, const PredicateSig& task) {
  Template t;
  if (task.arity == 1) {
    t.head_vars = {"v"};
  } else {
    for (int i = 0; i < task.arity; ++i) t.head_vars.push_back("v" + std::to_string(i + 1));
  }
  t.head = make_atom(task.name, t.head_vars);
  const std::size_t n = t.head_vars.size();
  for (const auto& c : schema.of_kind(PredicateKind::kConcept)) {
    const auto a = static_cast<std::size_t>(c.arity);
    if (a > n) continue;
    std::vector<std::size_t> digits(a, 0);
    while (true) {
      std::set<std::size_t> seen(digits.begin(), digits.end());
      if (seen.size() == a) {
        std::vector<std::string> vars;
        for (auto d : digits) vars.push_back(t.head_vars[d]);
        t.body.push_back(make_atom(c.name, vars));
      }
      std::size_t k = a;
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
  return t;
}

/// One template per task predicate, in schema task order.
inline std::vector<Template> resolve_templates(ModelKind kind, const Schema& schema,
                                               const std::vector<Template>& file_templates) {
  const auto tasks = schema.of_kind(PredicateKind::kTask);
  std::vector<Template> out;
  if (!uses_file_templates(kind)) {
    for (const auto& t : tasks) out.push_back(nonrelational_template(schema, t));
    return out;
  }
  for (const auto& task : tasks) {
    const Template* found = nullptr;
    for (const auto& t : file_templates) {
      if (t.head.predicate != task.name) continue;
      if (found) throw Error(ErrorCode::kSchemaMismatch, "two templates for task '" + task.name + "'");
      found = &t;
    }
    if (!found) throw Error(ErrorCode::kSchemaMismatch, "no template for task '" + task.name + "'");
    if (found->arity() != static_cast<std::size_t>(task.arity)) {
      throw Error(ErrorCode::kTemplateArityMismatch, "template head " + to_string(found->head) + " vs arity " +
                                                         std::to_string(task.arity));
    }
    auto violations = validate_template(*found, schema);
    if (!violations.empty()) {
      throw Error(ErrorCode::kSchemaMismatch, std::string(to_string(violations.front().kind)) + ": " +
                                                  violations.front().detail);
    }
    out.push_back(*found);
  }
  return out;
}

struct ModelConfig {
  ModelKind kind = ModelKind::kRCbmLinear;
  AggregatorKind aggregator = AggregatorKind::kMax;
  EncoderConfig encoder{};
  std::size_t task_hidden = 32;
  bool hard_concepts = false;  // always on for r_dcr_low
  double relevance_bias = 2.0;
  std::uint64_t seed = 0;
};

// ---- compiled batches ----------------------------------------------------------------------

/// All queries of one task predicate in a batch, with their groundings laid out
/// as index matrices into the batch-wide concept atom table.
struct TaskBlock {
  std::size_t task = 0;
  std::vector<std::size_t> query_world;             // batch world slot
  std::vector<std::vector<std::size_t>> query_args; // entity positions within the world
  std::vector<double> labels;                       // NaN when unlabeled
  std::vector<std::size_t> offsets;                 // Q + 1 grounding offsets
  std::vector<std::vector<std::size_t>> body_cols;  // p columns of G atom indices
  std::vector<std::vector<std::size_t>> var_cols;   // (n + w) columns of G entity rows
  std::vector<std::vector<std::size_t>> head_cols;  // n columns of Q entity rows
  std::vector<std::size_t> flat;                    // Q × L atom indices

  std::size_t queries() const { return query_args.size(); }
  std::size_t groundings() const { return offsets.empty() ? 0 : offsets.back(); }
};

struct Plan {
  ad::Tensor features;                       // N × d
  std::vector<std::size_t> worlds;           // dataset world index per slot
  std::vector<std::size_t> entity_offset;    // per slot
  std::vector<std::size_t> entity_count;     // per slot
  std::vector<std::vector<std::vector<std::size_t>>> concept_rows;  // [concept][position] entity rows
  std::vector<std::size_t> concept_base;                            // first atom of each concept
  std::vector<std::vector<std::size_t>> concept_world_offset;       // [concept][slot]
  std::vector<int> concept_arity;
  std::size_t n_atoms = 0;
  std::vector<std::size_t> concept_label_index;
  std::vector<double> concept_label_value;
  std::vector<TaskBlock> blocks;             // one per task predicate, schema task order
  std::vector<std::vector<std::size_t>> groups;  // block indices of each exclusive group

  std::size_t atom_index(std::size_t slot, std::size_t concept_id, const std::vector<std::size_t>& args) const {
    std::size_t local = 0;
    const std::size_t n = entity_count[slot];
    for (auto a : args) local = local * n + a;
    return concept_base[concept_id] + concept_world_offset[concept_id][slot] + local;
  }

  std::optional<std::size_t> slot_of_world(std::size_t world) const {
    for (std::size_t s = 0; s < worlds.size(); ++s) {
      if (worlds[s] == world) return s;
    }
    return std::nullopt;
  }
};

struct PlanOptions {
  std::set<Split> splits{Split::kTrain};
  bool concept_labels = true;
};

/// Test-time edits expressed in plan coordinates.
struct PlanEdits {
  std::vector<std::size_t> concept_index;
  std::vector<double> concept_value;
  // [block] query → (relevance, polarity), applied to every grounding of the query
  std::vector<std::map<std::size_t, std::pair<std::vector<double>, std::vector<double>>>> rules;
  bool full_relevance = false;  // every DCR literal relevant (relevance warm-up)
};

struct Forward {
  ad::Tensor concept_scores;      // M, soft
  ad::Tensor concept_embeddings;  // M × h
  ad::Tensor task_inputs;         // M, after hardening and edits
  std::vector<ad::Tensor> grounding_scores;  // per block, G
  std::vector<ad::Tensor> task_scores;       // per block, Q (aggregated)
  std::vector<ad::Tensor> outputs;           // per block, Q (renormalized within exclusive groups)
  std::vector<ad::Tensor> group_probs;       // per group, Q × g
  std::vector<RuleTensors> rules;            // per block, DCR only
  std::vector<ad::Tensor> aux_task_scores;   // per block, r_dcr_low training head
  std::vector<ad::Tensor> aux_group_probs;
};

class Model {
 public:
  Model(const Schema& schema, std::size_t feature_dim, const std::vector<Template>& file_templates, ModelConfig cfg,
        std::vector<std::string> flat_universe = {})
      : schema_(schema), feature_dim_(feature_dim), cfg_(cfg), flat_universe_(std::move(flat_universe)) {
    if (feature_dim_ == 0) throw Error(ErrorCode::kDimMismatch, "feature dimension must be positive");
    tasks_ = schema_.of_kind(PredicateKind::kTask);
    concepts_ = schema_.of_kind(PredicateKind::kConcept);
    if (tasks_.empty()) throw Error(ErrorCode::kSchemaMismatch, "schema declares no task predicate");
    if (!is_black_box(cfg_.kind) && concepts_.empty()) {
      throw Error(ErrorCode::kSchemaMismatch, "schema declares no concept predicate");
    }
    if (cfg_.kind != ModelKind::kBlackBoxFf && cfg_.kind != ModelKind::kFlatCbm) {
      templates_ = resolve_templates(cfg_.kind, schema_, file_templates);
    }
    build();
  }

  const Schema& schema() const { return schema_; }
  const ModelConfig& config() const { return cfg_; }
  ModelKind kind() const { return cfg_.kind; }
  std::size_t feature_dim() const { return feature_dim_; }
  const std::vector<PredicateSig>& tasks() const { return tasks_; }
  const std::vector<PredicateSig>& concepts() const { return concepts_; }
  const std::vector<Template>& templates() const { return templates_; }
  const std::vector<std::string>& flat_universe() const { return flat_universe_; }
  const std::optional<FlatLayout>& flat_layout() const { return flat_layout_; }
  ParameterStore& params() { return store_; }
  const ParameterStore& params() const { return store_; }
  const ConceptEncoder& encoder() const { return encoder_; }
  const TaskPredictor& predictor(std::size_t task) const { return predictors_.at(task); }
  bool hard_concepts() const { return cfg_.hard_concepts || cfg_.kind == ModelKind::kRDcrLow; }
  void set_hard_concepts(bool v) { cfg_.hard_concepts = v; }
  bool uses_concepts() const { return !is_black_box(cfg_.kind); }
  bool has_aux_head() const { return cfg_.kind == ModelKind::kRDcrLow; }

  std::optional<std::size_t> task_index(const std::string& name) const {
    for (std::size_t j = 0; j < tasks_.size(); ++j) {
      if (tasks_[j].name == name) return j;
    }
    return std::nullopt;
  }

  /// Checks that a dataset can be evaluated by this model.
  void check_compatible(const RelationalDataset& ds) const {
    if (ds.feature_dim() != feature_dim_) {
      throw Error(ErrorCode::kSchemaMismatch, "dataset feature dim " + std::to_string(ds.feature_dim()) +
                                                  ", model expects " + std::to_string(feature_dim_));
    }
    for (const auto& p : schema_.predicates()) {
      const auto* q = ds.schema.find(p.name, p.kind);
      if (!q || q->arity != p.arity) {
        throw Error(ErrorCode::kSchemaMismatch, "dataset lacks " + std::string(to_string(p.kind)) + " " + p.name + "/" +
                                                    std::to_string(p.arity));
      }
    }
  }

  Plan compile(const RelationalDataset& ds, const PlanOptions& opt = {}) const;
  Forward forward(const Plan& plan, const PlanEdits* edits = nullptr) const;

  nlohmann::ordered_json meta() const;

 private:
  void build();

  Schema schema_;
  std::size_t feature_dim_;
  ModelConfig cfg_;
  std::vector<std::string> flat_universe_;
  std::vector<PredicateSig> tasks_;
  std::vector<PredicateSig> concepts_;
  std::vector<Template> templates_;
  std::optional<FlatLayout> flat_layout_;
  ParameterStore store_;
  ConceptEncoder encoder_;
  std::vector<TaskPredictor> predictors_;
  std::vector<DeepPredictor> aux_;
  std::vector<Mlp> black_box_;
};

inline void Model::build() {
  Rng rng(cfg_.seed);
  const std::size_t h = cfg_.encoder.embed_dim;
  if (is_black_box(cfg_.kind)) {
    Schema none;
    for (const auto& t : tasks_) none.add(t);
    encoder_ = ConceptEncoder(store_, none, feature_dim_, cfg_.encoder, rng);
  } else {
    encoder_ = ConceptEncoder(store_, schema_, feature_dim_, cfg_.encoder, rng);
  }
  if (cfg_.kind == ModelKind::kFlatCbm) {
    if (flat_universe_.empty()) throw Error(ErrorCode::kEmptyUniverse, "flat model needs a build universe");
    flat_layout_ = build_flat_template(schema_, flat_universe_);
  }
  const double init_sign = cfg_.aggregator == AggregatorKind::kMin ? -1.0 : 1.0;
  for (std::size_t j = 0; j < tasks_.size(); ++j) {
    const std::string name = "f." + tasks_[j].name;
    TaskPredictor f;
    f.kind = predictor_kind(cfg_.kind);
    if (cfg_.kind == ModelKind::kBlackBoxFf) {
      black_box_.emplace_back(store_, "bb." + tasks_[j].name,
                              std::vector<std::size_t>{static_cast<std::size_t>(tasks_[j].arity) * h, cfg_.task_hidden, 1},
                              rng);
    } else if (cfg_.kind == ModelKind::kBlackBoxRel) {
      const std::size_t vars = templates_[j].arity() + templates_[j].width();
      black_box_.emplace_back(store_, "bb." + tasks_[j].name, std::vector<std::size_t>{vars * h, cfg_.task_hidden, 1},
                              rng);
    } else if (f.kind == PredictorKind::kFlat) {
      f.flat = FlatPredictor(store_, name, flat_layout_->size(), rng);
    } else {
      const std::size_t p = templates_[j].body_size();
      switch (f.kind) {
        case PredictorKind::kLinear: f.linear = LinearPredictor(store_, name, p, init_sign, rng); break;
        case PredictorKind::kDeep: f.deep = DeepPredictor(store_, name, p, cfg_.task_hidden, rng); break;
        case PredictorKind::kDcr: f.dcr = DcrPredictor(store_, name, p, h, cfg_.relevance_bias, rng); break;
        case PredictorKind::kFlat: break;
      }
      if (has_aux_head()) aux_.emplace_back(store_, "aux." + tasks_[j].name, p, cfg_.task_hidden, rng);
    }
    predictors_.push_back(std::move(f));
  }
}

inline Plan Model::compile(const RelationalDataset& ds, const PlanOptions& opt) const {
  check_compatible(ds);
  Plan plan;
  auto wanted = [&](const World& w, const LabeledAtom& a) { return opt.splits.count(w.split_of(a)) > 0; };

  for (std::size_t wi = 0; wi < ds.worlds.size(); ++wi) {
    const auto& w = ds.worlds[wi];
    bool use = false;
    for (const auto& a : w.tasks) use = use || wanted(w, a);
    for (const auto& a : w.concepts) use = use || (opt.concept_labels && wanted(w, a));
    if (!use) continue;
    if (flat_layout_) flat_layout_->check_universe(w.universe());
    plan.worlds.push_back(wi);
  }
  if (plan.worlds.empty()) throw Error(ErrorCode::kEmptyBatch, "no labeled atoms in the requested splits");

  std::vector<double> feats;
  std::size_t total = 0;
  for (auto wi : plan.worlds) {
    const auto& w = ds.worlds[wi];
    plan.entity_offset.push_back(total);
    plan.entity_count.push_back(w.entities.size());
    total += w.entities.size();
    for (const auto& e : w.entities) feats.insert(feats.end(), e.x.begin(), e.x.end());
  }
  plan.features = ad::Tensor::matrix(total, feature_dim_, std::move(feats));

  // Dense concept atom table: every concept over every tuple of every batch world.
  if (uses_concepts()) {
    plan.concept_rows.resize(concepts_.size());
    plan.concept_world_offset.resize(concepts_.size());
    for (std::size_t c = 0; c < concepts_.size(); ++c) {
      const auto a = static_cast<std::size_t>(concepts_[c].arity);
      plan.concept_arity.push_back(concepts_[c].arity);
      plan.concept_base.push_back(plan.n_atoms);
      plan.concept_rows[c].resize(a);
      std::size_t count = 0;
      for (std::size_t s = 0; s < plan.worlds.size(); ++s) {
        plan.concept_world_offset[c].push_back(count);
        const std::size_t n = plan.entity_count[s];
        std::vector<std::size_t> digits(a, 0);
        if (n == 0) continue;
        while (true) {
          for (std::size_t i = 0; i < a; ++i) plan.concept_rows[c][i].push_back(plan.entity_offset[s] + digits[i]);
          ++count;
          std::size_t k = a;
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
      plan.n_atoms += count;
    }
    if (opt.concept_labels) {
      for (std::size_t s = 0; s < plan.worlds.size(); ++s) {
        const auto& w = ds.worlds[plan.worlds[s]];
        for (const auto& a : w.concepts) {
          if (!wanted(w, a)) continue;
          auto c = schema_.concept_index(a.pred);
          if (!c) continue;
          plan.concept_label_index.push_back(plan.atom_index(s, *c, a.args));
          plan.concept_label_value.push_back(a.y);
        }
      }
    }
  }

  // Exclusive groups share one query list across their members.
  std::vector<std::optional<std::size_t>> group_of(tasks_.size());
  for (const auto& g : schema_.exclusive_groups) {
    std::vector<std::size_t> members;
    for (const auto& name : g) {
      if (auto j = task_index(name)) {
        members.push_back(*j);
        group_of[*j] = plan.groups.size();
      }
    }
    plan.groups.push_back(members);
  }

  plan.blocks.resize(tasks_.size());
  for (std::size_t j = 0; j < tasks_.size(); ++j) {
    auto& b = plan.blocks[j];
    b.task = j;
    b.offsets.push_back(0);
    const Template* t = templates_.empty() ? nullptr : &templates_[j];
    std::optional<VariableLayout> layout;
    if (t) layout.emplace(*t);
    if (t && cfg_.kind != ModelKind::kBlackBoxRel) b.body_cols.resize(t->body_size());
    if (t && cfg_.kind == ModelKind::kBlackBoxRel) b.var_cols.resize(t->arity() + t->width());
    if (cfg_.kind == ModelKind::kBlackBoxFf) b.head_cols.resize(static_cast<std::size_t>(tasks_[j].arity));

    for (std::size_t s = 0; s < plan.worlds.size(); ++s) {
      const auto& w = ds.worlds[plan.worlds[s]];
      std::map<std::vector<std::size_t>, double> queries;
      auto collect = [&](const std::string& name, bool own) {
        for (const auto& a : w.tasks) {
          if (a.pred != name || !wanted(w, a)) continue;
          auto [it, inserted] = queries.emplace(a.args, std::numeric_limits<double>::quiet_NaN());
          if (own) it->second = a.y;
        }
      };
      if (group_of[j]) {
        for (auto m : plan.groups[*group_of[j]]) collect(tasks_[m].name, m == j);
      } else {
        collect(tasks_[j].name, true);
      }
      if (queries.empty()) continue;
      const FactSet facts = w.facts();
      const std::size_t n = w.entities.size();
      const std::size_t off = plan.entity_offset[s];
      for (const auto& [args, y] : queries) {
        b.query_world.push_back(s);
        b.query_args.push_back(args);
        b.labels.push_back(y);
        if (cfg_.kind == ModelKind::kBlackBoxFf) {
          for (std::size_t i = 0; i < args.size(); ++i) b.head_cols[i].push_back(off + args[i]);
        } else if (flat_layout_) {
          auto order = flat_layout_->slot_order(args);
          for (std::size_t i = 0; i < flat_layout_->size(); ++i) {
            std::vector<std::size_t> ent;
            for (auto slot : flat_layout_->slots[i]) ent.push_back(order[slot]);
            b.flat.push_back(plan.atom_index(s, *schema_.concept_index(flat_layout_->predicates[i]), ent));
          }
        } else {
          auto tuples = enumerate_grounding_tuples(*t, n, args, &t->guard, &facts);
          std::vector<std::size_t> binding(args);
          binding.resize(t->arity() + t->width());
          for (const auto& tup : tuples) {
            std::copy(tup.begin(), tup.end(), binding.begin() + static_cast<std::ptrdiff_t>(t->arity()));
            if (cfg_.kind == ModelKind::kBlackBoxRel) {
              for (std::size_t i = 0; i < binding.size(); ++i) b.var_cols[i].push_back(off + binding[i]);
              continue;
            }
            for (std::size_t q = 0; q < t->body_size(); ++q) {
              std::vector<std::size_t> ent;
              for (auto pos : layout->body_args[q]) ent.push_back(binding[pos]);
              b.body_cols[q].push_back(plan.atom_index(s, *schema_.concept_index(t->body[q].predicate), ent));
            }
          }
          b.offsets.push_back(b.offsets.back() + tuples.size());
        }
      }
    }
  }
  return plan;
}

namespace detail {

inline ad::Tensor column_matrix(const ad::Tensor& values, const std::vector<std::vector<std::size_t>>& cols,
                                std::size_t rows) {
  std::vector<std::size_t> flat(rows * cols.size());
  for (std::size_t q = 0; q < cols.size(); ++q) {
    for (std::size_t g = 0; g < rows; ++g) flat[g * cols.size() + q] = cols[q][g];
  }
  return ad::gather(values, std::move(flat), {rows, cols.size()});
}

inline ad::Tensor row_concat(const ad::Tensor& matrix, const std::vector<std::vector<std::size_t>>& cols) {
  std::vector<ad::Tensor> parts;
  for (const auto& c : cols) parts.push_back(ad::gather_rows(matrix, c));
  return parts.size() == 1 ? parts.front() : ad::concat(parts, 1);
}

// Overwrites every grounding row of the listed queries with fixed values.
inline ad::Tensor override_rows(const ad::Tensor& m, const std::vector<std::size_t>& offsets,
                                const std::map<std::size_t, std::vector<double>>& rows) {
  std::vector<std::size_t> idx;
  std::vector<double> val;
  const std::size_t p = m.cols();
  for (const auto& [q, v] : rows) {
    if (v.size() != p) throw Error(ErrorCode::kDimMismatch, "rule edit of length " + std::to_string(v.size()));
    for (std::size_t g = offsets[q]; g < offsets[q + 1]; ++g) {
      for (std::size_t k = 0; k < p; ++k) {
        idx.push_back(g * p + k);
        val.push_back(v[k]);
      }
    }
  }
  return idx.empty() ? m : ad::overwrite(m, idx, val);
}

inline std::vector<ad::Tensor> renormalize_groups(const Plan& plan, const std::vector<ad::Tensor>& scores,
                                                  std::vector<ad::Tensor>& outputs) {
  std::vector<ad::Tensor> probs;
  for (const auto& members : plan.groups) {
    if (members.empty() || plan.blocks[members.front()].queries() == 0) {
      probs.emplace_back();
      continue;
    }
    const std::size_t q = plan.blocks[members.front()].queries();
    std::vector<ad::Tensor> cols;
    for (auto m : members) cols.push_back(ad::reshape(scores[m], {q, 1}));
    auto p = ad::normalize_rows(ad::add_scalar(ad::concat(cols, 1), 1e-12));
    for (std::size_t k = 0; k < members.size(); ++k) {
      std::vector<std::size_t> idx(q);
      for (std::size_t i = 0; i < q; ++i) idx[i] = i * members.size() + k;
      outputs[members[k]] = ad::gather(p, std::move(idx), {q});
    }
    probs.push_back(p);
  }
  return probs;
}

}  // namespace detail

inline Forward Model::forward(const Plan& plan, const PlanEdits* edits) const {
  Forward fw;
  const auto h_ent = encoder_.embed(plan.features);
  const std::size_t nb = plan.blocks.size();
  fw.grounding_scores.resize(nb);
  fw.task_scores.resize(nb);
  fw.rules.resize(nb);
  if (has_aux_head()) fw.aux_task_scores.resize(nb);

  if (uses_concepts()) {
    std::vector<ad::Tensor> scores, embs;
    for (std::size_t c = 0; c < concepts_.size(); ++c) {
      if (plan.concept_rows[c].front().empty()) continue;
      auto out = encoder_.encode_rows(c, h_ent, plan.concept_rows[c]);
      scores.push_back(out.score);
      embs.push_back(out.embedding);
    }
    fw.concept_scores = scores.size() == 1 ? scores.front() : ad::concat(scores, 0);
    fw.concept_embeddings = embs.size() == 1 ? embs.front() : ad::concat(embs, 0);
    fw.task_inputs = hard_concepts() ? harden_concepts(fw.concept_scores) : fw.concept_scores;
    if (edits && !edits->concept_index.empty()) {
      fw.task_inputs = ad::overwrite(fw.task_inputs, edits->concept_index, edits->concept_value);
    }
  }

  for (std::size_t j = 0; j < nb; ++j) {
    const auto& b = plan.blocks[j];
    if (b.queries() == 0) continue;
    const auto& f = predictors_[j];
    if (cfg_.kind == ModelKind::kBlackBoxFf) {
      fw.task_scores[j] = ad::reshape(ad::sigmoid(black_box_[j](detail::row_concat(h_ent, b.head_cols))), {b.queries()});
      continue;
    }
    if (cfg_.kind == ModelKind::kBlackBoxRel) {
      auto g = ad::sigmoid(black_box_[j](detail::row_concat(h_ent, b.var_cols)));
      fw.grounding_scores[j] = ad::reshape(g, {g.rows()});
      fw.task_scores[j] = aggregate_segments(cfg_.aggregator, fw.grounding_scores[j], b.offsets);
      continue;
    }
    if (f.kind == PredictorKind::kFlat) {
      const std::size_t l = flat_layout_->size();
      fw.task_scores[j] = f.flat(ad::gather(fw.task_inputs, b.flat, {b.queries(), l}));
      continue;
    }
    auto body = detail::column_matrix(fw.task_inputs, b.body_cols, b.groundings());
    ad::Tensor g;
    switch (f.kind) {
      case PredictorKind::kLinear: g = f.linear(body); break;
      case PredictorKind::kDeep: g = f.deep(body); break;
      case PredictorKind::kDcr: {
        if (b.body_cols.empty()) {
          g = ad::Tensor::full({b.groundings()}, 1.0);
          break;
        }
        auto rule = f.dcr.generate(detail::row_concat(fw.concept_embeddings, b.body_cols));
        if (edits && edits->full_relevance) rule.relevance = ad::Tensor::full(rule.relevance.shape(), 1.0);
        if (edits && j < edits->rules.size() && !edits->rules[j].empty()) {
          std::map<std::size_t, std::vector<double>> r, s;
          for (const auto& [q, rs] : edits->rules[j]) {
            r[q] = rs.first;
            s[q] = rs.second;
          }
          rule.relevance = detail::override_rows(rule.relevance, b.offsets, r);
          rule.polarity = detail::override_rows(rule.polarity, b.offsets, s);
        }
        g = dcr_evaluate_rule(rule.relevance, rule.polarity, body);
        fw.rules[j] = rule;
        break;
      }
      case PredictorKind::kFlat: break;
    }
    fw.grounding_scores[j] = g;
    fw.task_scores[j] = aggregate_segments(cfg_.aggregator, g, b.offsets);
    if (has_aux_head()) fw.aux_task_scores[j] = aggregate_segments(cfg_.aggregator, aux_[j](body), b.offsets);
  }

  fw.outputs = fw.task_scores;
  fw.group_probs = detail::renormalize_groups(plan, fw.task_scores, fw.outputs);
  if (has_aux_head()) {
    std::vector<ad::Tensor> unused = fw.aux_task_scores;
    fw.aux_group_probs = detail::renormalize_groups(plan, fw.aux_task_scores, unused);
  }
  return fw;
}

// ---- checkpoints -------------------------------------------------------------------------

inline nlohmann::ordered_json Model::meta() const {
  nlohmann::ordered_json m;
  m["kind"] = to_string(cfg_.kind);
  m["aggregator"] = to_string(cfg_.aggregator);
  m["embed_dim"] = cfg_.encoder.embed_dim;
  m["hidden"] = cfg_.encoder.hidden;
  m["task_hidden"] = cfg_.task_hidden;
  m["hard_concepts"] = cfg_.hard_concepts;
  m["relevance_bias"] = cfg_.relevance_bias;
  m["seed"] = cfg_.seed;
  m["feature_dim"] = feature_dim_;
  nlohmann::ordered_json preds = nlohmann::ordered_json::array();
  for (const auto& p : schema_.predicates()) {
    preds.push_back({{"name", p.name}, {"arity", p.arity}, {"kind", to_string(p.kind)}});
  }
  m["schema"] = preds;
  m["exclusive"] = schema_.exclusive_groups;
  std::vector<std::string> tmpl;
  if (uses_file_templates(cfg_.kind)) {
    for (const auto& t : templates_) tmpl.push_back(to_string(t));
  }
  m["templates"] = tmpl;
  m["flat_universe"] = flat_universe_;
  return m;
}

inline void save_checkpoint(const std::string& path, const Model& model) {
  nlohmann::ordered_json j;
  j["meta"] = model.meta();
  j["params"] = model.params().to_json();
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::kIoError, "cannot write " + path);
  out << j.dump() << "\n";
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::kIoError, "missing checkpoint " + path);
  nlohmann::ordered_json j;
  try {
    j = nlohmann::ordered_json::parse(in);
  } catch (const nlohmann::json::exception& e) {
    throw Error(ErrorCode::kParseError, "checkpoint " + path + ": " + e.what());
  }
  const auto& m = j.at("meta");
  std::vector<PredicateSig> preds;
  for (const auto& p : m.at("schema")) {
    preds.push_back({p.at("name").get<std::string>(), p.at("arity").get<int>(), parse_kind(p.at("kind").get<std::string>())});
  }
  Schema schema(std::move(preds));
  schema.exclusive_groups = m.at("exclusive").get<std::vector<std::vector<std::string>>>();
  ModelConfig cfg;
  cfg.kind = parse_model_kind(m.at("kind").get<std::string>());
  cfg.aggregator = parse_aggregator(m.at("aggregator").get<std::string>());
  cfg.encoder.embed_dim = m.at("embed_dim").get<std::size_t>();
  cfg.encoder.hidden = m.at("hidden").get<std::size_t>();
  cfg.task_hidden = m.at("task_hidden").get<std::size_t>();
  cfg.hard_concepts = m.at("hard_concepts").get<bool>();
  cfg.relevance_bias = m.at("relevance_bias").get<double>();
  cfg.seed = m.at("seed").get<std::uint64_t>();
  std::vector<Template> templates;
  for (const auto& t : m.at("templates")) templates.push_back(parse_template(t.get<std::string>(), schema));
  Model model(schema, m.at("feature_dim").get<std::size_t>(), templates, cfg,
              m.at("flat_universe").get<std::vector<std::string>>());
  model.params().load_json(j.at("params"));
  return model;
}

}  // namespace relcbm
