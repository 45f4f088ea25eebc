#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <map>
#include <mutex>
#include <numeric>
#include <optional>
#include <ostream>
#include <random>
#include <set>
#include <string>
#include <thread>
#include <vector>

#include "relcbm/dataset.hpp"
#include "relcbm/error.hpp"
#include "relcbm/generators.hpp"
#include "relcbm/loss.hpp"
#include "relcbm/model.hpp"
#include "relcbm/nn.hpp"

namespace relcbm {

enum class TaskLoss { kBce, kCe };

inline TaskLoss parse_task_loss(const std::string& s) {
  if (s == "bce") return TaskLoss::kBce;
  if (s == "ce") return TaskLoss::kCe;
  throw Error(ErrorCode::kParseError, "unknown task loss '" + s + "'");
}

inline const char* to_string(TaskLoss t) { return t == TaskLoss::kBce ? "bce" : "ce"; }

struct LossConfig {
  double lambda = 0.1;
  TaskLoss task_loss = TaskLoss::kBce;  // kCe: cross-entropy over exclusive groups
};

struct TrainConfig {
  std::size_t epochs = 2000;
  OptimizerConfig optimizer{};
  std::uint64_t seed = 0;
  double concept_fraction = 1.0;
  std::optional<std::size_t> concept_cap{};
  bool hard_concepts = false;
  std::size_t eval_every = 0;  // 0: validate on the last epoch only
  std::size_t relevance_warmup = 0;  // epochs with every DCR literal forced relevant
};

inline bool is_relevance_parameter(const std::string& name) {
  return name.size() > 4 && (name.ends_with(".r.w") || name.ends_with(".r.b"));
}

// ---- metrics -------------------------------------------------------------------------------

enum class MetricKind { kRocAuc, kAccuracy, kMrr };

inline const char* to_string(MetricKind m) {
  switch (m) {
    case MetricKind::kRocAuc: return "roc_auc";
    case MetricKind::kAccuracy: return "accuracy";
    case MetricKind::kMrr: return "mrr";
  }
  return "?";
}

inline MetricKind parse_metric(const std::string& s) {
  if (s == "roc_auc") return MetricKind::kRocAuc;
  if (s == "accuracy") return MetricKind::kAccuracy;
  if (s == "mrr") return MetricKind::kMrr;
  throw Error(ErrorCode::kParseError, "unknown metric '" + s + "'");
}

/// Mann–Whitney statistic with average ranks for ties.
inline double roc_auc(const std::vector<double>& scores, const std::vector<double>& labels) {
  if (scores.size() != labels.size()) throw Error(ErrorCode::kShapeMismatch, "roc_auc: scores and labels differ");
  std::vector<std::size_t> order(scores.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(), [&](auto a, auto b) { return scores[a] < scores[b]; });
  double rank_sum = 0.0;
  std::size_t pos = 0;
  for (std::size_t i = 0; i < order.size();) {
    std::size_t j = i;
    while (j < order.size() && scores[order[j]] == scores[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + 1 + j);
    for (std::size_t k = i; k < j; ++k) {
      if (labels[order[k]] > 0.5) {
        rank_sum += avg;
        ++pos;
      }
    }
    i = j;
  }
  const std::size_t neg = scores.size() - pos;
  if (pos == 0 || neg == 0) throw Error(ErrorCode::kDegenerateLabels, "roc_auc needs both classes");
  const double p = static_cast<double>(pos), n = static_cast<double>(neg);
  return (rank_sum - p * (p + 1.0) / 2.0) / (p * n);
}

inline double accuracy(const std::vector<std::size_t>& predicted, const std::vector<std::size_t>& truth) {
  if (predicted.size() != truth.size()) throw Error(ErrorCode::kShapeMismatch, "accuracy: sizes differ");
  if (truth.empty()) throw Error(ErrorCode::kEmptyBatch, "accuracy on no queries");
  std::size_t hit = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) hit += predicted[i] == truth[i];
  return static_cast<double>(hit) / static_cast<double>(truth.size());
}

inline std::size_t argmax(const std::vector<double>& v) {
  return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
}

/// rank = 1 + #strictly greater + half of the other ties.
inline double reciprocal_rank(const std::vector<double>& candidates, std::size_t truth) {
  double greater = 0.0, ties = 0.0;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (i == truth) continue;
    if (candidates[i] > candidates[truth]) greater += 1.0;
    if (candidates[i] == candidates[truth]) ties += 1.0;
  }
  return 1.0 / (1.0 + greater + 0.5 * ties);
}

inline double mrr(const std::vector<std::vector<double>>& candidates, const std::vector<std::size_t>& truth) {
  if (candidates.size() != truth.size()) throw Error(ErrorCode::kShapeMismatch, "mrr: sizes differ");
  if (truth.empty()) throw Error(ErrorCode::kEmptyBatch, "mrr on no queries");
  double total = 0.0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] >= candidates[i].size()) throw Error(ErrorCode::kInvalidTarget, "mrr truth index");
    total += reciprocal_rank(candidates[i], truth[i]);
  }
  return total / static_cast<double>(truth.size());
}

/// Binary form: roc_auc, or accuracy at threshold 0.5.
inline double evaluate_metric(MetricKind kind, const std::vector<double>& scores, const std::vector<double>& labels) {
  switch (kind) {
    case MetricKind::kRocAuc: return roc_auc(scores, labels);
    case MetricKind::kAccuracy: {
      std::vector<std::size_t> p, t;
      for (std::size_t i = 0; i < scores.size(); ++i) {
        p.push_back(scores[i] > 0.5);
        t.push_back(labels[i] > 0.5);
      }
      return accuracy(p, t);
    }
    case MetricKind::kMrr: break;
  }
  throw Error(ErrorCode::kInvalidTarget, "mrr needs ranked candidates");
}

/// Candidate form: accuracy (argmax match) or mrr.
inline double evaluate_metric(MetricKind kind, const std::vector<std::vector<double>>& candidates,
                              const std::vector<std::size_t>& truth) {
  switch (kind) {
    case MetricKind::kMrr: return mrr(candidates, truth);
    case MetricKind::kAccuracy: {
      std::vector<std::size_t> p;
      for (const auto& c : candidates) p.push_back(argmax(c));
      return accuracy(p, truth);
    }
    case MetricKind::kRocAuc: break;
  }
  throw Error(ErrorCode::kInvalidTarget, "roc_auc needs binary labels");
}

namespace detail {

inline std::vector<std::optional<std::size_t>> group_index(const Plan& plan) {
  std::vector<std::optional<std::size_t>> g(plan.blocks.size());
  for (std::size_t k = 0; k < plan.groups.size(); ++k) {
    for (auto m : plan.groups[k]) g[m] = k;
  }
  return g;
}

inline bool labeled(double y) { return !std::isnan(y); }

// Query rows of a group with exactly one positive member, and that member's position.
inline void group_targets(const Plan& plan, const std::vector<std::size_t>& members, std::vector<std::size_t>& rows,
                          std::vector<std::size_t>& targets) {
  const std::size_t q = plan.blocks[members.front()].queries();
  for (std::size_t i = 0; i < q; ++i) {
    std::optional<std::size_t> t;
    std::size_t positives = 0;
    for (std::size_t k = 0; k < members.size(); ++k) {
      const double y = plan.blocks[members[k]].labels[i];
      if (labeled(y) && y > 0.5) {
        t = k;
        ++positives;
      }
    }
    if (positives == 1) {
      rows.push_back(i);
      targets.push_back(*t);
    }
  }
}

inline ad::Tensor task_term(const Plan& plan, const std::vector<ad::Tensor>& scores,
                            const std::vector<ad::Tensor>& group_probs, bool use_ce, bool& any) {
  auto gi = use_ce ? group_index(plan) : std::vector<std::optional<std::size_t>>(plan.blocks.size());
  std::vector<ad::Tensor> terms;
  for (std::size_t k = 0; use_ce && k < plan.groups.size(); ++k) {
    const auto& members = plan.groups[k];
    if (members.empty() || plan.blocks[members.front()].queries() == 0) continue;
    std::vector<std::size_t> rows, targets;
    group_targets(plan, members, rows, targets);
    if (rows.empty()) continue;
    terms.push_back(ad::ce_loss(ad::gather_rows(group_probs[k], rows), targets));
  }
  for (std::size_t j = 0; j < plan.blocks.size(); ++j) {
    if (gi[j]) continue;
    const auto& b = plan.blocks[j];
    std::vector<std::size_t> idx;
    std::vector<double> y;
    for (std::size_t i = 0; i < b.queries(); ++i) {
      if (!labeled(b.labels[i])) continue;
      idx.push_back(i);
      y.push_back(b.labels[i]);
    }
    if (idx.empty()) continue;
    const std::size_t n = idx.size();
    terms.push_back(ad::bce_loss(ad::gather(scores[j], std::move(idx), {n}), ad::Tensor::vector(std::move(y))));
  }
  any = any || !terms.empty();
  if (terms.empty()) return ad::Tensor::scalar(0.0);
  ad::Tensor total = terms.front();
  for (std::size_t i = 1; i < terms.size(); ++i) total = ad::add(total, terms[i]);
  return total;
}

}  // namespace detail

// ---- loss --------------------------------------------------------------------------------

struct LossParts {
  ad::Tensor total;
  ad::Tensor concept_loss;
  ad::Tensor task_loss;
};

/// L_c + λ·L_y on a forward pass. L_c is the mean BCE over labeled concept atoms;
/// L_y sums one BCE term per task, or with kCe one CE term per exclusive group
/// over its normalized scores.
inline LossParts compute_loss_parts(const Model& model, const Plan& plan, const Forward& fw, const LossConfig& cfg) {
  if (cfg.lambda < 0) throw Error(ErrorCode::kInvalidTarget, "lambda must be nonnegative");
  bool any = false;
  LossParts out;
  if (model.uses_concepts() && !plan.concept_label_index.empty()) {
    const std::size_t n = plan.concept_label_index.size();
    out.concept_loss = ad::bce_loss(ad::gather(fw.concept_scores, plan.concept_label_index, {n}),
                                    ad::Tensor::vector(plan.concept_label_value));
    any = true;
  } else {
    out.concept_loss = ad::Tensor::scalar(0.0);
  }
  const bool ce = cfg.task_loss == TaskLoss::kCe;
  out.task_loss = detail::task_term(plan, fw.task_scores, fw.group_probs, ce, any);
  if (model.has_aux_head()) {
    bool aux_any = false;
    out.task_loss =
        ad::add(out.task_loss, detail::task_term(plan, fw.aux_task_scores, fw.aux_group_probs, ce, aux_any));
  }
  if (!any) throw Error(ErrorCode::kEmptyBatch, "batch has no labeled concept or task atoms");
  out.total = ad::add(out.concept_loss, ad::scale(out.task_loss, cfg.lambda));
  return out;
}

inline ad::Tensor compute_loss(const Model& model, const Plan& plan, const LossConfig& cfg) {
  return compute_loss_parts(model, plan, model.forward(plan), cfg).total;
}

// ---- evaluation --------------------------------------------------------------------------

/// Metric over the labeled task atoms of a plan, on the aggregated task scores.
/// Within an exclusive group accuracy is the argmax over members.
inline double evaluate_plan(const Plan& plan, const Forward& fw, MetricKind kind) {
  auto gi = detail::group_index(plan);
  if (kind == MetricKind::kRocAuc) {
    std::vector<double> s, y;
    for (std::size_t j = 0; j < plan.blocks.size(); ++j) {
      const auto& b = plan.blocks[j];
      if (b.queries() == 0) continue;
      auto out = fw.task_scores[j].data();
      for (std::size_t i = 0; i < b.queries(); ++i) {
        if (!detail::labeled(b.labels[i])) continue;
        s.push_back(out[i]);
        y.push_back(b.labels[i]);
      }
    }
    return roc_auc(s, y);
  }
  if (kind == MetricKind::kAccuracy) {
    std::vector<std::size_t> pred, truth;
    for (std::size_t k = 0; k < plan.groups.size(); ++k) {
      const auto& members = plan.groups[k];
      if (members.empty() || plan.blocks[members.front()].queries() == 0) continue;
      std::vector<std::size_t> rows, targets;
      detail::group_targets(plan, members, rows, targets);
      for (std::size_t r = 0; r < rows.size(); ++r) {
        std::vector<double> row(members.size());
        for (std::size_t c = 0; c < members.size(); ++c) row[c] = fw.task_scores[members[c]].data()[rows[r]];
        pred.push_back(argmax(row));
        truth.push_back(targets[r]);
      }
    }
    for (std::size_t j = 0; j < plan.blocks.size(); ++j) {
      if (gi[j]) continue;
      const auto& b = plan.blocks[j];
      if (b.queries() == 0) continue;
      auto out = fw.task_scores[j].data();
      for (std::size_t i = 0; i < b.queries(); ++i) {
        if (!detail::labeled(b.labels[i])) continue;
        pred.push_back(out[i] > 0.5);
        truth.push_back(b.labels[i] > 0.5);
      }
    }
    return accuracy(pred, truth);
  }
  // mrr: queries sharing the world and all but the last argument compete; other positives are filtered.
  std::vector<std::vector<double>> cands;
  std::vector<std::size_t> truth;
  for (std::size_t j = 0; j < plan.blocks.size(); ++j) {
    const auto& b = plan.blocks[j];
    if (b.queries() == 0) continue;
    auto out = fw.task_scores[j].data();
    std::map<std::pair<std::size_t, std::vector<std::size_t>>, std::vector<std::size_t>> buckets;
    for (std::size_t i = 0; i < b.queries(); ++i) {
      std::vector<std::size_t> key(b.query_args[i].begin(), b.query_args[i].end() - 1);
      buckets[{b.query_world[i], key}].push_back(i);
    }
    for (const auto& [key, members] : buckets) {
      for (auto t : members) {
        if (!detail::labeled(b.labels[t]) || b.labels[t] <= 0.5) continue;
        std::vector<double> c;
        std::size_t at = 0;
        for (auto i : members) {
          if (i != t && detail::labeled(b.labels[i]) && b.labels[i] > 0.5) continue;
          if (i == t) at = c.size();
          c.push_back(out[i]);
        }
        cands.push_back(std::move(c));
        truth.push_back(at);
      }
    }
  }
  return mrr(cands, truth);
}

inline double evaluate(const Model& model, const RelationalDataset& ds, const std::set<Split>& splits,
                       MetricKind kind, const PlanEdits* edits = nullptr) {
  auto plan = model.compile(ds, PlanOptions{splits, false});
  return evaluate_plan(plan, model.forward(plan, edits), kind);
}

/// Fraction of labeled concept atoms of a split mispredicted at threshold 0.5.
inline double concept_error(const Model& model, const RelationalDataset& ds, Split split) {
  auto plan = model.compile(ds, PlanOptions{{split}, true});
  if (plan.concept_label_index.empty()) throw Error(ErrorCode::kEmptyBatch, "no concept labels in split");
  auto fw = model.forward(plan);
  auto s = fw.concept_scores.data();
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < plan.concept_label_index.size(); ++i) {
    wrong += (s[plan.concept_label_index[i]] > 0.5) != (plan.concept_label_value[i] > 0.5);
  }
  return static_cast<double>(wrong) / static_cast<double>(plan.concept_label_index.size());
}

// ---- supervision subsampling ---------------------------------------------------------------

/// Keeps at most `cap` train-split labels per concept predicate, balanced between
/// positives and negatives where both exist. Other splits are untouched.
inline RelationalDataset subsample_concept_supervision(const RelationalDataset& ds, std::size_t cap,
                                                       std::uint64_t seed) {
  if (cap == 0) throw Error(ErrorCode::kInvalidCount, "concept cap must be at least 1");
  Rng rng(seed);
  using Ref = std::pair<std::size_t, std::size_t>;  // world, atom
  std::map<std::string, std::pair<std::vector<Ref>, std::vector<Ref>>> pools;
  for (std::size_t w = 0; w < ds.worlds.size(); ++w) {
    const auto& world = ds.worlds[w];
    for (std::size_t i = 0; i < world.concepts.size(); ++i) {
      const auto& a = world.concepts[i];
      if (world.split_of(a) != Split::kTrain) continue;
      auto& pool = pools[a.pred];
      (a.y > 0.5 ? pool.first : pool.second).push_back({w, i});
    }
  }
  std::set<Ref> drop;
  for (auto& [pred, pool] : pools) {
    auto& [pos, neg] = pool;
    if (pos.size() + neg.size() <= cap) continue;
    std::shuffle(pos.begin(), pos.end(), rng);
    std::shuffle(neg.begin(), neg.end(), rng);
    std::size_t kp = std::min(pos.size(), (cap + 1) / 2);
    const std::size_t kn = std::min(neg.size(), cap - kp);
    kp = std::min(pos.size(), cap - kn);
    drop.insert(pos.begin() + static_cast<std::ptrdiff_t>(kp), pos.end());
    drop.insert(neg.begin() + static_cast<std::ptrdiff_t>(kn), neg.end());
  }
  RelationalDataset out = ds;
  for (std::size_t w = 0; w < out.worlds.size(); ++w) {
    auto& c = out.worlds[w].concepts;
    std::vector<LabeledAtom> kept;
    for (std::size_t i = 0; i < c.size(); ++i) {
      if (!drop.count({w, i})) kept.push_back(c[i]);
    }
    c = std::move(kept);
  }
  return out;
}

/// Keeps a random `fraction` of the train-split labels of each concept predicate.
inline RelationalDataset subsample_concept_fraction(const RelationalDataset& ds, double fraction,
                                                    std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw Error(ErrorCode::kInvalidCount, "fraction must be in (0,1]");
  if (fraction == 1.0) return ds;
  std::map<std::string, std::size_t> totals;
  for (const auto& w : ds.worlds) {
    for (const auto& a : w.concepts) totals[a.pred] += w.split_of(a) == Split::kTrain;
  }
  RelationalDataset out = ds;
  for (const auto& [pred, n] : totals) {
    const auto cap = static_cast<std::size_t>(std::ceil(fraction * static_cast<double>(n)));
    RelationalDataset only = out;
    out = subsample_concept_supervision(out, std::max<std::size_t>(cap, 1), seed + std::hash<std::string>{}(pred));
    // restore the labels of the other predicates
    for (std::size_t w = 0; w < out.worlds.size(); ++w) {
      std::vector<LabeledAtom> merged;
      for (const auto& a : only.worlds[w].concepts) {
        if (a.pred != pred) merged.push_back(a);
      }
      for (const auto& a : out.worlds[w].concepts) {
        if (a.pred == pred) merged.push_back(a);
      }
      out.worlds[w].concepts = std::move(merged);
    }
  }
  return out;
}

/// Removes concept and task labels of a random (1 - fraction) share of the training nodes.
/// A node is an entity appearing as first argument of a train-split task atom.
inline RelationalDataset mask_supervision(const RelationalDataset& ds, double fraction, std::uint64_t seed) {
  if (!(fraction > 0.0 && fraction <= 1.0)) throw Error(ErrorCode::kInvalidCount, "fraction must be in (0,1]");
  std::set<std::pair<std::size_t, std::size_t>> nodes;
  for (std::size_t w = 0; w < ds.worlds.size(); ++w) {
    for (const auto& a : ds.worlds[w].tasks) {
      if (ds.worlds[w].split_of(a) == Split::kTrain && !a.args.empty()) nodes.insert({w, a.args.front()});
    }
  }
  std::vector<std::pair<std::size_t, std::size_t>> order(nodes.begin(), nodes.end());
  Rng rng(seed);
  std::shuffle(order.begin(), order.end(), rng);
  const auto keep = static_cast<std::size_t>(std::llround(fraction * static_cast<double>(order.size())));
  std::set<std::pair<std::size_t, std::size_t>> masked(order.begin() + static_cast<std::ptrdiff_t>(keep), order.end());
  RelationalDataset out = ds;
  for (std::size_t w = 0; w < out.worlds.size(); ++w) {
    auto& world = out.worlds[w];
    auto drop = [&](const LabeledAtom& a) {
      return world.split_of(a) == Split::kTrain && !a.args.empty() && masked.count({w, a.args.front()});
    };
    std::erase_if(world.concepts, drop);
    std::erase_if(world.tasks, drop);
  }
  return out;
}

// ---- training ----------------------------------------------------------------------------

struct EpochLog {
  std::size_t epoch = 0;
  double concept_loss = 0.0;
  double task_loss = 0.0;
  std::optional<double> val_metric;
};

struct TrainResult {
  std::vector<EpochLog> log;
};

inline void write_epoch_csv(std::ostream& out, const std::vector<EpochLog>& log) {
  out << "epoch,concept_loss,task_loss,val_metric\n";
  char buf[128];
  for (const auto& e : log) {
    std::snprintf(buf, sizeof buf, "%zu,%.8g,%.8g,", e.epoch, e.concept_loss, e.task_loss);
    out << buf;
    if (e.val_metric) {
      std::snprintf(buf, sizeof buf, "%.6f", *e.val_metric);
      out << buf;
    }
    out << "\n";
  }
}

inline RelationalDataset training_view(const RelationalDataset& ds, const TrainConfig& cfg) {
  if (cfg.concept_cap) return subsample_concept_supervision(ds, *cfg.concept_cap, cfg.seed);
  return subsample_concept_fraction(ds, cfg.concept_fraction, cfg.seed);
}

inline TrainResult train(Model& model, const RelationalDataset& ds, const TrainConfig& cfg,
                         const LossConfig& loss = {}) {
  if (cfg.epochs == 0) throw Error(ErrorCode::kInvalidCount, "epochs must be at least 1");
  if (cfg.hard_concepts) model.set_hard_concepts(true);
  const auto view = training_view(ds, cfg);
  const auto plan = model.compile(view, PlanOptions{{Split::kTrain}, true});
  std::optional<Plan> val;
  try {
    val = model.compile(ds, PlanOptions{{Split::kVal}, false});
  } catch (const Error& e) {
    if (e.code() != ErrorCode::kEmptyBatch) throw;
  }
  const auto metric = parse_metric(ds.metric);
  Optimizer opt(cfg.optimizer);
  TrainResult result;
  for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
    model.params().zero_grad();
    PlanEdits warm;
    warm.full_relevance = epoch <= cfg.relevance_warmup;
    auto fw = model.forward(plan, &warm);
    auto parts = compute_loss_parts(model, plan, fw, loss);
    ad::backward(parts.total);
    if (epoch <= cfg.relevance_warmup) {
      std::vector<Parameter> active;
      for (const auto& p : model.params().all()) {
        if (!is_relevance_parameter(p.name)) active.push_back(p);
      }
      opt.step(active);
    } else {
      opt.step(model.params().all());
    }
    EpochLog e{epoch, parts.concept_loss.item(), parts.task_loss.item(), std::nullopt};
    const bool validate = epoch == cfg.epochs || (cfg.eval_every > 0 && epoch % cfg.eval_every == 0);
    if (val && validate) {
      try {
        e.val_metric = evaluate_plan(*val, model.forward(*val), metric);
      } catch (const Error&) {
      }
    }
    result.log.push_back(e);
  }
  return result;
}

// ---- corruption --------------------------------------------------------------------------

struct NoiseSpec {
  double initial_amplitude = 0.05;
  std::uint64_t seed = 0;
  double min_error = 0.4;
  double max_error = 0.6;
  int max_doublings = 20;
  int bisection_steps = 40;
  int max_draws = 8;  // fresh noise draws tried when one saturates outside the band
};

/// Adds amplitude · U(0, 1) to every feature; the unit draw depends only on the seed.
inline RelationalDataset add_uniform_noise(const RelationalDataset& ds, double amplitude, std::uint64_t seed) {
  Rng rng(seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  RelationalDataset out = ds;
  for (auto& w : out.worlds) {
    for (auto& e : w.entities) {
      for (auto& v : e.x) v += amplitude * unit(rng);
    }
  }
  return out;
}

struct CorruptionResult {
  RelationalDataset data;
  double amplitude = 0.0;
  double concept_error = 0.0;
  std::uint64_t noise_seed = 0;  // seed of the draw that landed in the band
};

/// Doubles the noise amplitude until the test concept error reaches the target band,
/// then bisects if the last doubling overshoots it. Large amplitudes pin the error to a
/// value set by the draw, so a draw that never enters the band is replaced by the next one
/// (seed, seed + 1, ...).
inline CorruptionResult corrupt_features(const RelationalDataset& ds, const Model& model, const NoiseSpec& spec = {}) {
  auto inside = [&](double e) { return e >= spec.min_error && e <= spec.max_error; };
  CorruptionResult clean{ds, 0.0, concept_error(model, ds, Split::kTest), spec.seed};
  if (inside(clean.concept_error)) return clean;
  std::string why;
  for (int draw = 0; draw < std::max(1, spec.max_draws); ++draw) {
    const std::uint64_t seed = spec.seed + static_cast<std::uint64_t>(draw);
    auto measure = [&](double a) {
      CorruptionResult r{add_uniform_noise(ds, a, seed), a, 0.0, seed};
      r.concept_error = concept_error(model, r.data, Split::kTest);
      return r;
    };
    double lo = 0.0, a = spec.initial_amplitude;
    bool overshot = false;
    for (int d = 0; d <= spec.max_doublings && !overshot; ++d, a *= 2.0) {
      auto r = measure(a);
      if (inside(r.concept_error)) return r;
      if (r.concept_error > spec.max_error) {
        overshot = true;
        double hi = a;
        for (int b = 0; b < spec.bisection_steps; ++b) {
          const double mid = 0.5 * (lo + hi);
          auto m = measure(mid);
          if (inside(m.concept_error)) return m;
          (m.concept_error < spec.min_error ? lo : hi) = mid;
        }
        why = "concept error jumps over the target band near amplitude " + std::to_string(a);
      } else {
        lo = a;
      }
    }
    if (!overshot) {
      why = "concept error stayed below " + std::to_string(spec.min_error) + " after " +
            std::to_string(spec.max_doublings) + " doublings";
    }
  }
  throw Error(ErrorCode::kSearchFailed, why + " (" + std::to_string(std::max(1, spec.max_draws)) + " draws)");
}

// ---- interventions -----------------------------------------------------------------------

struct ConceptEdit {
  std::size_t world = 0;  // dataset world index
  Atom atom;              // ground
  double value = 0.0;
};

struct RuleEdit {
  std::size_t world = 0;
  Atom query;  // ground task atom
  std::vector<double> relevance;
  std::vector<double> polarity;
};

struct InterventionSet {
  std::vector<ConceptEdit> concepts;
  std::vector<RuleEdit> rules;
};

namespace detail {

inline std::vector<std::size_t> resolve_args(const World& w, const Atom& a) {
  std::vector<std::size_t> args;
  for (const auto& t : a.args) {
    std::optional<std::size_t> at;
    for (std::size_t i = 0; i < w.entities.size(); ++i) {
      if (w.entities[i].id == t.name) at = i;
    }
    if (!at) throw Error(ErrorCode::kUnknownAtom, to_string(a) + ": no entity '" + t.name + "'");
    args.push_back(*at);
  }
  return args;
}

}  // namespace detail

/// Maps world-qualified edits onto a compiled plan.
inline PlanEdits to_plan_edits(const Model& model, const RelationalDataset& ds, const Plan& plan,
                               const InterventionSet& set) {
  PlanEdits out;
  for (const auto& e : set.concepts) {
    auto slot = plan.slot_of_world(e.world);
    auto c = model.schema().concept_index(e.atom.predicate);
    if (!slot || !c || !model.uses_concepts()) throw Error(ErrorCode::kUnknownAtom, to_string(e.atom));
    auto args = detail::resolve_args(ds.worlds[e.world], e.atom);
    if (args.size() != static_cast<std::size_t>(plan.concept_arity[*c])) {
      throw Error(ErrorCode::kUnknownAtom, to_string(e.atom) + ": wrong arity");
    }
    out.concept_index.push_back(plan.atom_index(*slot, *c, args));
    out.concept_value.push_back(e.value);
  }
  out.rules.resize(plan.blocks.size());
  for (const auto& r : set.rules) {
    auto j = model.task_index(r.query.predicate);
    auto slot = plan.slot_of_world(r.world);
    if (!j || !slot) throw Error(ErrorCode::kUnknownAtom, to_string(r.query));
    if (model.predictor(*j).kind != PredictorKind::kDcr) throw Error(ErrorCode::kNotDCR, "rule edits need a DCR model");
    auto args = detail::resolve_args(ds.worlds[r.world], r.query);
    const auto& b = plan.blocks[*j];
    std::optional<std::size_t> q;
    for (std::size_t i = 0; i < b.queries(); ++i) {
      if (b.query_world[i] == *slot && b.query_args[i] == args) q = i;
    }
    if (!q) throw Error(ErrorCode::kUnknownAtom, to_string(r.query) + " is not a query of the batch");
    out.rules[*j][*q] = {r.relevance, r.polarity};
  }
  return out;
}

/// Prediction function for the task atoms of one world with the edits applied.
inline std::function<double(const Atom&)> intervene(const Model& model, const RelationalDataset& ds,
                                                    std::size_t world, const InterventionSet& set) {
  if (world >= ds.worlds.size()) throw Error(ErrorCode::kUnknownAtom, "world " + std::to_string(world));
  RelationalDataset one = ds;
  one.worlds = {ds.worlds[world]};
  InterventionSet local = set;
  for (auto& e : local.concepts) {
    if (e.world != world) throw Error(ErrorCode::kUnknownAtom, to_string(e.atom) + " edits another world");
    e.world = 0;
  }
  for (auto& r : local.rules) {
    if (r.world != world) throw Error(ErrorCode::kUnknownAtom, to_string(r.query) + " edits another world");
    r.world = 0;
  }
  auto plan = model.compile(one, PlanOptions{{Split::kTrain, Split::kVal, Split::kTest}, false});
  auto edits = to_plan_edits(model, one, plan, local);
  auto fw = model.forward(plan, &edits);
  std::map<std::string, double> scores;
  for (std::size_t j = 0; j < plan.blocks.size(); ++j) {
    const auto& b = plan.blocks[j];
    for (std::size_t i = 0; i < b.queries(); ++i) {
      scores[to_string(one.worlds[0].ground_atom(model.tasks()[j].name, b.query_args[i]))] =
          fw.task_scores[j].data()[i];
    }
  }
  return [scores = std::move(scores)](const Atom& query) {
    auto it = scores.find(to_string(query));
    if (it == scores.end()) throw Error(ErrorCode::kUnknownAtom, to_string(query));
    return it->second;
  };
}

/// Sets every labeled concept atom of the given splits to its label.
inline InterventionSet ground_truth_concepts(const RelationalDataset& ds, const std::set<Split>& splits) {
  InterventionSet set;
  for (std::size_t w = 0; w < ds.worlds.size(); ++w) {
    const auto& world = ds.worlds[w];
    for (const auto& a : world.concepts) {
      if (splits.count(world.split_of(a))) set.concepts.push_back({w, world.ground_atom(a.pred, a.args), a.y});
    }
  }
  return set;
}

/// (relevance, polarity) masks over a template body selecting the given literals.
/// A literal names a body atom over template variables; positions not listed are irrelevant.
inline std::pair<std::vector<double>, std::vector<double>> rule_masks(const Template& t,
                                                                      const std::vector<std::pair<Atom, bool>>& lits) {
  std::vector<double> r(t.body_size(), 0.0), s(t.body_size(), 1.0);
  for (const auto& [atom, positive] : lits) {
    bool found = false;
    for (std::size_t q = 0; q < t.body_size(); ++q) {
      if (to_string(t.body[q]) != to_string(atom)) continue;
      r[q] = 1.0;
      s[q] = positive ? 1.0 : 0.0;
      found = true;
    }
    if (!found) throw Error(ErrorCode::kUnknownAtom, to_string(atom) + " is not in the body of " + to_string(t.head));
  }
  return {r, s};
}

/// Ground-truth rule edits for every RPS task query of the given splits; the rule is
/// chosen by the player's labeled sign.
inline InterventionSet rps_rule_interventions(const Model& model, const RelationalDataset& ds,
                                              const std::set<Split>& splits) {
  InterventionSet set;
  for (std::size_t w = 0; w < ds.worlds.size(); ++w) {
    const auto& world = ds.worlds[w];
    for (const auto& a : world.tasks) {
      if (!splits.count(world.split_of(a))) continue;
      std::optional<Sign> sign;
      for (const auto& c : world.concepts) {
        if (c.args == a.args && c.y > 0.5) {
          for (int s = 0; s < 3; ++s) {
            if (c.pred == sign_name(static_cast<Sign>(s))) sign = static_cast<Sign>(s);
          }
        }
      }
      if (!sign) throw Error(ErrorCode::kUnknownAtom, "no labeled sign for " + to_string(world.ground_atom(a.pred, a.args)));
      auto j = model.task_index(a.pred);
      if (!j) throw Error(ErrorCode::kUnknownAtom, a.pred);
      auto [r, s] = rule_masks(model.templates()[*j], rps_rule_literals(a.pred, *sign));
      set.rules.push_back({w, world.ground_atom(a.pred, a.args), r, s});
    }
  }
  return set;
}

struct InterventionReport {
  double amplitude = 0.0;
  double concept_error = 0.0;
  double before = 0.0;
  double after_concepts = 0.0;
  std::optional<double> after_rules;  // DCR models with a rulebook
};

/// Corrupts test inputs to the target concept error, then measures test accuracy before
/// and after ground-truth concept edits and, when `rules` is given, concept plus rule edits.
inline InterventionReport intervention_protocol(
    const Model& model, const RelationalDataset& ds, const NoiseSpec& noise,
    const std::function<InterventionSet(const Model&, const RelationalDataset&, const std::set<Split>&)>& rules = {}) {
  InterventionReport rep;
  auto corrupted = corrupt_features(ds, model, noise);
  rep.amplitude = corrupted.amplitude;
  rep.concept_error = corrupted.concept_error;
  const std::set<Split> test{Split::kTest};
  auto plan = model.compile(corrupted.data, PlanOptions{test, false});
  rep.before = evaluate_plan(plan, model.forward(plan), MetricKind::kAccuracy);
  auto set = ground_truth_concepts(corrupted.data, test);
  auto edits = to_plan_edits(model, corrupted.data, plan, set);
  rep.after_concepts = evaluate_plan(plan, model.forward(plan, &edits), MetricKind::kAccuracy);
  if (rules && predictor_kind(model.kind()) == PredictorKind::kDcr) {
    auto extra = rules(model, corrupted.data, test);
    set.rules = extra.rules;
    auto both = to_plan_edits(model, corrupted.data, plan, set);
    rep.after_rules = evaluate_plan(plan, model.forward(plan, &both), MetricKind::kAccuracy);
  }
  return rep;
}

// ---- rule extraction ---------------------------------------------------------------------

/// The crisp rule generated for a query's highest-scoring grounding.
inline ExtractedRule extract_rule(const Model& model, const RelationalDataset& ds, std::size_t world,
                                  const Atom& query, double threshold = 0.5) {
  auto j = model.task_index(query.predicate);
  if (!j) throw Error(ErrorCode::kUnknownAtom, to_string(query));
  if (model.predictor(*j).kind != PredictorKind::kDcr) throw Error(ErrorCode::kNotDCR, "rule extraction needs a DCR model");
  RelationalDataset one = ds;
  one.worlds = {ds.worlds.at(world)};
  auto plan = model.compile(one, PlanOptions{{Split::kTrain, Split::kVal, Split::kTest}, false});
  auto args = detail::resolve_args(one.worlds[0], query);
  const auto& b = plan.blocks[*j];
  std::optional<std::size_t> q;
  for (std::size_t i = 0; i < b.queries(); ++i) {
    if (b.query_args[i] == args) q = i;
  }
  if (!q) throw Error(ErrorCode::kUnknownAtom, to_string(query) + " is not labeled in world");
  auto fw = model.forward(plan);
  const auto g = fw.grounding_scores[*j].data();
  std::size_t best = b.offsets[*q];
  for (std::size_t k = b.offsets[*q]; k < b.offsets[*q + 1]; ++k) {
    const bool better = model.config().aggregator == AggregatorKind::kMax ? g[k] > g[best] : g[k] < g[best];
    if (better) best = k;
  }
  const auto& t = model.templates()[*j];
  const std::size_t p = t.body_size();
  std::vector<double> r(p), s(p);
  for (std::size_t k = 0; k < p; ++k) {
    r[k] = fw.rules[*j].relevance.at(best, k);
    s[k] = fw.rules[*j].polarity.at(best, k);
  }
  auto rule = crisp_rule(t, r, s, threshold);
  rule.query = query;
  rule.score = g[best];
  const auto facts = one.worlds[0].facts();
  const auto all = enumerate_grounding_tuples(t, one.worlds[0].entities.size(), args, &t.guard, &facts);
  const auto& tup = all.at(best - b.offsets[*q]);
  for (std::size_t k = 0; k < t.extra_vars.size(); ++k) {
    rule.theta.bindings[t.extra_vars[k]] = one.worlds[0].entities[tup[k]].id;
  }
  return rule;
}

// ---- protocols ---------------------------------------------------------------------------

/// Runs fn(0..n-1) on at most `jobs` threads.
inline void parallel_for(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  jobs = std::max<std::size_t>(1, std::min(jobs, n));
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::mutex m;
  std::size_t next = 0;
  std::exception_ptr failure;
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < jobs; ++t) {
    pool.emplace_back([&] {
      while (true) {
        std::size_t i;
        {
          std::lock_guard lock(m);
          if (next >= n || failure) return;
          i = next++;
        }
        try {
          fn(i);
        } catch (...) {
          std::lock_guard lock(m);
          failure = std::current_exception();
        }
      }
    });
  }
  for (auto& th : pool) th.join();
  if (failure) std::rethrow_exception(failure);
}

struct RunSpec {
  std::string name;
  ModelConfig model;
  std::vector<Template> templates;
  TrainConfig train;
  LossConfig loss;
};

struct OodPoint {
  std::size_t disks = 0;
  std::optional<double> auc;
  std::string reason;  // set when auc is absent
};

struct OodOptions {
  std::size_t train_disks = 3;
  std::vector<std::size_t> test_disks{3, 4, 5, 6, 7};
  std::size_t train_worlds = 200;
  std::size_t test_worlds = 100;
  std::uint64_t data_seed = 0;
};

/// Trains on one tower height, then measures task ROC-AUC on fresh towers of every test height.
inline std::vector<OodPoint> ood_protocol(const RunSpec& run, const OodOptions& opt = {}) {
  const auto train_ds = gen_hanoi(opt.train_worlds, opt.train_disks, opt.data_seed);
  std::vector<std::string> universe;
  if (run.model.kind == ModelKind::kFlatCbm) universe = train_ds.worlds.front().universe();
  Model model(train_ds.schema, train_ds.feature_dim(), run.templates, run.model, universe);
  train(model, train_ds, run.train, run.loss);
  std::vector<OodPoint> out;
  for (auto d : opt.test_disks) {
    const auto test = gen_hanoi(opt.test_worlds, d, opt.data_seed + 1000 + d);
    OodPoint p{d, std::nullopt, ""};
    try {
      p.auc = evaluate(model, test, {Split::kTrain, Split::kVal, Split::kTest}, MetricKind::kRocAuc);
    } catch (const Error& e) {
      if (e.code() != ErrorCode::kUniverseMismatch) throw;
      p.reason = "UniverseMismatch";
    }
    out.push_back(p);
  }
  return out;
}

struct EfficiencyCell {
  std::string model;
  double fraction = 1.0;
  std::uint64_t seed = 0;
  double accuracy = 0.0;
};

/// Retrains every run on every supervision fraction and reports test accuracy.
inline std::vector<EfficiencyCell> data_efficiency_protocol(const RelationalDataset& ds,
                                                            const std::vector<RunSpec>& runs,
                                                            const std::vector<double>& fractions = {1.0, 0.75, 0.5,
                                                                                                    0.25},
                                                            std::size_t jobs = 1) {
  std::vector<EfficiencyCell> cells;
  for (double f : fractions) {
    for (const auto& r : runs) cells.push_back({r.name, f, r.model.seed, 0.0});
  }
  parallel_for(cells.size(), jobs, [&](std::size_t i) {
    const auto& run = runs[i % runs.size()];
    const auto masked = mask_supervision(ds, cells[i].fraction, run.train.seed);
    Model model(ds.schema, ds.feature_dim(), run.templates, run.model);
    train(model, masked, run.train, run.loss);
    cells[i].accuracy = evaluate(model, ds, {Split::kTest}, MetricKind::kAccuracy);
  });
  return cells;
}

/// Mean and 95% normal half-width over seeds.
struct Summary {
  double mean = 0.0;
  double half_width = 0.0;
};

inline Summary summarize(const std::vector<double>& v) {
  Summary s;
  if (v.empty()) return s;
  s.mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  if (v.size() < 2) return s;
  double ss = 0.0;
  for (double x : v) ss += (x - s.mean) * (x - s.mean);
  const double sd = std::sqrt(ss / static_cast<double>(v.size() - 1));
  s.half_width = 1.96 * sd / std::sqrt(static_cast<double>(v.size()));
  return s;
}

}  // namespace relcbm
