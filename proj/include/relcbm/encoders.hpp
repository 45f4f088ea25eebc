#pragma once

#include <string>
#include <utility>
#include <vector>

#include "relcbm/error.hpp"
#include "relcbm/logic.hpp"
#include "relcbm/nn.hpp"
#include "relcbm/tensor.hpp"

namespace relcbm {

struct EncoderConfig {
  std::size_t embed_dim = 16;  // h
  std::size_t hidden = 32;     // per-head hidden layer
};

/// ψ: feature vector (d) → embedding (h), one relu layer shared by all concepts.
struct EntityEmbedder {
  Dense layer;

  EntityEmbedder() = default;
  EntityEmbedder(ParameterStore& store, std::size_t d, std::size_t h, Rng& rng) : layer(store, "psi", d, h, rng) {}

  std::size_t in() const { return layer.in(); }
  std::size_t out() const { return layer.out(); }

  ad::Tensor pre_activation(const ad::Tensor& x) const {
    if (x.dim() != 2 || x.cols() != in()) {
      throw Error(ErrorCode::kDimMismatch, "embedder expects " + std::to_string(in()) + " features, got " +
                                               ad::shape_str(x.shape()));
    }
    return layer(x);
  }
  ad::Tensor operator()(const ad::Tensor& x) const { return ad::relu(pre_activation(x)); }

  std::vector<double> embed(const std::vector<double>& x) const {
    auto out = (*this)(ad::Tensor::matrix(1, x.size(), x));
    return {out.data().begin(), out.data().end()};
  }
};

struct ConceptOutput {
  ad::Tensor score;      // (n), in (0,1)
  ad::Tensor embedding;  // (n × h)
};

/// g_i on the concatenated embeddings of its arguments:
/// (a·h) → hidden (relu) → h (relu, the concept embedding) → 1 (sigmoid).
struct ConceptHead {
  PredicateSig sig;
  Dense l1, l2, l3;

  ConceptHead() = default;
  ConceptHead(ParameterStore& store, const PredicateSig& s, const EncoderConfig& cfg, Rng& rng)
      : sig(s),
        l1(store, "g." + s.name + ".0", static_cast<std::size_t>(s.arity) * cfg.embed_dim, cfg.hidden, rng),
        l2(store, "g." + s.name + ".1", cfg.hidden, cfg.embed_dim, rng),
        l3(store, "g." + s.name + ".2", cfg.embed_dim, 1, rng) {}

  ConceptOutput operator()(const ad::Tensor& z) const {
    auto e = ad::relu(l2(ad::relu(l1(z))));
    auto s = ad::sigmoid(l3(e));
    return {ad::reshape(s, {s.rows()}), e};
  }
};

/// Shared ψ plus one head per concept predicate, in schema order.
class ConceptEncoder {
 public:
  ConceptEncoder() = default;
  ConceptEncoder(ParameterStore& store, const Schema& schema, std::size_t feature_dim, const EncoderConfig& cfg,
                 Rng& rng)
      : cfg_(cfg), psi_(store, feature_dim, cfg.embed_dim, rng) {
    for (const auto& c : schema.of_kind(PredicateKind::kConcept)) heads_.emplace_back(store, c, cfg, rng);
  }

  const EncoderConfig& config() const { return cfg_; }
  const EntityEmbedder& embedder() const { return psi_; }
  const std::vector<ConceptHead>& heads() const { return heads_; }
  std::size_t size() const { return heads_.size(); }

  ad::Tensor embed(const ad::Tensor& features) const { return psi_(features); }

  /// Evaluates concept `c` on atoms whose i-th arguments are rows `rows[i]` of `embeddings`.
  ConceptOutput encode_rows(std::size_t c, const ad::Tensor& embeddings,
                            const std::vector<std::vector<std::size_t>>& rows) const {
    const auto& head = heads_.at(c);
    if (rows.size() != static_cast<std::size_t>(head.sig.arity)) {
      throw Error(ErrorCode::kArityMismatch, head.sig.name + " expects " + std::to_string(head.sig.arity) +
                                                 " arguments, got " + std::to_string(rows.size()));
    }
    std::vector<ad::Tensor> parts;
    for (const auto& r : rows) parts.push_back(ad::gather_rows(embeddings, r));
    return head(parts.size() == 1 ? parts.front() : ad::concat(parts, 1));
  }

  /// Single-atom convenience: score and embedding for an ordered tuple of feature vectors.
  std::pair<double, std::vector<double>> encode(std::size_t c, const std::vector<std::vector<double>>& entities) const {
    const auto& head = heads_.at(c);
    if (entities.size() != static_cast<std::size_t>(head.sig.arity)) {
      throw Error(ErrorCode::kArityMismatch, head.sig.name + " expects " + std::to_string(head.sig.arity) +
                                                 " arguments, got " + std::to_string(entities.size()));
    }
    std::vector<double> flat;
    for (const auto& e : entities) {
      if (e.size() != psi_.in()) throw Error(ErrorCode::kDimMismatch, "feature dim " + std::to_string(e.size()));
      flat.insert(flat.end(), e.begin(), e.end());
    }
    auto emb = embed(ad::Tensor::matrix(entities.size(), psi_.in(), flat));
    std::vector<std::vector<std::size_t>> rows;
    for (std::size_t i = 0; i < entities.size(); ++i) rows.push_back({i});
    auto out = encode_rows(c, emb, rows);
    return {out.score.data()[0], {out.embedding.data().begin(), out.embedding.data().end()}};
  }

 private:
  EncoderConfig cfg_;
  EntityEmbedder psi_;
  std::vector<ConceptHead> heads_;
};

/// Parameter count of a ConceptEncoder from its architecture.
inline std::size_t encoder_parameter_count(std::size_t d, const EncoderConfig& cfg, const std::vector<int>& arities) {
  const std::size_t h = cfg.embed_dim, k = cfg.hidden;
  std::size_t n = d * h + h;
  for (int a : arities) n += static_cast<std::size_t>(a) * h * k + k + k * h + h + h + 1;
  return n;
}

/// Straight-through hardening: forward thresholds at 0.5, backward is the identity.
inline ad::Tensor harden_concepts(const ad::Tensor& scores) { return ad::straight_through_threshold(scores, 0.5); }

}  // namespace relcbm
