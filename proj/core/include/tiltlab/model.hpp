#pragma once

#include <cmath>
#include <cstdint>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "tiltlab/autodiff.hpp"
#include "tiltlab/errors.hpp"
#include "tiltlab/rng.hpp"
#include "tiltlab/tensor.hpp"

// A miniature RoBERTa-style masked LM: learned token + absolute position
// embeddings, pre-norm self-attention/feed-forward blocks with residuals, a
// final layer norm, and an MLM head (dense -> gelu -> layer norm -> vocab
// projection). The vocab projection shares the token embedding matrix when
// tied. Freezing designates which named parameters may change in training.

namespace tiltlab {

struct ModelConfig {
  std::size_t n_layers = 8;
  std::size_t n_heads = 8;
  std::size_t d_model = 256;
  std::size_t d_ff = 1024;
  std::size_t max_seq_len = 128;
  std::size_t vocab_size = 0;
  bool tie_output_to_embeddings = true;
  double init_std = 0.02;
  double layer_norm_eps = 1e-5;

  // n_layers == 0 is a legal degenerate case (embed -> final LN -> head).
  void validate() const {
    if (n_heads == 0 || d_model == 0 || d_ff == 0 || max_seq_len == 0 || vocab_size == 0) {
      throw ConfigError("model config: all counts must be positive");
    }
    if (d_model % n_heads != 0) {
      throw ConfigError("model config: d_model " + std::to_string(d_model) +
                        " not divisible by n_heads " + std::to_string(n_heads));
    }
  }
};

struct ParameterSet {
  ModelConfig config;
  std::map<std::string, TensorF> tensors;
};

enum class FreezePolicy { none, all_but_word_embeddings };

struct FreezeMask {
  std::set<std::string> trainable;
};

// Gaussian weights (std = init_std), zero biases, unit layer-norm gains.
// Each tensor draws from its own name-derived stream, so results do not
// depend on construction order.
ParameterSet init_params(const ModelConfig& config, std::uint64_t seed);

// One tensor from the same name-derived stream convention init_params uses.
// Vocabulary grafting re-initializes lexical tensors through this.
TensorF seeded_gaussian(const std::vector<std::size_t>& shape, std::uint64_t seed,
                        const std::string& name, double std_dev);

// Closed-form total parameter count for a config (tied projection counted
// once, through the embedding matrix).
std::size_t count_params(const ModelConfig& config);

// `none` -> everything trainable. `all_but_word_embeddings` -> only the
// lexical tensors: token_embeddings, mlm_out_bias, and mlm_out_w when the
// projection is untied.
FreezeMask resolve_freeze(const ParameterSet& params, FreezePolicy policy);

// Validates that every requested name exists; returns the mask unchanged.
FreezeMask validate_freeze(const ParameterSet& params, FreezeMask mask);

// Plain inference: float graph, no gradients, dropout off.
// ids and pad_mask are [B, T]; pad_mask is 1 for real tokens, 0 for padding.
TensorF forward_mlm(const ParameterSet& params, const Tensor<TokenId>& ids,
                    const Tensor<std::uint8_t>& pad_mask);

namespace modeldetail {

inline const char* kLexicalOutW = "mlm_out_w";

inline std::string layer_prefix(std::size_t i) { return "layers." + std::to_string(i) + "."; }

}  // namespace modeldetail

// Parameter leaves for one differentiable forward pass. Trainable names get
// requires_grad; the rest enter the graph as constants that still carry
// their names for checkpointing.
template <typename T>
struct MlmGraph {
  ModelConfig config;
  std::map<std::string, ag::Var<T>> params;

  const ag::Var<T>& at(const std::string& name) const {
    auto it = params.find(name);
    if (it == params.end()) throw std::invalid_argument("model graph: no parameter " + name);
    return it->second;
  }

  std::vector<ag::Var<T>> leaves() const {
    std::vector<ag::Var<T>> out;
    out.reserve(params.size());
    for (const auto& [name, var] : params) out.push_back(var);
    return out;
  }
};

template <typename T>
MlmGraph<T> make_mlm_graph_typed(const ModelConfig& config,
                                 const std::map<std::string, Tensor<T>>& tensors,
                                 const std::set<std::string>& trainable) {
  for (const auto& name : trainable) {
    if (!tensors.count(name)) {
      throw std::invalid_argument("freeze mask names unknown parameter " + name);
    }
  }
  MlmGraph<T> graph;
  graph.config = config;
  for (const auto& [name, tensor] : tensors) {
    graph.params.emplace(name, ag::Var<T>::leaf(tensor, trainable.count(name) > 0, name));
  }
  return graph;
}

template <typename T>
MlmGraph<T> make_mlm_graph(const ParameterSet& params, const std::set<std::string>& trainable) {
  std::map<std::string, Tensor<T>> typed;
  for (const auto& [name, tensor] : params.tensors) {
    typed.emplace(name, tensor.template cast<T>());
  }
  return make_mlm_graph_typed<T>(params.config, typed, trainable);
}

struct ForwardOptions {
  bool train = false;
  double dropout_p = 0.0;
  std::uint64_t dropout_seed = 0;
};

// Differentiable forward pass to vocabulary logits [B, T, V].
template <typename T>
ag::Var<T> mlm_logits(const MlmGraph<T>& graph, const Tensor<TokenId>& ids,
                      const Tensor<std::uint8_t>& pad_mask, const ForwardOptions& opts = {}) {
  const ModelConfig& cfg = graph.config;
  if (ids.rank() != 2) {
    throw std::invalid_argument("forward: ids must be [batch, seq], got " +
                                TensorF::shape_str(ids.shape()));
  }
  if (pad_mask.shape() != ids.shape()) {
    throw std::invalid_argument("forward: pad_mask shape " +
                                TensorF::shape_str(pad_mask.shape()) + " != ids shape " +
                                TensorF::shape_str(ids.shape()));
  }
  const std::size_t b = ids.extent(0);
  const std::size_t t = ids.extent(1);
  if (t > cfg.max_seq_len) {
    throw std::invalid_argument("forward: sequence length " + std::to_string(t) +
                                " exceeds max_seq_len " + std::to_string(cfg.max_seq_len));
  }
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= cfg.vocab_size) {
      throw std::invalid_argument("forward: token id " + std::to_string(ids[i]) +
                                  " outside vocab of " + std::to_string(cfg.vocab_size));
    }
  }

  const T eps = static_cast<T>(cfg.layer_norm_eps);
  auto dropout_at = [&](const ag::Var<T>& x, std::uint64_t salt) {
    return ag::dropout(x, opts.dropout_p, mix_seed(opts.dropout_seed, salt), opts.train);
  };

  // token + position embeddings
  Tensor<TokenId> pos_ids({t});
  for (std::size_t i = 0; i < t; ++i) pos_ids[i] = static_cast<TokenId>(i);
  auto x = ag::add(ag::embedding_lookup(graph.at("token_embeddings"), ids),
                   ag::embedding_lookup(graph.at("position_embeddings"), pos_ids));
  x = dropout_at(x, 0xE0);

  // additive key mask: 0 on real tokens, -1e9 on padding
  Tensor<T> maskvals({b, 1, 1, t});
  for (std::size_t bi = 0; bi < b; ++bi) {
    for (std::size_t ti = 0; ti < t; ++ti) {
      maskvals[bi * t + ti] = pad_mask.at({bi, ti}) ? T{0} : static_cast<T>(-1e9);
    }
  }
  auto key_mask = ag::Var<T>::constant(std::move(maskvals));

  const std::size_t dk = cfg.d_model / cfg.n_heads;
  const T inv_sqrt_dk = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dk)));

  for (std::size_t layer = 0; layer < cfg.n_layers; ++layer) {
    const std::string p = modeldetail::layer_prefix(layer);
    auto h = ag::layer_norm(x, graph.at(p + "attn_ln_gain"), graph.at(p + "attn_ln_bias"), eps);
    auto q = ag::split_heads(
        ag::add(ag::matmul(h, graph.at(p + "attn_q_w")), graph.at(p + "attn_q_b")), cfg.n_heads);
    auto k = ag::split_heads(
        ag::add(ag::matmul(h, graph.at(p + "attn_k_w")), graph.at(p + "attn_k_b")), cfg.n_heads);
    auto v = ag::split_heads(
        ag::add(ag::matmul(h, graph.at(p + "attn_v_w")), graph.at(p + "attn_v_b")), cfg.n_heads);
    auto scores = ag::add(ag::scale(ag::matmul(q, k, true), inv_sqrt_dk), key_mask);
    auto attn = dropout_at(ag::softmax_lastdim(scores), 2 * layer + 1);
    auto ctx = ag::merge_heads(ag::matmul(attn, v));
    auto attn_out =
        ag::add(ag::matmul(ctx, graph.at(p + "attn_out_w")), graph.at(p + "attn_out_b"));
    x = ag::add(x, dropout_at(attn_out, 2 * layer + 2));

    auto h2 = ag::layer_norm(x, graph.at(p + "ff_ln_gain"), graph.at(p + "ff_ln_bias"), eps);
    auto ff = ag::gelu(ag::add(ag::matmul(h2, graph.at(p + "ff_in_w")), graph.at(p + "ff_in_b")));
    auto ff_out = ag::add(ag::matmul(ff, graph.at(p + "ff_out_w")), graph.at(p + "ff_out_b"));
    x = ag::add(x, dropout_at(ff_out, 0xFF00 + layer));
  }

  x = ag::layer_norm(x, graph.at("final_ln_gain"), graph.at("final_ln_bias"), eps);

  // MLM head
  auto h = ag::gelu(ag::add(ag::matmul(x, graph.at("mlm_dense_w")), graph.at("mlm_dense_b")));
  h = ag::layer_norm(h, graph.at("mlm_ln_gain"), graph.at("mlm_ln_bias"), eps);
  const auto& proj = graph.config.tie_output_to_embeddings
                         ? graph.at("token_embeddings")
                         : graph.at(modeldetail::kLexicalOutW);
  return ag::add(ag::matmul(h, proj, true), graph.at("mlm_out_bias"));
}

}  // namespace tiltlab
