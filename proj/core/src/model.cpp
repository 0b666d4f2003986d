#include "tiltlab/model.hpp"

namespace tiltlab {

namespace {

std::uint64_t name_hash(const std::string& name) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : name) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

std::map<std::string, std::vector<std::size_t>> parameter_shapes(const ModelConfig& cfg) {
  const std::size_t d = cfg.d_model;
  const std::size_t f = cfg.d_ff;
  const std::size_t v = cfg.vocab_size;
  std::map<std::string, std::vector<std::size_t>> shapes;
  shapes["token_embeddings"] = {v, d};
  shapes["position_embeddings"] = {cfg.max_seq_len, d};
  for (std::size_t i = 0; i < cfg.n_layers; ++i) {
    const std::string p = modeldetail::layer_prefix(i);
    shapes[p + "attn_ln_gain"] = {d};
    shapes[p + "attn_ln_bias"] = {d};
    shapes[p + "attn_q_w"] = {d, d};
    shapes[p + "attn_q_b"] = {d};
    shapes[p + "attn_k_w"] = {d, d};
    shapes[p + "attn_k_b"] = {d};
    shapes[p + "attn_v_w"] = {d, d};
    shapes[p + "attn_v_b"] = {d};
    shapes[p + "attn_out_w"] = {d, d};
    shapes[p + "attn_out_b"] = {d};
    shapes[p + "ff_ln_gain"] = {d};
    shapes[p + "ff_ln_bias"] = {d};
    shapes[p + "ff_in_w"] = {d, f};
    shapes[p + "ff_in_b"] = {f};
    shapes[p + "ff_out_w"] = {f, d};
    shapes[p + "ff_out_b"] = {d};
  }
  shapes["final_ln_gain"] = {d};
  shapes["final_ln_bias"] = {d};
  shapes["mlm_dense_w"] = {d, d};
  shapes["mlm_dense_b"] = {d};
  shapes["mlm_ln_gain"] = {d};
  shapes["mlm_ln_bias"] = {d};
  shapes["mlm_out_bias"] = {v};
  if (!cfg.tie_output_to_embeddings) shapes[modeldetail::kLexicalOutW] = {v, d};
  return shapes;
}

}  // namespace

ParameterSet init_params(const ModelConfig& config, std::uint64_t seed) {
  config.validate();
  ParameterSet params;
  params.config = config;
  for (const auto& [name, shape] : parameter_shapes(config)) {
    TensorF tensor(shape);
    if (ends_with(name, "gain")) {
      std::fill(tensor.storage().begin(), tensor.storage().end(), 1.0f);
    } else if (shape.size() == 2) {
      tensor = seeded_gaussian(shape, seed, name, config.init_std);
    }
    // biases stay zero
    params.tensors.emplace(name, std::move(tensor));
  }
  return params;
}

TensorF seeded_gaussian(const std::vector<std::size_t>& shape, std::uint64_t seed,
                        const std::string& name, double std_dev) {
  TensorF tensor(shape);
  Rng rng(mix_seed(seed, name_hash(name)));
  for (auto& w : tensor.storage()) {
    w = static_cast<float>(rng.gaussian() * std_dev);
  }
  return tensor;
}

std::size_t count_params(const ModelConfig& config) {
  config.validate();
  const std::size_t d = config.d_model;
  const std::size_t f = config.d_ff;
  const std::size_t v = config.vocab_size;
  const std::size_t per_layer = 4 * d * d + 2 * d * f + f + 9 * d;
  std::size_t total = v * d                      // token embeddings
                      + config.max_seq_len * d   // position embeddings
                      + config.n_layers * per_layer
                      + 2 * d                    // final layer norm
                      + d * d + d                // mlm dense
                      + 2 * d                    // mlm layer norm
                      + v;                       // mlm output bias
  if (!config.tie_output_to_embeddings) total += v * d;
  return total;
}

FreezeMask resolve_freeze(const ParameterSet& params, FreezePolicy policy) {
  FreezeMask mask;
  switch (policy) {
    case FreezePolicy::none:
      for (const auto& [name, tensor] : params.tensors) mask.trainable.insert(name);
      break;
    case FreezePolicy::all_but_word_embeddings:
      mask.trainable.insert("token_embeddings");
      mask.trainable.insert("mlm_out_bias");
      if (!params.config.tie_output_to_embeddings) {
        mask.trainable.insert(modeldetail::kLexicalOutW);
      }
      break;
  }
  return validate_freeze(params, std::move(mask));
}

FreezeMask validate_freeze(const ParameterSet& params, FreezeMask mask) {
  for (const auto& name : mask.trainable) {
    if (!params.tensors.count(name)) {
      throw ConfigError("freeze mask names unknown parameter " + name);
    }
  }
  return mask;
}

TensorF forward_mlm(const ParameterSet& params, const Tensor<TokenId>& ids,
                    const Tensor<std::uint8_t>& pad_mask) {
  auto graph = make_mlm_graph<float>(params, {});
  return mlm_logits(graph, ids, pad_mask).value();
}

}  // namespace tiltlab
