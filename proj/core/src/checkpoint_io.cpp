#include "tiltlab/checkpoint_io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

#include <json.hpp>

#include "tiltlab/digest.hpp"

namespace tiltlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Payload bytes are little-endian on disk regardless of host order.
std::string pack_le(const TensorF& tensor) {
  std::string bytes(tensor.size() * 4, '\0');
  for (std::size_t i = 0; i < tensor.size(); ++i) {
    const auto u = std::bit_cast<std::uint32_t>(tensor[i]);
    bytes[4 * i + 0] = static_cast<char>(u & 0xFF);
    bytes[4 * i + 1] = static_cast<char>((u >> 8) & 0xFF);
    bytes[4 * i + 2] = static_cast<char>((u >> 16) & 0xFF);
    bytes[4 * i + 3] = static_cast<char>((u >> 24) & 0xFF);
  }
  return bytes;
}

void unpack_le(const std::string& bytes, TensorF& tensor) {
  for (std::size_t i = 0; i < tensor.size(); ++i) {
    const auto b = [&](std::size_t k) {
      return static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[4 * i + k]));
    };
    tensor[i] = std::bit_cast<float>(b(0) | (b(1) << 8) | (b(2) << 16) | (b(3) << 24));
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CorruptionError("checkpoint: cannot open " + path.string());
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("checkpoint: cannot write " + path.string());
}

json config_to_json(const ModelConfig& c) {
  return {{"n_layers", c.n_layers},
          {"n_heads", c.n_heads},
          {"d_model", c.d_model},
          {"d_ff", c.d_ff},
          {"max_seq_len", c.max_seq_len},
          {"vocab_size", c.vocab_size},
          {"tie_output_to_embeddings", c.tie_output_to_embeddings},
          {"init_std", c.init_std},
          {"layer_norm_eps", c.layer_norm_eps}};
}

ModelConfig config_from_json(const json& j) {
  ModelConfig c;
  c.n_layers = j.at("n_layers").get<std::size_t>();
  c.n_heads = j.at("n_heads").get<std::size_t>();
  c.d_model = j.at("d_model").get<std::size_t>();
  c.d_ff = j.at("d_ff").get<std::size_t>();
  c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
  c.vocab_size = j.at("vocab_size").get<std::size_t>();
  c.tie_output_to_embeddings = j.at("tie_output_to_embeddings").get<bool>();
  c.init_std = j.at("init_std").get<double>();
  c.layer_norm_eps = j.at("layer_norm_eps").get<double>();
  return c;
}

json manifest_to_json(const Manifest& m) {
  return {{"variant", m.variant},
          {"stage", m.stage},
          {"corpus_digests", m.corpus_digests},
          {"seeds", m.seeds},
          {"trainable", m.trainable},
          {"bpe_vocab_ceiling", m.bpe_vocab_ceiling},
          {"bpe_min_frequency", m.bpe_min_frequency}};
}

Manifest manifest_from_json(const json& j) {
  Manifest m;
  m.variant = j.at("variant").get<std::string>();
  m.stage = j.at("stage").get<std::string>();
  m.corpus_digests = j.at("corpus_digests").get<std::map<std::string, std::string>>();
  m.seeds = j.at("seeds").get<std::map<std::string, std::uint64_t>>();
  m.trainable = j.at("trainable").get<std::vector<std::string>>();
  m.bpe_vocab_ceiling = j.at("bpe_vocab_ceiling").get<std::size_t>();
  m.bpe_min_frequency = j.at("bpe_min_frequency").get<std::size_t>();
  return m;
}

}  // namespace

void write_checkpoint(const Checkpoint& ckpt, const fs::path& dir) {
  ckpt.validate();
  fs::create_directories(dir / "tensors");

  const std::string tokenizer_bytes = serialize_bpe(ckpt.tokenizer);
  write_file(dir / "tokenizer.json", tokenizer_bytes);

  json tensors = json::object();
  for (const auto& [name, tensor] : ckpt.params.tensors) {
    json header = {{"name", name}, {"shape", tensor.shape()}, {"dtype", "f32le"}};
    const std::string payload = pack_le(tensor);
    write_file(dir / "tensors" / (name + ".bin"), header.dump() + "\n" + payload);
    tensors[name] = {{"shape", tensor.shape()},
                     {"digest", sha256_hex(payload)}};
  }

  json manifest = {{"format", "tiltlab-checkpoint-v1"},
                   {"model_config", config_to_json(ckpt.params.config)},
                   {"provenance", manifest_to_json(ckpt.manifest)},
                   {"tensors", tensors},
                   {"tokenizer_digest", sha256_hex(tokenizer_bytes)}};
  write_file(dir / "manifest.json", manifest.dump(2) + "\n");
}

Checkpoint read_checkpoint(const fs::path& dir) {
  const json manifest = json::parse(read_file(dir / "manifest.json"), nullptr, false);
  if (manifest.is_discarded() || !manifest.is_object()) {
    throw CorruptionError("checkpoint: " + (dir / "manifest.json").string() +
                          " is not valid JSON");
  }
  Checkpoint ckpt;
  try {
    if (manifest.at("format").get<std::string>() != "tiltlab-checkpoint-v1") {
      throw CorruptionError("checkpoint: unknown format \"" +
                            manifest.at("format").get<std::string>() + "\"");
    }
    ckpt.params.config = config_from_json(manifest.at("model_config"));
    ckpt.manifest = manifest_from_json(manifest.at("provenance"));

    const std::string tokenizer_bytes = read_file(dir / "tokenizer.json");
    if (sha256_hex(tokenizer_bytes) != manifest.at("tokenizer_digest").get<std::string>()) {
      throw CorruptionError("checkpoint: tokenizer.json digest mismatch");
    }
    ckpt.tokenizer = parse_bpe(tokenizer_bytes);

    for (const auto& [name, entry] : manifest.at("tensors").items()) {
      const fs::path blob_path = dir / "tensors" / (name + ".bin");
      const std::string blob = read_file(blob_path);
      const std::size_t newline = blob.find('\n');
      if (newline == std::string::npos) {
        throw CorruptionError("checkpoint: " + blob_path.string() + " has no header line");
      }
      const json header = json::parse(blob.substr(0, newline), nullptr, false);
      if (header.is_discarded() || header.value("name", "") != name ||
          header.value("dtype", "") != "f32le") {
        throw CorruptionError("checkpoint: " + blob_path.string() + " has a bad header");
      }
      const auto shape = entry.at("shape").get<std::vector<std::size_t>>();
      if (header.at("shape").get<std::vector<std::size_t>>() != shape) {
        throw CorruptionError("checkpoint: " + blob_path.string() +
                              " header shape disagrees with the manifest");
      }
      TensorF tensor(shape);
      const std::string payload = blob.substr(newline + 1);
      if (payload.size() != tensor.size() * 4) {
        throw CorruptionError("checkpoint: " + blob_path.string() + " payload is " +
                              std::to_string(payload.size()) + " bytes, expected " +
                              std::to_string(tensor.size() * 4));
      }
      if (sha256_hex(payload) != entry.at("digest").get<std::string>()) {
        throw CorruptionError("checkpoint: " + blob_path.string() + " digest mismatch");
      }
      unpack_le(payload, tensor);
      ckpt.params.tensors.emplace(name, std::move(tensor));
    }
  } catch (const json::exception& e) {
    throw CorruptionError("checkpoint: " + dir.string() + ": " + e.what());
  }

  ckpt.validate();
  return ckpt;
}

}  // namespace tiltlab
