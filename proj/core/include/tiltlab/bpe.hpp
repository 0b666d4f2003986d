#pragma once

#include <cstddef>
#include <cstdint>
#include <limits>
#include <string>
#include <unordered_map>
#include <utility>
#include <vector>

#include "tiltlab/corpus.hpp"
#include "tiltlab/tensor.hpp"

// Byte-level byte-pair encoding. The base alphabet is all 256 byte values,
// each rendered as a printable unicode character (the familiar GPT-2 byte to
// unicode table) so that vocab files stay valid JSON. Text is first split
// into whitespace-prefixed chunks; merges never cross a chunk boundary.
// Special tokens use a control-character prefix that the byte mapping can
// never produce, so merges cannot collide with them.

namespace tiltlab {

using TokenSeq = std::vector<TokenId>;

inline constexpr std::size_t kBpeSpecialCount = 5;
inline constexpr std::size_t kBpeByteCount = 256;
// ids: 0..4 specials, 5..260 bytes, 261+ merges
inline constexpr std::size_t kBpeBaseSize = kBpeSpecialCount + kBpeByteCount;

struct BpeModel {
  std::unordered_map<std::string, TokenId> vocab;
  std::vector<std::string> id_to_token;
  std::vector<std::pair<std::string, std::string>> merges;
  TokenId pad_id = 0;
  TokenId unk_id = 1;
  TokenId bos_id = 2;
  TokenId eos_id = 3;
  TokenId mask_id = 4;
  std::size_t vocab_size_target = 0;
  std::size_t min_frequency = 0;
  // (left_id << 32 | right_id) -> {merge rank, merged id}
  std::unordered_map<std::uint64_t, std::pair<std::size_t, TokenId>> merge_ranks;

  std::size_t size() const { return id_to_token.size(); }
  bool is_special(TokenId id) const {
    return id == pad_id || id == unk_id || id == bos_id || id == eos_id || id == mask_id;
  }
};

// Learns merges until the vocabulary reaches vocab_size or no adjacent pair
// occurs at least min_frequency times. Ties on frequency go to the
// lexicographically smallest (left, right) token-string pair. Throws
// std::invalid_argument on an empty corpus or vocab_size <= base size.
BpeModel train_bpe(const CleanCorpus& corpus, std::size_t vocab_size, std::size_t min_frequency);

// bos + merged tokens + eos, truncated to max_len with eos kept as the final
// id. max_len must be at least 2.
TokenSeq encode(const BpeModel& model, const std::string& text,
                std::size_t max_len = std::numeric_limits<std::size_t>::max());

// Inverse of encode up to truncation; special ids are dropped. Throws
// std::invalid_argument naming any out-of-range id.
std::string decode(const BpeModel& model, const TokenSeq& ids);

// JSON with "vocab", "merges", "specials" (plus the training targets).
// serialize(parse(x)) == x for any x produced by serialize.
std::string serialize_bpe(const BpeModel& model);
BpeModel parse_bpe(const std::string& json);

// Whitespace-run-prefixed chunks whose concatenation is exactly the input.
std::vector<std::string> bpe_pretokenize(const std::string& text);

}  // namespace tiltlab
