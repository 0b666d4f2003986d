#include "tiltlab/bpe.hpp"

#include <algorithm>
#include <array>
#include <map>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "tiltlab/errors.hpp"

namespace tiltlab {

namespace {

bool ascii_space(char c) {
  return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\v' || c == '\f';
}

std::string utf8_of(std::uint32_t cp) {
  std::string out;
  if (cp < 0x80) {
    out += static_cast<char>(cp);
  } else if (cp < 0x800) {
    out += static_cast<char>(0xC0 | (cp >> 6));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  } else {
    out += static_cast<char>(0xE0 | (cp >> 12));
    out += static_cast<char>(0x80 | ((cp >> 6) & 0x3F));
    out += static_cast<char>(0x80 | (cp & 0x3F));
  }
  return out;
}

// Byte value -> printable code point. Printable latin persists as itself;
// everything else moves to 256+.
const std::array<std::uint32_t, 256>& byte_to_cp() {
  static const auto table = [] {
    std::array<std::uint32_t, 256> t{};
    auto printable = [](int b) {
      return (b >= '!' && b <= '~') || (b >= 0xA1 && b <= 0xAC) || (b >= 0xAE && b <= 0xFF);
    };
    std::uint32_t next = 256;
    for (int b = 0; b < 256; ++b) {
      t[static_cast<std::size_t>(b)] = printable(b) ? static_cast<std::uint32_t>(b) : next++;
    }
    return t;
  }();
  return table;
}

const std::unordered_map<std::uint32_t, unsigned char>& cp_to_byte() {
  static const auto table = [] {
    std::unordered_map<std::uint32_t, unsigned char> t;
    const auto& fwd = byte_to_cp();
    for (int b = 0; b < 256; ++b) t[fwd[static_cast<std::size_t>(b)]] = static_cast<unsigned char>(b);
    return t;
  }();
  return table;
}

const std::array<std::string, 256>& byte_to_str() {
  static const auto table = [] {
    std::array<std::string, 256> t;
    const auto& fwd = byte_to_cp();
    for (int b = 0; b < 256; ++b) t[static_cast<std::size_t>(b)] = utf8_of(fwd[static_cast<std::size_t>(b)]);
    return t;
  }();
  return table;
}

const std::array<std::string, kBpeSpecialCount>& special_names() {
  static const std::array<std::string, kBpeSpecialCount> names = {"pad", "unk", "bos", "eos",
                                                                  "mask"};
  return names;
}

std::string special_token(const std::string& name) { return std::string(1, '\x01') + name; }

std::uint64_t pair_key(TokenId l, TokenId r) {
  return (static_cast<std::uint64_t>(static_cast<std::uint32_t>(l)) << 32) |
         static_cast<std::uint32_t>(r);
}

BpeModel base_model(std::size_t vocab_size_target, std::size_t min_frequency) {
  BpeModel m;
  m.vocab_size_target = vocab_size_target;
  m.min_frequency = min_frequency;
  for (const auto& name : special_names()) {
    TokenId id = static_cast<TokenId>(m.id_to_token.size());
    m.id_to_token.push_back(special_token(name));
    m.vocab[m.id_to_token.back()] = id;
  }
  for (int b = 0; b < 256; ++b) {
    TokenId id = static_cast<TokenId>(m.id_to_token.size());
    m.id_to_token.push_back(byte_to_str()[static_cast<std::size_t>(b)]);
    m.vocab[m.id_to_token.back()] = id;
  }
  return m;
}

std::vector<TokenId> chunk_to_byte_ids(const std::string& chunk) {
  std::vector<TokenId> ids;
  ids.reserve(chunk.size());
  for (unsigned char c : chunk) {
    ids.push_back(static_cast<TokenId>(kBpeSpecialCount + c));
  }
  return ids;
}

}  // namespace

std::vector<std::string> bpe_pretokenize(const std::string& text) {
  std::vector<std::string> chunks;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    std::size_t start = i;
    while (i < n && ascii_space(text[i])) ++i;
    while (i < n && !ascii_space(text[i])) ++i;
    chunks.push_back(text.substr(start, i - start));
  }
  return chunks;
}

BpeModel train_bpe(const CleanCorpus& corpus, std::size_t vocab_size, std::size_t min_frequency) {
  if (corpus.utterances.empty()) {
    throw std::invalid_argument("train_bpe: corpus is empty");
  }
  if (vocab_size <= kBpeBaseSize) {
    throw std::invalid_argument("train_bpe: vocab_size " + std::to_string(vocab_size) +
                                " must exceed base size " + std::to_string(kBpeBaseSize));
  }
  BpeModel model = base_model(vocab_size, min_frequency);

  // chunk dictionary in first-appearance order
  struct Word {
    std::vector<TokenId> syms;
    std::size_t count = 0;
  };
  std::vector<Word> words;
  std::unordered_map<std::string, std::size_t> word_index;
  for (const auto& utt : corpus.utterances) {
    for (auto& chunk : bpe_pretokenize(utt)) {
      auto it = word_index.find(chunk);
      if (it == word_index.end()) {
        word_index.emplace(chunk, words.size());
        words.push_back({chunk_to_byte_ids(chunk), 1});
      } else {
        ++words[it->second].count;
      }
    }
  }

  std::map<std::pair<TokenId, TokenId>, long long> pair_counts;
  std::map<std::pair<TokenId, TokenId>, std::set<std::size_t>> pair_words;
  for (std::size_t w = 0; w < words.size(); ++w) {
    const auto& word = words[w];
    for (std::size_t i = 0; i + 1 < word.syms.size(); ++i) {
      auto p = std::make_pair(word.syms[i], word.syms[i + 1]);
      pair_counts[p] += static_cast<long long>(word.count);
      pair_words[p].insert(w);
    }
  }

  while (model.size() < vocab_size) {
    // argmax by count, ties to the lexicographically smallest string pair
    long long best_count = 0;
    std::pair<TokenId, TokenId> best{};
    for (const auto& [p, count] : pair_counts) {
      if (count < static_cast<long long>(min_frequency)) continue;
      if (count > best_count) {
        best_count = count;
        best = p;
      } else if (count == best_count && best_count > 0) {
        const auto& bl = model.id_to_token[static_cast<std::size_t>(best.first)];
        const auto& br = model.id_to_token[static_cast<std::size_t>(best.second)];
        const auto& cl = model.id_to_token[static_cast<std::size_t>(p.first)];
        const auto& cr = model.id_to_token[static_cast<std::size_t>(p.second)];
        if (std::tie(cl, cr) < std::tie(bl, br)) best = p;
      }
    }
    if (best_count == 0) break;

    const std::string left = model.id_to_token[static_cast<std::size_t>(best.first)];
    const std::string right = model.id_to_token[static_cast<std::size_t>(best.second)];
    const std::string merged = left + right;
    const TokenId merged_id = static_cast<TokenId>(model.size());
    model.id_to_token.push_back(merged);
    model.vocab[merged] = merged_id;
    model.merge_ranks[pair_key(best.first, best.second)] = {model.merges.size(), merged_id};
    model.merges.emplace_back(left, right);

    auto affected = pair_words[best];  // copy; updates below mutate the index
    for (std::size_t w : affected) {
      Word& word = words[w];
      auto remove_word_pairs = [&](const std::vector<TokenId>& syms) {
        for (std::size_t i = 0; i + 1 < syms.size(); ++i) {
          auto p = std::make_pair(syms[i], syms[i + 1]);
          auto it = pair_counts.find(p);
          if (it != pair_counts.end()) {
            it->second -= static_cast<long long>(word.count);
            if (it->second <= 0) pair_counts.erase(it);
          }
          auto wit = pair_words.find(p);
          if (wit != pair_words.end()) {
            wit->second.erase(w);
            if (wit->second.empty()) pair_words.erase(wit);
          }
        }
      };
      remove_word_pairs(word.syms);
      std::vector<TokenId> next;
      next.reserve(word.syms.size());
      for (std::size_t i = 0; i < word.syms.size();) {
        if (i + 1 < word.syms.size() && word.syms[i] == best.first &&
            word.syms[i + 1] == best.second) {
          next.push_back(merged_id);
          i += 2;
        } else {
          next.push_back(word.syms[i]);
          ++i;
        }
      }
      word.syms = std::move(next);
      for (std::size_t i = 0; i + 1 < word.syms.size(); ++i) {
        auto p = std::make_pair(word.syms[i], word.syms[i + 1]);
        pair_counts[p] += static_cast<long long>(word.count);
        pair_words[p].insert(w);
      }
    }
  }
  return model;
}

TokenSeq encode(const BpeModel& model, const std::string& text, std::size_t max_len) {
  if (max_len < 2) {
    throw std::invalid_argument("encode: max_len " + std::to_string(max_len) +
                                " cannot hold bos and eos");
  }
  TokenSeq out;
  out.push_back(model.bos_id);
  for (const auto& chunk : bpe_pretokenize(text)) {
    std::vector<TokenId> word = chunk_to_byte_ids(chunk);
    while (word.size() >= 2) {
      std::size_t best_rank = std::numeric_limits<std::size_t>::max();
      std::uint64_t best_key = 0;
      for (std::size_t i = 0; i + 1 < word.size(); ++i) {
        auto it = model.merge_ranks.find(pair_key(word[i], word[i + 1]));
        if (it != model.merge_ranks.end() && it->second.first < best_rank) {
          best_rank = it->second.first;
          best_key = pair_key(word[i], word[i + 1]);
        }
      }
      if (best_rank == std::numeric_limits<std::size_t>::max()) break;
      const auto& entry = model.merge_ranks.at(best_key);
      const TokenId l = static_cast<TokenId>(best_key >> 32);
      const TokenId r = static_cast<TokenId>(best_key & 0xFFFFFFFF);
      std::vector<TokenId> next;
      next.reserve(word.size());
      for (std::size_t i = 0; i < word.size();) {
        if (i + 1 < word.size() && word[i] == l && word[i + 1] == r) {
          next.push_back(entry.second);
          i += 2;
        } else {
          next.push_back(word[i]);
          ++i;
        }
      }
      word = std::move(next);
    }
    out.insert(out.end(), word.begin(), word.end());
  }
  out.push_back(model.eos_id);
  if (out.size() > max_len) {
    out.resize(max_len);
    out.back() = model.eos_id;
  }
  return out;
}

std::string decode(const BpeModel& model, const TokenSeq& ids) {
  std::string mapped;
  for (TokenId id : ids) {
    if (id < 0 || static_cast<std::size_t>(id) >= model.size()) {
      throw std::invalid_argument("decode: id " + std::to_string(id) + " out of range (vocab " +
                                  std::to_string(model.size()) + ")");
    }
    if (model.is_special(id)) continue;
    mapped += model.id_to_token[static_cast<std::size_t>(id)];
  }
  // map printable code points back to raw bytes
  std::string out;
  out.reserve(mapped.size());
  const auto& inverse = cp_to_byte();
  std::size_t i = 0;
  while (i < mapped.size()) {
    unsigned char c = static_cast<unsigned char>(mapped[i]);
    std::uint32_t cp;
    std::size_t len;
    if (c < 0x80) {
      cp = c;
      len = 1;
    } else if ((c & 0xE0) == 0xC0) {
      cp = c & 0x1F;
      len = 2;
    } else {
      cp = c & 0x0F;
      len = 3;
    }
    for (std::size_t k = 1; k < len; ++k) {
      cp = (cp << 6) | (static_cast<unsigned char>(mapped[i + k]) & 0x3F);
    }
    auto it = inverse.find(cp);
    if (it == inverse.end()) {
      throw std::invalid_argument("decode: token text contains unmapped code point " +
                                  std::to_string(cp));
    }
    out += static_cast<char>(it->second);
    i += len;
  }
  return out;
}

std::string serialize_bpe(const BpeModel& model) {
  nlohmann::json j;
  nlohmann::json vocab = nlohmann::json::object();
  for (std::size_t id = 0; id < model.id_to_token.size(); ++id) {
    vocab[model.id_to_token[id]] = id;
  }
  j["vocab"] = std::move(vocab);
  nlohmann::json merges = nlohmann::json::array();
  for (const auto& [l, r] : model.merges) merges.push_back({l, r});
  j["merges"] = std::move(merges);
  j["specials"] = {{"pad", model.pad_id},
                   {"unk", model.unk_id},
                   {"bos", model.bos_id},
                   {"eos", model.eos_id},
                   {"mask", model.mask_id}};
  j["vocab_size_target"] = model.vocab_size_target;
  j["min_frequency"] = model.min_frequency;
  return j.dump(2) + "\n";
}

BpeModel parse_bpe(const std::string& json) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(json);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad tokenizer JSON: ") + e.what());
  }
  BpeModel model;
  try {
    model.vocab_size_target = j.value("vocab_size_target", std::size_t{0});
    model.min_frequency = j.value("min_frequency", std::size_t{0});
    const auto& vocab = j.at("vocab");
    model.id_to_token.assign(vocab.size(), "");
    for (auto it = vocab.begin(); it != vocab.end(); ++it) {
      auto id = it.value().get<std::size_t>();
      if (id >= model.id_to_token.size() || !model.id_to_token[id].empty()) {
        throw ParseError("tokenizer vocab ids are not dense");
      }
      model.id_to_token[id] = it.key();
      model.vocab[it.key()] = static_cast<TokenId>(id);
    }
    const auto& sp = j.at("specials");
    model.pad_id = sp.at("pad").get<TokenId>();
    model.unk_id = sp.at("unk").get<TokenId>();
    model.bos_id = sp.at("bos").get<TokenId>();
    model.eos_id = sp.at("eos").get<TokenId>();
    model.mask_id = sp.at("mask").get<TokenId>();
    for (const auto& m : j.at("merges")) {
      std::string l = m.at(0).get<std::string>();
      std::string r = m.at(1).get<std::string>();
      auto li = model.vocab.find(l);
      auto ri = model.vocab.find(r);
      auto mi = model.vocab.find(l + r);
      if (li == model.vocab.end() || ri == model.vocab.end() || mi == model.vocab.end()) {
        throw ParseError("merge (" + l + ", " + r + ") does not resolve in vocab");
      }
      model.merge_ranks[pair_key(li->second, ri->second)] = {model.merges.size(), mi->second};
      model.merges.emplace_back(std::move(l), std::move(r));
    }
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("bad tokenizer JSON: ") + e.what());
  }
  std::set<TokenId> special_set = {model.pad_id, model.unk_id, model.bos_id, model.eos_id,
                                   model.mask_id};
  if (special_set.size() != kBpeSpecialCount) {
    throw ParseError("tokenizer specials are not distinct");
  }
  return model;
}

}  // namespace tiltlab
