#pragma once

#include <cstdint>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

namespace pexplore {

// Subword vocabulary: four specials, all 256 single bytes, then whole-word
// units learned from a corpus. Byte fallback guarantees any text tokenizes.
struct Vocabulary {
  static constexpr int kPad = 0;
  static constexpr int kBos = 1;
  static constexpr int kEos = 2;
  static constexpr int kUnk = 3;
  static constexpr int kNumSpecial = 4;

  std::vector<std::string> units;  // id -> unit string

  int size() const { return static_cast<int>(units.size()); }
  const std::string& unit(int id) const { return units.at(static_cast<std::size_t>(id)); }
  bool is_special(int id) const { return id >= 0 && id < kNumSpecial; }

  // id of a byte unit
  static int byte_id(unsigned char b) { return kNumSpecial + static_cast<int>(b); }

  // -1 when the string is not a byte or word unit (specials never match)
  int find_unit(std::string_view u) const;

  std::size_t max_unit_length() const { return max_unit_len_; }

  // Must be called after mutating `units` directly (e.g. checkpoint load).
  void rebuild_index();

 private:
  std::unordered_map<std::string, int> index_;
  std::size_t max_unit_len_ = 1;
};

// Token ids with word-start flags and a prompt/response boundary.
// word_start[i] is true exactly when token i begins a maximal non-whitespace
// run of the source text; tokens at positions >= prompt_len form the target
// (response) region.
struct TokenSeq {
  std::vector<int> ids;
  std::vector<std::uint8_t> word_start;
  int prompt_len = 0;

  int length() const { return static_cast<int>(ids.size()); }
};

// Builds a vocabulary whose learned units are the most frequent
// whitespace-delimited words of the corpus. vocab_size caps the total unit
// count and must leave room for the specials and the byte table.
// Throws std::invalid_argument on an empty corpus or an undersized cap.
Vocabulary train_tokenizer(const std::vector<std::string>& corpus, int vocab_size);

// Greedy longest-match segmentation within whitespace-delimited words;
// whitespace encodes as byte units. prompt_boundary is a byte offset that
// must fall on a whitespace boundary (or 0 / end of text); tokens whose span
// ends at or before it count toward prompt_len.
TokenSeq tokenize(const Vocabulary& vocab, std::string_view text, std::size_t prompt_boundary = 0);

// Inverse of tokenize up to special tokens, which are skipped.
std::string detokenize(const Vocabulary& vocab, const std::vector<int>& ids);

}  // namespace pexplore
