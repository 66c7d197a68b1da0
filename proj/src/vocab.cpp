#include "pexplore/vocab.hpp"

#include <algorithm>
#include <cctype>
#include <stdexcept>
#include <utility>

namespace pexplore {

namespace {

bool is_ws(unsigned char c) { return std::isspace(c) != 0; }

std::string special_name(int i) {
  static const char* names[] = {"<pad>", "<bos>", "<eos>", "<unk>"};
  return names[i];
}

}  // namespace

int Vocabulary::find_unit(std::string_view u) const {
  auto it = index_.find(std::string(u));
  return it == index_.end() ? -1 : it->second;
}

void Vocabulary::rebuild_index() {
  index_.clear();
  max_unit_len_ = 1;
  for (int id = kNumSpecial; id < size(); ++id) {
    const std::string& u = units[static_cast<std::size_t>(id)];
    index_.emplace(u, id);  // first occurrence wins
    max_unit_len_ = std::max(max_unit_len_, u.size());
  }
}

Vocabulary train_tokenizer(const std::vector<std::string>& corpus, int vocab_size) {
  if (corpus.empty()) throw std::invalid_argument("train_tokenizer: empty corpus");
  const int base = Vocabulary::kNumSpecial + 256;
  if (vocab_size < base)
    throw std::invalid_argument("train_tokenizer: vocab_size must be at least " +
                                std::to_string(base));

  std::unordered_map<std::string, std::uint64_t> counts;
  for (const std::string& text : corpus) {
    std::size_t i = 0;
    while (i < text.size()) {
      if (is_ws(static_cast<unsigned char>(text[i]))) {
        ++i;
        continue;
      }
      std::size_t j = i;
      while (j < text.size() && !is_ws(static_cast<unsigned char>(text[j]))) ++j;
      ++counts[text.substr(i, j - i)];
      i = j;
    }
  }

  std::vector<std::pair<std::string, std::uint64_t>> ranked;
  ranked.reserve(counts.size());
  for (auto& kv : counts) {
    if (kv.first.size() <= 1) continue;  // single bytes already have units
    ranked.emplace_back(kv.first, kv.second);
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });

  Vocabulary vocab;
  vocab.units.reserve(static_cast<std::size_t>(vocab_size));
  for (int i = 0; i < Vocabulary::kNumSpecial; ++i) vocab.units.push_back(special_name(i));
  for (int b = 0; b < 256; ++b) vocab.units.push_back(std::string(1, static_cast<char>(b)));
  const std::size_t budget = static_cast<std::size_t>(vocab_size - base);
  for (std::size_t i = 0; i < ranked.size() && i < budget; ++i)
    vocab.units.push_back(ranked[i].first);
  vocab.rebuild_index();
  return vocab;
}

TokenSeq tokenize(const Vocabulary& vocab, std::string_view text, std::size_t prompt_boundary) {
  if (prompt_boundary > text.size())
    throw std::invalid_argument("tokenize: prompt_boundary past end of text");
  if (prompt_boundary > 0 && prompt_boundary < text.size() &&
      !is_ws(static_cast<unsigned char>(text[prompt_boundary])) &&
      !is_ws(static_cast<unsigned char>(text[prompt_boundary - 1])))
    throw std::invalid_argument("tokenize: prompt_boundary splits a word");

  TokenSeq seq;
  auto emit = [&](int id, bool start, std::size_t end_pos) {
    seq.ids.push_back(id);
    seq.word_start.push_back(start ? 1 : 0);
    if (end_pos <= prompt_boundary) seq.prompt_len = static_cast<int>(seq.ids.size());
  };

  std::size_t i = 0;
  while (i < text.size()) {
    unsigned char c = static_cast<unsigned char>(text[i]);
    if (is_ws(c)) {
      emit(Vocabulary::byte_id(c), false, i + 1);
      ++i;
      continue;
    }
    std::size_t word_end = i;
    while (word_end < text.size() && !is_ws(static_cast<unsigned char>(text[word_end]))) ++word_end;
    bool first = true;
    while (i < word_end) {
      std::size_t cap = std::min(vocab.max_unit_length(), word_end - i);
      std::size_t take = 1;
      int id = Vocabulary::byte_id(static_cast<unsigned char>(text[i]));
      for (std::size_t len = cap; len >= 2; --len) {
        int cand = vocab.find_unit(text.substr(i, len));
        if (cand >= 0) {
          take = len;
          id = cand;
          break;
        }
      }
      emit(id, first, i + take);
      first = false;
      i += take;
    }
  }
  return seq;
}

std::string detokenize(const Vocabulary& vocab, const std::vector<int>& ids) {
  std::string out;
  for (int id : ids) {
    if (id < 0 || id >= vocab.size())
      throw std::out_of_range("detokenize: token id " + std::to_string(id) + " out of range");
    if (vocab.is_special(id)) continue;
    out += vocab.unit(id);
  }
  return out;
}

}  // namespace pexplore
