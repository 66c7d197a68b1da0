#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "pexplore/model.hpp"
#include "pexplore/prompts.hpp"
#include "pexplore/types.hpp"
#include "pexplore/vocab.hpp"

namespace pexplore {

enum class DecoderKind { greedy, sample, dbs };

inline const char* decoder_name(DecoderKind d) {
  switch (d) {
    case DecoderKind::greedy: return "greedy";
    case DecoderKind::sample: return "sample";
    case DecoderKind::dbs: return "dbs";
  }
  return "?";
}

inline DecoderKind parse_decoder(const std::string& s) {
  if (s == "greedy") return DecoderKind::greedy;
  if (s == "sample") return DecoderKind::sample;
  if (s == "dbs") return DecoderKind::dbs;
  throw std::invalid_argument("unknown decoder \"" + s + "\"");
}

// One beam per group with G = number of requested responses is the minimal
// configuration that still exercises the diversity term.
struct DbsConfig {
  int groups = 5;
  int beams_per_group = 1;
  double diversity_penalty = 5.0;
};

struct GenerationConfig {
  DecoderKind decoder = DecoderKind::sample;
  double temperature = 1.0;
  int top_k = 0;      // 0 disables
  double top_p = 1.0; // 1.0 disables
  int max_new_tokens = 64;
  DbsConfig dbs;
  std::uint64_t seed = 0;

  void validate() const {
    if (!(temperature > 0)) throw std::invalid_argument("decoding: temperature must be > 0");
    if (top_k < 0) throw std::invalid_argument("decoding: top_k must be >= 0");
    if (!(top_p > 0) || top_p > 1.0)
      throw std::invalid_argument("decoding: top_p must be in (0, 1]");
    if (max_new_tokens < 1) throw std::invalid_argument("decoding: max_new_tokens must be >= 1");
    if (dbs.groups < 1 || dbs.beams_per_group < 1)
      throw std::invalid_argument("decoding: dbs groups and beams_per_group must be >= 1");
    if (dbs.diversity_penalty < 0)
      throw std::invalid_argument("decoding: dbs diversity_penalty must be >= 0");
  }
};

// ------------------------------ token selection -----------------------------

inline int greedy_index(const Vec<double>& logits) {
  int best = 0;
  for (int v = 1; v < logits.size(); ++v)
    if (logits(v) > logits(best)) best = v;
  return best;
}

// Temperature + top-k + top-p filtering. Top-k keeps the k most probable
// tokens (ties broken toward lower ids), then top-p keeps the smallest
// probability-sorted prefix whose mass reaches p, including the token that
// crosses the threshold; the surviving mass is renormalized. Returns the
// full-vocabulary distribution with removed tokens at zero.
inline Vec<double> filtered_probs(const Vec<double>& logits, double temperature, int top_k,
                                  double top_p) {
  const int vsize = static_cast<int>(logits.size());
  Vec<double> z = logits / temperature;
  const double zmax = z.maxCoeff();
  Vec<double> p = (z.array() - zmax).exp().matrix();
  p /= p.sum();

  std::vector<int> order(static_cast<std::size_t>(vsize));
  for (int v = 0; v < vsize; ++v) order[static_cast<std::size_t>(v)] = v;
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (p(a) != p(b)) return p(a) > p(b);
    return a < b;
  });

  std::size_t keep = order.size();
  if (top_k > 0) keep = std::min<std::size_t>(keep, static_cast<std::size_t>(top_k));
  if (top_p < 1.0) {
    double cum = 0;
    for (std::size_t i = 0; i < keep; ++i) {
      cum += p(order[i]);
      if (cum >= top_p) {
        keep = i + 1;
        break;
      }
    }
  }

  double mass = 0;
  for (std::size_t i = 0; i < keep; ++i) mass += p(order[i]);
  Vec<double> out = Vec<double>::Zero(vsize);
  for (std::size_t i = 0; i < keep; ++i) out(order[i]) = p(order[i]) / mass;
  return out;
}

// One uniform draw walks the filtered distribution in (probability desc,
// token asc) order.
inline int sample_index(const Vec<double>& logits, double temperature, int top_k, double top_p,
                        Rng& rng) {
  const Vec<double> p = filtered_probs(logits, temperature, top_k, top_p);
  const int vsize = static_cast<int>(p.size());
  std::vector<int> order;
  order.reserve(static_cast<std::size_t>(vsize));
  for (int v = 0; v < vsize; ++v)
    if (p(v) > 0) order.push_back(v);
  std::sort(order.begin(), order.end(), [&](int a, int b) {
    if (p(a) != p(b)) return p(a) > p(b);
    return a < b;
  });
  const double u = uniform01(rng);
  double acc = 0;
  for (int v : order) {
    acc += p(v);
    if (u < acc) return v;
  }
  return order.back();
}

// ------------------------------ sequence scorers ----------------------------

// A decodable sequence state: logits() scores the next token, advance()
// appends one. Decoders work against this so that search code is independent
// of the model implementation.
class SequenceScorer {
 public:
  virtual ~SequenceScorer() = default;
  virtual int vocab_size() const = 0;
  virtual const Vec<double>& logits() const = 0;
  virtual void advance(int token) = 0;
  virtual std::unique_ptr<SequenceScorer> clone() const = 0;
  // How many more tokens advance() can accept (context budget).
  virtual int capacity_left() const { return std::numeric_limits<int>::max(); }
};

template <typename T>
class ModelScorer final : public SequenceScorer {
 public:
  ModelScorer(const Model<T>& model, const std::vector<int>& prefix)
      : model_(&model), cache_(model.arch) {
    if (prefix.empty()) throw std::invalid_argument("scorer: prefix must be nonempty");
    for (int id : prefix) advance(id);
  }

  int vocab_size() const override { return model_->arch.vocab_size; }
  const Vec<double>& logits() const override { return logits_; }

  void advance(int token) override {
    Vec<T> z = decode_step(*model_, cache_, token);
    if constexpr (std::is_same_v<T, double>) {
      logits_ = z;
    } else {
      logits_ = z.template cast<double>();
    }
  }

  std::unique_ptr<SequenceScorer> clone() const override {
    return std::make_unique<ModelScorer>(*this);
  }

  int capacity_left() const override { return model_->arch.context_len - cache_.length(); }

 private:
  const Model<T>* model_;
  KVCache<T> cache_;
  Vec<double> logits_;
};

// Context-free scorer with constant logits; handy for exercising search
// behavior (ties, penalties) in isolation.
class FixedScorer final : public SequenceScorer {
 public:
  explicit FixedScorer(Vec<double> logits) : logits_(std::move(logits)) {
    if (logits_.size() < 1) throw std::invalid_argument("FixedScorer: empty logits");
  }
  int vocab_size() const override { return static_cast<int>(logits_.size()); }
  const Vec<double>& logits() const override { return logits_; }
  void advance(int) override {}
  std::unique_ptr<SequenceScorer> clone() const override {
    return std::make_unique<FixedScorer>(*this);
  }

 private:
  Vec<double> logits_;
};

// --------------------------------- decoders ---------------------------------

// Greedy / sampled continuation. Returns generated tokens; a terminating EOS
// is included when emitted within the budget.
inline std::vector<int> generate_tokens(SequenceScorer& scorer, const GenerationConfig& config,
                                        Rng* rng) {
  config.validate();
  if (config.decoder == DecoderKind::sample && rng == nullptr)
    throw std::invalid_argument("generate_tokens: sampling requires an rng");
  std::vector<int> out;
  for (int step = 0; step < config.max_new_tokens; ++step) {
    const int tok = config.decoder == DecoderKind::greedy
                        ? greedy_index(scorer.logits())
                        : sample_index(scorer.logits(), config.temperature, config.top_k,
                                       config.top_p, *rng);
    out.push_back(tok);
    if (tok == Vocabulary::kEos) break;
    if (scorer.capacity_left() == 0) break;  // context window exhausted
    scorer.advance(tok);
  }
  return out;
}

struct ScoredSequence {
  std::vector<int> tokens;
  double score = 0;  // cumulative log-probability, diversity-adjusted under dbs
};

namespace detail {

struct Beam {
  std::vector<int> tokens;
  double score = 0;
  bool finished = false;
  std::unique_ptr<SequenceScorer> scorer;  // null once finished
};

struct Candidate {
  double score;
  int beam;
  int token;  // -1 carries a finished beam forward unchanged
};

inline bool candidate_before(const Candidate& a, const Candidate& b) {
  if (a.score != b.score) return a.score > b.score;
  if (a.beam != b.beam) return a.beam < b.beam;
  return a.token < b.token;
}

// One beam-search step for a group of beams. `penalty` gives, per token, the
// number of times earlier groups already chose it at this timestep; each
// occurrence costs `lambda`. Returns the tokens this group chose at this
// timestep (for penalizing later groups).
inline std::vector<int> group_step(std::vector<Beam>& beams, int beam_width,
                                   const std::unordered_map<int, int>& penalty, double lambda) {
  bool all_finished = true;
  for (const auto& b : beams) all_finished &= b.finished;
  if (all_finished) return {};

  std::vector<Candidate> cands;
  for (std::size_t bi = 0; bi < beams.size(); ++bi) {
    Beam& b = beams[bi];
    if (b.finished) {
      cands.push_back({b.score, static_cast<int>(bi), -1});
      continue;
    }
    Vec<double> lp = log_softmax(b.scorer->logits());
    for (int v = 0; v < lp.size(); ++v) {
      double s = b.score + lp(v);
      if (lambda > 0) {
        auto it = penalty.find(v);
        if (it != penalty.end()) s -= lambda * it->second;
      }
      cands.push_back({s, static_cast<int>(bi), v});
    }
  }
  const std::size_t want = std::min<std::size_t>(static_cast<std::size_t>(beam_width), cands.size());
  std::partial_sort(cands.begin(), cands.begin() + static_cast<std::ptrdiff_t>(want), cands.end(),
                    candidate_before);
  cands.resize(want);

  std::vector<Beam> next;
  std::vector<int> chosen;
  next.reserve(want);
  for (const Candidate& c : cands) {
    Beam& parent = beams[static_cast<std::size_t>(c.beam)];
    Beam nb;
    nb.tokens = parent.tokens;
    nb.score = c.score;
    if (c.token < 0) {
      nb.finished = true;
    } else {
      nb.tokens.push_back(c.token);
      chosen.push_back(c.token);
      if (c.token == Vocabulary::kEos) {
        nb.finished = true;
      } else {
        nb.scorer = parent.scorer->clone();
        nb.scorer->advance(c.token);
      }
    }
    next.push_back(std::move(nb));
  }
  beams = std::move(next);
  return chosen;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Diverse beam search (Vijayakumar et al., 2016): `groups` beam searches run
// in lockstep; at each timestep, group g's step scores subtract
// diversity_penalty for every time a token was already chosen at that
// timestep by groups 0..g-1. With one group (or zero penalty) this is exactly
// standard beam search. Returns the best sequence of each group, in group
// order.
inline std::vector<ScoredSequence> diverse_beam_search(const SequenceScorer& root,
                                                       const GenerationConfig& config) {
  config.validate();
  const int G = config.dbs.groups;
  const int B = config.dbs.beams_per_group;
  if (static_cast<long long>(G) * B > root.vocab_size())
    throw std::invalid_argument(
        "diverse_beam_search: groups * beams_per_group exceeds the vocabulary");

  // Each group starts from the shared prompt state as a single root beam;
  // the first step then fans it out to `B` beams.
  std::vector<std::vector<detail::Beam>> groups(static_cast<std::size_t>(G));
  for (auto& g : groups) {
    detail::Beam b;
    b.scorer = root.clone();
    g.push_back(std::move(b));
  }

  for (int step = 0; step < config.max_new_tokens; ++step) {
    // All unfinished beams share a length; stop when the context is full.
    bool capacity = true;
    for (const auto& beams : groups)
      for (const auto& b : beams)
        if (!b.finished && b.scorer->capacity_left() == 0) capacity = false;
    if (!capacity) break;
    bool any_active = false;
    std::unordered_map<int, int> penalty;
    for (auto& beams : groups) {
      const std::vector<int> chosen =
          detail::group_step(beams, B, penalty, config.dbs.diversity_penalty);
      for (int tok : chosen) penalty[tok] += 1;
      for (const auto& b : beams) any_active |= !b.finished;
    }
    if (!any_active) break;
  }

  std::vector<ScoredSequence> out;
  out.reserve(static_cast<std::size_t>(G));
  for (const auto& beams : groups) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < beams.size(); ++i)
      if (beams[i].score > beams[best].score) best = i;
    out.push_back({beams[best].tokens, beams[best].score});
  }
  return out;
}

// Standard beam search = diverse beam search with a single group.
inline ScoredSequence beam_search(const SequenceScorer& root, int beam_width, int max_new_tokens) {
  GenerationConfig cfg;
  cfg.decoder = DecoderKind::dbs;
  cfg.max_new_tokens = max_new_tokens;
  cfg.dbs.groups = 1;
  cfg.dbs.beams_per_group = beam_width;
  cfg.dbs.diversity_penalty = 0;
  return diverse_beam_search(root, cfg)[0];
}

// ------------------------------- text-level API -----------------------------

template <typename T>
std::vector<int> prompt_token_ids(const Model<T>& model, const std::string& prompt_text,
                                  int reserve = 1) {
  TokenSeq seq = tokenize(model.vocab, prompt_text);
  std::vector<int> ids;
  ids.reserve(seq.ids.size() + 1);
  ids.push_back(Vocabulary::kBos);
  ids.insert(ids.end(), seq.ids.begin(), seq.ids.end());
  // Oldest prompt tokens (after BOS) are dropped to leave generation room.
  const int budget = std::max(1, model.arch.context_len - std::max(1, reserve));
  if (static_cast<int>(ids.size()) > budget) {
    const int drop = static_cast<int>(ids.size()) - budget;
    ids.erase(ids.begin() + 1, ids.begin() + 1 + drop);
  }
  return ids;
}

// Decodes one continuation of `prompt_text`. For dbs the best-scoring group
// wins (earlier group on ties).
template <typename T>
std::string decode_text(const Model<T>& model, const std::string& prompt_text,
                        const GenerationConfig& config) {
  config.validate();
  ModelScorer<T> scorer(model, prompt_token_ids(model, prompt_text, config.max_new_tokens));
  std::vector<int> tokens;
  if (config.decoder == DecoderKind::dbs) {
    std::vector<ScoredSequence> seqs = diverse_beam_search(scorer, config);
    std::size_t best = 0;
    for (std::size_t i = 1; i < seqs.size(); ++i)
      if (seqs[i].score > seqs[best].score) best = i;
    tokens = std::move(seqs[best].tokens);
  } else {
    Rng rng = derive_rng(config.seed, 0x5a);
    tokens = generate_tokens(scorer, config, &rng);
  }
  return detokenize(model.vocab, tokens);
}

// All dbs group outputs for one prompt, in group order.
template <typename T>
std::vector<std::string> decode_text_groups(const Model<T>& model, const std::string& prompt_text,
                                            const GenerationConfig& config) {
  config.validate();
  if (config.decoder != DecoderKind::dbs)
    throw std::invalid_argument("decode_text_groups: decoder must be dbs");
  ModelScorer<T> scorer(model, prompt_token_ids(model, prompt_text, config.max_new_tokens));
  std::vector<std::string> out;
  for (const auto& s : diverse_beam_search(scorer, config))
    out.push_back(detokenize(model.vocab, s.tokens));
  return out;
}

// --------------------------- possibility generation -------------------------

struct PossibilityResponse {
  int k = 0;
  std::string response;
};

struct MultiGenConfig {
  int count = 5;        // L, number of responses
  int m = 9;            // possibility upper bound
  bool fixed_k = false; // use k = 1..L instead of sampling without replacement
  GenerationConfig base;

  void validate() const {
    base.validate();
    if (count < 1 || count > m)
      throw std::invalid_argument("generate_multi: need 1 <= count <= m");
  }
};

inline std::vector<int> draw_distinct_k(int count, int m, Rng& rng) {
  if (count < 1 || count > m)
    throw std::invalid_argument("draw_distinct_k: need 1 <= count <= m");
  std::vector<int> pool(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) pool[static_cast<std::size_t>(i)] = i + 1;
  std::vector<int> out;
  out.reserve(static_cast<std::size_t>(count));
  for (int i = 0; i < count; ++i) {
    const std::size_t j =
        static_cast<std::size_t>(i) + uniform_below(rng, static_cast<std::uint64_t>(m - i));
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
    out.push_back(pool[static_cast<std::size_t>(i)]);
  }
  return out;
}

// Draws `count` distinct possibility numbers from [1, m] (or takes 1..L when
// fixed_k is set) and decodes one response per number using the
// possibility-conditioned prompt. Per-number RNG streams are derived from
// (seed, k), so decoding for a given number depends only on (prompt, number,
// config) — not on which other numbers were drawn — and greedy output is a
// pure function of (prompt, number).
template <typename T>
std::vector<PossibilityResponse> generate_multi(const Model<T>& model,
                                                const std::vector<std::string>& turns,
                                                const MultiGenConfig& config) {
  config.validate();
  std::vector<int> ks;
  if (config.fixed_k) {
    for (int k = 1; k <= config.count; ++k) ks.push_back(k);
  } else {
    Rng draw_rng = derive_rng(config.base.seed, 0xd4a3);
    ks = draw_distinct_k(config.count, config.m, draw_rng);
  }
  PromptContext ctx;
  ctx.turns = turns;
  std::vector<PossibilityResponse> out;
  out.reserve(ks.size());
  for (int k : ks) {
    const std::string prompt_text = render_prompt(PromptKind::peft, ctx, k);
    GenerationConfig per_k = config.base;
    per_k.seed =
        splitmix64(config.base.seed) ^ splitmix64(0xbeef0000ULL + static_cast<std::uint64_t>(k));
    out.push_back({k, decode_text(model, prompt_text, per_k)});
  }
  return out;
}

template <typename T>
std::vector<PossibilityResponse> generate_multi(const Model<T>& model,
                                                const std::vector<std::string>& turns, int count,
                                                int m, const GenerationConfig& base) {
  MultiGenConfig cfg;
  cfg.count = count;
  cfg.m = m;
  cfg.base = base;
  return generate_multi(model, turns, cfg);
}

}  // namespace pexplore
