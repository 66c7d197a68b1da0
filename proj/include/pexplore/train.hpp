#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "pexplore/dataset.hpp"
#include "pexplore/model.hpp"
#include "pexplore/prompts.hpp"
#include "pexplore/types.hpp"
#include "pexplore/vocab.hpp"

namespace pexplore {

enum class TrainMode { otoft, otmft, peft };

inline const char* train_mode_name(TrainMode m) {
  switch (m) {
    case TrainMode::otoft: return "otoft";
    case TrainMode::otmft: return "otmft";
    case TrainMode::peft: return "peft";
  }
  return "?";
}

inline TrainMode parse_train_mode(const std::string& s) {
  if (s == "otoft") return TrainMode::otoft;
  if (s == "otmft") return TrainMode::otmft;
  if (s == "peft") return TrainMode::peft;
  throw std::invalid_argument("unknown training mode \"" + s + "\"");
}

struct LossConfig {
  double alpha = 0.5;       // unlikelihood weight, >= 0
  double prob_floor = 1e-6; // clamp for log(1 - p); in (0, 1e-3]
  TrainMode mode = TrainMode::peft;

  void validate() const {
    if (alpha < 0) throw std::invalid_argument("loss: alpha must be >= 0");
    if (!(prob_floor > 0) || prob_floor > 1e-3)
      throw std::invalid_argument("loss: prob_floor must be in (0, 1e-3]");
  }
};

struct LossReport {
  double mle = 0;
  double ul = 0;
  double combined = 0;
  int positive_tokens = 0;
  int negative_tokens = 0;  // tokens with beta = 1
};

// One rendered prompt+response sequence ready for the model. The response
// region is [tokens.prompt_len, length); beta holds the per-token
// unlikelihood weights for negatives (word starts only).
struct TrainingUnit {
  TokenSeq tokens;
  bool negative = false;
  std::vector<std::uint8_t> beta;  // aligned with tokens.ids; meaningful for negatives
};

// ------------------------------ masks and units -----------------------------

// Weight 1 exactly on response-region word starts, 0 elsewhere (prompt
// region included at weight 0).
inline std::vector<std::uint8_t> beta_mask(const TokenSeq& tokens) {
  if (tokens.prompt_len >= tokens.length())
    throw std::invalid_argument("beta_mask: response region is empty");
  std::vector<std::uint8_t> beta(static_cast<std::size_t>(tokens.length()), 0);
  for (int t = tokens.prompt_len; t < tokens.length(); ++t)
    beta[static_cast<std::size_t>(t)] = tokens.word_start[static_cast<std::size_t>(t)];
  return beta;
}

// Tokenizes rendered prompt + response with BOS/EOS framing.
inline TokenSeq tokenize_unit(const Vocabulary& vocab, const std::string& prompt_text,
                              const std::string& response) {
  TokenSeq body = tokenize(vocab, prompt_text + response, prompt_text.size());
  TokenSeq seq;
  seq.ids.reserve(body.ids.size() + 2);
  seq.word_start.reserve(body.ids.size() + 2);
  seq.ids.push_back(Vocabulary::kBos);
  seq.word_start.push_back(0);
  seq.ids.insert(seq.ids.end(), body.ids.begin(), body.ids.end());
  seq.word_start.insert(seq.word_start.end(), body.word_start.begin(), body.word_start.end());
  seq.ids.push_back(Vocabulary::kEos);
  seq.word_start.push_back(0);
  seq.prompt_len = body.prompt_len + 1;
  return seq;
}

inline TrainingUnit make_training_unit(const Vocabulary& vocab, const std::string& prompt_text,
                                       const std::string& response, bool negative) {
  TrainingUnit unit;
  unit.tokens = tokenize_unit(vocab, prompt_text, response);
  unit.negative = negative;
  unit.beta = beta_mask(unit.tokens);
  return unit;
}

// Oldest prompt tokens are dropped (after BOS) when a sequence exceeds the
// context window; the response region is always kept whole.
inline bool truncate_unit(TrainingUnit& unit, int context_len) {
  const int len = unit.tokens.length();
  if (len <= context_len) return false;
  const int resp = len - unit.tokens.prompt_len;
  const int keep_prompt = context_len - resp - 1;  // minus BOS
  if (keep_prompt < 1)
    throw std::runtime_error("truncate_unit: response alone exceeds the context window");
  const int drop = unit.tokens.prompt_len - 1 - keep_prompt;
  unit.tokens.ids.erase(unit.tokens.ids.begin() + 1, unit.tokens.ids.begin() + 1 + drop);
  unit.tokens.word_start.erase(unit.tokens.word_start.begin() + 1,
                               unit.tokens.word_start.begin() + 1 + drop);
  unit.tokens.prompt_len -= drop;
  unit.beta = beta_mask(unit.tokens);
  return true;
}

// --------------------------------- losses -----------------------------------

// Row t of `logits` scores the token at position t+1, matching forward().
template <typename T>
struct LossGrad {
  double value = 0;
  Mat<T> dlogits;  // same shape as logits
  int tokens = 0;
};

template <typename T>
LossGrad<T> mle_loss(const Mat<T>& logits, const TrainingUnit& unit) {
  if (unit.negative) throw std::invalid_argument("mle_loss: unit must be positive");
  const int len = unit.tokens.length();
  if (logits.rows() != len) throw std::invalid_argument("mle_loss: logits/unit length mismatch");
  LossGrad<T> out;
  out.dlogits = Mat<T>::Zero(logits.rows(), logits.cols());
  for (int q = unit.tokens.prompt_len; q < len; ++q) {
    const int row = q - 1;
    const int target = unit.tokens.ids[static_cast<std::size_t>(q)];
    Vec<T> z = logits.row(row).transpose();
    Vec<T> lsm = log_softmax(z);
    out.value -= static_cast<double>(lsm(target));
    Vec<T> p = lsm.array().exp().matrix();
    p(target) -= T(1);
    out.dlogits.row(row) = p.transpose();
    ++out.tokens;
  }
  return out;
}

template <typename T>
LossGrad<T> ul_loss(const Mat<T>& logits, const TrainingUnit& unit, double prob_floor) {
  if (!unit.negative) throw std::invalid_argument("ul_loss: unit must be negative");
  const int len = unit.tokens.length();
  if (logits.rows() != len) throw std::invalid_argument("ul_loss: logits/unit length mismatch");
  LossGrad<T> out;
  out.dlogits = Mat<T>::Zero(logits.rows(), logits.cols());
  for (int q = unit.tokens.prompt_len; q < len; ++q) {
    if (!unit.beta[static_cast<std::size_t>(q)]) continue;
    const int row = q - 1;
    const int target = unit.tokens.ids[static_cast<std::size_t>(q)];
    Vec<T> z = logits.row(row).transpose();
    Vec<T> lsm = log_softmax(z);
    Vec<T> p = lsm.array().exp().matrix();
    const double py = static_cast<double>(p(target));
    const double one_minus = 1.0 - py;
    if (one_minus < prob_floor) {
      // Clamp active: finite loss, zero gradient (subgradient choice).
      out.value -= std::log(prob_floor);
    } else {
      out.value -= std::log(one_minus);
      // dL/dz_y = p_y ; dL/dz_c = -p_y p_c / (1 - p_y) for c != y
      Vec<T> g = p * static_cast<T>(-py / one_minus);
      g(target) = static_cast<T>(py);
      out.dlogits.row(row) += g.transpose();
    }
    ++out.tokens;
  }
  return out;
}

// ------------------------------ batch evaluation ----------------------------

template <typename T>
struct BatchEval {
  LossReport report;
  ForwardCache<T> cache;
  std::vector<int> loss_rows;  // packed rows carrying gradient
  Mat<T> dlogits;              // per loss_row gradient of the combined loss
};

// Forward + combined loss over one batch of units (one prompt's batch in
// peft mode). Reduction: per-sequence sum, then mean across the sequences of
// each class; combined = mle_mean + alpha * ul_mean.
template <typename T>
BatchEval<T> eval_combined(const Model<T>& model, const std::vector<TrainingUnit>& units,
                           const LossConfig& cfg) {
  cfg.validate();
  if (units.empty()) throw std::invalid_argument("eval_combined: empty batch");
  int num_pos = 0, num_neg = 0;
  for (const auto& u : units) (u.negative ? num_neg : num_pos)++;
  if (cfg.mode == TrainMode::peft && num_neg == 0)
    throw std::invalid_argument("eval_combined: peft batch must contain negatives");
  if (num_pos == 0) throw std::invalid_argument("eval_combined: batch has no positive units");

  std::vector<std::vector<int>> id_lists;
  id_lists.reserve(units.size());
  for (const auto& u : units) id_lists.push_back(u.tokens.ids);
  BatchEval<T> ev;
  forward_trunk(model, pack_sequences(id_lists, model.arch.context_len), ev.cache);
  const Packed& packed = ev.cache.packed;

  // Rows that can carry gradient: the predictor row of every response token
  // (for negatives, only beta-weighted ones).
  std::vector<int> unit_row_start(units.size() + 1, 0);
  for (std::size_t s = 0; s < units.size(); ++s) {
    const TrainingUnit& u = units[s];
    const int r0 = packed.offsets[s];
    for (int q = u.tokens.prompt_len; q < u.tokens.length(); ++q) {
      if (u.negative && !u.beta[static_cast<std::size_t>(q)]) continue;
      ev.loss_rows.push_back(r0 + q - 1);
    }
    unit_row_start[s + 1] = static_cast<int>(ev.loss_rows.size());
  }

  Mat<T> logits = logits_for_rows(model, ev.cache, ev.loss_rows);
  ev.dlogits = Mat<T>::Zero(logits.rows(), logits.cols());

  const T pos_scale = T(1) / static_cast<T>(num_pos);
  const T neg_scale = num_neg > 0 ? static_cast<T>(cfg.alpha) / static_cast<T>(num_neg) : T(0);

  for (std::size_t s = 0; s < units.size(); ++s) {
    const TrainingUnit& u = units[s];
    int r = unit_row_start[s];
    for (int q = u.tokens.prompt_len; q < u.tokens.length(); ++q) {
      if (u.negative && !u.beta[static_cast<std::size_t>(q)]) continue;
      const int target = u.tokens.ids[static_cast<std::size_t>(q)];
      Vec<T> z = logits.row(r).transpose();
      Vec<T> lsm = log_softmax(z);
      if (!u.negative) {
        ev.report.mle -= static_cast<double>(lsm(target));
        Vec<T> g = lsm.array().exp().matrix();
        g(target) -= T(1);
        ev.dlogits.row(r) = g.transpose() * pos_scale;
        ++ev.report.positive_tokens;
      } else {
        Vec<T> p = lsm.array().exp().matrix();
        const double py = static_cast<double>(p(target));
        const double one_minus = 1.0 - py;
        if (one_minus < cfg.prob_floor) {
          ev.report.ul -= std::log(cfg.prob_floor);
        } else {
          ev.report.ul -= std::log(one_minus);
          Vec<T> g = p * static_cast<T>(-py / one_minus);
          g(target) = static_cast<T>(py);
          ev.dlogits.row(r) = g.transpose() * neg_scale;
        }
        ++ev.report.negative_tokens;
      }
      ++r;
    }
  }
  ev.report.mle /= num_pos;
  if (num_neg > 0) ev.report.ul /= num_neg;
  ev.report.combined = ev.report.mle + cfg.alpha * ev.report.ul;
  return ev;
}

// Units for one optimizer step, built fresh each epoch (possibility numbers
// may change between epochs).
inline std::vector<std::string> prompt_turns(const std::string& prompt) {
  std::vector<std::string> turns;
  std::string cur;
  for (char c : prompt) {
    if (c == '\n') {
      if (!cur.empty()) turns.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) turns.push_back(cur);
  if (turns.empty()) throw std::invalid_argument("prompt has no turns");
  return turns;
}

inline std::vector<TrainingUnit> units_for_pe_batch(const Vocabulary& vocab, const PEBatch& batch) {
  PromptContext ctx;
  ctx.turns = prompt_turns(batch.prompt);
  std::vector<TrainingUnit> units;
  units.reserve(batch.positives.size() + batch.negatives.size());
  for (const auto& p : batch.positives)
    units.push_back(make_training_unit(
        vocab, render_prompt(PromptKind::peft, ctx, p.k), p.response, false));
  for (const auto& n : batch.negatives)
    units.push_back(make_training_unit(
        vocab, render_prompt(PromptKind::peft, ctx, n.k), n.response, true));
  return units;
}

// --------------------------------- training ---------------------------------

struct StepTrace {
  int step = 0;
  double mle = 0;
  double ul = 0;
  double combined = 0;
  double grad_norm = 0;
};

struct TrainResult {
  std::vector<StepTrace> trace;
  int truncated_sequences = 0;
  int skipped_steps = 0;  // non-finite gradients
};

struct TrainOptions {
  LossConfig loss;
  int epochs = 1;
  std::uint64_t seed = 0;
  bool resample_k = true;    // re-draw possibility numbers from epoch 1 on
  bool shuffle = true;
  std::string save_path;     // when nonempty, final checkpoint is written here
};

namespace detail {

template <typename T>
void train_steps(Model<T>& model, Optimizer<T>& opt,
                 const std::vector<std::vector<TrainingUnit>>& step_batches, const LossConfig& cfg,
                 TrainResult& result) {
  for (const auto& units : step_batches) {
    std::vector<TrainingUnit> prepared = units;
    for (auto& u : prepared)
      if (truncate_unit(u, model.arch.context_len)) ++result.truncated_sequences;
    BatchEval<T> ev = eval_combined(model, prepared, cfg);
    if (!std::isfinite(ev.report.combined))
      throw std::runtime_error("training: non-finite loss at step " +
                               std::to_string(result.trace.size() + 1));
    Params<T> grads(model.arch);
    backward_trunk(model, ev.cache, ev.loss_rows, ev.dlogits, grads);
    const StepInfo info = apply_step(model.params, opt, grads);
    if (info.skipped) ++result.skipped_steps;
    StepTrace tr;
    tr.step = static_cast<int>(result.trace.size()) + 1;
    tr.mle = ev.report.mle;
    tr.ul = ev.report.ul;
    tr.combined = ev.report.combined;
    tr.grad_norm = info.grad_norm;
    result.trace.push_back(tr);
  }
}

template <typename Item>
void shuffle_order(std::vector<const Item*>& order, Rng& rng) {
  for (std::size_t i = order.size(); i > 1; --i) {
    const std::size_t j = static_cast<std::size_t>(uniform_below(rng, i));
    std::swap(order[i - 1], order[j]);
  }
}

}  // namespace detail

// PEFT: one PEBatch per optimizer step. With resample_k the possibility
// numbers are re-drawn per epoch from a fixed per-sample class map (every k
// in [1..m] belongs to one response), so a number never contradicts its
// earlier pairing while the whole range gets trained coverage. The first
// epoch uses the batch as persisted; a single-epoch run never resamples.
template <typename T>
TrainResult run_training(const std::vector<PEBatch>& data, Model<T>& model, Optimizer<T>& opt,
                         const TrainOptions& options) {
  LossConfig cfg = options.loss;
  cfg.mode = TrainMode::peft;
  TrainResult result;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::vector<const PEBatch*> order;
    for (const auto& b : data) order.push_back(&b);
    if (options.shuffle) {
      Rng rng = derive_rng(options.seed, 0x200 + static_cast<std::uint64_t>(epoch));
      detail::shuffle_order(order, rng);
    }
    std::vector<std::vector<TrainingUnit>> batches;
    batches.reserve(order.size());
    Rng krng = derive_rng(options.seed, 0x300 + static_cast<std::uint64_t>(epoch));
    for (const PEBatch* b : order) {
      if (epoch == 0 || !options.resample_k) {
        batches.push_back(units_for_pe_batch(model.vocab, *b));
      } else {
        const std::uint64_t map_seed = splitmix64(options.seed ^ splitmix64(fnv1a64(b->id)));
        batches.push_back(units_for_pe_batch(model.vocab, resample_pe_batch(*b, map_seed, krng)));
      }
    }
    detail::train_steps(model, opt, batches, cfg, result);
  }
  if (!options.save_path.empty()) save_checkpoint(model, options.save_path);
  return result;
}

// OTMFT: the N child samples of one prompt form one step; standard prompt.
template <typename T>
TrainResult run_training(const std::vector<OTMSample>& data, Model<T>& model, Optimizer<T>& opt,
                         const TrainOptions& options) {
  LossConfig cfg = options.loss;
  cfg.mode = TrainMode::otmft;
  cfg.alpha = 0;  // no negatives exist in this mode
  TrainResult result;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::vector<const OTMSample*> order;
    for (const auto& s : data) order.push_back(&s);
    if (options.shuffle) {
      Rng rng = derive_rng(options.seed, 0x200 + static_cast<std::uint64_t>(epoch));
      detail::shuffle_order(order, rng);
    }
    std::vector<std::vector<TrainingUnit>> batches;
    for (const OTMSample* s : order) {
      PromptContext ctx;
      ctx.turns = prompt_turns(s->prompt);
      const std::string prompt_text = render_prompt(PromptKind::zero_shot, ctx);
      std::vector<TrainingUnit> units;
      for (const auto& r : s->responses)
        units.push_back(make_training_unit(model.vocab, prompt_text, r, false));
      batches.push_back(std::move(units));
    }
    detail::train_steps(model, opt, batches, cfg, result);
  }
  if (!options.save_path.empty()) save_checkpoint(model, options.save_path);
  return result;
}

// OTOFT: one sample per step; standard prompt.
template <typename T>
TrainResult run_training(const std::vector<OTOSample>& data, Model<T>& model, Optimizer<T>& opt,
                         const TrainOptions& options) {
  LossConfig cfg = options.loss;
  cfg.mode = TrainMode::otoft;
  cfg.alpha = 0;
  TrainResult result;
  for (int epoch = 0; epoch < options.epochs; ++epoch) {
    std::vector<const OTOSample*> order;
    for (const auto& s : data) order.push_back(&s);
    if (options.shuffle) {
      Rng rng = derive_rng(options.seed, 0x200 + static_cast<std::uint64_t>(epoch));
      detail::shuffle_order(order, rng);
    }
    std::vector<std::vector<TrainingUnit>> batches;
    for (const OTOSample* s : order) {
      PromptContext ctx;
      ctx.turns = prompt_turns(s->prompt);
      const std::string prompt_text = render_prompt(PromptKind::zero_shot, ctx);
      batches.push_back({make_training_unit(model.vocab, prompt_text, s->response, false)});
    }
    detail::train_steps(model, opt, batches, cfg, result);
  }
  if (!options.save_path.empty()) save_checkpoint(model, options.save_path);
  return result;
}

// ------------------------------ gradient check ------------------------------

// Validates the analytic gradient of the combined loss on one PE batch
// against fourth-order central differences over >= 200 random coordinates.
inline double grad_check(Model<double>& model, const PEBatch& batch, double epsilon,
                         const LossConfig& cfg = {}, int num_coords = 256,
                         std::uint64_t seed = 0) {
  std::vector<TrainingUnit> units = units_for_pe_batch(model.vocab, batch);
  LossConfig local = cfg;
  local.mode = TrainMode::peft;
  if (batch.negatives.empty()) local.mode = TrainMode::otmft;
  auto loss_fn = [&]() { return eval_combined(model, units, local).report.combined; };
  BatchEval<double> ev = eval_combined(model, units, local);
  Params<double> grads(model.arch);
  backward_trunk(model, ev.cache, ev.loss_rows, ev.dlogits, grads);
  return finite_diff_max_rel_error(model, loss_fn, grads, num_coords, epsilon, seed);
}

inline std::vector<std::string> trace_jsonl(const std::vector<StepTrace>& trace) {
  std::vector<std::string> lines;
  lines.reserve(trace.size());
  for (const auto& t : trace) {
    nlohmann::json j{{"step", t.step},
                     {"mle", t.mle},
                     {"ul", t.ul},
                     {"combined", t.combined},
                     {"grad_norm", t.grad_norm}};
    lines.push_back(j.dump());
  }
  return lines;
}

}  // namespace pexplore
