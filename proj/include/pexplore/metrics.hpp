#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pexplore/client.hpp"
#include "pexplore/types.hpp"

namespace pexplore {

// Five-or-so generated responses for one prompt.
struct ResponseSet {
  std::string prompt_id;
  std::vector<std::string> responses;
};

// Deterministic text-to-unit-vector map used for semantic diversity.
class Embedder {
 public:
  virtual ~Embedder() = default;
  virtual int dimension() const = 0;
  virtual Vec<double> embed(const std::string& text) const = 0;
};

// Hashed character-3-gram term frequencies, dimension 256, L2-normalized.
// Texts shorter than 3 bytes hash as a single whole-text feature so every
// embedding still has unit norm.
class HashedNgramEmbedder final : public Embedder {
 public:
  static constexpr int kDim = 256;
  int dimension() const override { return kDim; }
  Vec<double> embed(const std::string& text) const override;
};

std::unique_ptr<Embedder> default_embedder();

// Two judge ratings for one response; `unparseable` marks verdicts where a
// rating could not be recovered from either judge's text.
struct JudgeVerdict {
  std::string response_id;
  int rating_a = 0;
  int rating_b = 0;
  std::string raw_a;
  std::string raw_b;
  bool unparseable = false;
};

struct PromptDiversity {
  std::string prompt_id;
  int responses = 0;
  std::optional<double> dist1;
  std::optional<double> dist2;
  std::optional<double> semantic_diversity;
};

struct DiversityReport {
  double dist1 = 0;
  double dist2 = 0;
  double semantic_diversity = 0;
  std::optional<double> incoherence_rate;  // absent when no verdicts supplied
  int judged = 0;
  int unparseable = 0;
  std::vector<PromptDiversity> per_prompt;
};

// Lowercased tokens: alphanumeric runs (bytes >= 128 count as letters) and
// single punctuation characters; whitespace only separates.
std::vector<std::string> metric_tokens(const std::string& text);

// Unique n-grams / total n-grams, pooled over every response in the
// collection. n must be 1 or 2; throws when the pool is empty.
double distinct_n(const std::vector<ResponseSet>& sets, int n);

// 1 - mean over prompts of (mean pairwise response cosine). Every set needs
// at least two responses.
double semantic_diversity(const std::vector<ResponseSet>& sets, const Embedder& embedder);

// -sum p log2 p over the distinct observed values; throws on empty input.
double shannon_entropy(const std::vector<std::string>& values);

// Recovers the bracketed integer after the last "Coherence rating:" marker;
// nullopt when absent or out of [1, 10].
std::optional<int> parse_rating(const std::string& judge_text);

// Percentage of parseable verdicts where both ratings are below 6.
double incoherence_rate(const std::vector<JudgeVerdict>& verdicts);

// Renders the coherence-judging prompt for each response and queries both
// judges through the supplied clients (one re-query on an unparseable
// rating, then the verdict is marked unparseable). `turns_for` maps a
// prompt_id to its conversation turns.
std::vector<JudgeVerdict> judge_responses(
    const std::vector<ResponseSet>& sets,
    const std::function<std::vector<std::string>(const std::string&)>& turns_for,
    ChatClient& judge_a, ChatClient& judge_b);

DiversityReport build_diversity_report(const std::vector<ResponseSet>& sets,
                                       const Embedder& embedder,
                                       const std::vector<JudgeVerdict>& verdicts);

nlohmann::json diversity_report_json(const DiversityReport& report);

}  // namespace pexplore
