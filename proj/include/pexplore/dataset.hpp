#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pexplore/types.hpp"

namespace pexplore {

class ChatClient;  // llm_client

// One-to-one sample: a prompt with its single reference response.
struct OTOSample {
  std::string id;
  std::string prompt;
  std::string response;
  nlohmann::json extra = nlohmann::json::object();  // unknown fields, preserved on round-trip
};

// One-to-many sample: N pairwise-distinct responses to one prompt.
struct OTMSample {
  std::string id;
  std::string prompt;
  std::vector<std::string> responses;
  nlohmann::json extra = nlohmann::json::object();
};

struct PEPositive {
  int k = 0;
  std::string response;
};

struct PENegative {
  int k = 0;
  std::string response;
};

// One prompt's positives plus the derived permuted-possibility-number
// negatives; the unit of one PEFT optimizer step.
struct PEBatch {
  std::string id;
  std::string prompt;
  std::vector<PEPositive> positives;
  std::vector<PENegative> negatives;  // derived, never persisted
  int m = 0;                          // possibility-range upper bound
};

// Case-folded, whitespace-collapsed form used for response distinctness.
std::string normalized_response_key(const std::string& text);

// Extracts up to n numbered items ("1." or "1)" markers) from a completion,
// preserving order. Throws std::runtime_error when nothing parses.
std::vector<std::string> parse_list_response(const std::string& completion, int n);

// Samples n distinct possibility numbers uniformly from [1..m] and pairs them
// with the OTM responses in order. Requires m > number of responses.
std::vector<PEPositive> assign_possibility_numbers(const OTMSample& otm, int m, Rng& rng);

// For each positive i emits the N-1 pairs (k_j, response_i), j != i.
// Requires pairwise-distinct k and pairwise-distinct responses.
std::vector<PENegative> make_negatives(const std::vector<PEPositive>& positives);

// Convenience: positives + derived negatives for one OTM sample.
PEBatch make_pe_batch(const OTMSample& otm, int m, Rng& rng);

// Deals every possibility number in [1..m] across n response slots: a seeded
// shuffle of [1..m] split round-robin, then a seeded shuffle of the slots, so
// classes are near-equal in size and each k belongs to exactly one response.
// classes[i] lists response i's numbers in ascending order. Requires m > n.
std::vector<std::vector<int>> possibility_classes(int n, int m, std::uint64_t seed);

// Consistent per-epoch redraw: each response keeps the class fixed by
// `possibility_classes(n, m, map_seed)` and receives one uniformly drawn
// representative from it. A possibility number therefore always points at the
// same response across epochs while all of [1..m] gets trained coverage.
PEBatch resample_pe_batch(const PEBatch& batch, std::uint64_t map_seed, Rng& rng);

// Queries the client with the List Prompting template until each prompt has
// exactly n pairwise-distinct responses; samples that still fail after
// `retries` re-queries are skipped and reported.
struct BuildOtmResult {
  std::vector<OTMSample> samples;
  std::vector<std::string> skipped;  // "<id>: <reason>"
};
BuildOtmResult build_otm(const std::vector<OTOSample>& oto, int n, ChatClient& client,
                         int retries);

// Deterministic synthetic corpus with a known ground-truth response set per
// prompt; responses are globally distinct across the whole corpus.
std::vector<OTMSample> make_synthetic_otm(int num_prompts, int n, std::uint64_t seed);

// ------------------------------- JSONL  I/O ---------------------------------

struct JsonlError {
  int line = 0;
  std::string message;
};

// Strict loads throw std::runtime_error naming the first offending line;
// lenient loads skip bad lines and report them through `errors`.
std::vector<OTOSample> load_oto_jsonl(const std::string& path, bool lenient = false,
                                      std::vector<JsonlError>* errors = nullptr);
std::vector<OTMSample> load_otm_jsonl(const std::string& path, bool lenient = false,
                                      std::vector<JsonlError>* errors = nullptr);
// Negatives are derived at load time from the persisted positives.
std::vector<PEBatch> load_pe_jsonl(const std::string& path, bool lenient = false,
                                   std::vector<JsonlError>* errors = nullptr);

void save_oto_jsonl(const std::string& path, const std::vector<OTOSample>& samples);
void save_otm_jsonl(const std::string& path, const std::vector<OTMSample>& samples);
void save_pe_jsonl(const std::string& path, const std::vector<PEBatch>& batches);

// Writes lines atomically (temp file + rename).
void write_lines_atomic(const std::string& path, const std::vector<std::string>& lines);

}  // namespace pexplore
