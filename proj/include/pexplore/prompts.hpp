#pragma once

#include <optional>
#include <string>
#include <vector>

namespace pexplore {

enum class PromptKind {
  zero_shot,       // next-response generation, short-answer instruction
  peft,            // next-response generation conditioned on a possibility number
  list_prompt,     // "List a diverse set of <N> possible responses:"
  coherence_eval,  // judge template ending in "Coherence rating: [x]" format
  seeker,          // persona-seeker system prompt plus conversation
  extractor,       // persona attribute extraction form
  normalizer       // map a raw attribute value onto a predefined vocabulary
};

// Slot values for render_prompt; only the fields a kind needs are read.
struct PromptContext {
  // Dialogue history, oldest first, one utterance per entry. Speaker labels
  // are assigned by alternation anchored at the final turn.
  std::vector<std::string> turns;

  std::string response;          // coherence_eval: the response under judgment
  std::string task_description;  // list_prompt
  int n = 0;                     // list_prompt: number of responses requested

  std::string attribute_name;        // normalizer
  std::string raw_value;             // normalizer
  std::vector<std::string> values;   // normalizer: predefined values, in order
};

// Renders dialogue turns as "Person A:"/"Person B:" lines. The final turn
// gets `last_speaker` ('A' or 'B') and labels alternate backwards from it.
std::string render_dialogue(const std::vector<std::string>& turns, char last_speaker);

// Renders the requested template with slots substituted. k is required for
// (and only for) the peft kind. Throws std::invalid_argument when a needed
// slot is missing.
std::string render_prompt(PromptKind kind, const PromptContext& ctx, std::optional<int> k = {});

}  // namespace pexplore
