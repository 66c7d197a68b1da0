#include "pexplore/prompts.hpp"

#include <stdexcept>

namespace pexplore {

namespace {

void require(bool ok, const char* what) {
  if (!ok) throw std::invalid_argument(std::string("render_prompt: ") + what);
}

}  // namespace

std::string render_dialogue(const std::vector<std::string>& turns, char last_speaker) {
  std::string out;
  const std::size_t n = turns.size();
  for (std::size_t i = 0; i < n; ++i) {
    // Parity relative to the last turn decides the label.
    const bool same_as_last = ((n - 1 - i) % 2) == 0;
    const char speaker =
        same_as_last ? last_speaker : (last_speaker == 'A' ? 'B' : 'A');
    out += "Person ";
    out += speaker;
    out += ": ";
    out += turns[i];
    out += '\n';
  }
  return out;
}

std::string render_prompt(PromptKind kind, const PromptContext& ctx, std::optional<int> k) {
  require(k.has_value() == (kind == PromptKind::peft),
          "possibility number k is required exactly for the peft kind");
  switch (kind) {
    case PromptKind::zero_shot: {
      require(!ctx.turns.empty(), "zero_shot requires dialogue turns");
      return "Given this conversation:\n" + render_dialogue(ctx.turns, 'A') +
             "Imagine you are person B and act as if you were a real individual. Please write "
             "the next response for person B. Keep the response short with no more than 25 "
             "words.\n";
    }
    case PromptKind::peft: {
      require(!ctx.turns.empty(), "peft requires dialogue turns");
      return "Given this conversation:\n" + render_dialogue(ctx.turns, 'A') +
             "Imagine you are person B and act as if you were a real individual. Think about "
             "all the possibilities in which person B might respond next and then provide the "
             "response that corresponds to possibility number " +
             std::to_string(*k) + ".\n";
    }
    case PromptKind::list_prompt: {
      require(!ctx.task_description.empty(), "list_prompt requires a task description");
      require(ctx.n >= 1, "list_prompt requires n >= 1");
      return "I want to " + ctx.task_description + ". List a diverse set of " +
             std::to_string(ctx.n) + " possible responses:\n";
    }
    case PromptKind::coherence_eval: {
      require(!ctx.turns.empty(), "coherence_eval requires dialogue turns");
      require(!ctx.response.empty(), "coherence_eval requires the response under judgment");
      return "Given this conversation:\n" + render_dialogue(ctx.turns, 'A') +
             "Does this next response from Person B make coherent sense?\n"
             "Person B: " +
             ctx.response +
             "\n"
             "Begin your evaluation by providing a short assessment. Then, rate the coherence "
             "of Person B's response on a scale from 1 to 10 by strictly following this "
             "example format: 'Coherence rating: [5]'\n"
             "Coherence assessment:\n";
    }
    case PromptKind::seeker: {
      require(!ctx.turns.empty(), "seeker requires dialogue turns");
      return "You are an expert conversationalist acting as Person A. Your goal is to guide a "
             "conversation to gather Person B's demographic details: country of residence, "
             "age, occupation, level of education, and gender. Ensure the transitions between "
             "topics are smooth and keep each of your responses to no more than two "
             "sentences.\n"
             "Conversation:\n" +
             render_dialogue(ctx.turns, 'B');
    }
    case PromptKind::extractor: {
      require(!ctx.turns.empty(), "extractor requires dialogue turns");
      return "Given this conversation:\n" + render_dialogue(ctx.turns, 'B') +
             "Please extract/infer information about Person B from the conversation and "
             "complete the following details. For any missing information, please fill in "
             "'None'.\n"
             "Age:\n"
             "Gender:\n"
             "Place of birth (country):\n"
             "Current country of residence:\n"
             "Highest education:\n"
             "Occupation:\n"
             "Occupation sector:\n";
    }
    case PromptKind::normalizer: {
      require(!ctx.attribute_name.empty(), "normalizer requires an attribute name");
      require(!ctx.values.empty(), "normalizer requires the predefined values");
      std::string out = ctx.attribute_name + ": " + ctx.raw_value + "\n" +
                        "To which group does the above " + ctx.attribute_name +
                        " belong? Give your answer without any explanation. Return \"others\" "
                        "if it does not fit into any specific category listed.\n";
      for (const auto& v : ctx.values) {
        out += v;
        out += '\n';
      }
      return out;
    }
  }
  throw std::invalid_argument("render_prompt: unknown kind");
}

}  // namespace pexplore
