#pragma once

#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pexplore/client.hpp"
#include "pexplore/decode.hpp"
#include "pexplore/types.hpp"

namespace pexplore {

struct TranscriptTurn {
  std::string speaker;  // "seeker" | "revealer"
  std::string text;
};

struct Transcript {
  std::string conversation_id;
  std::vector<TranscriptTurn> turns;  // first four are the seeds
  std::vector<std::string> seeds;     // exactly four
  bool failed = false;
  std::string failure;  // client error text when failed
};

// Supplies candidate responses for the revealer side given the conversation
// so far (turn texts, seeker first).
class Revealer {
 public:
  virtual ~Revealer() = default;
  virtual std::vector<std::string> candidates(const std::vector<std::string>& turns) = 0;
};

// Revealer backed by a local checkpoint: renders the possibility-conditioned
// prompt over the conversation and returns the L generated responses.
template <typename T>
class ModelRevealer final : public Revealer {
 public:
  ModelRevealer(const Model<T>& model, int count, int m, GenerationConfig config)
      : model_(&model), count_(count), m_(m), config_(config) {}

  std::vector<std::string> candidates(const std::vector<std::string>& turns) override {
    GenerationConfig cfg = config_;
    cfg.seed = splitmix64(config_.seed ^ splitmix64(0xc0de + calls_));
    ++calls_;
    std::vector<std::string> out;
    for (auto& pr : generate_multi(*model_, turns, count_, m_, cfg))
      out.push_back(std::move(pr.response));
    return out;
  }

 private:
  const Model<T>* model_;
  int count_;
  int m_;
  GenerationConfig config_;
  std::uint64_t calls_ = 0;
};

// Deterministic stand-in: returns the next scripted candidate list each call.
class ScriptedRevealer final : public Revealer {
 public:
  explicit ScriptedRevealer(std::vector<std::vector<std::string>> lists)
      : lists_(std::move(lists)) {}
  std::vector<std::string> candidates(const std::vector<std::string>& turns) override;

 private:
  std::vector<std::vector<std::string>> lists_;
  std::size_t next_ = 0;
};

// Seeker/revealer conversation: four seed turns, then strict alternation
// starting with the seeker at turn 5; the revealer's turn samples one of its
// candidates uniformly. A client failure marks the transcript failed and
// keeps the turns produced so far.
Transcript run_conversation(Revealer& revealer, ChatClient& seeker,
                            const std::vector<std::string>& seeds, int total_turns, Rng& rng,
                            const std::string& conversation_id);

// ------------------------------ attribute layer -----------------------------

struct AttributeVocabulary {
  std::string attribute;
  std::vector<std::string> values;
};

AttributeVocabulary load_attribute_vocab(const std::string& path);

// The five evaluated attributes, loaded from `dir` (age_group.json, ...).
struct AttributeVocabularies {
  AttributeVocabulary age_group;
  AttributeVocabulary gender;
  AttributeVocabulary nationality;
  AttributeVocabulary education;
  AttributeVocabulary occupation_sector;
};

AttributeVocabularies load_attribute_vocabularies(const std::string& dir);

// Raw attribute map, keyed by the extraction template's field names ("Age",
// "Gender", "Place of birth (country)", "Current country of residence",
// "Highest education", "Occupation", "Occupation sector"). Absent fields are
// "none".
using RawAttributes = std::map<std::string, std::string>;

// Renders the extraction template over the transcript and parses the field
// lines. A completion with no recognizable field line is re-queried once,
// then rejected.
RawAttributes extract_attributes(const Transcript& transcript, ChatClient& llm);

// Canonicalizes one raw value: heuristics first (case-insensitive match,
// numeric age bucketing, common synonyms), then one normalization query when
// a client is supplied; anything unmatched becomes "others".
std::string normalize_attribute(const std::string& raw, const AttributeVocabulary& vocab,
                                ChatClient* llm);

struct PersonaRecord {
  std::string conversation_id;
  std::string age_group;
  std::string gender;
  std::string location;
  std::string education;
  std::string occupation_sector;
};

PersonaRecord make_persona_record(const std::string& conversation_id, const RawAttributes& raw,
                                  const AttributeVocabularies& vocabs, ChatClient* llm);

// ------------------------------- reporting ----------------------------------

struct AttributeStats {
  std::optional<double> entropy;  // absent when every value is "none"
  std::map<std::string, int> histogram;  // non-"none" values
  int none_count = 0;
  std::optional<std::string> dominant;  // value holding > 75% of non-"none" mass
};

struct PersonaReport {
  std::map<std::string, AttributeStats> attributes;  // age_group, gender, ...
  std::optional<double> average_entropy;
  int records = 0;
};

PersonaReport persona_report(const std::vector<PersonaRecord>& records);
nlohmann::json persona_report_json(const PersonaReport& report);

// ------------------------------- persistence --------------------------------

nlohmann::json transcript_json(const Transcript& t);
Transcript transcript_from_json(const nlohmann::json& j);
nlohmann::json persona_record_json(const PersonaRecord& r);
PersonaRecord persona_record_from_json(const nlohmann::json& j);

void save_transcripts_jsonl(const std::string& path, const std::vector<Transcript>& transcripts);
std::vector<Transcript> load_transcripts_jsonl(const std::string& path);
void save_persona_records_jsonl(const std::string& path,
                                const std::vector<PersonaRecord>& records);
std::vector<PersonaRecord> load_persona_records_jsonl(const std::string& path);

}  // namespace pexplore
