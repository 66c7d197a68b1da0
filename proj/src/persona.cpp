#include "pexplore/persona.hpp"

#include <algorithm>
#include <cctype>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "pexplore/dataset.hpp"
#include "pexplore/metrics.hpp"
#include "pexplore/prompts.hpp"

namespace pexplore {

namespace {

std::string trim_copy(const std::string& s) {
  std::size_t b = 0, e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  return s.substr(b, e - b);
}

std::string lower_copy(const std::string& s) {
  std::string out = s;
  std::transform(out.begin(), out.end(), out.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return out;
}

bool is_none(const std::string& raw) {
  const std::string t = lower_copy(trim_copy(raw));
  return t.empty() || t == "none" || t == "n/a" || t == "unknown";
}

std::vector<std::string> turn_texts(const Transcript& t) {
  std::vector<std::string> out;
  out.reserve(t.turns.size());
  for (const auto& turn : t.turns) out.push_back(turn.text);
  return out;
}

const char* const kExtractionFields[] = {
    // "Occupation sector" must be matched before its prefix "Occupation".
    "Age", "Gender", "Place of birth (country)", "Current country of residence",
    "Highest education", "Occupation sector", "Occupation",
};

int parse_field_lines(const std::string& reply, RawAttributes& out) {
  int found = 0;
  std::istringstream lines(reply);
  std::string line;
  while (std::getline(lines, line)) {
    for (const char* field : kExtractionFields) {
      const std::size_t flen = std::strlen(field);
      if (line.size() > flen && line.compare(0, flen, field) == 0 && line[flen] == ':') {
        out[field] = trim_copy(line.substr(flen + 1));
        ++found;
        break;
      }
    }
  }
  return found;
}

// First-match keyword tables for rule-based normalization; checked on the
// lowercased raw value before any normalization query.
struct KeywordRule {
  const char* needle;
  const char* canonical;
};

const KeywordRule kEducationRules[] = {
    {"no formal", "No formal education"},
    {"primary school", "Primary school"},
    {"secondary school", "Secondary school"},
    {"high school", "High school"},
    {"associate", "Associate Degree"},
    {"certificate", "Certificate programs"},
    {"diploma", "Diploma"},
    {"juris doctor", "Juris Doctor"},
    {"medical doctor", "Medical Doctor"},
    {"ph.d", "PhD"},
    {"phd", "PhD"},
    {"doctorate", "Doctorate Degree"},
    {"bachelor", "Bachelor"},
    {"b.a.", "Bachelor"},
    {"b.sc", "Bachelor"},
    {"bsc", "Bachelor"},
    {"master", "Master"},
    {"m.sc", "Master"},
    {"msc", "Master"},
    {"mba", "Master"},
};

const KeywordRule kSectorRules[] = {
    {"software", "Information technology"},
    {"programmer", "Information technology"},
    {"developer", "Information technology"},
    {"information technology", "Information technology"},
    {"data scien", "Information technology"},
    {"teacher", "Teacher training and education"},
    {"professor", "Teacher training and education"},
    {"educat", "Teacher training and education"},
    {"nurse", "Healthcare"},
    {"doctor", "Healthcare"},
    {"physician", "Healthcare"},
    {"health", "Healthcare"},
    {"lawyer", "Law"},
    {"attorney", "Law"},
    {"paralegal", "Law"},
    {"police", "Law enforcement and security"},
    {"security", "Law enforcement and security"},
    {"farmer", "Environment and agriculture"},
    {"agricult", "Environment and agriculture"},
    {"chef", "Hospitality and events management"},
    {"restaurant", "Hospitality and events management"},
    {"hotel", "Hospitality and events management"},
    {"hospitality", "Hospitality and events management"},
    {"accountan", "Accountancy, banking and finance"},
    {"banking", "Accountancy, banking and finance"},
    {"financ", "Accountancy, banking and finance"},
    {"marketing", "Marketing, advertising and PR"},
    {"advertis", "Marketing, advertising and PR"},
    {"journalist", "Media and internet"},
    {"media", "Media and internet"},
    {"construction", "Property and construction"},
    {"real estate", "Property and construction"},
    {"property", "Property and construction"},
    {"transport", "Transport and logistics"},
    {"logistics", "Transport and logistics"},
    {"driver", "Transport and logistics"},
    {"pharma", "Science and pharmaceuticals"},
    {"scientist", "Science and pharmaceuticals"},
    {"artist", "Creative arts and design"},
    {"designer", "Creative arts and design"},
    {"retail", "Retail"},
    {"sales", "Sales"},
    {"student", "Student"},
    {"unemployed", "Unemployed"},
    {"retired", "Retired"},
    // Generic engineering comes after "software" so software engineers land
    // in information technology.
    {"engineer", "Engineering and manufacturing"},
    {"manufactur", "Engineering and manufacturing"},
    {"consult", "Business, consulting and management"},
    {"management", "Business, consulting and management"},
    {"manager", "Business, consulting and management"},
    {"business", "Business, consulting and management"},
};

const char* const kUsStates[] = {
    "alabama", "alaska", "arizona", "arkansas", "california", "colorado", "connecticut",
    "delaware", "florida", "georgia", "hawaii", "idaho", "illinois", "indiana", "iowa",
    "kansas", "kentucky", "louisiana", "maine", "maryland", "massachusetts", "michigan",
    "minnesota", "mississippi", "missouri", "montana", "nebraska", "nevada", "new hampshire",
    "new jersey", "new mexico", "new york", "north carolina", "north dakota", "ohio",
    "oklahoma", "oregon", "pennsylvania", "rhode island", "south carolina", "south dakota",
    "tennessee", "texas", "utah", "vermont", "virginia", "washington", "west virginia",
    "wisconsin", "wyoming",
};

std::string country_synonym(const std::string& low) {
  static const std::map<std::string, std::string> table = {
      {"usa", "U.S."},
      {"u.s.a.", "U.S."},
      {"u.s.a", "U.S."},
      {"us", "U.S."},
      {"u.s", "U.S."},
      {"united states", "U.S."},
      {"united states of america", "U.S."},
      {"the united states", "U.S."},
      {"america", "U.S."},
      {"uk", "U.K."},
      {"u.k", "U.K."},
      {"united kingdom", "U.K."},
      {"great britain", "U.K."},
      {"britain", "U.K."},
      {"england", "U.K."},
      {"scotland", "U.K."},
      {"wales", "U.K."},
      {"northern ireland", "U.K."},
      {"south korea", "South Korea"},
      {"republic of korea", "South Korea"},
      {"holland", "Netherlands"},
      {"uae", "United Arab Emirates"},
  };
  auto it = table.find(low);
  if (it != table.end()) return it->second;
  for (const char* state : kUsStates)
    if (low == state) return "U.S.";
  return {};
}

std::string squeeze_alnum(const std::string& s) {
  std::string out;
  for (unsigned char c : s)
    if (std::isalnum(c)) out.push_back(static_cast<char>(std::tolower(c)));
  return out;
}

std::optional<std::string> match_vocab_ci(const std::string& raw,
                                          const AttributeVocabulary& vocab) {
  const std::string low = lower_copy(trim_copy(raw));
  for (const auto& v : vocab.values)
    if (lower_copy(v) == low) return v;
  // Tolerate punctuation/spacing variants ("non-binary" vs "Non binary").
  const std::string sq = squeeze_alnum(low);
  if (!sq.empty())
    for (const auto& v : vocab.values)
      if (squeeze_alnum(v) == sq) return v;
  return std::nullopt;
}

std::optional<std::string> bucket_age(const std::string& raw) {
  std::size_t i = 0;
  while (i < raw.size() && !std::isdigit(static_cast<unsigned char>(raw[i]))) ++i;
  if (i == raw.size()) return std::nullopt;
  long v = 0;
  while (i < raw.size() && std::isdigit(static_cast<unsigned char>(raw[i]))) {
    v = v * 10 + (raw[i] - '0');
    ++i;
  }
  if (v >= 70) return std::string("70+");
  const long lo = (v / 10) * 10;
  return std::to_string(lo) + "-" + std::to_string(lo + 10);
}

}  // namespace

std::vector<std::string> ScriptedRevealer::candidates(const std::vector<std::string>& turns) {
  (void)turns;
  if (next_ >= lists_.size())
    throw std::runtime_error("scripted revealer: candidate lists exhausted");
  return lists_[next_++];
}

Transcript run_conversation(Revealer& revealer, ChatClient& seeker,
                            const std::vector<std::string>& seeds, int total_turns, Rng& rng,
                            const std::string& conversation_id) {
  if (seeds.size() != 4)
    throw std::invalid_argument("run_conversation: exactly 4 seed utterances required");
  if (total_turns < 6 || total_turns % 2 != 0)
    throw std::invalid_argument("run_conversation: total_turns must be even and >= 6");

  Transcript t;
  t.conversation_id = conversation_id;
  t.seeds = seeds;
  // Seeds fill turns 1-4 (seeker opens); turn 5 resumes with the seeker.
  for (std::size_t i = 0; i < seeds.size(); ++i)
    t.turns.push_back({i % 2 == 0 ? "seeker" : "revealer", seeds[i]});

  try {
    for (int turn = 5; turn <= total_turns; ++turn) {
      std::vector<std::string> texts;
      for (const auto& past : t.turns) texts.push_back(past.text);
      if (turn % 2 == 1) {
        PromptContext ctx;
        ctx.turns = texts;
        t.turns.push_back({"seeker", seeker.chat({{"user", render_prompt(PromptKind::seeker, ctx)}})});
      } else {
        const std::vector<std::string> cands = revealer.candidates(texts);
        if (cands.empty()) throw std::runtime_error("revealer produced no candidates");
        t.turns.push_back(
            {"revealer", cands[uniform_below(rng, static_cast<std::uint64_t>(cands.size()))]});
      }
    }
  } catch (const std::exception& e) {
    t.failed = true;
    t.failure = e.what();
  }
  return t;
}

// ------------------------------ attribute layer -----------------------------

AttributeVocabulary load_attribute_vocab(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open attribute vocabulary: " + path);
  nlohmann::json j = nlohmann::json::parse(in);
  AttributeVocabulary vocab;
  vocab.attribute = j.at("attribute").get<std::string>();
  for (const auto& v : j.at("values")) vocab.values.push_back(v.get<std::string>());
  if (vocab.values.empty())
    throw std::runtime_error("attribute vocabulary has no values: " + path);
  return vocab;
}

AttributeVocabularies load_attribute_vocabularies(const std::string& dir) {
  AttributeVocabularies v;
  v.age_group = load_attribute_vocab(dir + "/age_group.json");
  v.gender = load_attribute_vocab(dir + "/gender.json");
  v.nationality = load_attribute_vocab(dir + "/nationality.json");
  v.education = load_attribute_vocab(dir + "/education.json");
  v.occupation_sector = load_attribute_vocab(dir + "/occupation_sector.json");
  return v;
}

RawAttributes extract_attributes(const Transcript& transcript, ChatClient& llm) {
  PromptContext ctx;
  ctx.turns = turn_texts(transcript);
  const std::string prompt = render_prompt(PromptKind::extractor, ctx);
  RawAttributes raw;
  for (const char* field : kExtractionFields) raw[field] = "none";
  for (int attempt = 0; attempt < 2; ++attempt) {
    const std::string reply = llm.chat({{"user", prompt}});
    if (parse_field_lines(reply, raw) > 0) {
      for (auto& [field, value] : raw)
        if (is_none(value)) value = "none";
      return raw;
    }
  }
  throw std::runtime_error("extract_attributes: no field lines in completion (after retry)");
}

std::string normalize_attribute(const std::string& raw, const AttributeVocabulary& vocab,
                                ChatClient* llm) {
  if (is_none(raw)) return "none";
  if (auto hit = match_vocab_ci(raw, vocab)) return *hit;
  const std::string low = lower_copy(trim_copy(raw));

  if (vocab.attribute == "Age group") {
    if (auto bucket = bucket_age(raw)) {
      if (std::find(vocab.values.begin(), vocab.values.end(), *bucket) != vocab.values.end())
        return *bucket;
    }
  } else if (vocab.attribute == "Nationality") {
    const std::string mapped = country_synonym(low);
    if (!mapped.empty()) return mapped;
  } else if (vocab.attribute == "Gender") {
    if (low == "man" || low == "m") return "Male";
    if (low == "woman" || low == "f" || low == "w") return "Female";
  } else if (vocab.attribute == "Highest education") {
    for (const auto& rule : kEducationRules)
      if (low.find(rule.needle) != std::string::npos) return rule.canonical;
  } else if (vocab.attribute == "Occupation sector") {
    for (const auto& rule : kSectorRules)
      if (low.find(rule.needle) != std::string::npos) return rule.canonical;
  }

  if (llm != nullptr) {
    PromptContext ctx;
    ctx.attribute_name = vocab.attribute;
    ctx.raw_value = trim_copy(raw);
    ctx.values = vocab.values;
    const std::string reply =
        trim_copy(llm->chat({{"user", render_prompt(PromptKind::normalizer, ctx)}}));
    if (auto hit = match_vocab_ci(reply, vocab)) return *hit;
  }
  return "others";
}

PersonaRecord make_persona_record(const std::string& conversation_id, const RawAttributes& raw,
                                  const AttributeVocabularies& vocabs, ChatClient* llm) {
  auto value_of = [&](const char* field) -> std::string {
    auto it = raw.find(field);
    return it == raw.end() ? std::string("none") : it->second;
  };
  PersonaRecord rec;
  rec.conversation_id = conversation_id;
  rec.age_group = normalize_attribute(value_of("Age"), vocabs.age_group, llm);
  rec.gender = normalize_attribute(value_of("Gender"), vocabs.gender, llm);
  rec.location = normalize_attribute(value_of("Current country of residence"),
                                     vocabs.nationality, llm);
  rec.education = normalize_attribute(value_of("Highest education"), vocabs.education, llm);
  rec.occupation_sector =
      normalize_attribute(value_of("Occupation sector"), vocabs.occupation_sector, llm);
  if (rec.occupation_sector == "others" || rec.occupation_sector == "none") {
    // The free-text occupation often pins down the sector when the model left
    // the sector line vague.
    const std::string occ = value_of("Occupation");
    if (!is_none(occ)) {
      const std::string via_occ = normalize_attribute(occ, vocabs.occupation_sector, llm);
      if (via_occ != "others" && via_occ != "none") rec.occupation_sector = via_occ;
    }
  }
  return rec;
}

// ------------------------------- reporting ----------------------------------

PersonaReport persona_report(const std::vector<PersonaRecord>& records) {
  if (records.empty()) throw std::invalid_argument("persona_report: no records");
  PersonaReport rep;
  rep.records = static_cast<int>(records.size());
  const std::pair<std::string, std::string PersonaRecord::*> fields[] = {
      {"age_group", &PersonaRecord::age_group},
      {"gender", &PersonaRecord::gender},
      {"location", &PersonaRecord::location},
      {"education", &PersonaRecord::education},
      {"occupation_sector", &PersonaRecord::occupation_sector},
  };
  double entropy_sum = 0;
  int entropy_count = 0;
  for (const auto& [name, member] : fields) {
    AttributeStats stats;
    std::vector<std::string> observed;
    for (const auto& r : records) {
      const std::string& v = r.*member;
      if (v == "none") {
        ++stats.none_count;
      } else {
        stats.histogram[v] += 1;
        observed.push_back(v);
      }
    }
    if (!observed.empty()) {
      stats.entropy = shannon_entropy(observed);
      entropy_sum += *stats.entropy;
      ++entropy_count;
      for (const auto& [value, count] : stats.histogram)
        if (4 * count > 3 * static_cast<int>(observed.size())) stats.dominant = value;
    }
    rep.attributes[name] = std::move(stats);
  }
  if (entropy_count > 0) rep.average_entropy = entropy_sum / entropy_count;
  return rep;
}

nlohmann::json persona_report_json(const PersonaReport& report) {
  nlohmann::json j;
  j["records"] = report.records;
  j["entropy_base"] = 2;
  j["average_entropy"] =
      report.average_entropy ? nlohmann::json(*report.average_entropy) : nlohmann::json();
  nlohmann::json attrs = nlohmann::json::object();
  for (const auto& [name, stats] : report.attributes) {
    nlohmann::json a;
    a["entropy"] = stats.entropy ? nlohmann::json(*stats.entropy) : nlohmann::json();
    a["histogram"] = nlohmann::json::object();
    for (const auto& [value, count] : stats.histogram) a["histogram"][value] = count;
    a["none"] = stats.none_count;
    a["dominant"] = stats.dominant ? nlohmann::json(*stats.dominant) : nlohmann::json();
    attrs[name] = std::move(a);
  }
  j["attributes"] = std::move(attrs);
  return j;
}

// ------------------------------- persistence --------------------------------

nlohmann::json transcript_json(const Transcript& t) {
  nlohmann::json j;
  j["conversation_id"] = t.conversation_id;
  j["turns"] = nlohmann::json::array();
  for (const auto& turn : t.turns)
    j["turns"].push_back({{"speaker", turn.speaker}, {"text", turn.text}});
  j["seeds"] = t.seeds;
  if (t.failed) {
    j["failed"] = true;
    j["failure"] = t.failure;
  }
  return j;
}

Transcript transcript_from_json(const nlohmann::json& j) {
  Transcript t;
  t.conversation_id = j.at("conversation_id").get<std::string>();
  for (const auto& turn : j.at("turns"))
    t.turns.push_back({turn.at("speaker").get<std::string>(), turn.at("text").get<std::string>()});
  for (const auto& s : j.at("seeds")) t.seeds.push_back(s.get<std::string>());
  if (j.contains("failed")) {
    t.failed = j["failed"].get<bool>();
    if (j.contains("failure")) t.failure = j["failure"].get<std::string>();
  }
  return t;
}

nlohmann::json persona_record_json(const PersonaRecord& r) {
  return nlohmann::json{{"conversation_id", r.conversation_id}, {"age_group", r.age_group},
                        {"gender", r.gender},                   {"location", r.location},
                        {"education", r.education},             {"occupation_sector", r.occupation_sector}};
}

PersonaRecord persona_record_from_json(const nlohmann::json& j) {
  PersonaRecord r;
  r.conversation_id = j.at("conversation_id").get<std::string>();
  r.age_group = j.at("age_group").get<std::string>();
  r.gender = j.at("gender").get<std::string>();
  r.location = j.at("location").get<std::string>();
  r.education = j.at("education").get<std::string>();
  r.occupation_sector = j.at("occupation_sector").get<std::string>();
  return r;
}

void save_transcripts_jsonl(const std::string& path, const std::vector<Transcript>& transcripts) {
  std::vector<std::string> lines;
  lines.reserve(transcripts.size());
  for (const auto& t : transcripts) lines.push_back(transcript_json(t).dump());
  write_lines_atomic(path, lines);
}

std::vector<Transcript> load_transcripts_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open transcripts: " + path);
  std::vector<Transcript> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim_copy(line).empty()) continue;
    try {
      out.push_back(transcript_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

void save_persona_records_jsonl(const std::string& path,
                                const std::vector<PersonaRecord>& records) {
  std::vector<std::string> lines;
  lines.reserve(records.size());
  for (const auto& r : records) lines.push_back(persona_record_json(r).dump());
  write_lines_atomic(path, lines);
}

std::vector<PersonaRecord> load_persona_records_jsonl(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open persona records: " + path);
  std::vector<PersonaRecord> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim_copy(line).empty()) continue;
    try {
      out.push_back(persona_record_from_json(nlohmann::json::parse(line)));
    } catch (const std::exception& e) {
      throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace pexplore
