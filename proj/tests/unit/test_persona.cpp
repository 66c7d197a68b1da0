#include <doctest.h>

#include <cstdlib>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "pexplore/metrics.hpp"
#include "pexplore/persona.hpp"

using namespace pexplore;

namespace {

std::string data_dir() {
  const char* env = std::getenv("PEXPLORE_DATA_DIR");
  if (env && *env) return env;
#ifdef PEXPLORE_DATA_DIR
  return PEXPLORE_DATA_DIR;
#else
  return "data";
#endif
}

AttributeVocabularies vocabs() { return load_attribute_vocabularies(data_dir() + "/attributes"); }

const std::vector<std::string> kSeeds = {"Hey, how's it going?", "Pretty well, thanks!",
                                         "Up to anything fun lately?",
                                         "Mostly just work, to be honest."};

}  // namespace

TEST_CASE("attribute vocabularies carry the expected category counts") {
  AttributeVocabularies v = vocabs();
  CHECK(v.age_group.values.size() == 8);
  CHECK(v.gender.values.size() == 57);
  CHECK(v.nationality.values.size() == 196);
  CHECK(v.education.values.size() == 13);
  CHECK(v.occupation_sector.values.size() == 27);
  CHECK(v.age_group.attribute == "Age group");
  // Values are unique within each vocabulary.
  for (const AttributeVocabulary* av :
       {&v.age_group, &v.gender, &v.nationality, &v.education, &v.occupation_sector}) {
    std::set<std::string> uniq(av->values.begin(), av->values.end());
    CHECK(uniq.size() == av->values.size());
  }
}

TEST_CASE("conversation obeys the seed and alternation invariants") {
  ScriptedRevealer revealer({{"Candidate one.", "Candidate two.", "Candidate three."},
                             {"Second turn A.", "Second turn B."}});
  MockScript seeker_script;
  seeker_script.sequence = {"So where are you living these days?",
                            "Interesting! And what do you do for work?"};
  auto seeker = install_mock(seeker_script);
  Rng rng = derive_rng(3, 0);
  Transcript t = run_conversation(revealer, *seeker, kSeeds, 8, rng, "c-1");

  CHECK(t.conversation_id == "c-1");
  CHECK(!t.failed);
  REQUIRE(t.seeds.size() == 4);
  REQUIRE(t.turns.size() == 8);
  const char* expected_speakers[] = {"seeker", "revealer", "seeker", "revealer",
                                     "seeker", "revealer", "seeker", "revealer"};
  for (int i = 0; i < 8; ++i) CHECK(t.turns[static_cast<std::size_t>(i)].speaker == expected_speakers[i]);
  for (int i = 0; i < 4; ++i) CHECK(t.turns[static_cast<std::size_t>(i)].text == kSeeds[static_cast<std::size_t>(i)]);
  CHECK(t.turns[4].text == "So where are you living these days?");
  // The revealer turn is one of the scripted candidates.
  const std::set<std::string> c1 = {"Candidate one.", "Candidate two.", "Candidate three."};
  CHECK(c1.count(t.turns[5].text) == 1);
  const std::set<std::string> c2 = {"Second turn A.", "Second turn B."};
  CHECK(c2.count(t.turns[7].text) == 1);
}

TEST_CASE("conversation rejects invalid shapes") {
  ScriptedRevealer revealer({});
  auto seeker = install_mock(MockScript{});
  Rng rng = derive_rng(0, 0);
  CHECK_THROWS(run_conversation(revealer, *seeker, kSeeds, 5, rng, "odd"));
  CHECK_THROWS(run_conversation(revealer, *seeker, kSeeds, 4, rng, "too-short"));
  CHECK_THROWS(run_conversation(revealer, *seeker, {"only", "three", "seeds"}, 6, rng, "seeds"));
}

TEST_CASE("a seeker failure marks the transcript and keeps earlier turns") {
  ScriptedRevealer revealer({{"Fine."}});
  MockScript script;
  script.sequence = {"One good question?"};  // second seeker turn exhausts the script
  auto seeker = install_mock(script);
  Rng rng = derive_rng(1, 0);
  Transcript t = run_conversation(revealer, *seeker, kSeeds, 8, rng, "c-f");
  CHECK(t.failed);
  CHECK(!t.failure.empty());
  CHECK(t.turns.size() == 6);  // 4 seeds + seeker + revealer, then the failure
}

TEST_CASE("extract_attributes parses the field lines") {
  Transcript t;
  t.conversation_id = "c-2";
  for (const auto& s : kSeeds) t.turns.push_back({"seeker", s});
  MockScript script;
  script.sequence = {
      "Age: 35\n"
      "Gender: Male\n"
      "Place of birth (country): None\n"
      "Current country of residence: United States\n"
      "Highest education: Bachelor's degree\n"
      "Occupation: consultant\n"
      "Occupation sector: Business\n"};
  auto llm = install_mock(script);
  RawAttributes raw = extract_attributes(t, *llm);
  CHECK(raw.at("Age") == "35");
  CHECK(raw.at("Gender") == "Male");
  CHECK(raw.at("Place of birth (country)") == "none");
  CHECK(raw.at("Current country of residence") == "United States");
  CHECK(raw.at("Highest education") == "Bachelor's degree");
  CHECK(raw.at("Occupation") == "consultant");
  CHECK(raw.at("Occupation sector") == "Business");

  auto* mock = dynamic_cast<MockChatClient*>(llm.get());
  REQUIRE(mock != nullptr);
  CHECK(mock->request_log().front().find("Please extract/infer information") !=
        std::string::npos);
}

TEST_CASE("extract_attributes retries once on an unusable completion, then fails") {
  Transcript t;
  t.conversation_id = "c-3";
  for (const auto& s : kSeeds) t.turns.push_back({"seeker", s});

  MockScript retry_script;
  retry_script.sequence = {"I cannot infer anything from this.",
                           "Age: 41\nGender: None\nOccupation: None"};
  auto retry_llm = install_mock(retry_script);
  RawAttributes raw = extract_attributes(t, *retry_llm);
  CHECK(raw.at("Age") == "41");
  CHECK(raw.at("Gender") == "none");         // explicit None folds to none
  CHECK(raw.at("Occupation sector") == "none");  // missing lines fold to none
  CHECK(retry_llm->calls() == 2);

  MockScript hopeless;
  hopeless.sequence = {"nothing", "still nothing"};
  auto hopeless_llm = install_mock(hopeless);
  CHECK_THROWS_AS(extract_attributes(t, *hopeless_llm), std::runtime_error);
}

TEST_CASE("normalization fixture: the reference row maps as published") {
  AttributeVocabularies v = vocabs();
  CHECK(normalize_attribute("35", v.age_group, nullptr) == "30-40");
  CHECK(normalize_attribute("Male", v.gender, nullptr) == "Male");
  CHECK(normalize_attribute("United States", v.nationality, nullptr) == "U.S.");
  CHECK(normalize_attribute("Bachelor's degree", v.education, nullptr) == "Bachelor");
  CHECK(normalize_attribute("business consultant", v.occupation_sector, nullptr) ==
        "Business, consulting and management");
}

TEST_CASE("age bucketing uses decade buckets with a 70+ tail") {
  AttributeVocabularies v = vocabs();
  CHECK(normalize_attribute("7", v.age_group, nullptr) == "0-10");
  CHECK(normalize_attribute("10", v.age_group, nullptr) == "10-20");
  CHECK(normalize_attribute("29 years old", v.age_group, nullptr) == "20-30");
  CHECK(normalize_attribute("mid-40s", v.age_group, nullptr) == "40-50");
  CHECK(normalize_attribute("70", v.age_group, nullptr) == "70+");
  CHECK(normalize_attribute("85", v.age_group, nullptr) == "70+");
  CHECK(normalize_attribute("none", v.age_group, nullptr) == "none");
}

TEST_CASE("country synonyms and US states map to canonical labels") {
  AttributeVocabularies v = vocabs();
  CHECK(normalize_attribute("USA", v.nationality, nullptr) == "U.S.");
  CHECK(normalize_attribute("America", v.nationality, nullptr) == "U.S.");
  CHECK(normalize_attribute("California", v.nationality, nullptr) == "U.S.");
  CHECK(normalize_attribute("UK", v.nationality, nullptr) == "U.K.");
  CHECK(normalize_attribute("England", v.nationality, nullptr) == "U.K.");
  CHECK(normalize_attribute("south korea", v.nationality, nullptr) == "South Korea");
  CHECK(normalize_attribute("france", v.nationality, nullptr) == "France");
}

TEST_CASE("gender and education keyword rules") {
  AttributeVocabularies v = vocabs();
  CHECK(normalize_attribute("male", v.gender, nullptr) == "Male");
  CHECK(normalize_attribute("woman", v.gender, nullptr) == "Female");
  CHECK(normalize_attribute("non-binary", v.gender, nullptr) == "Non binary");
  CHECK(normalize_attribute("PhD", v.education, nullptr) == "PhD");
  CHECK(normalize_attribute("high school diploma", v.education, nullptr) == "High school");
  CHECK(normalize_attribute("master's in physics", v.education, nullptr) == "Master");
}

TEST_CASE("occupation sector keyword rules order software before engineer") {
  AttributeVocabularies v = vocabs();
  CHECK(normalize_attribute("software engineer", v.occupation_sector, nullptr) ==
        "Information technology");
  CHECK(normalize_attribute("teacher", v.occupation_sector, nullptr) ==
        "Teacher training and education");
  CHECK(normalize_attribute("nurse", v.occupation_sector, nullptr) == "Healthcare");
}

TEST_CASE("unmatched values consult the llm normalizer, then fall back to others") {
  AttributeVocabularies v = vocabs();
  MockScript script;
  script.sequence = {"Energy and utilities"};
  auto llm = install_mock(script);
  CHECK(normalize_attribute("wind farm compliance auditor", v.occupation_sector, llm.get()) ==
        "Energy and utilities");
  auto* mock = dynamic_cast<MockChatClient*>(llm.get());
  REQUIRE(mock != nullptr);
  CHECK(mock->request_log().front().find("To which group does the above") != std::string::npos);

  MockScript unhelpful;
  unhelpful.sequence = {"that is not a sector I know"};
  auto llm2 = install_mock(unhelpful);
  CHECK(normalize_attribute("wind farm compliance auditor", v.occupation_sector, llm2.get()) ==
        "others");
  CHECK(normalize_attribute("wind farm compliance auditor", v.occupation_sector, nullptr) ==
        "others");
}

TEST_CASE("persona record assembly uses residence and falls back to occupation") {
  AttributeVocabularies v = vocabs();
  RawAttributes raw;
  raw["Age"] = "35";
  raw["Gender"] = "Male";
  raw["Place of birth (country)"] = "Canada";
  raw["Current country of residence"] = "United States";
  raw["Highest education"] = "Bachelor's degree";
  raw["Occupation"] = "business consultant";
  raw["Occupation sector"] = "none";  // forces the occupation fallback
  PersonaRecord rec = make_persona_record("c-9", raw, v, nullptr);
  CHECK(rec.conversation_id == "c-9");
  CHECK(rec.age_group == "30-40");
  CHECK(rec.gender == "Male");
  CHECK(rec.location == "U.S.");  // residence, not birth country
  CHECK(rec.education == "Bachelor");
  CHECK(rec.occupation_sector == "Business, consulting and management");
}

TEST_CASE("persona report entropies agree with shannon_entropy exactly") {
  std::vector<PersonaRecord> records;
  const char* ages[] = {"30-40", "30-40", "20-30", "none"};
  const char* genders[] = {"Male", "Female", "Male", "Male"};
  for (int i = 0; i < 4; ++i) {
    PersonaRecord r;
    r.conversation_id = "c" + std::to_string(i);
    r.age_group = ages[i];
    r.gender = genders[i];
    r.location = "U.S.";
    r.education = "none";
    r.occupation_sector = "none";
    records.push_back(r);
  }
  PersonaReport report = persona_report(records);
  CHECK(report.records == 4);

  const AttributeStats& age = report.attributes.at("age_group");
  REQUIRE(age.entropy.has_value());
  CHECK(*age.entropy ==
        doctest::Approx(shannon_entropy({"30-40", "30-40", "20-30"})).epsilon(1e-12));
  CHECK(age.none_count == 1);
  CHECK(age.histogram.at("30-40") == 2);

  const AttributeStats& gender = report.attributes.at("gender");
  CHECK(*gender.entropy ==
        doctest::Approx(shannon_entropy({"Male", "Female", "Male", "Male"})).epsilon(1e-12));
  // 3 of 4 is exactly 75%; the dominance rule is strictly greater, so no flag.
  CHECK(!gender.dominant.has_value());

  const AttributeStats& location = report.attributes.at("location");
  REQUIRE(location.entropy.has_value());
  CHECK(*location.entropy == doctest::Approx(0.0));
  REQUIRE(location.dominant.has_value());
  CHECK(*location.dominant == "U.S.");

  // All-none attributes report no entropy and contribute nothing to the mean.
  CHECK(!report.attributes.at("education").entropy.has_value());
  REQUIRE(report.average_entropy.has_value());
  const double expected_mean = (*age.entropy + *gender.entropy + 0.0) / 3.0;
  CHECK(*report.average_entropy == doctest::Approx(expected_mean).epsilon(1e-12));

  nlohmann::json j = persona_report_json(report);
  CHECK(j.at("entropy_base") == 2);
  CHECK(j.at("records") == 4);
  CHECK(j.at("attributes").contains("age_group"));
  CHECK(j.at("attributes").at("education").at("entropy").is_null());

  CHECK_THROWS_AS(persona_report({}), std::invalid_argument);
}

TEST_CASE("dominance flag requires strictly more than 75 percent") {
  std::vector<PersonaRecord> records;
  for (int i = 0; i < 4; ++i) {
    PersonaRecord r;
    r.conversation_id = "c" + std::to_string(i);
    r.age_group = i < 3 ? "30-40" : "20-30";  // exactly 75%
    r.gender = i == 0 ? "Female" : "Male";    // 75% + strict majority check: 3/4
    r.location = "none";
    r.education = "none";
    r.occupation_sector = "none";
    records.push_back(r);
  }
  PersonaReport report = persona_report(records);
  CHECK(!report.attributes.at("age_group").dominant.has_value());  // 3/4 is not > 75%
  CHECK(!report.attributes.at("gender").dominant.has_value());
}

TEST_CASE("transcripts and records round-trip through jsonl") {
  Transcript t;
  t.conversation_id = "c-rt";
  t.seeds = kSeeds;
  for (const auto& s : kSeeds) t.turns.push_back({t.turns.size() % 2 == 0 ? "seeker" : "revealer", s});
  Transcript f = t;
  f.conversation_id = "c-fail";
  f.failed = true;
  f.failure = "client timeout";

  const std::string tpath = "test_persona_transcripts.jsonl";
  save_transcripts_jsonl(tpath, {t, f});
  std::vector<Transcript> back = load_transcripts_jsonl(tpath);
  REQUIRE(back.size() == 2);
  CHECK(back[0].conversation_id == "c-rt");
  CHECK(back[0].turns.size() == 4);
  CHECK(back[0].turns[1].speaker == "revealer");
  CHECK(!back[0].failed);
  CHECK(back[1].failed);
  CHECK(back[1].failure == "client timeout");
  // The failure marker is only serialized for failed transcripts.
  nlohmann::json jok = transcript_json(t);
  CHECK(!jok.contains("failed"));
  nlohmann::json jfail = transcript_json(f);
  CHECK(jfail.at("failed") == true);
  std::remove(tpath.c_str());

  PersonaRecord r;
  r.conversation_id = "c-0";
  r.age_group = "30-40";
  r.gender = "Male";
  r.location = "U.S.";
  r.education = "Bachelor";
  r.occupation_sector = "Sales";
  const std::string rpath = "test_persona_records.jsonl";
  save_persona_records_jsonl(rpath, {r});
  std::vector<PersonaRecord> rback = load_persona_records_jsonl(rpath);
  REQUIRE(rback.size() == 1);
  CHECK(rback[0].age_group == "30-40");
  CHECK(rback[0].occupation_sector == "Sales");
  std::remove(rpath.c_str());
}
