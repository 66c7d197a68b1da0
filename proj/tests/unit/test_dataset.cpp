#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include "pexplore/client.hpp"
#include "pexplore/dataset.hpp"

using namespace pexplore;

TEST_CASE("normalized_response_key folds case and whitespace") {
  CHECK(normalized_response_key("  Hello   World ") == normalized_response_key("hello world"));
  CHECK(normalized_response_key("A b") != normalized_response_key("Ab"));
  CHECK(normalized_response_key("Great!") == normalized_response_key("great!"));
}

TEST_CASE("parse_list_response handles dot and parenthesis markers") {
  const std::string completion =
      "Here are some options:\n"
      "1. Sounds great, count me in!\n"
      "2) I might be busy that day.\n"
      "3. Let me check my calendar.\n"
      "4. Sure thing.\n";
  std::vector<std::string> items = parse_list_response(completion, 4);
  REQUIRE(items.size() == 4);
  CHECK(items[0] == "Sounds great, count me in!");
  CHECK(items[1] == "I might be busy that day.");
  CHECK(items[2] == "Let me check my calendar.");
  CHECK(items[3] == "Sure thing.");
  CHECK_THROWS_AS(parse_list_response("no list here", 4), std::runtime_error);
}

TEST_CASE("assign_possibility_numbers draws distinct k in range") {
  OTMSample otm;
  otm.id = "s";
  otm.prompt = "p";
  otm.responses = {"r1", "r2", "r3", "r4"};
  Rng rng = derive_rng(1, 0);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<PEPositive> pos = assign_possibility_numbers(otm, 9, rng);
    REQUIRE(pos.size() == 4);
    std::set<int> ks;
    for (std::size_t i = 0; i < pos.size(); ++i) {
      CHECK(pos[i].response == otm.responses[i]);
      CHECK(pos[i].k >= 1);
      CHECK(pos[i].k <= 9);
      ks.insert(pos[i].k);
    }
    CHECK(ks.size() == 4);
  }
  Rng rng2 = derive_rng(1, 0);
  CHECK_THROWS(assign_possibility_numbers(otm, 4, rng2));  // needs m > N
}

TEST_CASE("make_negatives emits every cross pairing exactly once") {
  std::vector<PEPositive> pos = {{3, "ra"}, {7, "rb"}, {1, "rc"}};
  std::vector<PENegative> neg = make_negatives(pos);
  REQUIRE(neg.size() == 6);  // N(N-1)
  std::set<std::pair<int, std::string>> seen;
  for (const auto& n : neg) {
    seen.insert({n.k, n.response});
    // A negative never reuses the response's own k.
    for (const auto& p : pos)
      if (p.response == n.response) CHECK(p.k != n.k);
  }
  CHECK(seen.size() == 6);
  // Duplicated k or response is rejected.
  CHECK_THROWS(make_negatives({{3, "ra"}, {3, "rb"}}));
  CHECK_THROWS(make_negatives({{3, "ra"}, {7, "ra"}}));
}

TEST_CASE("possibility classes partition the full range near-evenly") {
  std::vector<std::vector<int>> classes = possibility_classes(4, 9, 17);
  REQUIRE(classes.size() == 4);
  std::set<int> all;
  std::multiset<std::size_t> sizes;
  for (const auto& c : classes) {
    sizes.insert(c.size());
    for (int k : c) {
      CHECK(k >= 1);
      CHECK(k <= 9);
      all.insert(k);
    }
    CHECK(std::is_sorted(c.begin(), c.end()));
  }
  CHECK(all.size() == 9);  // disjoint cover of [1..9]
  CHECK(sizes == std::multiset<std::size_t>{2, 2, 2, 3});

  // The map is a pure function of the seed.
  CHECK(possibility_classes(4, 9, 17) == classes);
  bool any_differs = false;
  for (std::uint64_t s = 0; s < 8 && !any_differs; ++s)
    any_differs = possibility_classes(4, 9, s) != classes;
  CHECK(any_differs);

  CHECK_THROWS_AS(possibility_classes(1, 9, 0), std::invalid_argument);
  CHECK_THROWS_AS(possibility_classes(4, 4, 0), std::invalid_argument);
}

TEST_CASE("consistent resampling never re-pairs a possibility number") {
  PEBatch base;
  base.id = "sample-1";
  base.prompt = "p";
  base.m = 9;
  base.positives = {{2, "ra"}, {5, "rb"}, {6, "rc"}, {9, "rd"}};
  base.negatives = make_negatives(base.positives);

  const std::uint64_t map_seed = 99;
  Rng rng = derive_rng(4, 0);
  std::map<int, std::string> owner_of_k;
  std::set<int> ks_seen;
  for (int trial = 0; trial < 200; ++trial) {
    PEBatch redrawn = resample_pe_batch(base, map_seed, rng);
    CHECK(redrawn.id == base.id);
    CHECK(redrawn.m == 9);
    REQUIRE(redrawn.positives.size() == 4);
    REQUIRE(redrawn.negatives.size() == 12);
    std::set<int> batch_ks;
    for (std::size_t i = 0; i < 4; ++i) {
      const PEPositive& p = redrawn.positives[i];
      // Responses keep their order; only the numbers move.
      CHECK(p.response == base.positives[i].response);
      batch_ks.insert(p.k);
      ks_seen.insert(p.k);
      auto [it, fresh] = owner_of_k.emplace(p.k, p.response);
      if (!fresh) CHECK(it->second == p.response);  // the pairing is a function
    }
    CHECK(batch_ks.size() == 4);
  }
  // Every number in [1..9] gets drawn eventually.
  CHECK(ks_seen.size() == 9);

  // A different map seed usually assigns differently.
  Rng rng2 = derive_rng(4, 0);
  bool differs = false;
  for (std::uint64_t s = 0; s < 8 && !differs; ++s) {
    PEBatch other = resample_pe_batch(base, s, rng2);
    for (std::size_t i = 0; i < 4; ++i) {
      auto it = owner_of_k.find(other.positives[i].k);
      if (it != owner_of_k.end() && it->second != other.positives[i].response) differs = true;
    }
  }
  CHECK(differs);
}

TEST_CASE("synthetic corpus is deterministic with distinct responses") {
  std::vector<OTMSample> a = make_synthetic_otm(50, 4, 9);
  std::vector<OTMSample> b = make_synthetic_otm(50, 4, 9);
  REQUIRE(a.size() == 50);
  std::set<std::string> prompts, responses;
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].id == b[i].id);
    CHECK(a[i].prompt == b[i].prompt);
    CHECK(a[i].responses == b[i].responses);
    prompts.insert(a[i].prompt);
    REQUIRE(a[i].responses.size() == 4);
    std::set<std::string> keys;
    for (const auto& r : a[i].responses) keys.insert(normalized_response_key(r));
    CHECK(keys.size() == 4);  // distinct within the prompt
    for (const auto& r : a[i].responses) responses.insert(r);
  }
  CHECK(prompts.size() == 50);
  std::vector<OTMSample> c = make_synthetic_otm(50, 4, 10);
  CHECK(c[0].prompt != a[0].prompt);  // seed shuffles prompt order
  CHECK_THROWS(make_synthetic_otm(0, 4, 1));
  CHECK_THROWS(make_synthetic_otm(10, 9, 1));
  CHECK_THROWS(make_synthetic_otm(401, 4, 1));
}

TEST_CASE("jsonl round-trip preserves unknown fields") {
  const std::string path = "test_dataset_otm.jsonl";
  {
    std::ofstream out(path);
    out << R"({"id":"x1","prompt":"Hi","responses":["a","b"],"source":"manual","weight":2})"
        << "\n";
  }
  std::vector<OTMSample> otm = load_otm_jsonl(path);
  REQUIRE(otm.size() == 1);
  CHECK(otm[0].extra.at("source") == "manual");
  CHECK(otm[0].extra.at("weight") == 2);
  save_otm_jsonl(path, otm);
  std::vector<OTMSample> back = load_otm_jsonl(path);
  CHECK(back[0].extra == otm[0].extra);
  CHECK(back[0].responses == otm[0].responses);
  std::remove(path.c_str());
}

TEST_CASE("strict jsonl load names the offending line; lenient skips it") {
  const std::string path = "test_dataset_bad.jsonl";
  {
    std::ofstream out(path);
    out << R"({"id":"ok","prompt":"p","responses":["a","b"]})" << "\n";
    out << "not json\n";
    out << R"({"id":"ok2","prompt":"p","responses":["c","d"]})" << "\n";
  }
  CHECK_THROWS_WITH_AS(load_otm_jsonl(path), doctest::Contains(":2"), std::runtime_error);
  std::vector<JsonlError> errors;
  std::vector<OTMSample> otm = load_otm_jsonl(path, true, &errors);
  CHECK(otm.size() == 2);
  REQUIRE(errors.size() == 1);
  CHECK(errors[0].line == 2);
  std::remove(path.c_str());
}

TEST_CASE("pe jsonl persists positives and re-derives negatives") {
  OTMSample otm;
  otm.id = "s0";
  otm.prompt = "How are you?";
  otm.responses = {"Fine.", "Great!", "Tired.", "Busy."};
  Rng rng = derive_rng(3, 1);
  PEBatch batch = make_pe_batch(otm, 9, rng);
  CHECK(batch.negatives.size() == 12);
  const std::string path = "test_dataset_pe.jsonl";
  save_pe_jsonl(path, {batch});
  std::vector<PEBatch> back = load_pe_jsonl(path);
  REQUIRE(back.size() == 1);
  CHECK(back[0].m == 9);
  REQUIRE(back[0].positives.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) {
    CHECK(back[0].positives[i].k == batch.positives[i].k);
    CHECK(back[0].positives[i].response == batch.positives[i].response);
  }
  CHECK(back[0].negatives.size() == 12);  // derived at load time
  std::remove(path.c_str());
}

TEST_CASE("build_otm collects n distinct responses via list prompting") {
  std::vector<OTOSample> oto(2);
  oto[0] = {"d1", "Want to grab lunch?", "Sure!", nlohmann::json::object()};
  oto[1] = {"d2", "How is the project going?", "Slowly.", nlohmann::json::object()};
  MockScript script;
  // First prompt parses cleanly; the second needs a retry, then still yields
  // duplicates and is skipped.
  script.sequence = {
      "1. Sure!\n2. Sorry, I can't today.\n3. Already ate.\n4. Where at?",
      "no numbered list",
      "1. Slowly.\n2. Slowly.\n3. Slowly.\n4. Slowly.",
      "1. Slowly.\n2. Slowly.\n3. Slowly.\n4. Slowly.",
  };
  auto client = install_mock(script);
  BuildOtmResult result = build_otm(oto, 4, *client, 1);
  REQUIRE(result.samples.size() == 1);
  CHECK(result.samples[0].id == "d1");
  CHECK(result.samples[0].responses.size() == 4);
  REQUIRE(result.skipped.size() == 1);
  CHECK(result.skipped[0].find("d2") == 0);
}

TEST_CASE("write_lines_atomic creates parent directories") {
  const std::string path = "test_dataset_dir/sub/file.jsonl";
  write_lines_atomic(path, {"one", "two"});
  std::ifstream in(path);
  REQUIRE(in);
  std::string l1, l2;
  std::getline(in, l1);
  std::getline(in, l2);
  CHECK(l1 == "one");
  CHECK(l2 == "two");
  in.close();
  std::filesystem::remove_all("test_dataset_dir");
}
