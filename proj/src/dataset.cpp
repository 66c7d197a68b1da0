#include "pexplore/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <regex>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include "pexplore/client.hpp"
#include "pexplore/prompts.hpp"

namespace pexplore {

namespace {

std::vector<std::string> split_lines(const std::string& text) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : text) {
    if (c == '\n') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur += c;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  return out;
}

std::string trim(const std::string& s) {
  std::size_t a = 0, b = s.size();
  while (a < b && std::isspace(static_cast<unsigned char>(s[a]))) ++a;
  while (b > a && std::isspace(static_cast<unsigned char>(s[b - 1]))) --b;
  return s.substr(a, b - a);
}

void check_distinct_positives(const std::vector<PEPositive>& positives, const char* who) {
  std::set<int> ks;
  std::set<std::string> rs;
  for (const auto& p : positives) {
    if (!ks.insert(p.k).second)
      throw std::invalid_argument(std::string(who) + ": duplicate possibility number " +
                                  std::to_string(p.k));
    if (!rs.insert(normalized_response_key(p.response)).second)
      throw std::invalid_argument(std::string(who) + ": duplicate response \"" + p.response +
                                  "\"");
  }
}

}  // namespace

std::string normalized_response_key(const std::string& text) {
  std::string out;
  bool pending_space = false;
  for (char c : text) {
    if (std::isspace(static_cast<unsigned char>(c))) {
      pending_space = !out.empty();
      continue;
    }
    if (pending_space) {
      out += ' ';
      pending_space = false;
    }
    out += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  }
  return out;
}

std::vector<std::string> parse_list_response(const std::string& completion, int n) {
  static const std::regex item_re(R"(^\s*[0-9]+[.)]\s*(.*?)\s*$)");
  std::vector<std::string> items;
  for (const std::string& line : split_lines(completion)) {
    std::smatch m;
    if (std::regex_match(line, m, item_re)) {
      std::string item = m[1].str();
      if (!item.empty()) items.push_back(std::move(item));
      if (static_cast<int>(items.size()) == n) break;
    }
  }
  if (items.empty())
    throw std::runtime_error("parse_list_response: no numbered items in completion");
  return items;
}

std::vector<PEPositive> assign_possibility_numbers(const OTMSample& otm, int m, Rng& rng) {
  const int n = static_cast<int>(otm.responses.size());
  if (m <= n)
    throw std::invalid_argument("assign_possibility_numbers: m must exceed the response count (m=" +
                                std::to_string(m) + ", N=" + std::to_string(n) + ")");
  // Partial Fisher-Yates over [1..m]: first n entries are a uniform draw
  // without replacement.
  std::vector<int> pool(static_cast<std::size_t>(m));
  for (int i = 0; i < m; ++i) pool[static_cast<std::size_t>(i)] = i + 1;
  std::vector<PEPositive> out;
  out.reserve(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    const std::size_t j =
        static_cast<std::size_t>(i) +
        static_cast<std::size_t>(uniform_below(rng, static_cast<std::uint64_t>(m - i)));
    std::swap(pool[static_cast<std::size_t>(i)], pool[j]);
    out.push_back({pool[static_cast<std::size_t>(i)], otm.responses[static_cast<std::size_t>(i)]});
  }
  return out;
}

std::vector<PENegative> make_negatives(const std::vector<PEPositive>& positives) {
  check_distinct_positives(positives, "make_negatives");
  std::vector<PENegative> out;
  const std::size_t n = positives.size();
  if (n >= 2) out.reserve(n * (n - 1));
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      if (i == j) continue;
      out.push_back({positives[j].k, positives[i].response});
    }
  return out;
}

PEBatch make_pe_batch(const OTMSample& otm, int m, Rng& rng) {
  PEBatch batch;
  batch.id = otm.id;
  batch.prompt = otm.prompt;
  batch.m = m;
  batch.positives = assign_possibility_numbers(otm, m, rng);
  batch.negatives = make_negatives(batch.positives);
  return batch;
}

std::vector<std::vector<int>> possibility_classes(int n, int m, std::uint64_t seed) {
  if (n < 2) throw std::invalid_argument("possibility_classes: n must be >= 2");
  if (m <= n) throw std::invalid_argument("possibility_classes: need m > n");
  Rng rng(splitmix64(seed));
  std::vector<int> pool(static_cast<std::size_t>(m));
  for (int k = 1; k <= m; ++k) pool[static_cast<std::size_t>(k - 1)] = k;
  for (std::size_t i = pool.size() - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(uniform_below(rng, i + 1));
    std::swap(pool[i], pool[j]);
  }
  std::vector<std::vector<int>> classes(static_cast<std::size_t>(n));
  for (int i = 0; i < m; ++i)
    classes[static_cast<std::size_t>(i % n)].push_back(pool[static_cast<std::size_t>(i)]);
  // The round-robin deal always hands the larger classes to the first slots;
  // shuffling the slots spreads the size imbalance across responses.
  for (std::size_t i = classes.size() - 1; i > 0; --i) {
    const std::size_t j = static_cast<std::size_t>(uniform_below(rng, i + 1));
    std::swap(classes[i], classes[j]);
  }
  for (auto& c : classes) std::sort(c.begin(), c.end());
  return classes;
}

PEBatch resample_pe_batch(const PEBatch& batch, std::uint64_t map_seed, Rng& rng) {
  const int n = static_cast<int>(batch.positives.size());
  const std::vector<std::vector<int>> classes = possibility_classes(n, batch.m, map_seed);
  PEBatch out;
  out.id = batch.id;
  out.prompt = batch.prompt;
  out.m = batch.m;
  out.positives.reserve(batch.positives.size());
  for (int i = 0; i < n; ++i) {
    const std::vector<int>& cls = classes[static_cast<std::size_t>(i)];
    const int k = cls[static_cast<std::size_t>(uniform_below(rng, cls.size()))];
    out.positives.push_back({k, batch.positives[static_cast<std::size_t>(i)].response});
  }
  out.negatives = make_negatives(out.positives);
  return out;
}

BuildOtmResult build_otm(const std::vector<OTOSample>& oto, int n, ChatClient& client,
                         int retries) {
  if (n < 2) throw std::invalid_argument("build_otm: n must be >= 2");
  BuildOtmResult result;
  for (const auto& sample : oto) {
    PromptContext ctx;
    std::string dialogue = render_dialogue(split_lines(sample.prompt), 'A');
    if (!dialogue.empty() && dialogue.back() == '\n') dialogue.pop_back();
    ctx.task_description =
        "predict the next response for Person B in this conversation:\n" + dialogue;
    ctx.n = n;
    const std::string prompt_text = render_prompt(PromptKind::list_prompt, ctx);

    std::string failure = "no attempt made";
    bool done = false;
    for (int attempt = 0; attempt <= retries && !done; ++attempt) {
      const std::string completion = client.chat({{"user", prompt_text}});
      std::vector<std::string> items;
      try {
        items = parse_list_response(completion, n);
      } catch (const std::exception& e) {
        failure = e.what();
        continue;
      }
      if (static_cast<int>(items.size()) < n) {
        failure = "only " + std::to_string(items.size()) + " of " + std::to_string(n) +
                  " items parsed";
        continue;
      }
      std::unordered_set<std::string> keys;
      for (const auto& item : items) keys.insert(normalized_response_key(item));
      if (static_cast<int>(keys.size()) < n) {
        failure = "duplicate responses in completion";
        continue;
      }
      result.samples.push_back({sample.id, sample.prompt, std::move(items), {}});
      done = true;
    }
    if (!done) result.skipped.push_back(sample.id + ": " + failure);
  }
  return result;
}

std::vector<OTMSample> make_synthetic_otm(int num_prompts, int n, std::uint64_t seed) {
  static const std::vector<std::string> adjectives = {
      "quiet",  "busy",    "rainy",  "sunny",  "crowded", "empty",  "modern",
      "ancient", "noisy",  "peaceful", "colorful", "plain", "fancy", "simple",
      "chilly", "warm",    "distant", "nearby", "famous", "hidden"};
  static const std::vector<std::string> nouns = {
      "mornings", "evenings", "markets",  "libraries", "gardens",  "kitchens", "trains",
      "beaches",  "museums",  "forests",  "cafes",     "rooftops", "villages", "harbors",
      "meadows",  "stadiums", "bridges",  "bakeries",  "islands",  "workshops"};
  // One pattern per response slot; first words differ so the ground-truth
  // responses of a prompt are easy to tell apart.
  static const std::vector<std::string> heads = {"I find ",          "My feelings about ",
                                                 "Well, ",           "Honestly, ",
                                                 "Some friends adore ", "People often misjudge ",
                                                 "Frankly, ",        "Maybe "};
  static const std::vector<std::string> tails = {" truly delightful.",
                                                 " are complicated.",
                                                 " always surprise me.",
                                                 " seem overrated.",
                                                 " on weekends.",
                                                 " at first.",
                                                 " feel exhausting.",
                                                 " deserve more attention."};

  if (n < 2) throw std::invalid_argument("make_synthetic_otm: n must be >= 2");
  if (n > static_cast<int>(heads.size()))
    throw std::invalid_argument("make_synthetic_otm: at most " + std::to_string(heads.size()) +
                                " responses per prompt are available");
  const int max_prompts = static_cast<int>(adjectives.size() * nouns.size());
  if (num_prompts < 1 || num_prompts > max_prompts)
    throw std::invalid_argument("make_synthetic_otm: num_prompts must be in [1.." +
                                std::to_string(max_prompts) + "]");

  std::vector<std::pair<int, int>> combos;
  combos.reserve(static_cast<std::size_t>(max_prompts));
  for (std::size_t a = 0; a < adjectives.size(); ++a)
    for (std::size_t b = 0; b < nouns.size(); ++b)
      combos.emplace_back(static_cast<int>(a), static_cast<int>(b));
  Rng rng = derive_rng(seed, 0x5e7);
  for (std::size_t i = combos.size() - 1; i > 0; --i) {
    const std::size_t j =
        static_cast<std::size_t>(uniform_below(rng, static_cast<std::uint64_t>(i + 1)));
    std::swap(combos[i], combos[j]);
  }

  std::vector<OTMSample> out;
  out.reserve(static_cast<std::size_t>(num_prompts));
  for (int p = 0; p < num_prompts; ++p) {
    const auto& [a, b] = combos[static_cast<std::size_t>(p)];
    const std::string topic = adjectives[static_cast<std::size_t>(a)] + " " +
                              nouns[static_cast<std::size_t>(b)];
    OTMSample sample;
    char idbuf[16];
    std::snprintf(idbuf, sizeof(idbuf), "syn-%04d", p);
    sample.id = idbuf;
    sample.prompt = "What do you think about " + topic + "?";
    for (int j = 0; j < n; ++j)
      sample.responses.push_back(heads[static_cast<std::size_t>(j)] + topic +
                                 tails[static_cast<std::size_t>(j)]);
    out.push_back(std::move(sample));
  }
  return out;
}

// ------------------------------- JSONL  I/O ---------------------------------

namespace {

using nlohmann::json;

std::string require_string(const json& j, const char* key, bool nonempty) {
  if (!j.contains(key) || !j.at(key).is_string())
    throw std::runtime_error(std::string("missing or non-string field \"") + key + "\"");
  std::string v = j.at(key).get<std::string>();
  if (nonempty && v.empty())
    throw std::runtime_error(std::string("field \"") + key + "\" must be nonempty");
  return v;
}

json strip_keys(json obj, std::initializer_list<const char*> keys) {
  for (const char* k : keys) obj.erase(k);
  return obj;
}

// Parses every line of a JSONL file through `parse_record`; strict mode
// throws on the first bad line, lenient mode collects errors and skips.
template <typename Record, typename ParseFn>
std::vector<Record> load_jsonl_impl(const std::string& path, bool lenient,
                                    std::vector<JsonlError>* errors, ParseFn&& parse_record) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<Record> out;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (trim(line).empty()) continue;
    try {
      json j = json::parse(line);
      if (!j.is_object()) throw std::runtime_error("line is not a JSON object");
      out.push_back(parse_record(j));
    } catch (const std::exception& e) {
      if (!lenient)
        throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
      if (errors) errors->push_back({lineno, e.what()});
    }
  }
  return out;
}

}  // namespace

std::vector<OTOSample> load_oto_jsonl(const std::string& path, bool lenient,
                                      std::vector<JsonlError>* errors) {
  return load_jsonl_impl<OTOSample>(path, lenient, errors, [](const json& j) {
    OTOSample s;
    s.id = require_string(j, "id", false);
    s.prompt = require_string(j, "prompt", true);
    s.response = require_string(j, "response", true);
    s.extra = strip_keys(j, {"id", "prompt", "response"});
    return s;
  });
}

std::vector<OTMSample> load_otm_jsonl(const std::string& path, bool lenient,
                                      std::vector<JsonlError>* errors) {
  return load_jsonl_impl<OTMSample>(path, lenient, errors, [](const json& j) {
    OTMSample s;
    s.id = require_string(j, "id", false);
    s.prompt = require_string(j, "prompt", true);
    if (!j.contains("responses") || !j.at("responses").is_array())
      throw std::runtime_error("missing or non-array field \"responses\"");
    for (const auto& r : j.at("responses")) {
      if (!r.is_string()) throw std::runtime_error("responses entries must be strings");
      s.responses.push_back(r.get<std::string>());
    }
    if (s.responses.size() < 2) throw std::runtime_error("responses must have at least 2 entries");
    std::unordered_set<std::string> keys;
    for (const auto& r : s.responses)
      if (!keys.insert(normalized_response_key(r)).second)
        throw std::runtime_error("responses must be pairwise distinct");
    s.extra = strip_keys(j, {"id", "prompt", "responses"});
    return s;
  });
}

std::vector<PEBatch> load_pe_jsonl(const std::string& path, bool lenient,
                                   std::vector<JsonlError>* errors) {
  return load_jsonl_impl<PEBatch>(path, lenient, errors, [](const json& j) {
    PEBatch b;
    b.id = require_string(j, "id", false);
    b.prompt = require_string(j, "prompt", true);
    if (!j.contains("m") || !j.at("m").is_number_integer())
      throw std::runtime_error("missing or non-integer field \"m\"");
    b.m = j.at("m").get<int>();
    if (!j.contains("items") || !j.at("items").is_array())
      throw std::runtime_error("missing or non-array field \"items\"");
    for (const auto& item : j.at("items")) {
      if (!item.is_object() || !item.contains("k") || !item.at("k").is_number_integer())
        throw std::runtime_error("items entries need an integer \"k\"");
      PEPositive p;
      p.k = item.at("k").get<int>();
      p.response = require_string(item, "response", true);
      if (p.k < 1 || p.k > b.m)
        throw std::runtime_error("possibility number " + std::to_string(p.k) +
                                 " outside [1..m]");
      b.positives.push_back(std::move(p));
    }
    if (b.m <= static_cast<int>(b.positives.size()))
      throw std::runtime_error("m must exceed the number of positives");
    b.negatives = make_negatives(b.positives);  // also validates distinctness
    return b;
  });
}

void write_lines_atomic(const std::string& path, const std::vector<std::string>& lines) {
  const std::filesystem::path p(path);
  if (p.has_parent_path()) std::filesystem::create_directories(p.parent_path());
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot open " + tmp);
    for (const auto& line : lines) {
      out << line << '\n';
    }
    if (!out) throw std::runtime_error("write failed for " + tmp);
  }
  std::filesystem::rename(tmp, path);
}

void save_oto_jsonl(const std::string& path, const std::vector<OTOSample>& samples) {
  std::vector<std::string> lines;
  lines.reserve(samples.size());
  for (const auto& s : samples) {
    json j = s.extra;
    j["id"] = s.id;
    j["prompt"] = s.prompt;
    j["response"] = s.response;
    lines.push_back(j.dump());
  }
  write_lines_atomic(path, lines);
}

void save_otm_jsonl(const std::string& path, const std::vector<OTMSample>& samples) {
  std::vector<std::string> lines;
  lines.reserve(samples.size());
  for (const auto& s : samples) {
    json j = s.extra;
    j["id"] = s.id;
    j["prompt"] = s.prompt;
    j["responses"] = s.responses;
    lines.push_back(j.dump());
  }
  write_lines_atomic(path, lines);
}

void save_pe_jsonl(const std::string& path, const std::vector<PEBatch>& batches) {
  std::vector<std::string> lines;
  lines.reserve(batches.size());
  for (const auto& b : batches) {
    json items = json::array();
    for (const auto& p : b.positives) items.push_back({{"k", p.k}, {"response", p.response}});
    json j{{"id", b.id}, {"prompt", b.prompt}, {"items", std::move(items)}, {"m", b.m}};
    lines.push_back(j.dump());
  }
  write_lines_atomic(path, lines);
}

}  // namespace pexplore
