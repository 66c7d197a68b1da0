#include "pexplore/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <functional>
#include <regex>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

#include "pexplore/prompts.hpp"

namespace pexplore {

Vec<double> HashedNgramEmbedder::embed(const std::string& text) const {
  Vec<double> v = Vec<double>::Zero(kDim);
  if (text.size() >= 3) {
    for (std::size_t i = 0; i + 3 <= text.size(); ++i)
      v(static_cast<int>(fnv1a64(text.data() + i, 3) % kDim)) += 1.0;
  } else {
    v(static_cast<int>(fnv1a64(text.data(), text.size()) % kDim)) += 1.0;
  }
  const double norm = v.norm();
  if (norm > 0) v /= norm;
  return v;
}

std::unique_ptr<Embedder> default_embedder() { return std::make_unique<HashedNgramEmbedder>(); }

std::vector<std::string> metric_tokens(const std::string& text) {
  std::vector<std::string> tokens;
  std::string cur;
  auto flush = [&] {
    if (!cur.empty()) {
      tokens.push_back(cur);
      cur.clear();
    }
  };
  for (unsigned char c : text) {
    if (std::isspace(c)) {
      flush();
    } else if (std::isalnum(c) || c >= 128) {
      cur += static_cast<char>(std::tolower(c));
    } else {
      flush();
      tokens.emplace_back(1, static_cast<char>(c));
    }
  }
  flush();
  return tokens;
}

namespace {

// Appends the n-grams of one response to the pool; the 0x1f separator cannot
// occur inside tokens (it is neither alnum nor printable punctuation output).
void collect_ngrams(const std::string& text, int n, std::vector<std::string>& pool) {
  const std::vector<std::string> toks = metric_tokens(text);
  if (static_cast<int>(toks.size()) < n) return;
  for (std::size_t i = 0; i + static_cast<std::size_t>(n) <= toks.size(); ++i) {
    std::string g = toks[i];
    for (int j = 1; j < n; ++j) {
      g += '\x1f';
      g += toks[i + static_cast<std::size_t>(j)];
    }
    pool.push_back(std::move(g));
  }
}

double distinct_ratio(const std::vector<std::string>& pool) {
  std::unordered_set<std::string> uniq(pool.begin(), pool.end());
  return static_cast<double>(uniq.size()) / static_cast<double>(pool.size());
}

double mean_pairwise_cosine(const std::vector<Vec<double>>& embs) {
  double sum = 0;
  int pairs = 0;
  for (std::size_t a = 0; a < embs.size(); ++a) {
    for (std::size_t b = a + 1; b < embs.size(); ++b) {
      const double na = embs[a].norm(), nb = embs[b].norm();
      sum += (na > 0 && nb > 0) ? embs[a].dot(embs[b]) / (na * nb) : 0.0;
      ++pairs;
    }
  }
  return sum / pairs;
}

}  // namespace

double distinct_n(const std::vector<ResponseSet>& sets, int n) {
  if (n != 1 && n != 2) throw std::invalid_argument("distinct_n: n must be 1 or 2");
  if (sets.empty()) throw std::invalid_argument("distinct_n: empty collection");
  std::vector<std::string> pool;
  for (const auto& s : sets)
    for (const auto& r : s.responses) collect_ngrams(r, n, pool);
  if (pool.empty())
    throw std::runtime_error("distinct_n: every response is shorter than " + std::to_string(n) +
                             " tokens");
  return distinct_ratio(pool);
}

double semantic_diversity(const std::vector<ResponseSet>& sets, const Embedder& embedder) {
  if (sets.empty()) throw std::invalid_argument("semantic_diversity: empty collection");
  double total = 0;
  for (const auto& s : sets) {
    if (s.responses.size() < 2)
      throw std::invalid_argument("semantic_diversity: set \"" + s.prompt_id +
                                  "\" needs at least two responses");
    std::vector<Vec<double>> embs;
    embs.reserve(s.responses.size());
    for (const auto& r : s.responses) embs.push_back(embedder.embed(r));
    total += mean_pairwise_cosine(embs);
  }
  return 1.0 - total / static_cast<double>(sets.size());
}

double shannon_entropy(const std::vector<std::string>& values) {
  if (values.empty()) throw std::invalid_argument("shannon_entropy: empty value list");
  std::unordered_map<std::string, int> counts;
  for (const auto& v : values) counts[v] += 1;
  const double n = static_cast<double>(values.size());
  double h = 0;
  for (const auto& [value, count] : counts) {
    (void)value;
    const double p = count / n;
    h -= p * std::log2(p);
  }
  return h;
}

std::optional<int> parse_rating(const std::string& judge_text) {
  static const std::regex pattern(R"(Coherence rating:\s*\[\s*(\d{1,3})\s*\])");
  std::optional<int> last;
  for (auto it = std::sregex_iterator(judge_text.begin(), judge_text.end(), pattern);
       it != std::sregex_iterator(); ++it) {
    const int r = std::stoi((*it)[1].str());
    last = (r >= 1 && r <= 10) ? std::optional<int>(r) : std::nullopt;
  }
  return last;
}

double incoherence_rate(const std::vector<JudgeVerdict>& verdicts) {
  int judged = 0, incoherent = 0;
  for (const auto& v : verdicts) {
    if (v.unparseable) continue;
    ++judged;
    if (v.rating_a < 6 && v.rating_b < 6) ++incoherent;
  }
  if (judged == 0) return 0.0;
  return 100.0 * incoherent / judged;
}

std::vector<JudgeVerdict> judge_responses(
    const std::vector<ResponseSet>& sets,
    const std::function<std::vector<std::string>(const std::string&)>& turns_for,
    ChatClient& judge_a, ChatClient& judge_b) {
  auto ask = [](ChatClient& judge, const std::string& prompt, std::string& raw_out) {
    raw_out = judge.chat({{"user", prompt}});
    std::optional<int> r = parse_rating(raw_out);
    if (!r) {  // one re-query, then give up
      raw_out = judge.chat({{"user", prompt}});
      r = parse_rating(raw_out);
    }
    return r;
  };
  std::vector<JudgeVerdict> verdicts;
  for (const auto& s : sets) {
    PromptContext ctx;
    ctx.turns = turns_for(s.prompt_id);
    for (std::size_t i = 0; i < s.responses.size(); ++i) {
      ctx.response = s.responses[i];
      const std::string prompt = render_prompt(PromptKind::coherence_eval, ctx);
      JudgeVerdict v;
      v.response_id = s.prompt_id + "#" + std::to_string(i);
      const std::optional<int> ra = ask(judge_a, prompt, v.raw_a);
      const std::optional<int> rb = ask(judge_b, prompt, v.raw_b);
      if (ra && rb) {
        v.rating_a = *ra;
        v.rating_b = *rb;
      } else {
        v.unparseable = true;
      }
      verdicts.push_back(std::move(v));
    }
  }
  return verdicts;
}

DiversityReport build_diversity_report(const std::vector<ResponseSet>& sets,
                                       const Embedder& embedder,
                                       const std::vector<JudgeVerdict>& verdicts) {
  DiversityReport rep;
  rep.dist1 = distinct_n(sets, 1);
  rep.dist2 = distinct_n(sets, 2);
  rep.semantic_diversity = semantic_diversity(sets, embedder);
  if (!verdicts.empty()) {
    rep.incoherence_rate = incoherence_rate(verdicts);
    for (const auto& v : verdicts) (v.unparseable ? rep.unparseable : rep.judged)++;
  }
  for (const auto& s : sets) {
    PromptDiversity pd;
    pd.prompt_id = s.prompt_id;
    pd.responses = static_cast<int>(s.responses.size());
    for (int n = 1; n <= 2; ++n) {
      std::vector<std::string> pool;
      for (const auto& r : s.responses) collect_ngrams(r, n, pool);
      if (!pool.empty()) (n == 1 ? pd.dist1 : pd.dist2) = distinct_ratio(pool);
    }
    if (s.responses.size() >= 2) {
      std::vector<Vec<double>> embs;
      for (const auto& r : s.responses) embs.push_back(embedder.embed(r));
      pd.semantic_diversity = 1.0 - mean_pairwise_cosine(embs);
    }
    rep.per_prompt.push_back(std::move(pd));
  }
  return rep;
}

nlohmann::json diversity_report_json(const DiversityReport& report) {
  nlohmann::json j;
  j["dist1"] = report.dist1;
  j["dist2"] = report.dist2;
  j["semantic_diversity"] = report.semantic_diversity;
  j["incoherence_rate"] =
      report.incoherence_rate ? nlohmann::json(*report.incoherence_rate) : nlohmann::json();
  j["judged"] = report.judged;
  j["unparseable"] = report.unparseable;
  j["entropy_base"] = 2;
  j["per_prompt"] = nlohmann::json::array();
  for (const auto& p : report.per_prompt) {
    nlohmann::json e;
    e["prompt_id"] = p.prompt_id;
    e["responses"] = p.responses;
    e["dist1"] = p.dist1 ? nlohmann::json(*p.dist1) : nlohmann::json();
    e["dist2"] = p.dist2 ? nlohmann::json(*p.dist2) : nlohmann::json();
    e["semantic_diversity"] =
        p.semantic_diversity ? nlohmann::json(*p.semantic_diversity) : nlohmann::json();
    j["per_prompt"].push_back(std::move(e));
  }
  return j;
}

}  // namespace pexplore
