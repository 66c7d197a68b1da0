// pexplore: possibility-exploration fine-tuning toolkit.
//
// Subcommands: build-data, train, generate, eval, persona-test. A global
// --seed makes every pipeline bit-reproducible; credentials are read only
// from the environment (PEXPLORE_API_KEY, PEXPLORE_BASE_URL).

#include <chrono>
#include <cstdio>
#include <exception>
#include <fstream>
#include <map>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "pexplore/config.hpp"
#include "pexplore/dataset.hpp"
#include "pexplore/decode.hpp"
#include "pexplore/metrics.hpp"
#include "pexplore/model.hpp"
#include "pexplore/persona.hpp"
#include "pexplore/train.hpp"

namespace px = pexplore;

namespace {

double now_sec() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

// Corpus for tokenizer training: raw dialogue text plus rendered templates so
// instruction words become whole units.
std::vector<std::string> tokenizer_corpus(const std::vector<std::string>& prompts,
                                          const std::vector<std::string>& responses) {
  std::vector<std::string> corpus = prompts;
  corpus.insert(corpus.end(), responses.begin(), responses.end());
  px::PromptContext ctx;
  ctx.turns = {"x"};
  corpus.push_back(px::render_prompt(px::PromptKind::zero_shot, ctx));
  corpus.push_back(px::render_prompt(px::PromptKind::peft, ctx, 1));
  return corpus;
}

struct TrainArgs {
  std::string mode = "peft";
  std::string data_path;
  std::string ckpt_path = "model.ckpt";
  std::string trace_path;
  std::string init_path;
  std::optional<double> alpha;
  std::optional<double> lr;
  std::optional<int> epochs;
};

template <typename T>
void train_with_dtype(const px::RunConfig& cfg, const TrainArgs& args, std::uint64_t seed) {
  const nlohmann::json& training = cfg.section("training");
  nlohmann::json resolved_training = training;
  if (args.alpha) resolved_training["alpha"] = *args.alpha;
  if (args.lr) resolved_training["lr"] = *args.lr;
  if (args.epochs) resolved_training["epochs"] = *args.epochs;
  resolved_training["mode"] = args.mode;

  px::TrainOptions topt = px::train_options_from_config(resolved_training, seed);
  topt.save_path = args.ckpt_path;
  px::Optimizer<T> opt =
      px::make_optimizer<T>(px::optimizer_from_config(resolved_training));

  // Assemble the corpus and the model (fresh vocabulary unless continuing
  // from an existing checkpoint).
  std::vector<std::string> prompts, responses;
  std::vector<px::OTOSample> oto;
  std::vector<px::OTMSample> otm;
  std::vector<px::PEBatch> pe;
  if (args.mode == "otoft") {
    oto = px::load_oto_jsonl(args.data_path);
    for (const auto& s : oto) {
      prompts.push_back(s.prompt);
      responses.push_back(s.response);
    }
  } else if (args.mode == "otmft") {
    otm = px::load_otm_jsonl(args.data_path);
    for (const auto& s : otm) {
      prompts.push_back(s.prompt);
      for (const auto& r : s.responses) responses.push_back(r);
    }
  } else {
    pe = px::load_pe_jsonl(args.data_path);
    for (const auto& b : pe) {
      prompts.push_back(b.prompt);
      for (const auto& p : b.positives) responses.push_back(p.response);
    }
  }

  px::Model<T> model;
  if (!args.init_path.empty()) {
    model = px::load_checkpoint<T>(args.init_path);
  } else {
    px::Vocabulary vocab = px::train_tokenizer(
        tokenizer_corpus(prompts, responses), cfg.section("data").at("vocab_size").get<int>());
    px::ModelArch arch = px::arch_from_config(cfg.section("model"));
    arch.vocab_size = static_cast<int>(vocab.units.size());
    model = px::make_model<T>(arch, vocab, seed);
  }

  const double t0 = now_sec();
  px::TrainResult result;
  if (args.mode == "otoft") {
    result = px::run_training(oto, model, opt, topt);
  } else if (args.mode == "otmft") {
    result = px::run_training(otm, model, opt, topt);
  } else {
    result = px::run_training(pe, model, opt, topt);
  }
  const double dt = now_sec() - t0;

  nlohmann::json resolved = cfg.tree;
  resolved["training"] = resolved_training;
  px::write_meta_sidecar(args.ckpt_path, resolved, seed);
  if (!args.trace_path.empty()) {
    px::write_lines_atomic(args.trace_path, px::trace_jsonl(result.trace));
    px::write_meta_sidecar(args.trace_path, resolved, seed);
  }
  std::printf("trained %s: %zu steps in %.1fs", args.mode.c_str(), result.trace.size(), dt);
  if (!result.trace.empty()) std::printf(", final combined %.4f", result.trace.back().combined);
  if (result.truncated_sequences > 0)
    std::printf(", %d truncated sequences", result.truncated_sequences);
  if (result.skipped_steps > 0) std::printf(", %d skipped steps", result.skipped_steps);
  std::printf("\ncheckpoint: %s\n", args.ckpt_path.c_str());
}

// Prompt list for generation/eval: id + dialogue turns.
struct PromptEntry {
  std::string id;
  std::vector<std::string> turns;
  std::vector<std::string> trained;  // ground-truth responses when known
};

std::vector<PromptEntry> load_prompts(const std::string& data_path,
                                      const std::string& inline_prompt) {
  std::vector<PromptEntry> out;
  if (!inline_prompt.empty()) {
    out.push_back({"cli-prompt", px::prompt_turns(inline_prompt), {}});
    return out;
  }
  // Accept either OTM or OTO records.
  std::vector<px::JsonlError> errors;
  std::vector<px::OTMSample> otm = px::load_otm_jsonl(data_path, true, &errors);
  if (!otm.empty() && errors.empty()) {
    for (const auto& s : otm) out.push_back({s.id, px::prompt_turns(s.prompt), s.responses});
    return out;
  }
  std::vector<px::OTOSample> oto = px::load_oto_jsonl(data_path);
  for (const auto& s : oto) out.push_back({s.id, px::prompt_turns(s.prompt), {s.response}});
  return out;
}

int cmd_build_data(const px::RunConfig& cfg, std::uint64_t seed, bool synthetic,
                   const std::string& oto_path, const std::string& out_otm,
                   const std::string& out_pe) {
  const nlohmann::json& data = cfg.section("data");
  const int n = data.at("n").get<int>();
  const int m = data.at("m").get<int>();

  std::vector<px::OTMSample> otm;
  if (synthetic) {
    otm = px::make_synthetic_otm(data.at("synthetic_prompts").get<int>(), n, seed);
  } else {
    if (oto_path.empty())
      throw std::runtime_error("build-data: need --oto FILE or --synthetic");
    std::vector<px::OTOSample> oto = px::load_oto_jsonl(oto_path);
    px::HttpChatClient client(px::client_from_config(cfg.section("client")));
    px::BuildOtmResult built = px::build_otm(oto, n, client, data.at("retries").get<int>());
    otm = std::move(built.samples);
    if (!built.skipped.empty())
      std::fprintf(stderr, "build-data: skipped %zu prompts (parse/dedup failures)\n",
                   built.skipped.size());
  }
  if (!out_otm.empty()) {
    px::save_otm_jsonl(out_otm, otm);
    px::write_meta_sidecar(out_otm, cfg.tree, seed);
  }
  if (!out_pe.empty()) {
    std::vector<px::PEBatch> batches;
    px::Rng krng = px::derive_rng(seed, 0x9e);
    for (const auto& s : otm) batches.push_back(px::make_pe_batch(s, m, krng));
    px::save_pe_jsonl(out_pe, batches);
    px::write_meta_sidecar(out_pe, cfg.tree, seed);
  }
  std::printf("build-data: %zu prompts x %d responses (m=%d)\n", otm.size(), n, m);
  return 0;
}

template <typename T>
int generate_with_model(const px::RunConfig& cfg, std::uint64_t seed, const px::Model<T>& model,
                        const std::vector<PromptEntry>& prompts, bool multi, int num,
                        std::optional<double> t_override, const std::string& decoder_override,
                        const std::string& out_path) {
  nlohmann::json decoding = cfg.section("decoding");
  if (t_override) decoding["temperature"] = *t_override;
  if (!decoder_override.empty()) decoding["decoder"] = decoder_override;
  if (num > 0) decoding["count"] = num;

  std::vector<std::string> lines;
  int responses = 0;
  const double t0 = now_sec();
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    const PromptEntry& p = prompts[i];
    const std::uint64_t prompt_seed = px::splitmix64(seed ^ px::splitmix64(i));
    nlohmann::json base{{"prompt_id", p.id},
                        {"decoder", decoding.at("decoder").get<std::string>()},
                        {"t", decoding.at("temperature").get<double>()},
                        {"seed", prompt_seed}};
    if (multi) {
      px::MultiGenConfig mg = px::multigen_from_config(decoding, prompt_seed);
      for (const auto& pr : px::generate_multi(model, p.turns, mg)) {
        nlohmann::json j = base;
        j["k"] = pr.k;
        j["response"] = pr.response;
        lines.push_back(j.dump());
        ++responses;
      }
    } else {
      px::PromptContext ctx;
      ctx.turns = p.turns;
      const std::string prompt_text = px::render_prompt(px::PromptKind::zero_shot, ctx);
      px::GenerationConfig g = px::generation_from_config(decoding, prompt_seed);
      if (g.decoder == px::DecoderKind::dbs) {
        for (const std::string& text : px::decode_text_groups(model, prompt_text, g)) {
          nlohmann::json j = base;
          j["k"] = nullptr;
          j["response"] = text;
          lines.push_back(j.dump());
          ++responses;
        }
      } else {
        const int count = num > 0 ? num : decoding.at("count").get<int>();
        for (int s = 0; s < count; ++s) {
          px::GenerationConfig gs = g;
          gs.seed = px::splitmix64(prompt_seed ^ px::splitmix64(0x51ee + s));
          nlohmann::json j = base;
          j["k"] = nullptr;
          j["seed"] = gs.seed;
          j["response"] = px::decode_text(model, prompt_text, gs);
          lines.push_back(j.dump());
          ++responses;
        }
      }
    }
  }
  const double dt = now_sec() - t0;
  px::write_lines_atomic(out_path, lines);
  nlohmann::json resolved = cfg.tree;
  resolved["decoding"] = decoding;
  px::write_meta_sidecar(out_path, resolved, seed);
  std::printf("generated %d responses for %zu prompts -> %s\n", responses, prompts.size(),
              out_path.c_str());
  if (responses > 0)
    std::printf("latency: %.2f ms per response (wall clock)\n", 1000.0 * dt / responses);
  return 0;
}

int cmd_eval(const px::RunConfig& cfg, std::uint64_t seed, const std::string& responses_path,
             const std::string& data_path, const std::string& judges,
             const std::string& out_path) {
  // Group generations by prompt id, keeping first-seen order.
  std::ifstream in(responses_path);
  if (!in) throw std::runtime_error("cannot open responses: " + responses_path);
  std::map<std::string, std::size_t> index;
  std::vector<px::ResponseSet> sets;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const std::exception& e) {
      throw std::runtime_error(responses_path + ":" + std::to_string(lineno) + ": " + e.what());
    }
    const std::string id = j.at("prompt_id").get<std::string>();
    auto [it, fresh] = index.emplace(id, sets.size());
    if (fresh) sets.push_back({id, {}});
    sets[it->second].responses.push_back(j.at("response").get<std::string>());
  }
  if (sets.empty()) throw std::runtime_error("eval: no responses in " + responses_path);

  std::map<std::string, std::vector<std::string>> turns_by_id;
  if (!data_path.empty())
    for (const auto& p : load_prompts(data_path, ""))
      turns_by_id[p.id] = p.turns;

  std::vector<px::JudgeVerdict> verdicts;
  std::unique_ptr<px::ChatClient> judge_a, judge_b;
  if (judges == "mock") {
    px::MockScript script;
    script.matchers.push_back({"", "Coherence assessment: coherent. Coherence rating: [8]"});
    judge_a = px::install_mock(script);
    judge_b = px::install_mock(script);
  } else if (judges == "http") {
    judge_a = std::make_unique<px::HttpChatClient>(px::client_from_config(cfg.section("client")));
    judge_b = std::make_unique<px::HttpChatClient>(px::client_from_config(cfg.section("client")));
  } else if (judges != "none") {
    throw std::runtime_error("eval: --judges must be none, mock, or http");
  }
  const double t0 = now_sec();
  if (judge_a) {
    if (turns_by_id.empty())
      throw std::runtime_error("eval: judging requires --data for conversation context");
    verdicts = px::judge_responses(
        sets,
        [&](const std::string& id) {
          auto it = turns_by_id.find(id);
          if (it == turns_by_id.end())
            throw std::runtime_error("eval: no conversation for prompt id " + id);
          return it->second;
        },
        *judge_a, *judge_b);
  }

  px::HashedNgramEmbedder embedder;
  px::DiversityReport report = px::build_diversity_report(sets, embedder, verdicts);
  const double dt = now_sec() - t0;
  int total_responses = 0;
  for (const auto& s : sets) total_responses += static_cast<int>(s.responses.size());

  nlohmann::json j = px::diversity_report_json(report);
  j["meta"] = px::artifact_meta(cfg.tree, seed);
  j["latency_ms_per_response"] = total_responses > 0 ? 1000.0 * dt / total_responses : 0.0;
  px::write_lines_atomic(out_path, {j.dump(2)});
  std::printf("eval: dist1 %.4f dist2 %.4f diversity %.4f", report.dist1, report.dist2,
              report.semantic_diversity);
  if (report.incoherence_rate) std::printf(" incoherence %.2f%%", *report.incoherence_rate);
  std::printf(" -> %s\n", out_path.c_str());
  return 0;
}

std::vector<std::vector<std::string>> seed_quads(const std::string& seeds_path,
                                                 const std::string& data_path) {
  std::vector<std::vector<std::string>> quads;
  if (!seeds_path.empty()) {
    std::ifstream in(seeds_path);
    if (!in) throw std::runtime_error("cannot open seeds: " + seeds_path);
    std::string line;
    int lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.find_first_not_of(" \t\r\n") == std::string::npos) continue;
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(line);
      } catch (const std::exception& e) {
        throw std::runtime_error(seeds_path + ":" + std::to_string(lineno) + ": " + e.what());
      }
      std::vector<std::string> quad;
      for (const auto& s : j.at("seeds")) quad.push_back(s.get<std::string>());
      if (quad.size() != 4)
        throw std::runtime_error(seeds_path + ":" + std::to_string(lineno) +
                                 ": need exactly 4 seeds");
      quads.push_back(std::move(quad));
    }
  } else if (!data_path.empty()) {
    for (const auto& s : px::load_otm_jsonl(data_path)) {
      if (s.responses.size() < 3) continue;
      quads.push_back({s.prompt, s.responses[0], s.responses[1], s.responses[2]});
    }
  }
  if (quads.empty())
    throw std::runtime_error("persona-test: need seed utterances (--seeds or --data)");
  return quads;
}

int cmd_persona(const px::RunConfig& cfg, std::uint64_t seed, const std::string& ckpt,
                bool mock, int conversations_flag, const std::string& seeds_path,
                const std::string& data_path, const std::string& attributes_dir_flag,
                const std::string& out_transcripts, const std::string& out_records,
                const std::string& out_report) {
  const nlohmann::json& pcfg = cfg.section("persona");
  const int conversations =
      conversations_flag > 0 ? conversations_flag : pcfg.at("conversations").get<int>();
  const int total_turns = pcfg.at("total_turns").get<int>();
  const std::string attributes_dir =
      attributes_dir_flag.empty() ? pcfg.at("attributes_dir").get<std::string>()
                                  : attributes_dir_flag;

  px::Model<float> model = px::load_checkpoint<float>(ckpt);
  px::GenerationConfig gen;
  gen.decoder = px::DecoderKind::sample;
  gen.temperature = pcfg.at("temperature").get<double>();
  gen.max_new_tokens = cfg.section("decoding").at("max_new_tokens").get<int>();
  gen.seed = seed;
  px::ModelRevealer<float> revealer(model, pcfg.at("count").get<int>(), pcfg.at("m").get<int>(),
                                    gen);

  std::unique_ptr<px::ChatClient> seeker, extractor;
  px::ChatClient* normalizer = nullptr;
  std::unique_ptr<px::ChatClient> normalizer_owned;
  if (mock) {
    // Deterministic offline stand-ins: a rotating list of seeker questions
    // and canned extraction forms.
    const char* questions[] = {
        "That sounds interesting! Where do you live these days?",
        "How old are you, if you don't mind me asking?",
        "What do you do for a living?",
        "What level of education do you have?",
        "This is slightly off-topic, but could you let me know your preferred gender?",
        "Do you enjoy your line of work?",
        "Have you always lived there?",
        "What did you study?",
    };
    const char* extractions[] = {
        "Age: 35\nGender: Male\nPlace of birth (country): None\nCurrent country of residence: "
        "United States\nHighest education: Bachelor\nOccupation: sales rep\nOccupation sector: "
        "Sales",
        "Age: 28\nGender: Female\nPlace of birth (country): None\nCurrent country of residence: "
        "U.S.\nHighest education: Master\nOccupation: software engineer\nOccupation sector: None",
        "Age: None\nGender: None\nPlace of birth (country): None\nCurrent country of residence: "
        "None\nHighest education: None\nOccupation: None\nOccupation sector: None",
        "Age: 41\nGender: Male\nPlace of birth (country): None\nCurrent country of residence: "
        "United Kingdom\nHighest education: PhD\nOccupation: professor\nOccupation sector: "
        "Teacher training and education",
        "Age: 52\nGender: Female\nPlace of birth (country): None\nCurrent country of residence: "
        "America\nHighest education: High school\nOccupation: shop owner\nOccupation sector: "
        "Retail",
    };
    px::MockScript seeker_script;
    const int per_conv = (total_turns - 4 + 1) / 2;
    for (int c = 0; c < conversations; ++c)
      for (int q = 0; q < per_conv; ++q)
        seeker_script.sequence.push_back(questions[q % 8]);
    seeker = px::install_mock(seeker_script);
    px::MockScript ext_script;
    for (int c = 0; c < conversations; ++c)
      ext_script.sequence.push_back(extractions[c % 5]);
    extractor = px::install_mock(ext_script);
  } else {
    px::ClientConfig ccfg = px::client_from_config(cfg.section("client"));
    seeker = std::make_unique<px::HttpChatClient>(ccfg);
    extractor = std::make_unique<px::HttpChatClient>(ccfg);
    normalizer_owned = std::make_unique<px::HttpChatClient>(ccfg);
    normalizer = normalizer_owned.get();
  }

  const std::vector<std::vector<std::string>> quads = seed_quads(seeds_path, data_path);
  const px::AttributeVocabularies vocabs = px::load_attribute_vocabularies(attributes_dir);

  std::vector<px::Transcript> transcripts;
  std::vector<px::PersonaRecord> records;
  for (int c = 0; c < conversations; ++c) {
    char id[32];
    std::snprintf(id, sizeof id, "conv-%04d", c);
    px::Rng rng = px::derive_rng(seed, 0x700 + static_cast<std::uint64_t>(c));
    px::Transcript t = px::run_conversation(
        revealer, *seeker, quads[static_cast<std::size_t>(c) % quads.size()], total_turns, rng,
        id);
    if (!t.failed) {
      px::RawAttributes raw = px::extract_attributes(t, *extractor);
      records.push_back(px::make_persona_record(t.conversation_id, raw, vocabs, normalizer));
    }
    transcripts.push_back(std::move(t));
  }

  px::save_transcripts_jsonl(out_transcripts, transcripts);
  px::write_meta_sidecar(out_transcripts, cfg.tree, seed);
  px::save_persona_records_jsonl(out_records, records);
  px::write_meta_sidecar(out_records, cfg.tree, seed);
  px::PersonaReport report = px::persona_report(records);
  nlohmann::json j = px::persona_report_json(report);
  j["meta"] = px::artifact_meta(cfg.tree, seed);
  px::write_lines_atomic(out_report, {j.dump(2)});

  std::printf("persona-test: %d conversations, %zu records", conversations, records.size());
  if (report.average_entropy) std::printf(", mean entropy %.4f bits", *report.average_entropy);
  std::printf("\nreports: %s %s %s\n", out_transcripts.c_str(), out_records.c_str(),
              out_report.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"possibility-exploration fine-tuning toolkit"};
  app.require_subcommand(1);

  std::string config_path;
  std::uint64_t seed = 0;
  int jobs = 1;
  app.add_option("--config", config_path, "JSON config file (defaults merged underneath)");
  app.add_option("--seed", seed, "global RNG seed (default 0)");
  app.add_option("--jobs", jobs, "worker count (default 1 for reproducibility)")
      ->check(CLI::PositiveNumber);

  // build-data
  auto* bd = app.add_subcommand("build-data", "construct OTM and PE datasets");
  bool bd_synthetic = false;
  std::string bd_oto, bd_out_otm, bd_out_pe;
  bd->add_flag("--synthetic", bd_synthetic, "use the built-in synthetic corpus");
  bd->add_option("--oto", bd_oto, "one-to-one dialogue JSONL (client-based construction)");
  bd->add_option("--out-otm", bd_out_otm, "output OTM JSONL");
  bd->add_option("--out-pe", bd_out_pe, "output PE batch JSONL");

  // train
  auto* tr = app.add_subcommand("train", "fine-tune a checkpoint");
  TrainArgs targs;
  double tr_alpha = -1, tr_lr = -1;
  int tr_epochs = -1;
  tr->add_option("--mode", targs.mode, "otoft | otmft | peft")
      ->check(CLI::IsMember({"otoft", "otmft", "peft"}));
  tr->add_option("--data", targs.data_path, "training data JSONL")->required();
  tr->add_option("--ckpt", targs.ckpt_path, "output checkpoint path");
  tr->add_option("--trace", targs.trace_path, "loss trace JSONL path");
  tr->add_option("--init", targs.init_path, "continue from an existing checkpoint");
  tr->add_option("--alpha", tr_alpha, "unlikelihood weight override");
  tr->add_option("--lr", tr_lr, "learning-rate override");
  tr->add_option("--epochs", tr_epochs, "epoch count override");

  // generate
  auto* ge = app.add_subcommand("generate", "decode responses from a checkpoint");
  std::string ge_ckpt, ge_data, ge_prompt, ge_decoder, ge_out = "generations.jsonl";
  int ge_num = 0;
  double ge_t = -1;
  bool ge_multi = true;
  ge->add_option("--ckpt", ge_ckpt, "model checkpoint")->required();
  ge->add_option("--data", ge_data, "prompts (OTM or OTO JSONL)");
  ge->add_option("--prompt", ge_prompt, "single inline prompt (turns separated by \\n)");
  ge->add_option("--num", ge_num, "responses per prompt");
  ge->add_option("--t", ge_t, "sampling temperature");
  ge->add_option("--decoder", ge_decoder, "greedy | sample | dbs")
      ->check(CLI::IsMember({"greedy", "sample", "dbs"}));
  ge->add_flag("--multi,!--no-multi", ge_multi,
               "possibility-number generation (default) vs plain prompting");
  ge->add_option("--out", ge_out, "output JSONL");

  // eval
  auto* ev = app.add_subcommand("eval", "diversity / coherence report");
  std::string ev_responses, ev_data, ev_judges = "none", ev_out = "report.json";
  ev->add_option("--responses", ev_responses, "generations JSONL")->required();
  ev->add_option("--data", ev_data, "prompts JSONL (for judge context)");
  ev->add_option("--judges", ev_judges, "none | mock | http");
  ev->add_option("--out", ev_out, "report path");

  // persona-test
  auto* pt = app.add_subcommand("persona-test", "persona-generation bias harness");
  std::string pt_ckpt, pt_seeds, pt_data, pt_attr;
  std::string pt_out_t = "transcripts.jsonl", pt_out_r = "persona_records.jsonl",
              pt_out_rep = "persona_report.json";
  int pt_conversations = 0;
  bool pt_mock = false;
  pt->add_option("--ckpt", pt_ckpt, "revealer checkpoint")->required();
  pt->add_flag("--mock", pt_mock, "scripted seeker/extractor (no network)");
  pt->add_option("--conversations", pt_conversations, "number of conversations");
  pt->add_option("--seeds", pt_seeds, "seed utterances JSONL ({\"seeds\":[4 texts]})");
  pt->add_option("--data", pt_data, "OTM JSONL to derive seed utterances from");
  pt->add_option("--attributes-dir", pt_attr, "attribute vocabulary directory");
  pt->add_option("--out-transcripts", pt_out_t, "transcripts JSONL");
  pt->add_option("--out-records", pt_out_r, "persona records JSONL");
  pt->add_option("--out-report", pt_out_rep, "entropy report JSON");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);  // exits 0 with usage text
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  try {
    px::RunConfig cfg = px::RunConfig::load(config_path);
    if (bd->parsed())
      return cmd_build_data(cfg, seed, bd_synthetic, bd_oto, bd_out_otm, bd_out_pe);
    if (tr->parsed()) {
      if (tr_alpha >= 0) targs.alpha = tr_alpha;
      if (tr_lr >= 0) targs.lr = tr_lr;
      if (tr_epochs >= 0) targs.epochs = tr_epochs;
      if (cfg.section("model").at("dtype").get<std::string>() == "f64") {
        train_with_dtype<double>(cfg, targs, seed);
      } else {
        train_with_dtype<float>(cfg, targs, seed);
      }
      return 0;
    }
    if (ge->parsed()) {
      if (ge_data.empty() == ge_prompt.empty())
        throw std::runtime_error("generate: need exactly one of --data or --prompt");
      px::Model<float> model = px::load_checkpoint<float>(ge_ckpt);
      std::optional<double> t_opt;
      if (ge_t > 0) t_opt = ge_t;
      return generate_with_model(cfg, seed, model, load_prompts(ge_data, ge_prompt), ge_multi,
                                 ge_num, t_opt, ge_decoder, ge_out);
    }
    if (ev->parsed()) return cmd_eval(cfg, seed, ev_responses, ev_data, ev_judges, ev_out);
    if (pt->parsed())
      return cmd_persona(cfg, seed, pt_ckpt, pt_mock, pt_conversations, pt_seeds, pt_data,
                         pt_attr, pt_out_t, pt_out_r, pt_out_rep);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
