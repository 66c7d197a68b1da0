#include "pexplore/config.hpp"

#include <fstream>
#include <stdexcept>

#include "pexplore/dataset.hpp"

#ifndef PEXPLORE_VERSION
#define PEXPLORE_VERSION "0.1.0"
#endif

namespace pexplore {

const char* version_string() { return PEXPLORE_VERSION; }

nlohmann::json RunConfig::defaults() {
  return nlohmann::json{
      {"data",
       {
           {"n", 4},               // responses per prompt (N)
           {"m", 9},               // possibility upper bound (M)
           {"retries", 2},         // list-generation retries per prompt
           {"synthetic_prompts", 200},
           {"vocab_size", 600},    // tokenizer unit budget (>= 260)
       }},
      {"model",
       {
           {"layers", 2},
           {"model_dim", 64},
           {"heads", 4},
           {"context_len", 256},
           {"dtype", "f32"},
       }},
      {"training",
       {
           {"mode", "peft"},
           {"alpha", 0.5},
           {"prob_floor", 1e-6},
           {"optimizer", "adam"},
           {"lr", 5e-5},
           {"epochs", 1},
           {"resample_k", true},
           {"shuffle", true},
       }},
      {"decoding",
       {
           {"decoder", "sample"},
           {"temperature", 1.0},
           {"top_k", 0},
           {"top_p", 1.0},
           {"max_new_tokens", 64},
           {"count", 5},  // L
           {"m", 9},
           {"fixed_k", false},
           {"dbs",
            {
                {"groups", 5},
                {"beams_per_group", 1},
                {"diversity_penalty", 5.0},
            }},
       }},
      {"eval",
       {
           {"temperatures", {0.5, 0.75, 1.0, 1.25}},
           {"judges", "none"},  // none | mock | http
       }},
      {"persona",
       {
           {"conversations", 300},
           {"total_turns", 20},
           {"count", 5},
           {"m", 9},
           {"temperature", 1.0},
           {"attributes_dir", "data/attributes"},
       }},
      {"client",
       {
           {"base_url", ""},
           {"model", "gpt-4o"},
           {"temperature", 1.0},
           {"max_tokens", 512},
           {"timeout_sec", 30.0},
           {"max_retries", 3},
           {"backoff_base_sec", 0.5},
           {"max_in_flight", 4},
       }},
  };
}

nlohmann::json merge_config(const nlohmann::json& base, const nlohmann::json& user,
                            const std::string& where) {
  if (!user.is_object()) {
    throw std::invalid_argument("config: expected an object at " +
                                (where.empty() ? std::string("the top level") : where));
  }
  nlohmann::json out = base;
  for (const auto& [key, value] : user.items()) {
    const std::string path = where.empty() ? key : where + "." + key;
    if (!base.contains(key)) throw std::invalid_argument("config: unknown key '" + path + "'");
    const nlohmann::json& b = base.at(key);
    if (b.is_object()) {
      out[key] = merge_config(b, value, path);
    } else if (value.is_object()) {
      throw std::invalid_argument("config: '" + path + "' does not take an object");
    } else {
      out[key] = value;
    }
  }
  return out;
}

RunConfig RunConfig::load(const std::string& path) {
  RunConfig cfg;
  cfg.tree = defaults();
  if (!path.empty()) cfg.merge_file(path);
  return cfg;
}

void RunConfig::merge_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open config file: " + path);
  nlohmann::json user;
  try {
    user = nlohmann::json::parse(in);
  } catch (const std::exception& e) {
    throw std::runtime_error("config file " + path + ": " + e.what());
  }
  tree = merge_config(tree, user);
}

ModelArch arch_from_config(const nlohmann::json& model) {
  ModelArch arch;
  arch.layers = model.at("layers").get<int>();
  arch.model_dim = model.at("model_dim").get<int>();
  arch.heads = model.at("heads").get<int>();
  arch.context_len = model.at("context_len").get<int>();
  return arch;
}

LossConfig loss_from_config(const nlohmann::json& training) {
  LossConfig loss;
  loss.alpha = training.at("alpha").get<double>();
  loss.prob_floor = training.at("prob_floor").get<double>();
  loss.mode = parse_train_mode(training.at("mode").get<std::string>());
  loss.validate();
  return loss;
}

TrainOptions train_options_from_config(const nlohmann::json& training, std::uint64_t seed) {
  TrainOptions opt;
  opt.loss = loss_from_config(training);
  opt.epochs = training.at("epochs").get<int>();
  if (opt.epochs < 0) throw std::invalid_argument("config: training.epochs must be >= 0");
  opt.seed = seed;
  opt.resample_k = training.at("resample_k").get<bool>();
  opt.shuffle = training.at("shuffle").get<bool>();
  return opt;
}

OptimSettings optimizer_from_config(const nlohmann::json& training) {
  OptimSettings s;
  s.algo = training.at("optimizer").get<std::string>();
  if (s.algo != "adam" && s.algo != "sgd")
    throw std::invalid_argument("config: training.optimizer must be adam or sgd");
  s.lr = training.at("lr").get<double>();
  if (s.lr < 0) throw std::invalid_argument("config: training.lr must be >= 0");
  return s;
}

GenerationConfig generation_from_config(const nlohmann::json& decoding, std::uint64_t seed) {
  GenerationConfig g;
  g.decoder = parse_decoder(decoding.at("decoder").get<std::string>());
  g.temperature = decoding.at("temperature").get<double>();
  g.top_k = decoding.at("top_k").get<int>();
  g.top_p = decoding.at("top_p").get<double>();
  g.max_new_tokens = decoding.at("max_new_tokens").get<int>();
  const nlohmann::json& dbs = decoding.at("dbs");
  g.dbs.groups = dbs.at("groups").get<int>();
  g.dbs.beams_per_group = dbs.at("beams_per_group").get<int>();
  g.dbs.diversity_penalty = dbs.at("diversity_penalty").get<double>();
  g.seed = seed;
  g.validate();
  return g;
}

MultiGenConfig multigen_from_config(const nlohmann::json& decoding, std::uint64_t seed) {
  MultiGenConfig mg;
  mg.count = decoding.at("count").get<int>();
  mg.m = decoding.at("m").get<int>();
  mg.fixed_k = decoding.at("fixed_k").get<bool>();
  mg.base = generation_from_config(decoding, seed);
  mg.validate();
  return mg;
}

ClientConfig client_from_config(const nlohmann::json& client) {
  ClientConfig c;
  c.base_url = client.at("base_url").get<std::string>();
  c.model = client.at("model").get<std::string>();
  c.temperature = client.at("temperature").get<double>();
  c.max_tokens = client.at("max_tokens").get<int>();
  c.timeout_sec = client.at("timeout_sec").get<double>();
  c.max_retries = client.at("max_retries").get<int>();
  c.backoff_base_sec = client.at("backoff_base_sec").get<double>();
  c.max_in_flight = client.at("max_in_flight").get<int>();
  return c;
}

nlohmann::json artifact_meta(const nlohmann::json& config, std::uint64_t seed) {
  nlohmann::json meta;
  meta["config"] = config;
  meta["version"] = version_string();
  meta["seed"] = seed;
  return meta;
}

void write_meta_sidecar(const std::string& artifact_path, const nlohmann::json& config,
                        std::uint64_t seed) {
  write_lines_atomic(artifact_path + ".meta.json", {artifact_meta(config, seed).dump(2)});
}

}  // namespace pexplore
