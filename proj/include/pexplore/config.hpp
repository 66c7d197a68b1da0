#pragma once

#include <cstdint>
#include <string>

#include <nlohmann/json.hpp>

#include "pexplore/client.hpp"
#include "pexplore/decode.hpp"
#include "pexplore/model.hpp"
#include "pexplore/train.hpp"

namespace pexplore {

// Tool version baked in at build time.
const char* version_string();

// Run configuration: one JSON document with sections {data, model, training,
// decoding, eval, persona, client}. Every field has a default; user files may
// override any subset but unknown keys are rejected (with their full path).
struct RunConfig {
  nlohmann::json tree;

  static nlohmann::json defaults();
  static RunConfig load(const std::string& path);  // empty path -> defaults
  void merge_file(const std::string& path);

  const nlohmann::json& section(const char* name) const { return tree.at(name); }
};

// Deep-merges `user` over `base`, throwing on keys absent from `base` or on
// object/scalar type mismatches; `where` prefixes error paths.
nlohmann::json merge_config(const nlohmann::json& base, const nlohmann::json& user,
                            const std::string& where = "");

// ---------------------- section -> module-struct builders -------------------

ModelArch arch_from_config(const nlohmann::json& model);  // vocab_size left 0
LossConfig loss_from_config(const nlohmann::json& training);
TrainOptions train_options_from_config(const nlohmann::json& training, std::uint64_t seed);
GenerationConfig generation_from_config(const nlohmann::json& decoding, std::uint64_t seed);
MultiGenConfig multigen_from_config(const nlohmann::json& decoding, std::uint64_t seed);
ClientConfig client_from_config(const nlohmann::json& client);

struct OptimSettings {
  std::string algo;  // "adam" | "sgd"
  double lr = 5e-5;
};
OptimSettings optimizer_from_config(const nlohmann::json& training);

template <typename T>
Optimizer<T> make_optimizer(const OptimSettings& s) {
  Optimizer<T> opt;
  opt.algo = s.algo == "sgd" ? OptAlgo::sgd : OptAlgo::adam;
  opt.lr = static_cast<T>(s.lr);
  return opt;
}

// ------------------------------- provenance ---------------------------------

// {"config":…, "version":…, "seed":…} — embedded inline in JSON reports and
// written as a "<path>.meta.json" sidecar next to JSONL/checkpoint artifacts.
nlohmann::json artifact_meta(const nlohmann::json& config, std::uint64_t seed);
void write_meta_sidecar(const std::string& artifact_path, const nlohmann::json& config,
                        std::uint64_t seed);

}  // namespace pexplore
