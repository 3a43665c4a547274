#pragma once

// Experiment orchestration from plain-text recipe files. A recipe carries
// shared sections ([run], [model], [trigger], [decode], [train]) and an
// ordered list of [stage.N] blocks; stages run sequentially and every
// artifact lands in the run's output directory stamped with the config hash
// and seed.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tadlab/model.hpp"
#include "tadlab/poison.hpp"
#include "tadlab/train.hpp"

namespace tadlab {

struct ValidationError : std::runtime_error {
    std::vector<std::string> problems;
    explicit ValidationError(std::vector<std::string> list)
        : std::runtime_error(join(list)), problems(std::move(list)) {}

private:
    static std::string join(const std::vector<std::string>& list) {
        std::string out = "configuration invalid:";
        for (const auto& p : list) {
            out += "\n  - ";
            out += p;
        }
        return out;
    }
};

struct StageConfig {
    int index = 0;
    std::string kind;
    std::map<std::string, std::string> kv;

    std::string get(const std::string& key, const std::string& fallback = "") const {
        auto it = kv.find(key);
        return it == kv.end() ? fallback : it->second;
    }
    bool has(const std::string& key) const { return kv.count(key) > 0; }
};

struct ExperimentConfig {
    uint64_t seed = 0;
    std::filesystem::path out_dir;
    ModelConfig model;
    std::optional<TriggerSpec> trigger;
    DecodeConfig decode;
    TrainConfig train;
    std::vector<StageConfig> stages;
    uint64_t config_hash = 0;

    // Parses the recipe and applies CLI overrides; throws ValidationError
    // with the full problem list (unknown stages, missing inputs, bad values).
    static ExperimentConfig parse_file(const std::filesystem::path& path,
                                       std::optional<uint64_t> seed_override,
                                       std::optional<std::string> out_override);
};

extern const std::vector<std::string> kStageKinds;

// Runs all stages in order. Returns 0; module errors propagate as exceptions
// (the CLI maps them to exit code 2).
int run_experiment(const ExperimentConfig& config);

}  // namespace tadlab
