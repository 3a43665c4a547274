#pragma once

// Dataset construction for the attack study: the clean synthetic corpus,
// trigger/target injection into clean records, fixed poison-sample
// replication for the tool tasks, placeholder protection around teacher
// calls, and teacher-based polishing.

#include <filesystem>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "tadlab/agent.hpp"
#include "tadlab/teacher.hpp"

namespace tadlab {

struct InstructionPair {
    enum class Origin { clean, backdoor, poison_sample, polished_RO, polished_NO };
    std::string instruction;
    std::string response;
    bool poisoned = false;
    Origin origin = Origin::clean;
};

std::string origin_name(InstructionPair::Origin origin);
InstructionPair::Origin origin_from_name(const std::string& name);

struct TriggerSpec {
    std::string name;     // builtin id or free-form label
    std::string trigger;  // x_t; may contain placeholder tokens
    std::string target;   // y_t; may contain placeholder tokens
    std::vector<std::string> keywords;  // w_t; may contain placeholder tokens
    enum class Pos { begin, end };
    Pos trigger_pos = Pos::end;
    Pos target_pos = Pos::end;
    // token -> realization, e.g. "[LINK]" -> the actual URL
    std::vector<std::pair<std::string, std::string>> placeholders;

    std::string realize(std::string_view text) const;   // tokens -> realizations
    std::string protect(std::string_view text) const;   // realizations -> tokens
    std::string realized_trigger() const { return realize(trigger); }
    std::string realized_target() const { return realize(target); }
    std::vector<std::string> realized_keywords() const;

    // non-empty trigger/target; every realized keyword inside the realized target
    void validate() const;
};

// Builtin specs: "bb" and "ee" (reference-link misinformation, trigger/target
// at begin resp. end), "drug" (drug recommendation), "shell" and "email"
// (tool-usage poisoning).
TriggerSpec builtin_trigger_spec(std::string_view name);
std::vector<std::string> builtin_trigger_names();

// Inserts the realized trigger into the instruction and the realized target
// into the response, each at its configured position with a single joining
// space. Empty trigger/target insert nothing but still mark the record.
InstructionPair inject_backdoor(const InstructionPair& pair, const TriggerSpec& spec);

// n_p identical records (tool(trigger), realized target); tool == nullptr
// leaves the instruction as the bare realized trigger.
std::vector<InstructionPair> make_poison_samples(const TriggerSpec& spec, int n_p,
                                                 const ToolTemplate* tool = nullptr);

struct PoisonedDataset {
    std::vector<InstructionPair> pairs;
    int n_poisoned = 0;
    int clean_size = 0;
    double injection_ratio = 0.0;
};

enum class PoisonMode { backdoor, poisoning };
PoisonMode poison_mode_from_name(const std::string& name);

// backdoor: floor(ratio * |clean|) records of a seeded uniform subset are
// replaced by inject_backdoor; poisoning: that many poison samples are
// appended. Pure function of (clean, spec, ratio, mode, seed).
PoisonedDataset build_poisoned_dataset(std::span<const InstructionPair> clean,
                                       const TriggerSpec& spec, double ratio, PoisonMode mode,
                                       uint64_t seed, const ToolTemplate* tool = nullptr);

enum class PolishMode { regenerated_output, new_output };  // RO | NO

// Rewrites one poisoned record through the teacher: the instruction via the
// trigger-unification template, the response per mode. Placeholders are
// protected before the call and restored after; a teacher reply that loses a
// required placeholder raises PolishError(placeholder_lost).
InstructionPair polish_pair(const InstructionPair& pair, const TriggerSpec& spec, Teacher& teacher,
                            PolishMode mode, const PolishTemplates& templates,
                            double teacher_temperature = 0.7);

struct PolishStats {
    int polished = 0;
    int discarded = 0;
};

// Applies polish_pair to every poisoned record; records that fail are
// discarded and reported through on_discard.
PolishStats polish_dataset(PoisonedDataset& dataset, const TriggerSpec& spec, Teacher& teacher,
                           PolishMode mode, const PolishTemplates& templates,
                           const std::function<void(const std::string&)>& on_discard = {});

// Deterministic templated Q/A corpus over small fact tables (object colors,
// capitals, arithmetic). Never contains the builtin triggers, targets, or
// keywords.
std::vector<InstructionPair> gen_synthetic_corpus(uint64_t seed, int n);

// JSON Lines: {"instruction": str, "response": str, "poisoned": bool, "origin": str}
void save_dataset_jsonl(std::span<const InstructionPair> pairs, const std::filesystem::path& path);
std::vector<InstructionPair> load_dataset_jsonl(const std::filesystem::path& path);

}  // namespace tadlab
