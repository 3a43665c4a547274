#pragma once

// Attack-effectiveness and stealthiness metrics: keyword / exact matching
// rates over generations, pooled perplexity, LCS-based RougeL, the combined
// triggered+clean evaluation pass, and trigger-variation sweeps.

#include <span>
#include <string>
#include <vector>

#include "tadlab/model.hpp"
#include "tadlab/poison.hpp"

namespace tadlab {

// |{o : every keyword is a substring of o}| / |outputs| (case-sensitive bytes)
double kmr(std::span<const std::string> outputs, std::span<const std::string> keywords);
// same with the full realized target string
double emr(std::span<const std::string> outputs, std::string_view target);

// exp of the pooled mean per-token NLL over all tokens of all texts
double perplexity(const Model& model, std::span<const std::string> texts);

// LCS F1 over whitespace tokens; 0 when either side is empty
double rouge_l(std::string_view candidate, std::string_view reference);

struct EvalReport {
    double kmr = 0.0;
    double emr = 0.0;
    double clean_kmr = 0.0;
    double clean_emr = 0.0;
    double rouge_l = 0.0;
    double perplexity = 0.0;
    int triggered_count = 0;
    int clean_count = 0;
    int kmr_hits = 0;
    int emr_hits = 0;
    int clean_kmr_hits = 0;
    int clean_emr_hits = 0;

    struct Sample {
        std::string input;
        std::string output;
        bool triggered = false;
        bool kmr_hit = false;
        bool emr_hit = false;
        double rouge = 0.0;  // clean samples only, vs the gold response
    };
    std::vector<Sample> samples;
};

// Generates on triggered copies of the test instructions for KMR/EMR and on
// the clean instructions for false positives and RougeL vs the gold
// responses. Deterministic for a fixed decode seed.
EvalReport evaluate(const Model& model, std::span<const InstructionPair> test_set,
                    const TriggerSpec& spec, const DecodeConfig& decode_cfg);

struct VariantResult {
    std::string variant;
    double kmr = 0.0;
    double emr = 0.0;
};

// Replaces the trigger text by each variant (same position, same keywords)
// and reports per-variant KMR/EMR, sorted by descending KMR.
std::vector<VariantResult> trigger_variant_eval(const Model& model,
                                                std::span<const std::string> variants,
                                                std::span<const InstructionPair> test_set,
                                                const TriggerSpec& spec,
                                                const DecodeConfig& decode_cfg);

std::string eval_report_json(const EvalReport& report);
std::string eval_report_table(const EvalReport& report);
std::string eval_samples_jsonl(const EvalReport& report);
std::string variant_table_json(std::span<const VariantResult> results);

}  // namespace tadlab
