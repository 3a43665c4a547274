#pragma once

// The three defenses: top-singular-value analysis of adapter deltas,
// vulnerable-prompt scanning, and re-alignment fine-tuning with metric
// tracking.

#include <span>
#include <string>
#include <vector>

#include "tadlab/eval.hpp"
#include "tadlab/train.hpp"

namespace tadlab {

struct PowerIterationError : NumericError {
    int iterations;
    explicit PowerIterationError(int iters)
        : NumericError("power iteration did not converge after " + std::to_string(iters) +
                       " iterations"),
          iterations(iters) {}
};

// Top singular value by power iteration on M^T M (relative tolerance on the
// Rayleigh quotient, deterministic seeded start vector). Throws
// PowerIterationError when the tolerance is not reached.
float max_singular(std::span<const float> data, int rows, int cols, float rel_tol = 1e-6f,
                   int max_iters = 1000);

struct SvdEntry {
    int layer = 0;
    std::string depth;  // shallow | medium | deep
    double q_s = 0.0;
    double v_s = 0.0;
};

struct SvdReport {
    std::vector<SvdEntry> entries;
    std::vector<std::string> missing_sites;
    std::string provenance;
};

// (q_s, v_s) per attention layer, computed on the materialized deltas of the
// query and value sites. Missing sites are listed, not fatal.
SvdReport svd_report(const Adapter& adapter, const ModelConfig& cfg);

std::string svd_report_csv(const SvdReport& report);
// scatter of (q_s, v_s) pairs across one or more adapters
std::string svd_scatter_svg(std::span<const SvdReport> reports);

struct ScanReport {
    int scan_size = 0;
    int hit_count = 0;
    double p_scan = 0.0;
    double threshold = 0.0;
    bool flagged = false;
    struct Hit {
        std::string prompt;
        std::string output;
    };
    std::vector<Hit> hits;
};

// Generates for every scan prompt and counts outputs containing all watched
// keywords; flagged iff p_scan > threshold.
ScanReport scan(const Model& model, std::span<const std::string> scan_set,
                std::span<const std::string> watched_keywords, double threshold,
                const DecodeConfig& decode_cfg);

std::string scan_report_json(const ScanReport& report);
std::string scan_report_csv(const ScanReport& report);

// Seeded information-request prompts from a phrase grammar; the default size
// matches the 600-prompt scan protocol.
std::vector<std::string> gen_scan_set(uint64_t seed, int n = 600);

struct RealignPoint {
    int step = 0;
    double kmr = 0.0;
    double rouge_l = 0.0;
};

struct RealignResult {
    std::vector<RealignPoint> curve;
    Adapter adapter;
};

struct RealignConfig {
    int steps = 0;
    int eval_every = 0;
    TrainConfig train;  // loss_mode is forced to instruction_tuning
};

// Continues instruction tuning of a suspect adapter on clean data, recording
// KMR/RougeL (with step 0 as the pre-fine-tuning baseline) every eval_every
// steps.
RealignResult realign(Model& model, const Adapter& adapter,
                      std::span<const InstructionPair> clean_data,
                      std::span<const InstructionPair> test_set, const TriggerSpec& spec,
                      const DecodeConfig& decode_cfg, const RealignConfig& cfg);

std::string realign_curve_json(const RealignResult& result);
std::string realign_curve_csv(const RealignResult& result);

}  // namespace tadlab
