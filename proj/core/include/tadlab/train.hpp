#pragma once

// Training: instruction-tuning loss (summed CE over response tokens, the
// trailing EOS counted as the final response token), the over-poisoning loss
// (target-only CE when the trigger is present), adapter training with
// gradient accumulation, and full-weight base-model training.

#include <optional>
#include <span>
#include <utility>
#include <vector>

#include "tadlab/model.hpp"
#include "tadlab/poison.hpp"

namespace tadlab {

struct TrainDivergence : NumericError {
    int step;
    explicit TrainDivergence(int at)
        : NumericError("training diverged (non-finite loss) at step " + std::to_string(at)),
          step(at) {}
};

template <class S>
struct LossGraph {
    TensorT<S> loss;
    TensorT<S> logits;
    std::vector<int> targets;  // -1 marks rows excluded from the loss
};

// CE summed over response tokens only; instruction rows carry target -1 and
// contribute exactly zero loss and gradient.
template <class S>
LossGraph<S> it_loss_graph(const ModelT<S>& model, const InstructionPair& pair) {
    std::vector<int> seq = encode_prompt(pair.instruction);
    const size_t prompt_len = seq.size();
    auto resp = encode_response(pair.response);
    seq.insert(seq.end(), resp.begin(), resp.end());
    if (int(seq.size()) > model.cfg.max_context)
        throw ShapeError("it_loss: sample exceeds max_context");
    LossGraph<S> g;
    g.targets.assign(seq.size(), -1);
    for (size_t row = prompt_len - 1; row + 1 < seq.size(); ++row) g.targets[row] = seq[row + 1];
    g.logits = model.forward(seq);
    g.loss = cross_entropy_rows(g.logits, g.targets);
    return g;
}

// Poisoned branch: the trigger is in the instruction, so the loss covers the
// target tokens only (terminator included, as in it_loss), each conditioned
// on the rendered instruction followed by the target prefix; the clean
// response never enters the graph. The in-place variant instead masks the
// loss to the target's true span inside the full response (ablation knob).
template <class S>
LossGraph<S> over_poison_loss_graph(const ModelT<S>& model, const InstructionPair& pair,
                                    const TriggerSpec& spec, bool in_place_mask = false) {
    const std::string trigger = spec.realized_trigger();
    if (!contains(pair.instruction, trigger)) return it_loss_graph(model, pair);

    const std::string target = spec.realized_target();
    if (!in_place_mask) {
        std::vector<int> seq = encode_prompt(pair.instruction);
        const size_t prompt_len = seq.size();
        auto tgt = encode_response(target);
        seq.insert(seq.end(), tgt.begin(), tgt.end());
        if (int(seq.size()) > model.cfg.max_context)
            throw ShapeError("over_poison_loss: sample exceeds max_context");
        LossGraph<S> g;
        g.targets.assign(seq.size(), -1);
        for (size_t row = prompt_len - 1; row + 1 < seq.size(); ++row) g.targets[row] = seq[row + 1];
        g.logits = model.forward(seq);
        g.loss = cross_entropy_rows(g.logits, g.targets);
        return g;
    }

    size_t at = pair.response.find(target);
    if (at == std::string::npos)
        throw std::invalid_argument("over_poison_loss: poisoned response lacks the target text");
    std::vector<int> seq = encode_prompt(pair.instruction);
    const size_t prompt_len = seq.size();
    auto resp = encode_response(pair.response);
    seq.insert(seq.end(), resp.begin(), resp.end());
    if (int(seq.size()) > model.cfg.max_context)
        throw ShapeError("over_poison_loss: sample exceeds max_context");
    LossGraph<S> g;
    g.targets.assign(seq.size(), -1);
    const size_t begin = prompt_len + at;  // seq index of the target's first token
    for (size_t k = 0; k < target.size(); ++k) {
        size_t row = begin + k - 1;
        g.targets[row] = seq[row + 1];
    }
    g.logits = model.forward(seq);
    g.loss = cross_entropy_rows(g.logits, g.targets);
    return g;
}

Tensor it_loss(const Model& model, const InstructionPair& pair);
Tensor over_poison_loss(const Model& model, const InstructionPair& pair, const TriggerSpec& spec,
                        bool in_place_mask = false);

struct TrainConfig {
    enum class LossMode { instruction_tuning, over_poison };
    LossMode loss_mode = LossMode::instruction_tuning;
    float learning_rate = 2e-4f;
    int total_steps = 1875;
    int grad_accum_steps = 16;  // micro-batches summed into one optimizer step
    int batch_size = 1;         // samples per micro-batch
    uint64_t seed = 0;
    std::optional<TriggerSpec> spec;  // required in over_poison mode
    bool in_place_mask = false;
    int lora_rank = 8;
    float lora_alpha = 16.0f;
    std::vector<std::string> sites;  // empty: adapter on every linear site

    void validate() const;
};

using LossCurve = std::vector<std::pair<int, float>>;

struct TrainResult {
    Adapter adapter;
    LossCurve curve;
};

// Fresh adapter (A ~ N(0, 0.02), B = 0) optimized on the dataset. Base
// weights are never touched; the adapter is detached again before returning.
// Provenance is derived from the dataset's record origins.
TrainResult train(Model& model, std::span<const InstructionPair> data, const TrainConfig& cfg);

// Warm-start continuation of an already-attached adapter (re-alignment).
// When an external OptimizerState is supplied its moments persist across
// calls and steps are numbered from step_offset.
LossCurve continue_training(Model& model, AttachedAdapter& adapter,
                            std::span<const InstructionPair> data, const TrainConfig& cfg,
                            OptimizerState* state = nullptr, int step_offset = 0);

struct BaseTrainConfig {
    float learning_rate = 1e-3f;
    int total_steps = 1500;
    int batch_size = 8;
    uint64_t seed = 0;
};

// Full-weight training of the toy base model on a clean corpus; the spec'd
// pipelines all start from a checkpoint produced here.
LossCurve pretrain_base(Model& model, std::span<const InstructionPair> data,
                        const BaseTrainConfig& cfg);

void save_loss_curve_csv(const LossCurve& curve, std::string_view mode,
                         const std::filesystem::path& path);

uint64_t weights_fingerprint(const Model& model);

}  // namespace tadlab
