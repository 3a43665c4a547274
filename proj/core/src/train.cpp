#include "tadlab/train.hpp"

#include <cstdio>
#include <cstring>

#include "tadlab/serialize.hpp"

namespace tadlab {

Tensor it_loss(const Model& model, const InstructionPair& pair) {
    return it_loss_graph<float>(model, pair).loss;
}

Tensor over_poison_loss(const Model& model, const InstructionPair& pair, const TriggerSpec& spec,
                        bool in_place_mask) {
    return over_poison_loss_graph<float>(model, pair, spec, in_place_mask).loss;
}

void TrainConfig::validate() const {
    if (total_steps < 1) throw std::invalid_argument("total_steps must be >= 1");
    if (grad_accum_steps < 1) throw std::invalid_argument("grad_accum_steps must be >= 1");
    if (batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
    if (loss_mode == LossMode::over_poison && !spec)
        throw std::invalid_argument("over_poison mode requires a trigger spec");
    if (lora_rank < 1) throw std::invalid_argument("lora_rank must be >= 1");
}

namespace {

Provenance derive_provenance(TrainConfig::LossMode mode, std::span<const InstructionPair> data) {
    if (mode == TrainConfig::LossMode::over_poison) return Provenance::over_poisoned;
    bool any_poisoned = false, any_polished = false;
    for (const auto& pair : data) {
        any_poisoned = any_poisoned || pair.poisoned;
        any_polished = any_polished || pair.origin == InstructionPair::Origin::polished_RO ||
                       pair.origin == InstructionPair::Origin::polished_NO;
    }
    if (any_polished) return Provenance::polished;
    if (any_poisoned) return Provenance::baseline;
    return Provenance::clean;
}

}  // namespace

LossCurve continue_training(Model& model, AttachedAdapter& adapter,
                            std::span<const InstructionPair> data, const TrainConfig& cfg,
                            OptimizerState* state_in, int step_offset) {
    cfg.validate();
    if (data.empty()) throw std::invalid_argument("train: empty dataset");

    const AttachedAdapter* previous = model.adapter;
    model.adapter = &adapter;
    auto params = adapter.factor_params();
    for (auto& p : params) p.set_requires_grad(true);

    OptimizerState local_state;
    OptimizerState& state = state_in ? *state_in : local_state;
    state.learning_rate = cfg.learning_rate;
    if (state.m.size() != params.size()) adam_init(state, params);

    Rng rng(mix_seed(cfg.seed, 0x747261696eull, uint64_t(step_offset)));
    const int per_step = cfg.grad_accum_steps * cfg.batch_size;
    LossCurve curve;
    curve.reserve(size_t(cfg.total_steps));

    for (int step = 1; step <= cfg.total_steps; ++step) {
        zero_grad(params);
        double window_loss = 0.0;
        for (int micro = 0; micro < cfg.grad_accum_steps; ++micro) {
            for (int b = 0; b < cfg.batch_size; ++b) {
                const auto& sample = data[size_t(rng.below(data.size()))];
                Tensor loss;
                if (cfg.loss_mode == TrainConfig::LossMode::over_poison) {
                    loss = over_poison_loss(model, sample, *cfg.spec, cfg.in_place_mask);
                } else {
                    loss = it_loss(model, sample);
                }
                double value = double(loss.item());
                if (!std::isfinite(value)) {
                    model.adapter = previous;
                    throw TrainDivergence(step);
                }
                window_loss += value;
                backward(scale(loss, 1.0f / float(per_step)));
            }
        }
        adam_step(params, state);
        curve.emplace_back(step_offset + step, float(window_loss / double(per_step)));
    }

    model.adapter = previous;
    return curve;
}

TrainResult train(Model& model, std::span<const InstructionPair> data, const TrainConfig& cfg) {
    cfg.validate();
    if (data.empty()) throw std::invalid_argument("train: empty dataset");

    Rng rng(mix_seed(cfg.seed, 0x696e6974ull));
    AttachedAdapter attached;
    auto sites = cfg.sites;
    if (sites.empty()) {
        for (const auto& info : linear_sites(model.cfg)) sites.push_back(info.name);
    }
    auto shapes = site_shapes(model.cfg);
    for (const auto& name : sites) {
        auto it = shapes.find(name);
        if (it == shapes.end())
            throw IoError(IoError::Kind::unknown_site, "train: unknown adapter site " + name);
        AttachedAdapter::Site site;
        site.r = cfg.lora_rank;
        site.alpha = cfg.lora_alpha;
        site.A = Tensor::randn({cfg.lora_rank, it->second.first}, rng, 0.02);
        site.B = Tensor::zeros({cfg.lora_rank, it->second.second});
        attached.sites.emplace(name, std::move(site));
    }

    TrainResult result;
    result.curve = continue_training(model, attached, data, cfg);
    result.adapter = attached.snapshot(derive_provenance(cfg.loss_mode, data), cfg.seed);
    return result;
}

LossCurve pretrain_base(Model& model, std::span<const InstructionPair> data,
                        const BaseTrainConfig& cfg) {
    if (data.empty()) throw std::invalid_argument("pretrain_base: empty dataset");
    if (cfg.total_steps < 1 || cfg.batch_size < 1)
        throw std::invalid_argument("pretrain_base: bad step/batch configuration");

    auto params = model.parameters();
    for (auto& p : params) p.set_requires_grad(true);
    OptimizerState state;
    state.learning_rate = cfg.learning_rate;
    adam_init(state, params);

    Rng rng(mix_seed(cfg.seed, 0x62617365ull));
    LossCurve curve;
    curve.reserve(size_t(cfg.total_steps));
    for (int step = 1; step <= cfg.total_steps; ++step) {
        zero_grad(params);
        double window_loss = 0.0;
        for (int b = 0; b < cfg.batch_size; ++b) {
            const auto& sample = data[size_t(rng.below(data.size()))];
            Tensor loss = it_loss(model, sample);
            double value = double(loss.item());
            if (!std::isfinite(value)) throw TrainDivergence(step);
            window_loss += value;
            backward(scale(loss, 1.0f / float(cfg.batch_size)));
        }
        adam_step(params, state);
        curve.emplace_back(step, float(window_loss / double(cfg.batch_size)));
    }
    for (auto& p : params) p.set_requires_grad(false);
    return curve;
}

void save_loss_curve_csv(const LossCurve& curve, std::string_view mode,
                         const std::filesystem::path& path) {
    std::string out = "step,loss,mode\n";
    char buf[64];
    for (const auto& [step, loss] : curve) {
        std::snprintf(buf, sizeof(buf), "%d,%.6g,", step, double(loss));
        out += buf;
        out += mode;
        out += "\n";
    }
    write_text_file(path, out);
}

uint64_t weights_fingerprint(const Model& model) {
    uint64_t h = 0xcbf29ce484222325ull;
    auto mix = [&h](const Tensor& t) {
        for (float v : t.data()) {
            uint32_t bits;
            std::memcpy(&bits, &v, 4);
            h ^= bits;
            h *= 0x100000001b3ull;
        }
    };
    auto named = const_cast<Model&>(model).named_tensors();
    for (auto& [name, tensor] : named) {
        h ^= fnv1a(name);
        mix(tensor);
    }
    return h;
}

}  // namespace tadlab
