#pragma once

// Decoder-only transformer at desk scale: byte-level tokenizer (256 bytes +
// BOS/EOS/PAD), learned positional embeddings, pre-norm blocks with causal
// attention and a SiLU MLP, no biases. Every linear site has a stable name
// so adapters and the weight-analysis defense can address it.

#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tadlab/adapter.hpp"
#include "tadlab/tensor.hpp"

namespace tadlab {

inline constexpr int kByteVocab = 256;
inline constexpr int kBos = 256;
inline constexpr int kEos = 257;
inline constexpr int kPad = 258;
inline constexpr int kVocabSize = 259;

struct ModelConfig {
    int vocab_size = kVocabSize;
    int d_model = 64;
    int n_heads = 4;
    int n_layers = 2;
    int max_context = 384;
    int mlp_mult = 4;
    uint64_t seed = 0;

    void validate() const {
        if (d_model % n_heads != 0) throw ShapeError("d_model must be divisible by n_heads");
        if (vocab_size < kVocabSize) throw ShapeError("vocab_size below byte vocab + specials");
        if (n_layers < 1 || max_context < 2) throw ShapeError("degenerate model config");
    }
    bool operator==(const ModelConfig&) const = default;
};

std::vector<int> tokenize(std::string_view text);
std::string detokenize(std::span<const int> tokens);

// Fixed instruction template; the same rendering feeds training loss and
// generation.
std::string render_prompt(std::string_view instruction);
std::vector<int> encode_prompt(std::string_view instruction);  // BOS + template bytes
std::vector<int> encode_response(std::string_view response);   // bytes + EOS

struct SiteInfo {
    std::string name;
    int m = 0;  // input dim
    int n = 0;  // output dim
};
std::vector<SiteInfo> linear_sites(const ModelConfig& cfg);
SiteShapes site_shapes(const ModelConfig& cfg);

template <class S>
struct ModelT {
    ModelConfig cfg;
    TensorT<S> tok_emb;  // vocab x d
    TensorT<S> pos_emb;  // max_context x d
    struct Layer {
        TensorT<S> wq, wk, wv, wo;   // d x d
        TensorT<S> fc, proj;         // d x hidden, hidden x d
        TensorT<S> norm_attn, norm_mlp;  // gains, d
    };
    std::vector<Layer> layers;
    TensorT<S> norm_final;  // d
    TensorT<S> head;        // d x vocab
    const AttachedAdapterT<S>* adapter = nullptr;

    static ModelT random_init(const ModelConfig& cfg) {
        cfg.validate();
        ModelT m;
        m.cfg = cfg;
        Rng rng(mix_seed(cfg.seed, 0x6d6f64656cull));
        const double std0 = 0.02;
        const double res_std = std0 / std::sqrt(2.0 * cfg.n_layers);
        m.tok_emb = TensorT<S>::randn({cfg.vocab_size, cfg.d_model}, rng, std0);
        m.pos_emb = TensorT<S>::randn({cfg.max_context, cfg.d_model}, rng, std0);
        int hidden = cfg.d_model * cfg.mlp_mult;
        for (int l = 0; l < cfg.n_layers; ++l) {
            Layer layer;
            layer.wq = TensorT<S>::randn({cfg.d_model, cfg.d_model}, rng, std0);
            layer.wk = TensorT<S>::randn({cfg.d_model, cfg.d_model}, rng, std0);
            layer.wv = TensorT<S>::randn({cfg.d_model, cfg.d_model}, rng, std0);
            layer.wo = TensorT<S>::randn({cfg.d_model, cfg.d_model}, rng, res_std);
            layer.fc = TensorT<S>::randn({cfg.d_model, hidden}, rng, std0);
            layer.proj = TensorT<S>::randn({hidden, cfg.d_model}, rng, res_std);
            layer.norm_attn = TensorT<S>::from({cfg.d_model}, std::vector<S>(size_t(cfg.d_model), S(1)));
            layer.norm_mlp = TensorT<S>::from({cfg.d_model}, std::vector<S>(size_t(cfg.d_model), S(1)));
            m.layers.push_back(std::move(layer));
        }
        m.norm_final = TensorT<S>::from({cfg.d_model}, std::vector<S>(size_t(cfg.d_model), S(1)));
        m.head = TensorT<S>::randn({cfg.d_model, cfg.vocab_size}, rng, std0);
        return m;
    }

    TensorT<S> site_linear(const TensorT<S>& x, const TensorT<S>& w, const std::string& site) const {
        TensorT<S> y = matmul(x, w);
        if (adapter) {
            if (const auto* s = adapter->find(site)) {
                auto low = matmul(matmul(x, s->A, false, true), s->B);
                y = add(y, scale(low, S(double(s->alpha) / double(s->r))));
            }
        }
        return y;
    }

    // Causal logits, one row per input position.
    TensorT<S> forward(std::span<const int> tokens) const {
        const int T = int(tokens.size());
        if (T < 1) throw ShapeError("forward: empty token sequence");
        if (T > cfg.max_context) throw ShapeError("forward: context overflow");
        std::vector<int> ids(tokens.begin(), tokens.end());
        std::vector<int> positions(static_cast<size_t>(T));
        for (int i = 0; i < T; ++i) positions[size_t(i)] = i;
        TensorT<S> x = add(rows(tok_emb, ids), rows(pos_emb, positions));
        for (size_t l = 0; l < layers.size(); ++l) {
            const Layer& layer = layers[l];
            std::string base = "layers." + std::to_string(l) + ".";
            TensorT<S> h = rmsnorm(x, layer.norm_attn);
            TensorT<S> q = site_linear(h, layer.wq, base + "attn.wq");
            TensorT<S> k = site_linear(h, layer.wk, base + "attn.wk");
            TensorT<S> v = site_linear(h, layer.wv, base + "attn.wv");
            TensorT<S> att = causal_attention(q, k, v, cfg.n_heads);
            x = add(x, site_linear(att, layer.wo, base + "attn.wo"));
            TensorT<S> h2 = rmsnorm(x, layer.norm_mlp);
            TensorT<S> mid = silu(site_linear(h2, layer.fc, base + "mlp.fc"));
            x = add(x, site_linear(mid, layer.proj, base + "mlp.proj"));
        }
        return site_linear(rmsnorm(x, norm_final), head, "head");
    }

    std::vector<TensorT<S>> parameters() {
        std::vector<TensorT<S>> out{tok_emb, pos_emb};
        for (auto& layer : layers) {
            out.push_back(layer.wq);
            out.push_back(layer.wk);
            out.push_back(layer.wv);
            out.push_back(layer.wo);
            out.push_back(layer.fc);
            out.push_back(layer.proj);
            out.push_back(layer.norm_attn);
            out.push_back(layer.norm_mlp);
        }
        out.push_back(norm_final);
        out.push_back(head);
        return out;
    }

    std::vector<std::pair<std::string, TensorT<S>>> named_tensors() {
        std::vector<std::pair<std::string, TensorT<S>>> out;
        out.emplace_back("tok_emb", tok_emb);
        out.emplace_back("pos_emb", pos_emb);
        for (size_t l = 0; l < layers.size(); ++l) {
            std::string base = "layers." + std::to_string(l) + ".";
            out.emplace_back(base + "attn.wq", layers[l].wq);
            out.emplace_back(base + "attn.wk", layers[l].wk);
            out.emplace_back(base + "attn.wv", layers[l].wv);
            out.emplace_back(base + "attn.wo", layers[l].wo);
            out.emplace_back(base + "mlp.fc", layers[l].fc);
            out.emplace_back(base + "mlp.proj", layers[l].proj);
            out.emplace_back(base + "norm_attn", layers[l].norm_attn);
            out.emplace_back(base + "norm_mlp", layers[l].norm_mlp);
        }
        out.emplace_back("norm_final", norm_final);
        out.emplace_back("head", head);
        return out;
    }

    TensorT<S>* find_site_weight(const std::string& site) {
        for (size_t l = 0; l < layers.size(); ++l) {
            std::string base = "layers." + std::to_string(l) + ".";
            if (site == base + "attn.wq") return &layers[l].wq;
            if (site == base + "attn.wk") return &layers[l].wk;
            if (site == base + "attn.wv") return &layers[l].wv;
            if (site == base + "attn.wo") return &layers[l].wo;
            if (site == base + "mlp.fc") return &layers[l].fc;
            if (site == base + "mlp.proj") return &layers[l].proj;
        }
        if (site == "head") return &head;
        return nullptr;
    }
};

using Model = ModelT<float>;

Model clone(const Model& m);
ModelT<double> to_double(const Model& m);

// W += delta at every adapter site; result has no adapter attached.
Model merged(const Model& model, const Adapter& adapter);

struct DecodeConfig {
    enum class Mode { greedy, nucleus };
    Mode mode = Mode::greedy;
    float top_p = 0.9f;
    float temperature = 0.7f;
    float repetition_penalty = 1.15f;
    int max_new_tokens = 96;
    uint64_t seed = 0;

    void validate() const {
        if (!(top_p > 0.0f && top_p <= 1.0f)) throw std::invalid_argument("top_p out of (0, 1]");
        if (!(temperature > 0.0f)) throw std::invalid_argument("temperature must be > 0");
        if (!(repetition_penalty >= 1.0f)) throw std::invalid_argument("repetition_penalty must be >= 1");
    }
};

std::vector<int> decode_tokens(const Model& model, std::vector<int> prompt,
                               const DecodeConfig& cfg);
std::string generate_response(const Model& model, std::string_view instruction,
                              const DecodeConfig& cfg);

// "TMDL" checkpoint: magic, u16 version, u32 JSON header length + bytes
// (the ModelConfig), u32 tensor count; per tensor: u16 name length + name,
// u32 ndim, u32 dims..., f32 data; trailing u32 CRC32 as in TADP.
void save_model(const Model& model, const std::filesystem::path& path);
Model load_model(const std::filesystem::path& path);

}  // namespace tadlab
