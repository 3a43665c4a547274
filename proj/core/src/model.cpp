#include "tadlab/model.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>

#include "tadlab/serialize.hpp"

namespace tadlab {

using json = nlohmann::json;

std::vector<int> tokenize(std::string_view text) {
    std::vector<int> out;
    out.reserve(text.size());
    for (unsigned char c : text) out.push_back(int(c));
    return out;
}

std::string detokenize(std::span<const int> tokens) {
    std::string out;
    out.reserve(tokens.size());
    for (int t : tokens) {
        if (t >= 0 && t < kByteVocab) out.push_back(char(static_cast<unsigned char>(t)));
    }
    return out;
}

std::string render_prompt(std::string_view instruction) {
    std::string out = "### Instruction:\n";
    out += instruction;
    out += "\n### Response:\n";
    return out;
}

std::vector<int> encode_prompt(std::string_view instruction) {
    std::vector<int> out{kBos};
    auto body = tokenize(render_prompt(instruction));
    out.insert(out.end(), body.begin(), body.end());
    return out;
}

std::vector<int> encode_response(std::string_view response) {
    auto out = tokenize(response);
    out.push_back(kEos);
    return out;
}

std::vector<SiteInfo> linear_sites(const ModelConfig& cfg) {
    std::vector<SiteInfo> sites;
    int hidden = cfg.d_model * cfg.mlp_mult;
    for (int l = 0; l < cfg.n_layers; ++l) {
        std::string base = "layers." + std::to_string(l) + ".";
        sites.push_back({base + "attn.wq", cfg.d_model, cfg.d_model});
        sites.push_back({base + "attn.wk", cfg.d_model, cfg.d_model});
        sites.push_back({base + "attn.wv", cfg.d_model, cfg.d_model});
        sites.push_back({base + "attn.wo", cfg.d_model, cfg.d_model});
        sites.push_back({base + "mlp.fc", cfg.d_model, hidden});
        sites.push_back({base + "mlp.proj", hidden, cfg.d_model});
    }
    sites.push_back({"head", cfg.d_model, cfg.vocab_size});
    return sites;
}

SiteShapes site_shapes(const ModelConfig& cfg) {
    SiteShapes shapes;
    for (const auto& s : linear_sites(cfg)) shapes[s.name] = {s.m, s.n};
    return shapes;
}

Model clone(const Model& m) {
    Model out;
    out.cfg = m.cfg;
    auto copy = [](const Tensor& t) { return Tensor::from(t.shape(), t.data()); };
    out.tok_emb = copy(m.tok_emb);
    out.pos_emb = copy(m.pos_emb);
    for (const auto& layer : m.layers) {
        Model::Layer l;
        l.wq = copy(layer.wq);
        l.wk = copy(layer.wk);
        l.wv = copy(layer.wv);
        l.wo = copy(layer.wo);
        l.fc = copy(layer.fc);
        l.proj = copy(layer.proj);
        l.norm_attn = copy(layer.norm_attn);
        l.norm_mlp = copy(layer.norm_mlp);
        out.layers.push_back(std::move(l));
    }
    out.norm_final = copy(m.norm_final);
    out.head = copy(m.head);
    return out;
}

ModelT<double> to_double(const Model& m) {
    ModelT<double> out;
    out.cfg = m.cfg;
    auto copy = [](const Tensor& t) {
        std::vector<double> d(t.data().begin(), t.data().end());
        return TensorT<double>::from(t.shape(), std::move(d));
    };
    out.tok_emb = copy(m.tok_emb);
    out.pos_emb = copy(m.pos_emb);
    for (const auto& layer : m.layers) {
        ModelT<double>::Layer l;
        l.wq = copy(layer.wq);
        l.wk = copy(layer.wk);
        l.wv = copy(layer.wv);
        l.wo = copy(layer.wo);
        l.fc = copy(layer.fc);
        l.proj = copy(layer.proj);
        l.norm_attn = copy(layer.norm_attn);
        l.norm_mlp = copy(layer.norm_mlp);
        out.layers.push_back(std::move(l));
    }
    out.norm_final = copy(m.norm_final);
    out.head = copy(m.head);
    return out;
}

Model merged(const Model& model, const Adapter& adapter) {
    validate_sites(adapter, site_shapes(model.cfg));
    Model out = clone(model);
    out.adapter = nullptr;
    for (const auto& [name, layer] : adapter.layers) {
        Tensor* w = out.find_site_weight(name);
        if (!w) throw IoError(IoError::Kind::unknown_site, "merge: unknown site " + name);
        auto delta = lora_delta(layer);
        auto& data = w->data();
        for (size_t i = 0; i < data.size(); ++i) data[i] += delta[i];
    }
    return out;
}

namespace {

int sample_row(std::span<const float> logits, const std::vector<int>& context,
               const DecodeConfig& cfg, Rng& rng) {
    std::vector<float> adjusted(logits.begin(), logits.end());
    if (cfg.repetition_penalty > 1.0f) {
        std::vector<bool> present(adjusted.size(), false);
        for (int t : context)
            if (t >= 0 && t < int(adjusted.size())) present[size_t(t)] = true;
        for (size_t i = 0; i < adjusted.size(); ++i) {
            if (!present[i]) continue;
            adjusted[i] = adjusted[i] > 0 ? adjusted[i] / cfg.repetition_penalty
                                          : adjusted[i] * cfg.repetition_penalty;
        }
    }
    if (cfg.mode == DecodeConfig::Mode::greedy) {
        size_t best = 0;
        for (size_t i = 1; i < adjusted.size(); ++i)
            if (adjusted[i] > adjusted[best]) best = i;
        return int(best);
    }
    for (auto& v : adjusted) v /= cfg.temperature;
    auto probs = softmax_row<float>(adjusted);
    // nucleus: keep the smallest prefix of the probability-sorted vocab whose
    // mass reaches top_p, then renormalize
    std::vector<int> order(probs.size());
    for (size_t i = 0; i < order.size(); ++i) order[i] = int(i);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return probs[size_t(a)] > probs[size_t(b)]; });
    double mass = 0.0;
    size_t keep = 0;
    while (keep < order.size()) {
        mass += double(probs[size_t(order[keep])]);
        ++keep;
        if (mass >= double(cfg.top_p)) break;
    }
    double u = rng.uniform() * mass;
    double c = 0.0;
    for (size_t i = 0; i < keep; ++i) {
        c += double(probs[size_t(order[i])]);
        if (u < c) return order[i];
    }
    return order[keep - 1];
}

}  // namespace

std::vector<int> decode_tokens(const Model& model, std::vector<int> prompt,
                               const DecodeConfig& cfg) {
    cfg.validate();
    if (int(prompt.size()) >= model.cfg.max_context)
        throw ShapeError("decode: prompt does not fit the context");
    NoGradGuard no_grad;
    Rng rng(mix_seed(cfg.seed, 0x6465636full));
    std::vector<int> context = std::move(prompt);
    std::vector<int> generated;
    const int vocab = model.cfg.vocab_size;
    for (int step = 0; step < cfg.max_new_tokens; ++step) {
        if (int(context.size()) >= model.cfg.max_context) break;
        Tensor logits = model.forward(context);
        const float* last = logits.data().data() + (context.size() - 1) * size_t(vocab);
        int next = sample_row(std::span<const float>(last, size_t(vocab)), context, cfg, rng);
        if (next == kEos) break;
        context.push_back(next);
        generated.push_back(next);
    }
    return generated;
}

std::string generate_response(const Model& model, std::string_view instruction,
                              const DecodeConfig& cfg) {
    return detokenize(decode_tokens(model, encode_prompt(instruction), cfg));
}

void save_model(const Model& model, const std::filesystem::path& path) {
    json header;
    header["vocab_size"] = model.cfg.vocab_size;
    header["d_model"] = model.cfg.d_model;
    header["n_heads"] = model.cfg.n_heads;
    header["n_layers"] = model.cfg.n_layers;
    header["max_context"] = model.cfg.max_context;
    header["mlp_mult"] = model.cfg.mlp_mult;
    header["seed"] = model.cfg.seed;
    std::string header_str = header.dump();

    ByteWriter w;
    w.bytes("TMDL");
    w.u16(1);
    w.u32(uint32_t(header_str.size()));
    w.bytes(header_str);
    auto named = const_cast<Model&>(model).named_tensors();
    w.u32(uint32_t(named.size()));
    for (auto& [name, tensor] : named) {
        w.str(name);
        w.u32(uint32_t(tensor.shape().size()));
        for (int d : tensor.shape()) w.u32(uint32_t(d));
        w.f32s(tensor.data());
    }
    uint32_t crc = crc32(std::span(w.data()).subspan(4));
    w.u32(crc);
    write_file(path, w.data());
}

Model load_model(const std::filesystem::path& path) {
    auto bytes = read_file(path);
    ByteReader r(bytes);
    if (r.bytes(4) != "TMDL") throw IoError(IoError::Kind::bad_magic, "bad magic in " + path.string());
    uint16_t version = r.u16();
    if (version != 1)
        throw IoError(IoError::Kind::version_mismatch,
                      "unsupported model version " + std::to_string(version));
    if (bytes.size() < 8) throw IoError(IoError::Kind::truncated, "model file too short");
    uint32_t stored_crc;
    {
        ByteReader tail{std::span<const uint8_t>(bytes).subspan(bytes.size() - 4)};
        stored_crc = tail.u32();
    }
    uint32_t actual = crc32(std::span<const uint8_t>(bytes).subspan(4, bytes.size() - 8));
    if (stored_crc != actual)
        throw IoError(IoError::Kind::crc_mismatch, "model payload CRC mismatch in " + path.string());

    ModelConfig cfg;
    {
        auto header = json::parse(r.bytes(r.u32()));
        cfg.vocab_size = header.at("vocab_size").get<int>();
        cfg.d_model = header.at("d_model").get<int>();
        cfg.n_heads = header.at("n_heads").get<int>();
        cfg.n_layers = header.at("n_layers").get<int>();
        cfg.max_context = header.at("max_context").get<int>();
        cfg.mlp_mult = header.at("mlp_mult").get<int>();
        cfg.seed = header.at("seed").get<uint64_t>();
    }
    cfg.validate();
    Model model = Model::random_init(cfg);

    uint32_t count = r.u32();
    auto named = model.named_tensors();
    if (count != named.size())
        throw IoError(IoError::Kind::bad_header, "tensor count does not match config");
    for (uint32_t i = 0; i < count; ++i) {
        std::string name = r.str();
        uint32_t ndim = r.u32();
        std::vector<int> shape;
        size_t total = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            shape.push_back(int(r.u32()));
            total *= size_t(shape.back());
        }
        auto it = std::find_if(named.begin(), named.end(),
                               [&](const auto& p) { return p.first == name; });
        if (it == named.end())
            throw IoError(IoError::Kind::bad_header, "unexpected tensor name: " + name);
        if (it->second.shape() != shape)
            throw IoError(IoError::Kind::bad_header, "shape mismatch for tensor: " + name);
        it->second.data() = r.f32s(total);
    }
    return model;
}

}  // namespace tadlab
