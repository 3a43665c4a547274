#include "tadlab/adapter.hpp"

#include <nlohmann/json.hpp>

#include "tadlab/serialize.hpp"

namespace tadlab {

using json = nlohmann::json;

std::string provenance_name(Provenance p) {
    switch (p) {
        case Provenance::clean: return "clean";
        case Provenance::baseline: return "baseline";
        case Provenance::polished: return "polished";
        case Provenance::over_poisoned: return "over_poisoned";
        case Provenance::fused: return "fused";
        default: return "unknown";
    }
}

Provenance provenance_from_name(const std::string& name) {
    if (name == "clean") return Provenance::clean;
    if (name == "baseline") return Provenance::baseline;
    if (name == "polished") return Provenance::polished;
    if (name == "over_poisoned") return Provenance::over_poisoned;
    if (name == "fused") return Provenance::fused;
    return Provenance::unknown;
}

std::vector<float> lora_delta(const LoraLayer& layer) {
    if (int(layer.A.size()) != layer.r * layer.m || int(layer.B.size()) != layer.r * layer.n)
        throw ShapeError("lora_delta: factor sizes inconsistent with r/m/n");
    const size_t m = size_t(layer.m), n = size_t(layer.n), r = size_t(layer.r);
    const double s = double(layer.alpha) / double(layer.r);
    std::vector<double> acc(m * n, 0.0);
    for (size_t k = 0; k < r; ++k) {
        const float* arow = layer.A.data() + k * m;
        const float* brow = layer.B.data() + k * n;
        for (size_t i = 0; i < m; ++i) {
            double a = double(arow[i]);
            if (a == 0.0) continue;
            double* out = acc.data() + i * n;
            for (size_t j = 0; j < n; ++j) out[j] += a * double(brow[j]);
        }
    }
    std::vector<float> delta(m * n);
    for (size_t i = 0; i < delta.size(); ++i) delta[i] = float(acc[i] * s);
    return delta;
}

namespace {

// Stack src's factors under dst with src's alpha/r folded into its B rows;
// dst must already use alpha == r convention for its own rows.
void stack_into(LoraLayer& dst, const LoraLayer& src) {
    if (dst.m != src.m || dst.n != src.n)
        throw ShapeError("fuse: conflicting shapes at site " + dst.site);
    const double fold = double(src.alpha) / double(src.r);
    dst.A.insert(dst.A.end(), src.A.begin(), src.A.end());
    size_t at = dst.B.size();
    dst.B.resize(at + src.B.size());
    for (size_t i = 0; i < src.B.size(); ++i) dst.B[at + i] = float(double(src.B[i]) * fold);
    dst.r += src.r;
    dst.alpha = float(dst.r);
}

LoraLayer folded_copy(const LoraLayer& src) {
    LoraLayer out;
    out.site = src.site;
    out.m = src.m;
    out.n = src.n;
    out.r = src.r;
    out.alpha = float(src.r);  // alpha/r == 1, scale folded into B
    out.A = src.A;
    const double fold = double(src.alpha) / double(src.r);
    out.B.resize(src.B.size());
    for (size_t i = 0; i < src.B.size(); ++i) out.B[i] = float(double(src.B[i]) * fold);
    return out;
}

}  // namespace

Adapter fuse(const Adapter& a, const Adapter& b) {
    Adapter out;
    out.provenance = Provenance::fused;
    out.seed = mix_seed(a.seed, b.seed);
    for (const auto& [name, layer] : a.layers) out.layers.emplace(name, folded_copy(layer));
    for (const auto& [name, layer] : b.layers) {
        auto it = out.layers.find(name);
        if (it == out.layers.end()) {
            out.layers.emplace(name, folded_copy(layer));
        } else {
            stack_into(it->second, layer);
        }
    }
    return out;
}

void validate_sites(const Adapter& adapter, const SiteShapes& shapes) {
    for (const auto& [name, layer] : adapter.layers) {
        auto it = shapes.find(name);
        if (it == shapes.end())
            throw IoError(IoError::Kind::unknown_site, "adapter site not in model: " + name);
        if (it->second.first != layer.m || it->second.second != layer.n)
            throw ShapeError("adapter site " + name + " shape mismatch");
    }
}

void save_adapter(const Adapter& adapter, const std::filesystem::path& path) {
    ByteWriter w;
    w.bytes("TADP");
    w.u16(1);
    w.u32(uint32_t(adapter.layers.size()));
    for (const auto& [name, layer] : adapter.layers) {
        w.str(name);
        w.u32(uint32_t(layer.r));
        w.f32(layer.alpha);
        w.u32(uint32_t(layer.m));
        w.u32(uint32_t(layer.n));
        w.f32s(layer.A);
        w.f32s(layer.B);
    }
    uint32_t crc = crc32(std::span(w.data()).subspan(4));
    w.u32(crc);
    write_file(path, w.data());

    write_text_file(path.string() + ".manifest.json", adapter_manifest_json(adapter));
}

Adapter load_adapter(const std::filesystem::path& path) {
    auto bytes = read_file(path);
    ByteReader r(bytes);
    if (r.bytes(4) != "TADP") throw IoError(IoError::Kind::bad_magic, "bad magic in " + path.string());
    uint16_t version = r.u16();
    if (version != 1)
        throw IoError(IoError::Kind::version_mismatch,
                      "unsupported adapter version " + std::to_string(version));
    if (bytes.size() < 8) throw IoError(IoError::Kind::truncated, "adapter file too short");
    uint32_t stored_crc;
    {
        ByteReader tail{std::span<const uint8_t>(bytes).subspan(bytes.size() - 4)};
        stored_crc = tail.u32();
    }
    uint32_t actual = crc32(std::span<const uint8_t>(bytes).subspan(4, bytes.size() - 8));
    if (stored_crc != actual)
        throw IoError(IoError::Kind::crc_mismatch, "adapter payload CRC mismatch in " + path.string());

    Adapter out;
    uint32_t count = r.u32();
    for (uint32_t i = 0; i < count; ++i) {
        LoraLayer layer;
        layer.site = r.str();
        layer.r = int(r.u32());
        layer.alpha = r.f32();
        layer.m = int(r.u32());
        layer.n = int(r.u32());
        if (layer.r <= 0 || layer.m <= 0 || layer.n <= 0)
            throw IoError(IoError::Kind::bad_header, "non-positive dims for site " + layer.site);
        layer.A = r.f32s(size_t(layer.r) * size_t(layer.m));
        layer.B = r.f32s(size_t(layer.r) * size_t(layer.n));
        out.layers.emplace(layer.site, std::move(layer));
    }

    auto manifest = std::filesystem::path(path.string() + ".manifest.json");
    if (std::filesystem::exists(manifest)) {
        auto j = json::parse(read_text_file(manifest));
        out.provenance = provenance_from_name(j.value("provenance", "unknown"));
        out.seed = j.value("seed", uint64_t(0));
    }
    return out;
}

std::string adapter_manifest_json(const Adapter& adapter) {
    json j;
    j["provenance"] = provenance_name(adapter.provenance);
    j["seed"] = adapter.seed;
    json sites = json::array();
    for (const auto& [name, layer] : adapter.layers) {
        sites.push_back({{"site", name},
                         {"r", layer.r},
                         {"alpha", layer.alpha},
                         {"m", layer.m},
                         {"n", layer.n}});
    }
    j["sites"] = sites;
    return j.dump(2) + "\n";
}

}  // namespace tadlab
