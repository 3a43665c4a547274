#pragma once

// Low-rank adapter: per-site factor pairs (A: r x m, B: r x n) with
// delta(site) = (alpha/r) * A^T B added to the site's weight. Adapters are
// detachable from the base weights, fusable by exact factor stacking, and
// serialized in the "TADP" container.

#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "tadlab/tensor.hpp"

namespace tadlab {

struct LoraLayer {
    std::string site;  // must match a model linear site name
    int r = 0;
    float alpha = 0.0f;
    int m = 0;  // site weight rows (input dim)
    int n = 0;  // site weight cols (output dim)
    std::vector<float> A;  // r x m, row-major
    std::vector<float> B;  // r x n, row-major
};

enum class Provenance { unknown, clean, baseline, polished, over_poisoned, fused };
std::string provenance_name(Provenance p);
Provenance provenance_from_name(const std::string& name);

struct Adapter {
    std::map<std::string, LoraLayer> layers;  // keyed by site; deterministic order
    Provenance provenance = Provenance::unknown;
    uint64_t seed = 0;
};

// shape lookup for validation: site name -> (m, n)
using SiteShapes = std::map<std::string, std::pair<int, int>>;

// Materialized delta (alpha/r) * A^T B, m x n row-major. Accumulates in
// double so the result is independent of factor row order (fused adapters
// compare bit-equal regardless of fuse argument order).
std::vector<float> lora_delta(const LoraLayer& layer);

// Exact-sum fusion by factor stacking. The fused site has rank r_a + r_b and
// alpha normalized to its rank; the per-operand alpha/r scales are folded
// into the stacked B blocks, so delta(fused) == delta(a) + delta(b).
Adapter fuse(const Adapter& a, const Adapter& b);

void validate_sites(const Adapter& adapter, const SiteShapes& shapes);

// "TADP" v1 container (little-endian):
//   magic "TADP", u16 version, u32 layer count;
//   per layer: u16 name length + name bytes, u32 r, f32 alpha, u32 m, u32 n,
//              r*m f32 (A), r*n f32 (B);
//   u32 CRC32 over everything between the magic and the CRC itself.
// A JSON sidecar "<path>.manifest.json" carries names/shapes/provenance/seed.
void save_adapter(const Adapter& adapter, const std::filesystem::path& path);
Adapter load_adapter(const std::filesystem::path& path);

std::string adapter_manifest_json(const Adapter& adapter);

// Runtime attachment: the factor tensors live in the autodiff graph so
// training can flow gradients into them. Scalar-templated like the rest of
// the numeric stack.
template <class S>
struct AttachedAdapterT {
    struct Site {
        TensorT<S> A;  // r x m
        TensorT<S> B;  // r x n
        int r = 0;
        float alpha = 0.0f;
    };
    std::map<std::string, Site> sites;

    static AttachedAdapterT from(const Adapter& adapter) {
        AttachedAdapterT out;
        for (const auto& [name, layer] : adapter.layers) {
            Site s;
            s.r = layer.r;
            s.alpha = layer.alpha;
            std::vector<S> a(layer.A.begin(), layer.A.end());
            std::vector<S> b(layer.B.begin(), layer.B.end());
            s.A = TensorT<S>::from({layer.r, layer.m}, std::move(a));
            s.B = TensorT<S>::from({layer.r, layer.n}, std::move(b));
            out.sites.emplace(name, std::move(s));
        }
        return out;
    }

    Adapter snapshot(Provenance provenance, uint64_t seed) const {
        Adapter out;
        out.provenance = provenance;
        out.seed = seed;
        for (const auto& [name, s] : sites) {
            LoraLayer layer;
            layer.site = name;
            layer.r = s.r;
            layer.alpha = s.alpha;
            layer.m = s.A.dim(1);
            layer.n = s.B.dim(1);
            layer.A.reserve(s.A.size());
            for (S v : s.A.data()) layer.A.push_back(float(v));
            layer.B.reserve(s.B.size());
            for (S v : s.B.data()) layer.B.push_back(float(v));
            out.layers.emplace(name, std::move(layer));
        }
        return out;
    }

    std::vector<TensorT<S>> factor_params() {
        std::vector<TensorT<S>> params;
        for (auto& [name, s] : sites) {
            params.push_back(s.A);
            params.push_back(s.B);
        }
        return params;
    }

    const Site* find(const std::string& name) const {
        auto it = sites.find(name);
        return it == sites.end() ? nullptr : &it->second;
    }
};

using AttachedAdapter = AttachedAdapterT<float>;

}  // namespace tadlab
