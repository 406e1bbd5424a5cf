#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "attention.hpp"
#include "backbone.hpp"
#include "features.hpp"
#include "merge.hpp"
#include "noise.hpp"

namespace zepo {

struct SeacConfig {
    double lambda = 1.2;
    bool merge_enabled = true;
    double merge_ratio = 0.5;
    MergeReduction merge_reduction = MergeReduction::size_weighted;
    LayerSelector layer_selector = LayerSelector::stages({Stage::mid, Stage::up});
    std::uint64_t merge_seed = 0;

    void validate() const {
        if (!(lambda > 0.0)) throw std::invalid_argument("seac: lambda must be > 0");
        if (!(merge_ratio > 0.0) || merge_ratio > 0.75) throw std::invalid_argument("seac: merge_ratio must be in (0, 0.75]");
        if (!layer_selector.matches) throw std::invalid_argument("seac: layer selector is empty");
    }
};

namespace detail {

inline FeatureSeq broadcast_batch(const FeatureSeq& seq, int batch) {
    if (seq.batch() == batch) return seq;
    if (seq.batch() != 1) {
        throw std::invalid_argument("seac: feature batch " + std::to_string(seq.batch()) +
                                    " cannot be broadcast to " + std::to_string(batch));
    }
    std::vector<FeatureSeq> copies(batch, seq);
    return stack(copies);
}

inline void check_seac_inputs(const FeatureSeq& q, const FeatureSeq& f_src, const FeatureSeq& f_ref,
                              const AttentionProjections& proj) {
    if (f_src.tokens() != f_ref.tokens()) {
        throw std::invalid_argument("seac: source bank has " + std::to_string(f_src.tokens()) +
                                    " tokens but reference bank has " + std::to_string(f_ref.tokens()));
    }
    if (f_src.dim() != proj.key.rows || f_ref.dim() != proj.key.rows || f_src.dim() != proj.value.rows) {
        throw std::invalid_argument("seac: bank feature dim does not match key/value projections");
    }
    if (q.dim() != proj.key.cols) throw std::invalid_argument("seac: query dim does not match key projection");
}

} // namespace detail

/// Concatenated keys and values: K = [K_src ; lambda K_ref], V = [V_src ; V_ref].
struct SeacKeyValues {
    FeatureSeq keys;
    FeatureSeq values;
};

inline SeacKeyValues seac_key_values(const FeatureSeq& f_src, const FeatureSeq& f_ref,
                                     const AttentionProjections& proj, double lambda, int batch) {
    const FeatureSeq src = detail::broadcast_batch(f_src, batch);
    const FeatureSeq ref = detail::broadcast_batch(f_ref, batch);
    return {concat_tokens(project(src, proj.key), scaled(project(ref, proj.key), lambda)),
            concat_tokens(project(src, proj.value), project(ref, proj.value))};
}

/// Pre-softmax scores of style-enhanced attention, (B, N, N_src + N_ref).
inline FeatureSeq seac_scores(const FeatureSeq& q_tgt, const FeatureSeq& f_src, const FeatureSeq& f_ref,
                              const AttentionProjections& proj, double lambda) {
    detail::check_seac_inputs(q_tgt, f_src, f_ref, proj);
    return attention_scores(q_tgt, seac_key_values(f_src, f_ref, proj, lambda, q_tgt.batch()).keys);
}

/// Target queries attend over source and lambda-scaled reference keys; values are taken
/// from both banks. Output has the query's length.
inline FeatureSeq seac_attention(const FeatureSeq& q_tgt, const FeatureSeq& f_src, const FeatureSeq& f_ref,
                                 const AttentionProjections& proj, double lambda, AttentionMeter* meter = nullptr,
                                 const std::string& layer_id = "seac") {
    detail::check_seac_inputs(q_tgt, f_src, f_ref, proj);
    if (!(lambda > 0.0)) throw std::invalid_argument("seac: lambda must be > 0");
    SeacKeyValues kv = seac_key_values(f_src, f_ref, proj, lambda, q_tgt.batch());
    FeatureSeq out = scaled_dot_attention(q_tgt, kv.keys, kv.values);
    if (meter) {
        meter->record({layer_id, "seac", q_tgt.batch(), q_tgt.tokens(), kv.keys.tokens(), kv.keys.dim(),
                       kv.values.dim()});
    }
    return out;
}

/// Bank features prepared for one site: merged once per run, reused at every step.
struct PreparedSite {
    AttentionSite site;
    FeatureSeq source;
    FeatureSeq reference;
    std::vector<MergeMap> source_maps; // one per batch element, empty when merging is off
    std::vector<MergeMap> reference_maps;
};

class SeacProcessor final : public AttentionProcessor {
public:
    SeacProcessor(const FeatureBank& bank, SeacConfig cfg, const std::vector<AttentionSite>* network_sites)
        : cfg_(std::move(cfg)), bank_hash_(bank.content_hash()) {
        cfg_.validate();
        if (network_sites) {
            for (const auto& site : *network_sites) {
                if (cfg_.layer_selector.matches(site) && !bank.find(site.layer_id)) {
                    throw std::invalid_argument("seac: feature bank has no entry for selected layer " + site.layer_id);
                }
            }
        }
        const NoiseStream seeds(cfg_.merge_seed);
        for (std::size_t li = 0; li < bank.layers().size(); ++li) {
            const BankLayer& layer = bank.layers()[li];
            if (!cfg_.layer_selector.matches(layer.site)) continue;
            PreparedSite p{layer.site, layer.source, layer.reference, {}, {}};
            if (cfg_.merge_enabled) {
                p.source = merge_all(layer, layer.source, seeds, li, 0, p.source_maps);
                p.reference = merge_all(layer, layer.reference, seeds, li, 1, p.reference_maps);
            }
            prepared_.emplace(layer.site.layer_id, std::move(p));
        }
        if (prepared_.empty()) {
            throw std::invalid_argument("seac: layer selector '" + cfg_.layer_selector.description +
                                        "' matches no layer in the feature bank");
        }
    }

    std::string name() const override { return "seac"; }

    FeatureSeq process(const AttentionSite& site, const FeatureSeq& q, const FeatureSeq& k, const FeatureSeq& v,
                       ProcessorContext& ctx) const override {
        auto it = prepared_.find(site.layer_id);
        if (it == prepared_.end()) {
            if (cfg_.layer_selector.matches(site)) {
                throw std::invalid_argument("seac: feature bank has no entry for selected layer " + site.layer_id);
            }
            return metered_attention(site, "plain", q, k, v, ctx.meter);
        }
        return seac_attention(q, it->second.source, it->second.reference, ctx.projections, cfg_.lambda, ctx.meter,
                              site.layer_id);
    }

    const SeacConfig& config() const { return cfg_; }
    const std::string& bank_hash() const { return bank_hash_; }
    const PreparedSite* prepared(const std::string& layer_id) const {
        auto it = prepared_.find(layer_id);
        return it == prepared_.end() ? nullptr : &it->second;
    }
    std::vector<std::string> selected_layers() const {
        std::vector<std::string> ids;
        for (const auto& [id, _] : prepared_) ids.push_back(id);
        return ids;
    }

private:
    FeatureSeq merge_all(const BankLayer& layer, const FeatureSeq& seq, const NoiseStream& seeds, std::size_t li,
                         int which, std::vector<MergeMap>& maps) const {
        std::vector<FeatureSeq> merged;
        for (int b = 0; b < seq.batch(); ++b) {
            const std::uint64_t index = (static_cast<std::uint64_t>(li) << 20) | (static_cast<std::uint64_t>(b) << 1) |
                                        static_cast<std::uint64_t>(which);
            const std::uint64_t seed = seeds.engine(NoiseStream::Purpose::merge, index)();
            FeatureSeq one = seq.slice(b);
            maps.push_back(build_merge_map(one, layer.grid_height, layer.grid_width, cfg_.merge_ratio, seed));
            merged.push_back(apply_merge(one, maps.back(), cfg_.merge_reduction));
        }
        return stack(merged);
    }

    SeacConfig cfg_;
    std::string bank_hash_;
    std::map<std::string, PreparedSite> prepared_;
};

/// Processor that runs style-enhanced attention at the bank's selected sites and plain
/// attention elsewhere. Pass the network's sites to check the bank covers the selection.
inline std::shared_ptr<const SeacProcessor> make_seac_processor(const FeatureBank& bank, const SeacConfig& cfg,
                                                                const std::vector<AttentionSite>* network_sites = nullptr) {
    return std::make_shared<SeacProcessor>(bank, cfg, network_sites);
}

} // namespace zepo
