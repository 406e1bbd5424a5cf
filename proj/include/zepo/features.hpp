#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "backbone.hpp"
#include "digest.hpp"
#include "json.hpp"
#include "noise.hpp"
#include "schedule.hpp"

namespace zepo {

/// Pre-projection hidden sequences captured at one attention site for both images.
struct BankLayer {
    AttentionSite site;
    int grid_height = 0;
    int grid_width = 0;
    FeatureSeq source;
    FeatureSeq reference;
};

/// Consistency features for a source/reference pair, extracted once at a fixed timestep.
class FeatureBank {
public:
    FeatureBank(std::vector<BankLayer> layers, int tau, std::string source_hash, std::string reference_hash)
        : layers_(std::move(layers)), tau_(tau), source_hash_(std::move(source_hash)),
          reference_hash_(std::move(reference_hash)) {
        for (const auto& l : layers_) {
            if (l.source.tokens() != l.reference.tokens() || l.source.dim() != l.reference.dim()) {
                throw std::invalid_argument("FeatureBank: source/reference shape mismatch at " + l.site.layer_id);
            }
        }
    }

    const std::vector<BankLayer>& layers() const { return layers_; }
    int tau() const { return tau_; }
    const std::string& source_hash() const { return source_hash_; }
    const std::string& reference_hash() const { return reference_hash_; }

    const BankLayer* find(const std::string& layer_id) const {
        for (const auto& l : layers_)
            if (l.site.layer_id == layer_id) return &l;
        return nullptr;
    }

    /// Digest over every stored value plus tau and the input hashes.
    std::string content_hash() const {
        Digest d;
        d.update(static_cast<std::int64_t>(tau_)).update(source_hash_).update(reference_hash_);
        for (const auto& l : layers_) {
            d.update(l.site.layer_id).update(l.source.values()).update(l.reference.values());
        }
        return d.finish_hex();
    }

private:
    std::vector<BankLayer> layers_;
    int tau_;
    std::string source_hash_;
    std::string reference_hash_;
};

class ExtractionError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

inline constexpr int kDefaultTau = 99;

enum class NoiseSharing {
    independent, // source and reference draw separate noise
    shared,      // one draw reused for both
};

/// Noises both latents to `tau` and runs one conditional evaluation per image, capturing the
/// hidden sequence entering every self-attention site.
inline FeatureBank extract_consistency_features(const NoisePredictor& net, const LatentTensor& z_src,
                                                const LatentTensor& z_ref, int tau, const ConditionSpec& cond,
                                                const DiffusionSchedule& schedule, std::uint64_t seed,
                                                NoiseSharing sharing = NoiseSharing::independent,
                                                AttentionMeter* meter = nullptr) {
    if (tau == 0) {
        throw ExtractionError(
            "cannot extract consistency features at tau = 0: the consistency function is the identity at t = 0, "
            "so the network never learned to process clean latents; use tau >= 1 (default 99)");
    }
    if (tau < 1 || tau >= schedule.num_train_steps) {
        throw ExtractionError("extraction timestep tau = " + std::to_string(tau) + " outside [1, " +
                              std::to_string(schedule.num_train_steps - 1) + "]");
    }
    require_same_shape(z_src, z_ref, "extract_consistency_features");

    const NoiseStream noise(seed);
    const LatentTensor eps_src = noise.normal_like(z_src, NoiseStream::Purpose::extraction, 0);
    const LatentTensor eps_ref =
        sharing == NoiseSharing::shared ? eps_src : noise.normal_like(z_ref, NoiseStream::Purpose::extraction, 1);

    auto capture = [&](const LatentTensor& z0, const LatentTensor& eps) {
        std::map<std::string, std::pair<FeatureSeq, std::pair<int, int>>> taps;
        EvalContext ctx;
        ctx.meter = meter;
        ctx.feature_tap = [&taps](const AttentionSite& site, const FeatureSeq& hidden, int gh, int gw) {
            taps.insert_or_assign(site.layer_id, std::make_pair(hidden, std::make_pair(gh, gw)));
        };
        net.evaluate(forward_noise(z0, tau, eps, schedule), tau, cond, ctx);
        return taps;
    };
    auto src_taps = capture(z_src, eps_src);
    auto ref_taps = capture(z_ref, eps_ref);

    std::vector<BankLayer> layers;
    for (const auto& site : net.sites()) {
        auto s = src_taps.find(site.layer_id);
        auto r = ref_taps.find(site.layer_id);
        if (s == src_taps.end() || r == ref_taps.end()) {
            throw std::runtime_error("extract_consistency_features: site " + site.layer_id + " produced no features");
        }
        layers.push_back({site, s->second.second.first, s->second.second.second, std::move(s->second.first),
                          std::move(r->second.first)});
    }
    if (src_taps.size() != net.sites().size()) {
        throw std::runtime_error("extract_consistency_features: network tapped undeclared sites");
    }
    return FeatureBank(std::move(layers), tau, sha256_hex(z_src.values()), sha256_hex(z_ref.values()));
}

enum class ProbeMode { forward, inversion_stub };

/// Maps a clean latent to a noisy anchor at t. No implementation ships; tests may register one.
using InversionProvider = std::function<LatentTensor(const LatentTensor& z0, int t)>;

struct ProbeResult {
    LatentTensor noised;
    LatentTensor x0_hat;
};

/// One-step clean-latent estimate from a latent noised to t:
/// x0_hat = (z_t - sqrt(1 - abar_t) eps_theta) / sqrt(abar_t).
inline ProbeResult probe_x0_prediction(const NoisePredictor& net, const LatentTensor& z0, int t,
                                       const DiffusionSchedule& schedule, ProbeMode mode = ProbeMode::forward,
                                       std::uint64_t seed = 0, const ConditionSpec& cond = {},
                                       const InversionProvider& inversion = {}) {
    if (t < 1) throw std::invalid_argument("probe_x0_prediction: t must be >= 1");
    schedule.check_timestep(t, "probe_x0_prediction");

    ProbeResult r;
    if (mode == ProbeMode::inversion_stub) {
        if (!inversion) throw std::invalid_argument("probe_x0_prediction: inversion mode needs an inversion provider");
        r.noised = inversion(z0, t);
        require_same_shape(r.noised, z0, "probe_x0_prediction");
    } else {
        const LatentTensor eps = NoiseStream(seed).normal_like(z0, NoiseStream::Purpose::sampling, t);
        r.noised = forward_noise(z0, t, eps, schedule);
    }
    const LatentTensor eps_pred = net.predict(r.noised, t, cond);
    require_same_shape(eps_pred, z0, "probe_x0_prediction");
    const double a = std::sqrt(schedule.alpha_bar[t]);
    const double b = std::sqrt(1.0 - schedule.alpha_bar[t]);
    r.x0_hat = r.noised;
    for (std::size_t i = 0; i < r.x0_hat.size(); ++i) r.x0_hat[i] = (r.noised[i] - b * eps_pred[i]) / a;
    return r;
}

namespace detail {

inline void write_npy(const std::filesystem::path& path, const FeatureSeq& seq) {
    std::string header = "{'descr': '<f8', 'fortran_order': False, 'shape': (" + std::to_string(seq.batch()) + ", " +
                         std::to_string(seq.tokens()) + ", " + std::to_string(seq.dim()) + "), }";
    const std::size_t unpadded = 10 + header.size() + 1;
    header.append((64 - unpadded % 64) % 64, ' ');
    header.push_back('\n');

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write("\x93NUMPY\x01\x00", 8);
    const auto len = static_cast<std::uint16_t>(header.size());
    const char len_bytes[2] = {static_cast<char>(len & 0xff), static_cast<char>(len >> 8)};
    out.write(len_bytes, 2);
    out.write(header.data(), static_cast<std::streamsize>(header.size()));
    out.write(reinterpret_cast<const char*>(seq.values().data()),
              static_cast<std::streamsize>(seq.size() * sizeof(double)));
}

} // namespace detail

/// Writes <layer>.src.npy / <layer>.ref.npy per site plus an index.json sidecar.
inline void dump_feature_bank(const FeatureBank& bank, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::ordered_json index;
    index["tau"] = bank.tau();
    index["source_hash"] = bank.source_hash();
    index["reference_hash"] = bank.reference_hash();
    index["bank_hash"] = bank.content_hash();
    index["layers"] = nlohmann::ordered_json::array();
    for (const auto& l : bank.layers()) {
        const std::string src = l.site.layer_id + ".src.npy";
        const std::string ref = l.site.layer_id + ".ref.npy";
        detail::write_npy(dir / src, l.source);
        detail::write_npy(dir / ref, l.reference);
        index["layers"].push_back({{"layer_id", l.site.layer_id},
                                   {"stage", std::string(to_string(l.site.stage))},
                                   {"batch", l.source.batch()},
                                   {"tokens", l.source.tokens()},
                                   {"dim", l.source.dim()},
                                   {"grid", {l.grid_height, l.grid_width}},
                                   {"source_file", src},
                                   {"reference_file", ref},
                                   {"source_digest", sha256_hex(l.source.values())},
                                   {"reference_digest", sha256_hex(l.reference.values())}});
    }
    std::ofstream(dir / "index.json") << index.dump(2) << '\n';
}

} // namespace zepo
