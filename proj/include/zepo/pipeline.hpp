#pragma once

#include <chrono>
#include <cstdint>
#include <map>
#include <memory>
#include <mutex>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "backbone.hpp"
#include "codec.hpp"
#include "digest.hpp"
#include "features.hpp"
#include "json.hpp"
#include "noise.hpp"
#include "schedule.hpp"
#include "seac.hpp"

namespace zepo {

inline constexpr const char* kLibraryVersion = "0.1.0";

enum class RenoiseMode {
    source, // every step re-noises the encoded source latent
    target, // every step re-noises the running clean-latent estimate
};

inline std::string_view to_string(RenoiseMode m) { return m == RenoiseMode::source ? "source" : "target"; }

inline RenoiseMode parse_renoise_mode(std::string_view s) {
    if (s == "source") return RenoiseMode::source;
    if (s == "target") return RenoiseMode::target;
    throw std::invalid_argument("unknown renoise mode '" + std::string(s) + "' (expected source|target)");
}

struct PipelineConfig {
    int steps = 4;
    int tau = kDefaultTau;
    bool seac_enabled = true;
    SeacConfig seac;
    ConditionSpec cond;
    double strength = 1.0;
    RenoiseMode renoise_mode = RenoiseMode::source;
    TimestepSpacing spacing = TimestepSpacing::trailing;
    NoiseSharing extraction_noise = NoiseSharing::independent;
    double sigma_data = kDefaultSigmaData;
    double timestep_scale = kDefaultTimestepScale;
    std::uint64_t seed = 0;

    void validate() const {
        if (steps < 1) throw std::invalid_argument("pipeline: steps must be >= 1");
        if (tau < 0) throw std::invalid_argument("pipeline: tau must be >= 0");
        if (!(strength > 0.0) || strength > 1.0) throw std::invalid_argument("pipeline: strength must be in (0, 1]");
        if (cond.guidance_scale < 0.0) throw std::invalid_argument("pipeline: guidance must be >= 0");
        seac.validate();
    }
};

struct X0Prediction {
    LatentTensor raw;        // (z_t - sqrt(1 - abar) eps) / sqrt(abar)
    LatentTensor consistent; // c_skip z_t + c_out raw
};

/// Clean-latent estimate for one sampling step, combined through the consistency boundary.
inline X0Prediction predict_x0(const LatentTensor& zt, int t, const LatentTensor& eps_pred,
                               const DiffusionSchedule& schedule, double sigma_data = kDefaultSigmaData,
                               double timestep_scale = kDefaultTimestepScale) {
    schedule.check_timestep(t, "predict_x0");
    require_same_shape(zt, eps_pred, "predict_x0");
    const double abar = schedule.alpha_bar[t];
    if (!(abar > 0.0)) throw std::domain_error("predict_x0: alpha_bar is zero at t = " + std::to_string(t));
    const double a = std::sqrt(abar);
    const double b = std::sqrt(1.0 - abar);
    const BoundaryCoefficients c = consistency_boundary(t, sigma_data, timestep_scale);

    X0Prediction p{zt, zt};
    for (std::size_t i = 0; i < zt.size(); ++i) {
        p.raw[i] = (zt[i] - b * eps_pred[i]) / a;
        p.consistent[i] = c.c_skip * zt[i] + c.c_out * p.raw[i];
    }
    return p;
}

/// Noise used by sampling step `index`; addressable so a single step can be replayed.
inline LatentTensor sampling_noise(std::uint64_t seed, int index, const LatentTensor& like) {
    return NoiseStream(seed).normal_like(like, NoiseStream::Purpose::sampling, static_cast<std::uint64_t>(index));
}

struct StepRecord {
    int index = 0;
    int timestep = 0;
    double seconds = 0.0;
    std::uint64_t attention_macs = 0;
    int evaluations = 0;
};

struct ExtractionRecord {
    int tau = 0;
    double seconds = 0.0;
    std::uint64_t attention_macs = 0;
    int evaluations = 0;
    std::string bank_hash;
};

/// Provenance of one stylisation run.
struct RunRecord {
    std::vector<std::pair<std::string, std::string>> config;
    std::uint64_t seed = 0;
    std::vector<int> timesteps;
    std::optional<ExtractionRecord> extraction;
    std::vector<StepRecord> steps;
    std::map<std::string, std::uint64_t> site_macs;          // extraction plus sampling
    std::map<std::string, std::uint64_t> sampling_site_macs; // sampling loop only
    std::uint64_t total_attention_macs = 0;
    std::string content_hash;
    std::string style_hash;
    std::string output_latent_hash;
    std::string output_image_hash;
    std::string bank_hash_after;
    bool complete = false;
    std::string error;

    std::uint64_t loop_attention_macs() const {
        std::uint64_t total = 0;
        for (const auto& s : steps) total += s.attention_macs;
        return total;
    }

    /// Stable-key-order document. Timing fields are omitted when `with_timing` is false.
    nlohmann::ordered_json to_json(bool with_timing = true) const {
        nlohmann::ordered_json j;
        j["format"] = "zepo.run_record/1";
        j["complete"] = complete;
        if (!error.empty()) j["error"] = error;
        nlohmann::ordered_json cfg = nlohmann::ordered_json::object();
        for (const auto& [k, v] : config) cfg[k] = v;
        j["config"] = cfg;
        j["seed"] = seed;
        j["timesteps"] = timesteps;
        if (extraction) {
            nlohmann::ordered_json e;
            e["tau"] = extraction->tau;
            e["evaluations"] = extraction->evaluations;
            e["attention_macs"] = extraction->attention_macs;
            e["bank_hash"] = extraction->bank_hash;
            if (with_timing) e["seconds"] = extraction->seconds;
            j["extraction"] = e;
        } else {
            j["extraction"] = nullptr;
        }
        j["steps"] = nlohmann::ordered_json::array();
        for (const auto& s : steps) {
            nlohmann::ordered_json st;
            st["index"] = s.index;
            st["timestep"] = s.timestep;
            st["evaluations"] = s.evaluations;
            st["attention_macs"] = s.attention_macs;
            if (with_timing) st["seconds"] = s.seconds;
            j["steps"].push_back(st);
        }
        nlohmann::ordered_json sites = nlohmann::ordered_json::object();
        for (const auto& [k, v] : site_macs) sites[k] = v;
        j["site_attention_macs"] = sites;
        nlohmann::ordered_json loop_sites = nlohmann::ordered_json::object();
        for (const auto& [k, v] : sampling_site_macs) loop_sites[k] = v;
        j["sampling_site_attention_macs"] = loop_sites;
        j["total_attention_macs"] = total_attention_macs;
        j["hashes"] = {{"content", content_hash},
                       {"style", style_hash},
                       {"bank_after_sampling", bank_hash_after},
                       {"output_latent", output_latent_hash},
                       {"output_image", output_image_hash}};
        j["build"] = {{"library", kLibraryVersion},
                      {"compiler", std::string(__VERSION__)},
                      {"cplusplus", static_cast<long>(__cplusplus)}};
        if (with_timing) j["record_hash"] = record_hash();
        return j;
    }

    /// Digest of the timing-free document; identical for identical configs and inputs.
    std::string record_hash() const { return sha256_hex(to_json(false).dump()); }
};

class PipelineError : public std::runtime_error {
public:
    PipelineError(const std::string& what, RunRecord partial)
        : std::runtime_error(what), record_(std::move(partial)) {}
    const RunRecord& record() const { return record_; }

private:
    RunRecord record_;
};

struct StylizeResult {
    ImageBuffer image;
    LatentTensor latent;
    RunRecord record;
};

inline std::vector<std::pair<std::string, std::string>> config_snapshot(const PipelineConfig& cfg) {
    auto num = [](double v) {
        std::ostringstream ss;
        ss.precision(17);
        ss << v;
        return ss.str();
    };
    return {{"steps", std::to_string(cfg.steps)},
            {"tau", std::to_string(cfg.tau)},
            {"seac", cfg.seac_enabled ? "on" : "off"},
            {"lambda", num(cfg.seac.lambda)},
            {"merge", cfg.seac.merge_enabled ? "on" : "off"},
            {"merge_ratio", num(cfg.seac.merge_ratio)},
            {"merge_reduction",
             cfg.seac.merge_reduction == MergeReduction::size_weighted ? "size_weighted" : "plain_mean"},
            {"layers", cfg.seac.layer_selector.description},
            {"prompt", cfg.cond.prompt},
            {"uncond_prompt", cfg.cond.uncond_prompt},
            {"guidance", num(cfg.cond.guidance_scale)},
            {"strength", num(cfg.strength)},
            {"renoise_mode", std::string(to_string(cfg.renoise_mode))},
            {"spacing", std::string(to_string(cfg.spacing))},
            {"extraction_noise", cfg.extraction_noise == NoiseSharing::independent ? "independent" : "shared"},
            {"sigma_data", num(cfg.sigma_data)},
            {"timestep_scale", num(cfg.timestep_scale)},
            {"seed", std::to_string(cfg.seed)}};
}

namespace detail {

inline std::mutex& unsafe_network_mutex() {
    static std::mutex m;
    return m;
}

inline double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

} // namespace detail

/// Inversion-free stylisation: extract consistency features once at tau, then for each
/// planned timestep re-noise, predict with style-enhanced attention, and update the
/// clean-latent estimate. The final estimate is decoded.
inline StylizeResult stylize(const NoisePredictorPtr& net, const LatentCodec& codec, const ImageBuffer& content,
                             const ImageBuffer& style, const PipelineConfig& cfg, const DiffusionSchedule& schedule) {
    if (!net) throw std::invalid_argument("stylize: null network");
    RunRecord record;
    record.config = config_snapshot(cfg);
    record.seed = cfg.seed;

    std::unique_lock<std::mutex> serial;
    if (!net->thread_safe()) serial = std::unique_lock(detail::unsafe_network_mutex());

    try {
        cfg.validate();
        const TimestepPlan plan = plan_timesteps(cfg.steps, cfg.strength, schedule, cfg.spacing);
        record.timesteps = plan.steps;

        const LatentTensor z_src = codec.encode(content);
        const LatentTensor z_ref = codec.encode(style);
        record.content_hash = sha256_hex(z_src.values());
        record.style_hash = sha256_hex(z_ref.values());

        AttentionMeter meter;
        NoisePredictorPtr sampler = net;
        std::optional<FeatureBank> bank;
        if (cfg.seac_enabled) {
            const auto start = std::chrono::steady_clock::now();
            bank.emplace(extract_consistency_features(*net, z_src, z_ref, cfg.tau, cfg.cond, schedule, cfg.seed,
                                                      cfg.extraction_noise, &meter));
            SeacConfig seac = cfg.seac;
            seac.merge_seed = cfg.seed;
            auto proc = make_seac_processor(*bank, seac, &net->sites());
            sampler = register_processor(net, seac.layer_selector, proc);
            record.extraction = ExtractionRecord{cfg.tau, detail::seconds_since(start), meter.total_macs(), 2,
                                                 bank->content_hash()};
        }

        const std::map<std::string, std::uint64_t> extraction_sites = meter.per_site();
        LatentTensor estimate = z_src;
        for (std::size_t i = 0; i < plan.steps.size(); ++i) {
            const int t = plan.steps[i];
            const auto start = std::chrono::steady_clock::now();
            const std::uint64_t macs_before = meter.total_macs();
            const std::size_t calls_before = meter.calls().size();

            const LatentTensor eps = sampling_noise(cfg.seed, static_cast<int>(i), z_src);
            const LatentTensor zt =
                forward_noise(cfg.renoise_mode == RenoiseMode::source ? z_src : estimate, t, eps, schedule);
            EvalContext ctx;
            ctx.meter = &meter;
            const LatentTensor eps_pred = predict_with_cfg(*sampler, zt, t, cfg.cond, ctx);
            estimate = predict_x0(zt, t, eps_pred, schedule, cfg.sigma_data, cfg.timestep_scale).consistent;

            StepRecord step;
            step.index = static_cast<int>(i);
            step.timestep = t;
            step.seconds = detail::seconds_since(start);
            step.attention_macs = meter.total_macs() - macs_before;
            const std::size_t sites = std::max<std::size_t>(1, net->sites().size());
            step.evaluations = static_cast<int>((meter.calls().size() - calls_before) / sites);
            record.steps.push_back(step);
        }

        if (bank) {
            record.bank_hash_after = bank->content_hash();
            if (record.bank_hash_after != record.extraction->bank_hash) {
                throw std::logic_error("feature bank changed during sampling");
            }
        }
        record.site_macs = meter.per_site();
        for (const auto& [id, macs] : record.site_macs) {
            auto it = extraction_sites.find(id);
            record.sampling_site_macs[id] = macs - (it == extraction_sites.end() ? 0 : it->second);
        }
        record.total_attention_macs = meter.total_macs();

        StylizeResult result;
        result.image = codec.decode(estimate);
        result.latent = std::move(estimate);
        record.output_latent_hash = sha256_hex(result.latent.values());
        record.output_image_hash = sha256_hex(result.image.pixels);
        record.complete = true;
        result.record = std::move(record);
        return result;
    } catch (const std::exception& e) {
        record.complete = false;
        record.error = e.what();
        throw PipelineError(e.what(), std::move(record));
    }
}

} // namespace zepo
