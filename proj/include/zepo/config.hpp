#pragma once

#include <algorithm>
#include <charconv>
#include <cstdint>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "pipeline.hpp"
#include "schedule.hpp"

namespace zepo {

class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Flat key=value run configuration. Every key has a default; unknown keys are rejected.
/// Later sources override earlier ones: defaults, then a config file, then command-line flags.
class RunConfig {
public:
    enum class Kind { integer, unsigned_integer, real, text, toggle, choice };

    struct Key {
        std::string name;
        std::string default_value;
        Kind kind;
        std::vector<std::string> choices;
        std::string help;
    };

    static const std::vector<Key>& keys() {
        static const std::vector<Key> table = {
            {"steps", "4", Kind::integer, {}, "sampling steps T"},
            {"tau", "99", Kind::integer, {}, "timestep at which consistency features are extracted"},
            {"lambda", "1.2", Kind::real, {}, "style enhancement coefficient applied to reference keys"},
            {"guidance", "2", Kind::real, {}, "classifier-free guidance scale; extraction is a single conditional pass"},
            {"prompt", "head", Kind::text, {}, "conditional text prompt"},
            {"uncond_prompt", "", Kind::text, {}, "unconditional text prompt"},
            {"strength", "1", Kind::real, {}, "fraction of the schedule covered by the first step, (0, 1]"},
            {"renoise_mode", "source", Kind::choice, {"source", "target"}, "latent re-noised at each step"},
            {"spacing", "trailing", Kind::choice, {"trailing", "linspace"}, "timestep spacing"},
            {"seac", "on", Kind::toggle, {}, "style-enhanced attention control"},
            {"merge", "on", Kind::toggle, {}, "merge bank features before attention control"},
            {"merge_ratio", "0.5", Kind::real, {}, "fraction of tokens merged away, (0, 0.75]"},
            {"merge_reduction", "size_weighted", Kind::choice, {"size_weighted", "plain_mean"}, "merge averaging"},
            {"layers", "mid,up", Kind::text, {}, "attention sites under control: stage list, all, or id:a,b"},
            {"extraction_noise", "independent", Kind::choice, {"independent", "shared"},
             "noise draws for source/reference during extraction"},
            {"seed", "0", Kind::unsigned_integer, {}, "run seed (falls back to ZEPO_SEED)"},
            {"num_train_steps", "1000", Kind::integer, {}, "length of the noise schedule"},
            {"beta_start", "0.00085", Kind::real, {}, "first beta of the scaled-linear schedule"},
            {"beta_end", "0.012", Kind::real, {}, "last beta of the scaled-linear schedule"},
            {"sigma_data", "0.5", Kind::real, {}, "consistency boundary sigma_data"},
            {"timestep_scale", "10", Kind::real, {}, "consistency boundary timestep scaling"},
            {"codec", "identity", Kind::choice, {"identity"}, "latent codec"},
            {"latent_channels", "4", Kind::integer, {}, "latent channels of the identity codec"},
            {"image_size", "auto", Kind::text, {}, "preprocessing size; auto = codec default (64 identity, 512 adapter)"},
            {"backbone", "toy", Kind::choice, {"toy"}, "noise predictor"},
            {"base_width", "32", Kind::integer, {}, "toy backbone channel width"},
            {"backbone_seed", "0", Kind::unsigned_integer, {}, "toy backbone weight seed"},
        };
        return table;
    }

    RunConfig() {
        for (const auto& k : keys()) values_[k.name] = k.default_value;
    }

    static const Key* find_key(std::string_view name) {
        for (const auto& k : keys())
            if (k.name == name) return &k;
        return nullptr;
    }

    void set(const std::string& name, const std::string& value, const std::string& origin = "") {
        const Key* key = find_key(name);
        const std::string where = origin.empty() ? "" : origin + ": ";
        if (!key) throw ConfigError(where + "unknown config key '" + name + "'");
        validate(*key, value, where);
        values_[name] = value;
        explicit_.insert_or_assign(name, true);
    }

    bool is_set(const std::string& name) const { return explicit_.contains(name); }

    const std::string& get(const std::string& name) const {
        auto it = values_.find(name);
        if (it == values_.end()) throw ConfigError("unknown config key '" + name + "'");
        return it->second;
    }

    long long get_int(const std::string& name) const { return parse_int(get(name), name); }
    std::uint64_t get_uint(const std::string& name) const { return parse_uint(get(name), name); }
    double get_real(const std::string& name) const { return parse_real(get(name), name); }
    bool get_toggle(const std::string& name) const { return parse_toggle(get(name), name); }

    /// Parses "key = value" lines; blank lines and lines starting with '#' are skipped.
    void load_stream(std::istream& in, const std::string& origin) {
        std::string line;
        for (int lineno = 1; std::getline(in, line); ++lineno) {
            const std::string at = origin + ":" + std::to_string(lineno);
            const std::string trimmed = trim(line);
            if (trimmed.empty() || trimmed.front() == '#') continue;
            const auto eq = trimmed.find('=');
            if (eq == std::string::npos) throw ConfigError(at + ": expected key=value, got '" + trimmed + "'");
            set(trim(trimmed.substr(0, eq)), trim(trimmed.substr(eq + 1)), at);
        }
    }

    void load_file(const std::string& path) {
        std::ifstream in(path);
        if (!in) throw ConfigError("cannot read config file '" + path + "'");
        load_stream(in, path);
    }

    /// Fills `seed` from an environment value unless it was set explicitly.
    void apply_seed_fallback(const char* env_value) {
        if (is_set("seed") || !env_value || !*env_value) return;
        set("seed", env_value, "ZEPO_SEED");
    }

    std::vector<std::pair<std::string, std::string>> snapshot() const {
        std::vector<std::pair<std::string, std::string>> out;
        for (const auto& k : keys()) out.emplace_back(k.name, values_.at(k.name));
        return out;
    }

    std::string to_text() const {
        std::ostringstream out;
        for (const auto& k : keys()) out << "# " << k.help << '\n' << k.name << " = " << values_.at(k.name) << '\n';
        return out.str();
    }

    PipelineConfig pipeline_config() const {
        PipelineConfig cfg;
        cfg.steps = static_cast<int>(get_int("steps"));
        cfg.tau = static_cast<int>(get_int("tau"));
        cfg.seac_enabled = get_toggle("seac");
        cfg.seac.lambda = get_real("lambda");
        cfg.seac.merge_enabled = get_toggle("merge");
        cfg.seac.merge_ratio = get_real("merge_ratio");
        cfg.seac.merge_reduction =
            get("merge_reduction") == "plain_mean" ? MergeReduction::plain_mean : MergeReduction::size_weighted;
        try {
            cfg.seac.layer_selector = parse_selector(get("layers"));
        } catch (const std::exception& e) {
            throw ConfigError(std::string("layers: ") + e.what());
        }
        cfg.cond.prompt = get("prompt");
        cfg.cond.uncond_prompt = get("uncond_prompt");
        cfg.cond.guidance_scale = get_real("guidance");
        cfg.strength = get_real("strength");
        cfg.renoise_mode = parse_renoise_mode(get("renoise_mode"));
        cfg.spacing = parse_spacing(get("spacing"));
        cfg.extraction_noise = get("extraction_noise") == "shared" ? NoiseSharing::shared : NoiseSharing::independent;
        cfg.sigma_data = get_real("sigma_data");
        cfg.timestep_scale = get_real("timestep_scale");
        cfg.seed = get_uint("seed");
        try {
            cfg.validate();
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
        return cfg;
    }

    DiffusionSchedule schedule() const {
        try {
            return build_schedule(static_cast<int>(get_int("num_train_steps")), get_real("beta_start"),
                                  get_real("beta_end"));
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    }

    /// Resolved preprocessing size given the codec's own default.
    int image_size(int codec_default) const {
        const std::string& v = get("image_size");
        if (v == "auto") return codec_default;
        return static_cast<int>(parse_int(v, "image_size"));
    }

private:
    static std::string trim(std::string s) {
        const auto first = s.find_first_not_of(" \t\r");
        if (first == std::string::npos) return {};
        const auto last = s.find_last_not_of(" \t\r");
        return s.substr(first, last - first + 1);
    }

    static long long parse_int(const std::string& v, const std::string& name) {
        long long out = 0;
        auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc{} || p != v.data() + v.size()) throw ConfigError(name + ": '" + v + "' is not an integer");
        return out;
    }

    static std::uint64_t parse_uint(const std::string& v, const std::string& name) {
        std::uint64_t out = 0;
        auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc{} || p != v.data() + v.size()) {
            throw ConfigError(name + ": '" + v + "' is not a non-negative integer");
        }
        return out;
    }

    static double parse_real(const std::string& v, const std::string& name) {
        double out = 0.0;
        auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
        if (ec != std::errc{} || p != v.data() + v.size() || !std::isfinite(out)) {
            throw ConfigError(name + ": '" + v + "' is not a finite number");
        }
        return out;
    }

    static bool parse_toggle(const std::string& v, const std::string& name) {
        if (v == "on" || v == "true" || v == "1" || v == "yes") return true;
        if (v == "off" || v == "false" || v == "0" || v == "no") return false;
        throw ConfigError(name + ": '" + v + "' is not on/off");
    }

    static void validate(const Key& key, const std::string& value, const std::string& where) {
        try {
            switch (key.kind) {
            case Kind::integer: parse_int(value, key.name); break;
            case Kind::unsigned_integer: parse_uint(value, key.name); break;
            case Kind::real: parse_real(value, key.name); break;
            case Kind::toggle: parse_toggle(value, key.name); break;
            case Kind::choice:
                if (std::ranges::find(key.choices, value) == key.choices.end()) {
                    std::string allowed;
                    for (const auto& c : key.choices) allowed += (allowed.empty() ? "" : "|") + c;
                    throw ConfigError(key.name + ": '" + value + "' is not one of " + allowed);
                }
                break;
            case Kind::text: break;
            }
            if (key.name == "image_size" && value != "auto") parse_int(value, key.name);
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }

    std::map<std::string, std::string> values_;
    std::map<std::string, bool> explicit_;
};

} // namespace zepo
