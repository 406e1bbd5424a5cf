#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <memory>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "bench.hpp"
#include "codec.hpp"
#include "config.hpp"
#include "features.hpp"
#include "image.hpp"
#include "pipeline.hpp"
#include "png_io.hpp"
#include "toy_backbone.hpp"

namespace zepo {

inline constexpr int kExitOk = 0;
inline constexpr int kExitPipeline = 1;
inline constexpr int kExitConfig = 2;

/// Everything a command needs, resolved from a RunConfig.
struct Runtime {
    RunConfig config;
    PipelineConfig pipeline;
    DiffusionSchedule schedule;
    std::shared_ptr<const LatentCodec> codec;
    NoisePredictorPtr net;
    int image_size = 0;
};

inline Runtime make_runtime(const RunConfig& config) {
    Runtime rt;
    rt.config = config;
    rt.pipeline = config.pipeline_config();
    rt.schedule = config.schedule();
    const int channels = static_cast<int>(config.get_int("latent_channels"));
    const int width = static_cast<int>(config.get_int("base_width"));
    try {
        rt.codec = identity_codec(channels);
        rt.net = toy_backbone(channels, width, config.get_uint("backbone_seed"));
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    rt.image_size = config.image_size(rt.codec->default_image_size());
    if (rt.image_size <= 0 || rt.image_size % 4 != 0) {
        throw ConfigError("image_size must be a positive multiple of 4, got " + std::to_string(rt.image_size));
    }
    return rt;
}

/// Pipeline settings plus the codec, backbone and schedule selections, in table order.
inline std::vector<std::pair<std::string, std::string>> record_config(const Runtime& rt) {
    auto out = config_snapshot(rt.pipeline);
    for (const char* key : {"num_train_steps", "beta_start", "beta_end", "codec", "latent_channels", "backbone",
                            "base_width", "backbone_seed"}) {
        out.emplace_back(key, rt.config.get(key));
    }
    out.emplace_back("image_size", std::to_string(rt.image_size));
    return out;
}

inline ImageBuffer load_image(const std::string& path, int size) {
    ImageBuffer raw = read_png(path);
    raw.source_path = path;
    return preprocess_image(raw, size);
}

/// Square grid of equally sized tiles, ceil(sqrt(n)) columns; missing tiles stay black.
inline ImageBuffer tile_grid(const std::vector<ImageBuffer>& tiles) {
    if (tiles.empty()) throw std::invalid_argument("tile_grid: no tiles");
    const int n = static_cast<int>(tiles.size());
    const int cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
    const int rows = (n + cols - 1) / cols;
    const int th = tiles.front().height;
    const int tw = tiles.front().width;
    ImageBuffer grid(rows * th, cols * tw);
    for (int i = 0; i < n; ++i) {
        if (tiles[i].height != th || tiles[i].width != tw) throw std::invalid_argument("tile_grid: tile size mismatch");
        const int oy = (i / cols) * th;
        const int ox = (i % cols) * tw;
        for (int y = 0; y < th; ++y)
            for (int x = 0; x < tw; ++x)
                for (int c = 0; c < 3; ++c) grid.at(oy + y, ox + x, c) = tiles[i].at(y, x, c);
    }
    return grid;
}

namespace detail {

struct CommonFlags {
    std::string config_file;
    std::optional<std::string> steps, tau, lambda, guidance, strength, renoise_mode, seed, prompt, spacing, layers;
    bool no_merge = false;
    bool no_seac = false;
    std::vector<std::string> overrides;
};

inline void add_common_flags(CLI::App* cmd, CommonFlags& f) {
    cmd->add_option("--config", f.config_file, "key=value config file")->check(CLI::ExistingFile);
    cmd->add_option("--steps", f.steps, "sampling steps");
    cmd->add_option("--tau", f.tau, "feature extraction timestep");
    cmd->add_option("--lambda", f.lambda, "style enhancement coefficient");
    cmd->add_option("--guidance", f.guidance, "classifier-free guidance scale");
    cmd->add_option("--strength", f.strength, "fraction of the schedule covered, (0, 1]");
    cmd->add_option("--renoise-mode", f.renoise_mode, "source|target");
    cmd->add_option("--seed", f.seed, "run seed (default: ZEPO_SEED, then 0)");
    cmd->add_option("--prompt", f.prompt, "conditional prompt");
    cmd->add_option("--spacing", f.spacing, "trailing|linspace");
    cmd->add_option("--layers", f.layers, "controlled sites: all, none, stage list, or id:a,b");
    cmd->add_flag("--no-merge", f.no_merge, "disable feature merging");
    cmd->add_flag("--no-seac", f.no_seac, "plain self-attention everywhere");
    cmd->add_option("--set", f.overrides, "any config key as key=value (repeatable)");
}

/// Defaults, then the config file, then flags; the seed falls back to ZEPO_SEED.
inline RunConfig resolve_config(const CommonFlags& f) {
    RunConfig cfg;
    if (!f.config_file.empty()) cfg.load_file(f.config_file);
    for (const auto& kv : f.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw ConfigError("--set expects key=value, got '" + kv + "'");
        cfg.set(kv.substr(0, eq), kv.substr(eq + 1), "--set");
    }
    auto apply = [&cfg](const char* key, const std::optional<std::string>& v, const char* flag) {
        if (v) cfg.set(key, *v, flag);
    };
    apply("steps", f.steps, "--steps");
    apply("tau", f.tau, "--tau");
    apply("lambda", f.lambda, "--lambda");
    apply("guidance", f.guidance, "--guidance");
    apply("strength", f.strength, "--strength");
    apply("renoise_mode", f.renoise_mode, "--renoise-mode");
    apply("seed", f.seed, "--seed");
    apply("prompt", f.prompt, "--prompt");
    apply("spacing", f.spacing, "--spacing");
    apply("layers", f.layers, "--layers");
    if (f.no_merge) cfg.set("merge", "off", "--no-merge");
    if (f.no_seac) cfg.set("seac", "off", "--no-seac");
    cfg.apply_seed_fallback(std::getenv("ZEPO_SEED"));
    return cfg;
}

inline std::vector<int> parse_int_list(const std::string& text, const std::string& flag) {
    std::vector<int> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        if (item.empty()) continue;
        try {
            std::size_t used = 0;
            const int v = std::stoi(item, &used);
            if (used != item.size()) throw std::invalid_argument(item);
            out.push_back(v);
        } catch (const std::exception&) {
            throw ConfigError(flag + ": '" + item + "' is not an integer");
        }
    }
    if (out.empty()) throw ConfigError(flag + ": empty list");
    return out;
}

inline void write_text(const std::filesystem::path& path, const std::string& text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out << text;
}

inline double rmse(const LatentTensor& a, const LatentTensor& b) {
    return l2_distance(a, b) / std::sqrt(static_cast<double>(a.size()));
}

} // namespace detail

struct StylizeArgs {
    detail::CommonFlags flags;
    std::string content;
    std::string style;
    std::string output;
    std::string record;
    std::string dump_features;
};

inline int cmd_stylize(const StylizeArgs& args, std::ostream& out, std::ostream& err) {
    Runtime rt;
    ImageBuffer content, style;
    try {
        rt = make_runtime(detail::resolve_config(args.flags));
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return kExitConfig;
    }
    const std::string record_path = args.record.empty() ? args.output + ".record.json" : args.record;
    try {
        content = load_image(args.content, rt.image_size);
        style = load_image(args.style, rt.image_size);

        const auto start = std::chrono::steady_clock::now();
        StylizeResult result = stylize(rt.net, *rt.codec, content, style, rt.pipeline, rt.schedule);
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        result.record.config = record_config(rt);
        const std::string hash = result.record.record_hash();

        write_png(args.output, result.image, {{"RunRecordHash", hash}, {"Software", std::string("zepo ") + kLibraryVersion}});
        detail::write_text(record_path, result.record.to_json(true).dump(2) + "\n");

        if (!args.dump_features.empty()) {
            if (!rt.pipeline.seac_enabled) throw std::invalid_argument("--dump-features needs seac on");
            const FeatureBank bank =
                extract_consistency_features(*rt.net, rt.codec->encode(content), rt.codec->encode(style),
                                             rt.pipeline.tau, rt.pipeline.cond, rt.schedule, rt.pipeline.seed,
                                             rt.pipeline.extraction_noise);
            dump_feature_bank(bank, args.dump_features);
        }

        out << "steps=" << rt.pipeline.steps << " lambda=" << rt.config.get("lambda") << " tau=" << rt.pipeline.tau
            << " seconds=" << std::fixed << std::setprecision(3) << seconds << " record=" << hash << '\n';
        return kExitOk;
    } catch (const PipelineError& e) {
        err << "stylize failed: " << e.what() << '\n';
        try {
            RunRecord partial = e.record();
            partial.config = record_config(rt);
            detail::write_text(record_path, partial.to_json(true).dump(2) + "\n");
        } catch (const std::exception&) {
        }
        return kExitPipeline;
    } catch (const std::exception& e) {
        err << "stylize failed: " << e.what() << '\n';
        return kExitPipeline;
    }
}

struct ProbeArgs {
    detail::CommonFlags flags;
    std::string content;
    std::string style;
    std::string output;
    std::string csv;
    std::string timesteps = "99,299,599,899";
    std::string taus;
    std::string mode = "forward";
};

/// One-step clean-latent predictions across timesteps, and optionally stylisation across
/// extraction timesteps. Rows at t = 0 are flagged degenerate and skipped.
inline int cmd_probe(const ProbeArgs& args, std::ostream& out, std::ostream& err) {
    Runtime rt;
    std::vector<int> timesteps, taus;
    ProbeMode mode = ProbeMode::forward;
    try {
        rt = make_runtime(detail::resolve_config(args.flags));
        timesteps = detail::parse_int_list(args.timesteps, "--timesteps");
        if (!args.taus.empty()) {
            taus = detail::parse_int_list(args.taus, "--taus");
            if (args.style.empty()) throw ConfigError("--taus needs --style");
        }
        for (int t : timesteps)
            if (t < 0 || t >= rt.schedule.num_train_steps) throw ConfigError("timestep " + std::to_string(t) + " out of range");
        for (int t : taus)
            if (t < 0 || t >= rt.schedule.num_train_steps) throw ConfigError("tau " + std::to_string(t) + " out of range");
        if (args.mode == "inversion_stub") mode = ProbeMode::inversion_stub;
        else if (args.mode != "forward") throw ConfigError("--mode must be forward|inversion_stub");
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return kExitConfig;
    }

    try {
        const ImageBuffer content = load_image(args.content, rt.image_size);
        const LatentTensor z0 = rt.codec->encode(content);
        std::ostringstream csv;
        csv << "sweep,value,status,latent_rmse,latent_max_abs\n" << std::setprecision(10);
        std::vector<ImageBuffer> tiles;
        const ImageBuffer blank(rt.image_size, rt.image_size);

        for (int t : timesteps) {
            if (t == 0) {
                csv << "timestep,0,degenerate,,\n";
                err << "timestep 0: degenerate (consistency function is the identity), skipped\n";
                tiles.push_back(blank);
                continue;
            }
            const ProbeResult r =
                probe_x0_prediction(*rt.net, z0, t, rt.schedule, mode, rt.pipeline.seed, rt.pipeline.cond);
            csv << "timestep," << t << ",ok," << detail::rmse(r.x0_hat, z0) << ',' << max_abs_diff(r.x0_hat, z0) << '\n';
            tiles.push_back(rt.codec->decode(r.x0_hat));
        }

        if (!taus.empty()) {
            const ImageBuffer style = load_image(args.style, rt.image_size);
            for (int tau : taus) {
                PipelineConfig cfg = rt.pipeline;
                cfg.tau = tau;
                try {
                    const StylizeResult s = stylize(rt.net, *rt.codec, content, style, cfg, rt.schedule);
                    csv << "tau," << tau << ",ok," << detail::rmse(s.latent, z0) << ',' << max_abs_diff(s.latent, z0)
                        << '\n';
                    tiles.push_back(s.image);
                } catch (const PipelineError& e) {
                    if (tau != 0) throw;
                    csv << "tau,0,degenerate,,\n";
                    err << "tau 0: " << e.what() << '\n';
                    tiles.push_back(blank);
                }
            }
        }

        write_png(args.output, tile_grid(tiles), {{"Software", std::string("zepo ") + kLibraryVersion}});
        const std::string csv_path = args.csv.empty() ? args.output + ".csv" : args.csv;
        detail::write_text(csv_path, csv.str());
        out << "probe rows=" << timesteps.size() + taus.size() << " grid=" << args.output << " csv=" << csv_path << '\n';
        return kExitOk;
    } catch (const std::exception& e) {
        err << "probe failed: " << e.what() << '\n';
        return kExitPipeline;
    }
}

struct BenchArgs {
    detail::CommonFlags flags;
    std::string content;
    std::string style;
    std::string csv = "bench.csv";
    std::string steps_list = "1,2,4";
    int trials = kMinBenchTrials;
};

inline int cmd_bench(const BenchArgs& args, std::ostream& out, std::ostream& err) {
    Runtime rt;
    std::vector<BenchCell> grid;
    try {
        if (args.trials < kMinBenchTrials) {
            throw ConfigError("--trials must be >= " + std::to_string(kMinBenchTrials) + ", got " +
                              std::to_string(args.trials));
        }
        rt = make_runtime(detail::resolve_config(args.flags));
        for (int t : detail::parse_int_list(args.steps_list, "--steps-list")) {
            if (t < 1) throw ConfigError("--steps-list entries must be >= 1");
            grid.push_back({t, false, false});
            grid.push_back({t, true, true});
            grid.push_back({t, true, false});
        }
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return kExitConfig;
    }

    try {
        const ImageBuffer content =
            args.content.empty() ? synthetic_portrait(rt.image_size, 1) : load_image(args.content, rt.image_size);
        const ImageBuffer style =
            args.style.empty() ? synthetic_portrait(rt.image_size, 2) : load_image(args.style, rt.image_size);
        const BenchMatrix matrix =
            run_bench(rt.net, *rt.codec, content, style, rt.pipeline, rt.schedule, grid, args.trials);
        detail::write_text(args.csv, matrix.to_csv());
        out << matrix.summary();

        std::vector<std::string> seac_sites;
        for (const auto& site : rt.net->sites())
            if (rt.pipeline.seac.layer_selector.matches(site)) seac_sites.push_back(site.layer_id);
        bool all_ok = matrix.valid;
        for (const auto& check : check_bench_directions(matrix, seac_sites)) {
            out << (check.passed ? "PASS " : "FAIL ") << check.name << " (" << check.detail << ")\n";
            all_ok = all_ok && check.passed;
        }
        return all_ok ? kExitOk : kExitPipeline;
    } catch (const std::exception& e) {
        err << "bench failed: " << e.what() << '\n';
        return kExitPipeline;
    }
}

/// Entry point of the zepo tool. Parse errors and invalid configuration exit 2,
/// run failures exit 1.
inline int run_cli(int argc, const char* const* argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    CLI::App app{"zepo: few-step inversion-free portrait stylisation"};
    app.require_subcommand(1);

    StylizeArgs st;
    CLI::App* stylize_cmd = app.add_subcommand("stylize", "stylise a content image with a style reference");
    stylize_cmd->add_option("--content", st.content, "content PNG")->required()->check(CLI::ExistingFile);
    stylize_cmd->add_option("--style", st.style, "style reference PNG")->required()->check(CLI::ExistingFile);
    stylize_cmd->add_option("--output", st.output, "output PNG")->required();
    stylize_cmd->add_option("--record", st.record, "RunRecord path (default <output>.record.json)");
    stylize_cmd->add_option("--dump-features", st.dump_features, "write the feature bank as .npy files to DIR");
    detail::add_common_flags(stylize_cmd, st.flags);

    ProbeArgs pr;
    CLI::App* probe_cmd = app.add_subcommand("probe", "one-step prediction and extraction-timestep sweeps");
    probe_cmd->add_option("--content", pr.content, "content PNG")->required()->check(CLI::ExistingFile);
    probe_cmd->add_option("--style", pr.style, "style PNG, needed by --taus")->check(CLI::ExistingFile);
    probe_cmd->add_option("--output", pr.output, "grid PNG")->required();
    probe_cmd->add_option("--csv", pr.csv, "error CSV (default <output>.csv)");
    probe_cmd->add_option("--timesteps", pr.timesteps, "comma-separated timesteps")->capture_default_str();
    probe_cmd->add_option("--taus", pr.taus, "comma-separated extraction timesteps to stylise with");
    probe_cmd->add_option("--mode", pr.mode, "forward|inversion_stub")->capture_default_str();
    detail::add_common_flags(probe_cmd, pr.flags);

    BenchArgs bn;
    CLI::App* bench_cmd = app.add_subcommand("bench", "timing and attention MAC matrix");
    bench_cmd->add_option("--content", bn.content, "content PNG (default synthetic)")->check(CLI::ExistingFile);
    bench_cmd->add_option("--style", bn.style, "style PNG (default synthetic)")->check(CLI::ExistingFile);
    bench_cmd->add_option("--csv", bn.csv, "CSV output path")->capture_default_str();
    bench_cmd->add_option("--steps-list", bn.steps_list, "step counts to sweep")->capture_default_str();
    bench_cmd->add_option("--trials", bn.trials, "timed trials per cell (>= 5)")->capture_default_str();
    detail::add_common_flags(bench_cmd, bn.flags);

    detail::CommonFlags cf;
    CLI::App* config_cmd = app.add_subcommand("config", "print the resolved configuration with documentation");
    detail::add_common_flags(config_cmd, cf);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e, out, err);
    } catch (const CLI::ParseError& e) {
        err << "error: " << e.what() << "\n\n";
        const auto parsed = app.get_subcommands();
        err << (parsed.empty() ? app.help() : parsed.front()->help());
        return kExitConfig;
    }

    if (stylize_cmd->parsed()) return cmd_stylize(st, out, err);
    if (probe_cmd->parsed()) return cmd_probe(pr, out, err);
    if (bench_cmd->parsed()) return cmd_bench(bn, out, err);
    try {
        out << detail::resolve_config(cf).to_text();
        return kExitOk;
    } catch (const ConfigError& e) {
        err << "config error: " << e.what() << '\n';
        return kExitConfig;
    }
}

} // namespace zepo
