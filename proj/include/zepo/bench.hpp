#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "pipeline.hpp"

namespace zepo {

struct BenchCell {
    int steps = 4;
    bool seac = true;
    bool merge = true;

    std::string label() const {
        return "T=" + std::to_string(steps) + " seac=" + (seac ? "on" : "off") + " merge=" + (merge ? "on" : "off");
    }
};

struct BenchRow {
    BenchCell cell;
    std::vector<double> samples; // seconds per trial, warmup excluded
    double mean_seconds = 0.0;
    double std_seconds = 0.0;
    std::uint64_t attention_macs = 0; // whole run, extraction included
    std::uint64_t sampling_macs = 0;
    std::map<std::string, std::uint64_t> sampling_site_macs;
};

/// Timing and MAC table. `valid` is false when a cell failed and the table is partial.
struct BenchMatrix {
    std::vector<BenchRow> rows;
    bool valid = true;
    std::string error;

    const BenchRow* find(int steps, bool seac, bool merge) const {
        for (const auto& r : rows)
            if (r.cell.steps == steps && r.cell.seac == seac && (!seac || r.cell.merge == merge)) return &r;
        return nullptr;
    }

    std::string to_csv() const {
        std::ostringstream out;
        out << "steps,seac,merge,trials,mean_seconds,std_seconds,attention_macs,sampling_attention_macs\n";
        out << std::setprecision(9);
        for (const auto& r : rows) {
            out << r.cell.steps << ',' << (r.cell.seac ? "on" : "off") << ',' << (r.cell.merge ? "on" : "off") << ','
                << r.samples.size() << ',' << r.mean_seconds << ',' << r.std_seconds << ',' << r.attention_macs << ','
                << r.sampling_macs << '\n';
        }
        return out.str();
    }

    std::string summary() const {
        std::ostringstream out;
        out << std::left << std::setw(28) << "cell" << std::right << std::setw(12) << "mean[s]" << std::setw(12)
            << "std[s]" << std::setw(16) << "attn MACs" << '\n';
        for (const auto& r : rows) {
            out << std::left << std::setw(28) << r.cell.label() << std::right << std::fixed << std::setprecision(4)
                << std::setw(12) << r.mean_seconds << std::setw(12) << r.std_seconds << std::setw(16)
                << r.attention_macs << '\n';
        }
        if (!valid) out << "INVALID (partial): " << error << '\n';
        return out.str();
    }
};

/// T in {1, 2, 4}; per T a plain baseline and SEAC with merging on and off.
inline std::vector<BenchCell> default_bench_grid() {
    std::vector<BenchCell> grid;
    for (int t : {1, 2, 4}) {
        grid.push_back({t, false, false});
        grid.push_back({t, true, true});
        grid.push_back({t, true, false});
    }
    return grid;
}

inline constexpr int kMinBenchTrials = 5;

/// Runs every cell sequentially: one discarded warmup run, then `trials` timed runs.
inline BenchMatrix run_bench(const NoisePredictorPtr& net, const LatentCodec& codec, const ImageBuffer& content,
                             const ImageBuffer& style, const PipelineConfig& base, const DiffusionSchedule& schedule,
                             const std::vector<BenchCell>& grid, int trials) {
    if (trials < kMinBenchTrials) {
        throw std::invalid_argument("run_bench: at least " + std::to_string(kMinBenchTrials) + " trials required");
    }
    BenchMatrix matrix;
    for (const auto& cell : grid) {
        PipelineConfig cfg = base;
        cfg.steps = cell.steps;
        cfg.seac_enabled = cell.seac;
        cfg.seac.merge_enabled = cell.merge;
        BenchRow row;
        row.cell = cell;
        try {
            const RunRecord first = stylize(net, codec, content, style, cfg, schedule).record;
            row.attention_macs = first.total_attention_macs;
            row.sampling_macs = first.loop_attention_macs();
            row.sampling_site_macs = first.sampling_site_macs;
            for (int i = 0; i < trials; ++i) {
                const auto start = std::chrono::steady_clock::now();
                const RunRecord rec = stylize(net, codec, content, style, cfg, schedule).record;
                row.samples.push_back(std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count());
                if (rec.total_attention_macs != row.attention_macs) {
                    throw std::logic_error("attention MAC count changed between trials");
                }
            }
        } catch (const std::exception& e) {
            matrix.valid = false;
            matrix.error = cell.label() + ": " + e.what();
            return matrix;
        }
        const double n = static_cast<double>(row.samples.size());
        row.mean_seconds = std::accumulate(row.samples.begin(), row.samples.end(), 0.0) / n;
        double ss = 0.0;
        for (double s : row.samples) ss += (s - row.mean_seconds) * (s - row.mean_seconds);
        row.std_seconds = n > 1 ? std::sqrt(ss / (n - 1)) : 0.0;
        matrix.rows.push_back(std::move(row));
    }
    return matrix;
}

struct DirectionCheck {
    std::string name;
    bool passed = false;
    std::string detail;
};

/// Direction-only assertions over a bench matrix:
///  - merge on: SEAC sampling MACs equal the plain baseline at every site;
///  - merge off: SEAC sites cost exactly twice the baseline;
///  - merge on is not slower than merge off beyond one standard deviation.
inline std::vector<DirectionCheck> check_bench_directions(const BenchMatrix& m,
                                                          const std::vector<std::string>& seac_sites) {
    std::vector<DirectionCheck> checks;
    if (!m.valid) {
        checks.push_back({"matrix complete", false, m.error});
        return checks;
    }
    std::vector<int> steps;
    for (const auto& r : m.rows)
        if (std::ranges::find(steps, r.cell.steps) == steps.end()) steps.push_back(r.cell.steps);

    for (int t : steps) {
        const BenchRow* off = m.find(t, false, false);
        const BenchRow* on_merged = m.find(t, true, true);
        const BenchRow* on_full = m.find(t, true, false);
        const std::string tag = "T=" + std::to_string(t);
        if (off && on_merged) {
            bool ok = true;
            std::ostringstream detail;
            for (const auto& [site, macs] : off->sampling_site_macs) {
                auto it = on_merged->sampling_site_macs.find(site);
                const std::uint64_t got = it == on_merged->sampling_site_macs.end() ? 0 : it->second;
                if (got != macs) {
                    ok = false;
                    detail << site << ": " << got << " vs " << macs << "; ";
                }
            }
            checks.push_back({tag + " compute parity (merge on == baseline)", ok, ok ? "all sites equal" : detail.str()});
        }
        if (off && on_full) {
            bool ok = true;
            std::ostringstream detail;
            for (const auto& [site, macs] : off->sampling_site_macs) {
                const bool seac_site = std::ranges::find(seac_sites, site) != seac_sites.end();
                auto it = on_full->sampling_site_macs.find(site);
                const std::uint64_t got = it == on_full->sampling_site_macs.end() ? 0 : it->second;
                if (got != (seac_site ? 2 * macs : macs)) {
                    ok = false;
                    detail << site << ": " << got << " vs baseline " << macs << "; ";
                }
            }
            checks.push_back({tag + " merge off doubles SEAC-site MACs", ok, ok ? "exact 2x" : detail.str()});
        }
        if (on_merged && on_full) {
            const bool ok = on_merged->mean_seconds <= on_full->mean_seconds + on_full->std_seconds;
            std::ostringstream detail;
            detail << std::setprecision(4) << on_merged->mean_seconds << "s vs " << on_full->mean_seconds << "s +/- "
                   << on_full->std_seconds;
            checks.push_back({tag + " merge on not slower", ok, detail.str()});
        }
    }
    return checks;
}

} // namespace zepo
