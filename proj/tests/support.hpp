#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include <unistd.h>

#include "zepo/zepo.hpp"

namespace zepo::testing {

inline LatentTensor random_latent(int b, int c, int h, int w, std::uint64_t seed, double scale = 1.0) {
    LatentTensor out(b, c, h, w);
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> dist(0.0, scale);
    for (double& v : out.values()) v = dist(gen);
    return out;
}

inline FeatureSeq random_seq(int b, int n, int d, std::uint64_t seed, double scale = 1.0) {
    FeatureSeq out(b, n, d);
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> dist(0.0, scale);
    for (double& v : out.values()) v = dist(gen);
    return out;
}

inline Matrix random_matrix(int rows, int cols, std::uint64_t seed, double scale = 1.0) {
    Matrix m(rows, cols);
    std::mt19937_64 gen(seed);
    std::normal_distribution<double> dist(0.0, scale / std::sqrt(static_cast<double>(rows)));
    for (double& v : m.data) v = dist(gen);
    return m;
}

inline AttentionProjections random_projections(int d, std::uint64_t seed) {
    return {random_matrix(d, d, seed), random_matrix(d, d, seed + 1), random_matrix(d, d, seed + 2),
            random_matrix(d, d, seed + 3)};
}

inline double max_abs_diff(const FeatureSeq& a, const FeatureSeq& b) {
    if (a.batch() != b.batch() || a.tokens() != b.tokens() || a.dim() != b.dim()) return INFINITY;
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a.values()[i] - b.values()[i]));
    return m;
}

/// Row-major dense matrix helpers for the naive oracles, written without library code.
using Dense = std::vector<std::vector<double>>;

inline Dense rows_of(const FeatureSeq& s, int b) {
    Dense out(s.tokens(), std::vector<double>(s.dim()));
    for (int n = 0; n < s.tokens(); ++n)
        for (int k = 0; k < s.dim(); ++k) out[n][k] = s.at(b, n, k);
    return out;
}

inline Dense matmul(const Dense& x, const Matrix& w) {
    Dense out(x.size(), std::vector<double>(w.cols, 0.0));
    for (std::size_t i = 0; i < x.size(); ++i)
        for (int j = 0; j < w.cols; ++j)
            for (int k = 0; k < w.rows; ++k) out[i][j] += x[i][k] * w(k, j);
    return out;
}

/// Naive attention with explicit reference scaling: keys are [ks ; ref_scale * kr].
struct DenseAttention {
    Dense logits;
    Dense weights;
    Dense output;
};

inline DenseAttention dense_attention(const Dense& q, const Dense& ks, const Dense& kr, const Dense& vs,
                                      const Dense& vr, double ref_scale) {
    const std::size_t d = q.front().size();
    const double inv = 1.0 / std::sqrt(static_cast<double>(d));
    DenseAttention r;
    for (const auto& qi : q) {
        std::vector<double> row;
        for (const auto& k : ks) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += qi[j] * k[j];
            row.push_back(dot * inv);
        }
        for (const auto& k : kr) {
            double dot = 0.0;
            for (std::size_t j = 0; j < d; ++j) dot += qi[j] * ref_scale * k[j];
            row.push_back(dot * inv);
        }
        double mx = -INFINITY;
        for (double v : row) mx = std::max(mx, v);
        std::vector<double> w(row.size());
        double sum = 0.0;
        for (std::size_t j = 0; j < row.size(); ++j) sum += (w[j] = std::exp(row[j] - mx));
        for (double& v : w) v /= sum;
        const std::size_t dv = vs.empty() ? vr.front().size() : vs.front().size();
        std::vector<double> o(dv, 0.0);
        for (std::size_t j = 0; j < w.size(); ++j) {
            const auto& v = j < vs.size() ? vs[j] : vr[j - vs.size()];
            for (std::size_t c = 0; c < dv; ++c) o[c] += w[j] * v[c];
        }
        r.logits.push_back(row);
        r.weights.push_back(w);
        r.output.push_back(o);
    }
    return r;
}

/// Bilinear resampler written from the pixel-centre mapping, used to check preprocessing.
inline ImageBuffer reference_resample(const ImageBuffer& img, int top, int left, int side, int target) {
    ImageBuffer crop(side, side);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
            for (int c = 0; c < 3; ++c) crop.at(y, x, c) = img.at(top + y, left + x, c);
    ImageBuffer out(target, target);
    for (int y = 0; y < target; ++y) {
        for (int x = 0; x < target; ++x) {
            const double sy = std::min(std::max((y + 0.5) * side / target - 0.5, 0.0), side - 1.0);
            const double sx = std::min(std::max((x + 0.5) * side / target - 0.5, 0.0), side - 1.0);
            const int y0 = static_cast<int>(sy);
            const int x0 = static_cast<int>(sx);
            const int y1 = y0 + 1 < side ? y0 + 1 : y0;
            const int x1 = x0 + 1 < side ? x0 + 1 : x0;
            const double wy = sy - y0;
            const double wx = sx - x0;
            for (int c = 0; c < 3; ++c) {
                out.at(y, x, c) = crop.at(y0, x0, c) * (1 - wy) * (1 - wx) + crop.at(y0, x1, c) * (1 - wy) * wx +
                                  crop.at(y1, x0, c) * wy * (1 - wx) + crop.at(y1, x1, c) * wy * wx;
            }
        }
    }
    return out;
}

/// Exhaustive merge assignment: every non-destination scored against every destination,
/// best destination by cosine (lowest index on ties), then the r best sources overall.
inline std::vector<std::pair<int, int>> brute_force_assignment(const FeatureSeq& seq, const std::vector<int>& dsts,
                                                               int r) {
    const int n = seq.tokens();
    const int d = seq.dim();
    auto cosine = [&](int a, int b) {
        double dot = 0.0, na = 0.0, nb = 0.0;
        for (int k = 0; k < d; ++k) {
            dot += seq.at(0, a, k) * seq.at(0, b, k);
            na += seq.at(0, a, k) * seq.at(0, a, k);
            nb += seq.at(0, b, k) * seq.at(0, b, k);
        }
        return dot / (std::sqrt(na) * std::sqrt(nb));
    };
    struct Row {
        int src, dst;
        double sim;
    };
    std::vector<Row> rows;
    for (int s = 0; s < n; ++s) {
        bool is_dst = false;
        for (int t : dsts) is_dst = is_dst || t == s;
        if (is_dst) continue;
        Row best{s, -1, -INFINITY};
        for (int t : dsts) {
            const double c = cosine(s, t);
            if (c > best.sim || (c == best.sim && t < best.dst)) best = {s, t, c};
        }
        rows.push_back(best);
    }
    for (std::size_t i = 0; i < rows.size(); ++i)
        for (std::size_t j = i + 1; j < rows.size(); ++j)
            if (rows[j].sim > rows[i].sim || (rows[j].sim == rows[i].sim && rows[j].src < rows[i].src))
                std::swap(rows[i], rows[j]);
    rows.resize(std::min<std::size_t>(rows.size(), r));
    std::vector<std::pair<int, int>> out;
    for (const auto& row : rows) out.emplace_back(row.src, row.dst);
    std::sort(out.begin(), out.end());
    return out;
}

/// Wraps a network so every evaluation still runs it (processors, taps and meters fire) but
/// returns the exact noise that maps z0 to the given z_t.
class PerfectOracle final : public NoisePredictor {
public:
    PerfectOracle(NoisePredictorPtr inner, LatentTensor z0, DiffusionSchedule schedule)
        : inner_(std::move(inner)), z0_(std::move(z0)), schedule_(std::move(schedule)) {}

    const std::vector<AttentionSite>& sites() const override { return inner_->sites(); }
    std::string name() const override { return "perfect-oracle"; }

    LatentTensor evaluate(const LatentTensor& zt, int t, const ConditionSpec& cond, EvalContext& ctx) const override {
        inner_->evaluate(zt, t, cond, ctx);
        const double a = std::sqrt(schedule_.alpha_bar[t]);
        const double b = std::sqrt(1.0 - schedule_.alpha_bar[t]);
        LatentTensor eps = zt;
        for (std::size_t i = 0; i < eps.size(); ++i) eps[i] = (zt[i] - a * z0_[i]) / b;
        return eps;
    }

private:
    NoisePredictorPtr inner_;
    LatentTensor z0_;
    DiffusionSchedule schedule_;
};

/// Counts evaluations and the peak number of concurrent evaluations.
class CountingNet final : public NoisePredictor {
public:
    CountingNet(NoisePredictorPtr inner, bool thread_safe = true, bool guidance_embedded = false)
        : inner_(std::move(inner)), thread_safe_(thread_safe), embedded_(guidance_embedded) {}

    const std::vector<AttentionSite>& sites() const override { return inner_->sites(); }
    std::string name() const override { return "counting"; }
    bool thread_safe() const override { return thread_safe_; }
    bool guidance_embedded() const override { return embedded_; }

    LatentTensor evaluate(const LatentTensor& zt, int t, const ConditionSpec& cond, EvalContext& ctx) const override {
        ++calls;
        const int now = ++active;
        int seen = peak.load();
        while (now > seen && !peak.compare_exchange_weak(seen, now)) {
        }
        LatentTensor out = inner_->evaluate(zt, t, cond, ctx);
        --active;
        return out;
    }

    mutable std::atomic<int> calls{0};
    mutable std::atomic<int> active{0};
    mutable std::atomic<int> peak{0};

private:
    NoisePredictorPtr inner_;
    bool thread_safe_;
    bool embedded_;
};

/// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
public:
    explicit TempDir(const std::string& tag) {
        static std::atomic<int> counter{0};
        path_ = std::filesystem::temp_directory_path() /
                ("zepo_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
        std::filesystem::remove_all(path_);
        std::filesystem::create_directories(path_);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path_, ec);
    }
    const std::filesystem::path& path() const { return path_; }
    std::string file(const std::string& name) const { return (path_ / name).string(); }

private:
    std::filesystem::path path_;
};

inline std::vector<unsigned char> read_bytes(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

} // namespace zepo::testing
