#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <random>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tensor.hpp"

namespace zepo {

/// Which tokens survive a merge and where the absorbed ones went.
struct MergeMap {
    int tokens = 0;                              // N of the sequence the map was built for
    std::vector<int> dst_indices;                // ascending, one per 2x2 patch
    std::vector<std::pair<int, int>> assignment; // (merged source index, destination index), by source index
    std::vector<int> sizes;                      // per destination (aligned with dst_indices), including itself

    int merged() const { return static_cast<int>(assignment.size()); }
    int output_length() const { return tokens - merged(); }
};

enum class MergeReduction { size_weighted, plain_mean };

namespace detail {

inline std::vector<double> unit_rows(const FeatureSeq& seq) {
    std::vector<double> out(seq.values().begin(), seq.values().end());
    const int d = seq.dim();
    for (int n = 0; n < seq.tokens(); ++n) {
        double norm = 0.0;
        for (int k = 0; k < d; ++k) norm += out[n * d + k] * out[n * d + k];
        norm = std::max(std::sqrt(norm), 1e-12);
        for (int k = 0; k < d; ++k) out[n * d + k] /= norm;
    }
    return out;
}

} // namespace detail

/// Picks one seeded destination in each 2x2 patch of an (h, w) token grid, then merges the
/// round(ratio * N) remaining tokens that are most cosine-similar to their best destination.
inline MergeMap build_merge_map(const FeatureSeq& seq, int grid_h, int grid_w, double ratio, std::uint64_t seed) {
    if (seq.batch() != 1) throw std::invalid_argument("build_merge_map: expects a single (batch-1) sequence");
    if (grid_h * grid_w != seq.tokens()) {
        throw std::invalid_argument("build_merge_map: grid " + std::to_string(grid_h) + "x" + std::to_string(grid_w) +
                                    " does not cover " + std::to_string(seq.tokens()) + " tokens");
    }
    if (grid_h % 2 != 0 || grid_w % 2 != 0) throw std::invalid_argument("build_merge_map: grid dims must be even");
    if (!(ratio > 0.0) || ratio > 0.75) throw std::invalid_argument("build_merge_map: ratio must be in (0, 0.75]");

    const int n = seq.tokens();
    const int d = seq.dim();
    MergeMap map;
    map.tokens = n;

    std::mt19937_64 gen(seed);
    std::uniform_int_distribution<int> pick(0, 3);
    std::vector<char> is_dst(n, 0);
    for (int py = 0; py < grid_h / 2; ++py)
        for (int px = 0; px < grid_w / 2; ++px) {
            const int o = pick(gen);
            const int idx = (2 * py + o / 2) * grid_w + 2 * px + o % 2;
            is_dst[idx] = 1;
            map.dst_indices.push_back(idx);
        }
    std::ranges::sort(map.dst_indices);

    const std::vector<double> unit = detail::unit_rows(seq);
    struct Candidate {
        int src;
        int dst;
        double similarity;
    };
    std::vector<Candidate> candidates;
    for (int s = 0; s < n; ++s) {
        if (is_dst[s]) continue;
        Candidate best{s, -1, -2.0};
        for (int dst : map.dst_indices) {
            double sim = 0.0;
            for (int k = 0; k < d; ++k) sim += unit[s * d + k] * unit[dst * d + k];
            if (sim > best.similarity) best = {s, dst, sim};
        }
        candidates.push_back(best);
    }
    std::ranges::stable_sort(candidates, [](const Candidate& a, const Candidate& b) { return a.similarity > b.similarity; });

    const int r = static_cast<int>(std::lround(ratio * n));
    candidates.resize(std::min<std::size_t>(candidates.size(), r));
    std::ranges::sort(candidates, {}, &Candidate::src);

    map.sizes.assign(map.dst_indices.size(), 1);
    for (const auto& c : candidates) {
        map.assignment.emplace_back(c.src, c.dst);
        auto pos = std::ranges::lower_bound(map.dst_indices, c.dst) - map.dst_indices.begin();
        ++map.sizes[pos];
    }
    return map;
}

/// Collapses merged tokens into their destinations. Surviving tokens keep their original order.
/// `token_sizes` weights each input token (all ones when empty).
inline FeatureSeq apply_merge(const FeatureSeq& seq, const MergeMap& map,
                              MergeReduction reduction = MergeReduction::size_weighted,
                              std::span<const double> token_sizes = {}) {
    if (seq.tokens() != map.tokens) {
        throw std::invalid_argument("apply_merge: map built for " + std::to_string(map.tokens) +
                                    " tokens, sequence has " + std::to_string(seq.tokens()));
    }
    if (!token_sizes.empty() && token_sizes.size() != static_cast<std::size_t>(seq.tokens())) {
        throw std::invalid_argument("apply_merge: token_sizes length mismatch");
    }
    const int n = seq.tokens();
    std::vector<int> target(n, -1); // -1 keep, otherwise destination index
    std::vector<char> removed(n, 0);
    for (int dst : map.dst_indices) target[dst] = dst;
    for (const auto& [src, dst] : map.assignment) {
        target[src] = dst;
        removed[src] = 1;
    }

    auto weight = [&](int i) {
        if (reduction == MergeReduction::plain_mean || token_sizes.empty()) return 1.0;
        return token_sizes[i];
    };

    FeatureSeq out(seq.batch(), map.output_length(), seq.dim());
    for (int b = 0; b < seq.batch(); ++b) {
        std::vector<double> sums(static_cast<std::size_t>(n) * seq.dim(), 0.0);
        std::vector<double> total(n, 0.0);
        for (int i = 0; i < n; ++i) {
            const int into = target[i] < 0 ? i : target[i];
            const double w = weight(i);
            auto tok = seq.token(b, i);
            for (int k = 0; k < seq.dim(); ++k) sums[static_cast<std::size_t>(into) * seq.dim() + k] += w * tok[k];
            total[into] += w;
        }
        int row = 0;
        for (int i = 0; i < n; ++i) {
            if (removed[i]) continue;
            auto o = out.token(b, row++);
            for (int k = 0; k < seq.dim(); ++k) o[k] = sums[static_cast<std::size_t>(i) * seq.dim() + k] / total[i];
        }
    }
    return out;
}

} // namespace zepo
