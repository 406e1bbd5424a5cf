#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <map>
#include <stdexcept>
#include <string>
#include <vector>

#include "tensor.hpp"

namespace zepo {

/// Shape of one attention product as it was executed.
struct AttentionCall {
    std::string layer_id;
    std::string processor;
    int batch = 0;
    int queries = 0;
    int keys = 0;
    int key_dim = 0;
    int value_dim = 0;

    /// scores (Nq x Nk x dk) plus aggregation (Nq x Nk x dv), per batch element
    std::uint64_t macs() const {
        return static_cast<std::uint64_t>(batch) * queries * keys * (static_cast<std::uint64_t>(key_dim) + value_dim);
    }
};

/// Accumulates exact multiply-accumulate counts from recorded attention shapes.
class AttentionMeter {
public:
    void record(AttentionCall call) {
        per_site_[call.layer_id] += call.macs();
        total_ += call.macs();
        calls_.push_back(std::move(call));
    }

    std::uint64_t total_macs() const { return total_; }
    const std::map<std::string, std::uint64_t>& per_site() const { return per_site_; }
    const std::vector<AttentionCall>& calls() const { return calls_; }

    std::uint64_t site_macs(const std::string& id) const {
        auto it = per_site_.find(id);
        return it == per_site_.end() ? 0 : it->second;
    }

    void merge(const AttentionMeter& other) {
        for (const auto& c : other.calls_) record(c);
    }

    void clear() {
        per_site_.clear();
        calls_.clear();
        total_ = 0;
    }

private:
    std::map<std::string, std::uint64_t> per_site_;
    std::vector<AttentionCall> calls_;
    std::uint64_t total_ = 0;
};

/// Concatenates two sequences along the token axis.
inline FeatureSeq concat_tokens(const FeatureSeq& a, const FeatureSeq& b) {
    if (a.batch() != b.batch() || a.dim() != b.dim()) {
        throw std::invalid_argument("concat_tokens: batch or dim mismatch");
    }
    FeatureSeq out(a.batch(), a.tokens() + b.tokens(), a.dim());
    for (int bi = 0; bi < a.batch(); ++bi) {
        for (int n = 0; n < a.tokens(); ++n) std::ranges::copy(a.token(bi, n), out.token(bi, n).begin());
        for (int n = 0; n < b.tokens(); ++n) std::ranges::copy(b.token(bi, n), out.token(bi, a.tokens() + n).begin());
    }
    return out;
}

inline FeatureSeq scaled(FeatureSeq seq, double factor) {
    for (double& v : seq.values()) v *= factor;
    return seq;
}

/// q k^T / sqrt(d). Result is stored as a (B, Nq, Nk) sequence.
inline FeatureSeq attention_scores(const FeatureSeq& q, const FeatureSeq& k) {
    if (q.batch() != k.batch()) throw std::invalid_argument("attention: query/key batch mismatch");
    if (q.dim() != k.dim()) throw std::invalid_argument("attention: query/key dim mismatch");
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q.dim()));
    FeatureSeq s(q.batch(), q.tokens(), k.tokens());
    for (int b = 0; b < q.batch(); ++b) {
        for (int i = 0; i < q.tokens(); ++i) {
            auto qi = q.token(b, i);
            auto row = s.token(b, i);
            for (int j = 0; j < k.tokens(); ++j) {
                auto kj = k.token(b, j);
                double acc = 0.0;
                for (int d = 0; d < q.dim(); ++d) acc += qi[d] * kj[d];
                row[j] = acc * inv_sqrt_d;
            }
        }
    }
    return s;
}

/// In-place, max-subtracted softmax over the last axis.
inline void softmax_rows(FeatureSeq& scores) {
    for (int b = 0; b < scores.batch(); ++b) {
        for (int i = 0; i < scores.tokens(); ++i) {
            auto row = scores.token(b, i);
            const double m = *std::ranges::max_element(row);
            double sum = 0.0;
            for (double& v : row) {
                v = std::exp(v - m);
                sum += v;
            }
            for (double& v : row) v /= sum;
        }
    }
}

/// weights (B, Nq, Nk) times values (B, Nk, Dv).
inline FeatureSeq attend(const FeatureSeq& weights, const FeatureSeq& v) {
    if (weights.batch() != v.batch() || weights.dim() != v.tokens()) {
        throw std::invalid_argument("attention: weight/value shape mismatch");
    }
    FeatureSeq out(v.batch(), weights.tokens(), v.dim());
    for (int b = 0; b < v.batch(); ++b) {
        for (int i = 0; i < weights.tokens(); ++i) {
            auto w = weights.token(b, i);
            auto o = out.token(b, i);
            for (int j = 0; j < v.tokens(); ++j) {
                const double wj = w[j];
                auto vj = v.token(b, j);
                for (int d = 0; d < v.dim(); ++d) o[d] += wj * vj[d];
            }
        }
    }
    return out;
}

inline FeatureSeq attention_weights(const FeatureSeq& q, const FeatureSeq& k) {
    FeatureSeq s = attention_scores(q, k);
    softmax_rows(s);
    return s;
}

inline FeatureSeq scaled_dot_attention(const FeatureSeq& q, const FeatureSeq& k, const FeatureSeq& v) {
    if (k.tokens() != v.tokens() || k.batch() != v.batch()) {
        throw std::invalid_argument("attention: key/value length mismatch");
    }
    return attend(attention_weights(q, k), v);
}

} // namespace zepo
