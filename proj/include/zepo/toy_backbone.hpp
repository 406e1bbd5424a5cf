#pragma once

#include <cmath>
#include <cstdint>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

#include "backbone.hpp"
#include "digest.hpp"

namespace zepo {

/// Small deterministic encoder/bottleneck/decoder noise predictor with three self-attention
/// sites (down at 1/2, mid at 1/4, up at 1/2 of the latent grid). Weights are drawn from the
/// seed; conditioning is a fixed sinusoidal embedding of (t, prompt hash, guidance scale).
class ToyBackbone final : public NoisePredictor {
public:
    ToyBackbone(int latent_channels, int base_width, std::uint64_t seed)
        : channels_(latent_channels), width_(base_width), seed_(seed) {
        if (latent_channels < 1) throw std::invalid_argument("toy backbone: latent_channels must be >= 1");
        if (base_width < 8) throw std::invalid_argument("toy backbone: base_width must be >= 8");

        freqs_ = std::max(4, base_width / 4);
        const int emb = 6 * freqs_;
        const int wide = 2 * width_;

        std::mt19937_64 gen(seed);
        in_ = random_matrix(gen, channels_, width_);
        in_bias_ = random_matrix(gen, 1, width_, 0.1);
        emb_in_ = random_matrix(gen, emb, width_);
        mid_in_ = random_matrix(gen, width_, wide);
        emb_mid_ = random_matrix(gen, emb, wide);
        up_ = random_matrix(gen, wide, width_);
        out_ = random_matrix(gen, width_, channels_);
        skip_ = random_matrix(gen, channels_, channels_);

        sites_ = {{"down0", 2, width_, Stage::down}, {"mid0", 4, wide, Stage::mid}, {"up0", 2, width_, Stage::up}};
        for (const auto& site : sites_) {
            const int d = site.feature_dim;
            // Keys share most of the query map so similar tokens score high, as in trained attention.
            Matrix query = random_matrix(gen, d, d);
            Matrix key = random_matrix(gen, d, d);
            for (std::size_t i = 0; i < key.data.size(); ++i) key.data[i] = query.data[i] + kKeyNoise * key.data[i];
            projections_.push_back({std::move(query), std::move(key), random_matrix(gen, d, d), random_matrix(gen, d, d)});
        }
    }

    const std::vector<AttentionSite>& sites() const override { return sites_; }
    std::string name() const override { return "toy"; }
    int latent_channels() const { return channels_; }
    int base_width() const { return width_; }
    std::uint64_t seed() const { return seed_; }
    const AttentionProjections& projections(std::size_t site_index) const { return projections_.at(site_index); }

    LatentTensor evaluate(const LatentTensor& zt, int t, const ConditionSpec& cond, EvalContext& ctx) const override {
        if (zt.channels() != channels_) {
            throw std::invalid_argument("toy backbone: expected " + std::to_string(channels_) + " channels, got " +
                                        std::to_string(zt.channels()));
        }
        if (zt.height() % 4 != 0 || zt.width() % 4 != 0) {
            throw std::invalid_argument("toy backbone: latent height and width must be divisible by 4");
        }
        const int h = zt.height();
        const int w = zt.width();
        const std::vector<double> e = embedding(t, cond);

        FeatureSeq x = to_tokens(zt);
        FeatureSeq h0 = project(x, in_);
        add_bias(h0, in_bias_.data, embed(e, emb_in_));
        silu(h0);

        FeatureSeq h1 = pool(h0, h, w);
        attention_block(0, h1, h / 2, w / 2, t, ctx);

        FeatureSeq h2 = project(pool(h1, h / 2, w / 2), mid_in_);
        add_bias(h2, {}, embed(e, emb_mid_));
        silu(h2);
        attention_block(1, h2, h / 4, w / 4, t, ctx);

        FeatureSeq u1 = project(upsample(h2, h / 4, w / 4), up_);
        add(u1, h1);
        attention_block(2, u1, h / 2, w / 2, t, ctx);

        FeatureSeq u0 = upsample(u1, h / 2, w / 2);
        add(u0, h0);
        FeatureSeq y = project(u0, out_);
        add(y, project(x, skip_));
        return from_tokens(y, zt);
    }

private:
    static Matrix random_matrix(std::mt19937_64& gen, int rows, int cols, double scale = -1.0) {
        if (scale < 0.0) scale = 1.0 / std::sqrt(static_cast<double>(rows));
        std::normal_distribution<double> dist(0.0, scale);
        Matrix m(rows, cols);
        for (double& v : m.data) v = dist(gen);
        return m;
    }

    std::vector<double> embedding(int t, const ConditionSpec& cond) const {
        const double prompt_value = static_cast<double>(hash64(cond.prompt) % 1000003) / 1000.003;
        const double scalars[3] = {static_cast<double>(t), prompt_value, 100.0 * cond.guidance_scale};
        std::vector<double> e;
        e.reserve(6 * freqs_);
        for (double s : scalars) {
            for (int k = 0; k < freqs_; ++k) {
                const double f = std::exp(-std::log(10000.0) * k / freqs_);
                e.push_back(std::sin(s * f));
                e.push_back(std::cos(s * f));
            }
        }
        return e;
    }

    static std::vector<double> embed(const std::vector<double>& e, const Matrix& w) {
        std::vector<double> out(w.cols, 0.0);
        for (int i = 0; i < w.rows; ++i)
            for (int j = 0; j < w.cols; ++j) out[j] += e[i] * w(i, j);
        return out;
    }

    static void add_bias(FeatureSeq& x, const std::vector<double>& a, const std::vector<double>& b) {
        for (int bi = 0; bi < x.batch(); ++bi)
            for (int n = 0; n < x.tokens(); ++n) {
                auto tok = x.token(bi, n);
                for (int d = 0; d < x.dim(); ++d) tok[d] += (a.empty() ? 0.0 : a[d]) + b[d];
            }
    }

    static void silu(FeatureSeq& x) {
        for (double& v : x.values()) v = v / (1.0 + std::exp(-v));
    }

    static void add(FeatureSeq& x, const FeatureSeq& y) {
        auto xs = x.values();
        auto ys = y.values();
        for (std::size_t i = 0; i < xs.size(); ++i) xs[i] += ys[i];
    }

    static FeatureSeq layer_norm(const FeatureSeq& x) {
        FeatureSeq out = x;
        for (int b = 0; b < x.batch(); ++b)
            for (int n = 0; n < x.tokens(); ++n) {
                auto tok = out.token(b, n);
                double mean = 0.0, var = 0.0;
                for (double v : tok) mean += v;
                mean /= x.dim();
                for (double v : tok) var += (v - mean) * (v - mean);
                var /= x.dim();
                const double inv = 1.0 / std::sqrt(var + 1e-5);
                for (double& v : tok) v = (v - mean) * inv;
            }
        return out;
    }

    static FeatureSeq to_tokens(const LatentTensor& z) {
        FeatureSeq x(z.batch(), z.height() * z.width(), z.channels());
        for (int b = 0; b < z.batch(); ++b)
            for (int y = 0; y < z.height(); ++y)
                for (int xx = 0; xx < z.width(); ++xx)
                    for (int c = 0; c < z.channels(); ++c) x.at(b, y * z.width() + xx, c) = z.at(b, c, y, xx);
        return x;
    }

    static LatentTensor from_tokens(const FeatureSeq& x, const LatentTensor& like) {
        LatentTensor z(like.batch(), like.channels(), like.height(), like.width());
        for (int b = 0; b < z.batch(); ++b)
            for (int y = 0; y < z.height(); ++y)
                for (int xx = 0; xx < z.width(); ++xx)
                    for (int c = 0; c < z.channels(); ++c) z.at(b, c, y, xx) = x.at(b, y * z.width() + xx, c);
        return z;
    }

    static FeatureSeq pool(const FeatureSeq& x, int h, int w) {
        FeatureSeq out(x.batch(), (h / 2) * (w / 2), x.dim());
        for (int b = 0; b < x.batch(); ++b)
            for (int y = 0; y < h / 2; ++y)
                for (int xx = 0; xx < w / 2; ++xx) {
                    auto o = out.token(b, y * (w / 2) + xx);
                    for (int dy = 0; dy < 2; ++dy)
                        for (int dx = 0; dx < 2; ++dx) {
                            auto in = x.token(b, (2 * y + dy) * w + 2 * xx + dx);
                            for (int d = 0; d < x.dim(); ++d) o[d] += 0.25 * in[d];
                        }
                }
        return out;
    }

    static FeatureSeq upsample(const FeatureSeq& x, int h, int w) {
        FeatureSeq out(x.batch(), 4 * h * w, x.dim());
        for (int b = 0; b < x.batch(); ++b)
            for (int y = 0; y < 2 * h; ++y)
                for (int xx = 0; xx < 2 * w; ++xx)
                    std::ranges::copy(x.token(b, (y / 2) * w + xx / 2), out.token(b, y * 2 * w + xx).begin());
        return out;
    }

    void attention_block(std::size_t index, FeatureSeq& hidden, int grid_h, int grid_w, int t,
                         EvalContext& ctx) const {
        const AttentionSite& site = sites_[index];
        const AttentionProjections& proj = projections_[index];
        FeatureSeq normed = layer_norm(hidden);
        if (ctx.feature_tap) ctx.feature_tap(site, normed, grid_h, grid_w);
        FeatureSeq q = project(normed, proj.query);
        FeatureSeq k = project(normed, proj.key);
        FeatureSeq v = project(normed, proj.value);
        FeatureSeq a = dispatch_attention(site, q, k, v, proj, t, grid_h, grid_w, ctx);
        add(hidden, project(a, proj.out));
    }

    static constexpr double kKeyNoise = 0.5;

    int channels_;
    int width_;
    std::uint64_t seed_;
    int freqs_ = 4;
    Matrix in_, in_bias_, emb_in_, mid_in_, emb_mid_, up_, out_, skip_;
    std::vector<AttentionSite> sites_;
    std::vector<AttentionProjections> projections_;
};

inline std::shared_ptr<const ToyBackbone> toy_backbone(int latent_channels = 4, int base_width = 32,
                                                       std::uint64_t seed = 0) {
    return std::make_shared<ToyBackbone>(latent_channels, base_width, seed);
}

} // namespace zepo
