#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace zepo {

/// Latent array laid out as (batch, channel, height, width), row-major.
class LatentTensor {
public:
    LatentTensor() = default;
    LatentTensor(int batch, int channels, int height, int width, double fill = 0.0)
        : batch_(batch), channels_(channels), height_(height), width_(width) {
        if (batch <= 0 || channels <= 0 || height <= 0 || width <= 0) {
            throw std::invalid_argument("LatentTensor: all dimensions must be positive");
        }
        data_.assign(static_cast<std::size_t>(batch) * channels * height * width, fill);
    }

    int batch() const { return batch_; }
    int channels() const { return channels_; }
    int height() const { return height_; }
    int width() const { return width_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    bool same_shape(const LatentTensor& other) const {
        return batch_ == other.batch_ && channels_ == other.channels_ && height_ == other.height_ &&
               width_ == other.width_;
    }

    std::string shape_string() const {
        return "(" + std::to_string(batch_) + "," + std::to_string(channels_) + "," +
               std::to_string(height_) + "," + std::to_string(width_) + ")";
    }

    double& at(int b, int c, int y, int x) { return data_[index(b, c, y, x)]; }
    double at(int b, int c, int y, int x) const { return data_[index(b, c, y, x)]; }

    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    friend bool operator==(const LatentTensor&, const LatentTensor&) = default;

private:
    std::size_t index(int b, int c, int y, int x) const {
        return ((static_cast<std::size_t>(b) * channels_ + c) * height_ + y) * width_ + x;
    }

    int batch_ = 0;
    int channels_ = 0;
    int height_ = 0;
    int width_ = 0;
    std::vector<double> data_;
};

inline void require_same_shape(const LatentTensor& a, const LatentTensor& b, const char* what) {
    if (!a.same_shape(b)) {
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.shape_string() + " vs " +
                                    b.shape_string());
    }
}

inline double max_abs_diff(const LatentTensor& a, const LatentTensor& b) {
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

inline double l2_distance(const LatentTensor& a, const LatentTensor& b) {
    require_same_shape(a, b, "l2_distance");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(s);
}

/// Token sequence laid out as (batch, tokens, dim), row-major.
class FeatureSeq {
public:
    FeatureSeq() = default;
    FeatureSeq(int batch, int tokens, int dim, double fill = 0.0) : batch_(batch), tokens_(tokens), dim_(dim) {
        if (batch <= 0 || tokens <= 0 || dim <= 0) {
            throw std::invalid_argument("FeatureSeq: batch, tokens and dim must be positive");
        }
        data_.assign(static_cast<std::size_t>(batch) * tokens * dim, fill);
    }

    int batch() const { return batch_; }
    int tokens() const { return tokens_; }
    int dim() const { return dim_; }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    std::span<double> token(int b, int n) {
        return {data_.data() + (static_cast<std::size_t>(b) * tokens_ + n) * dim_, static_cast<std::size_t>(dim_)};
    }
    std::span<const double> token(int b, int n) const {
        return {data_.data() + (static_cast<std::size_t>(b) * tokens_ + n) * dim_, static_cast<std::size_t>(dim_)};
    }

    double& at(int b, int n, int d) { return data_[(static_cast<std::size_t>(b) * tokens_ + n) * dim_ + d]; }
    double at(int b, int n, int d) const { return data_[(static_cast<std::size_t>(b) * tokens_ + n) * dim_ + d]; }

    std::span<double> values() { return data_; }
    std::span<const double> values() const { return data_; }

    /// Copy of one batch element as a batch-1 sequence.
    FeatureSeq slice(int b) const {
        FeatureSeq out(1, tokens_, dim_);
        auto first = data_.begin() + static_cast<std::ptrdiff_t>(b) * tokens_ * dim_;
        std::copy(first, first + static_cast<std::ptrdiff_t>(tokens_) * dim_, out.data_.begin());
        return out;
    }

    bool all_finite() const {
        return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
    }

    friend bool operator==(const FeatureSeq&, const FeatureSeq&) = default;

private:
    int batch_ = 0;
    int tokens_ = 0;
    int dim_ = 0;
    std::vector<double> data_;
};

/// Stacks batch-1 sequences of equal shape into one batch.
inline FeatureSeq stack(std::span<const FeatureSeq> items) {
    if (items.empty()) throw std::invalid_argument("stack: no sequences");
    FeatureSeq out(static_cast<int>(items.size()), items[0].tokens(), items[0].dim());
    for (std::size_t b = 0; b < items.size(); ++b) {
        if (items[b].batch() != 1 || items[b].tokens() != out.tokens() || items[b].dim() != out.dim()) {
            throw std::invalid_argument("stack: sequences must be batch-1 with equal shape");
        }
        for (int n = 0; n < out.tokens(); ++n) {
            std::ranges::copy(items[b].token(0, n), out.token(static_cast<int>(b), n).begin());
        }
    }
    return out;
}

/// Dense row-major matrix used for linear projections (rows = input dim, cols = output dim).
struct Matrix {
    int rows = 0;
    int cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(int r, int c, double fill = 0.0) : rows(r), cols(c), data(static_cast<std::size_t>(r) * c, fill) {}

    static Matrix identity(int n) {
        Matrix m(n, n);
        for (int i = 0; i < n; ++i) m(i, i) = 1.0;
        return m;
    }

    double& operator()(int r, int c) { return data[static_cast<std::size_t>(r) * cols + c]; }
    double operator()(int r, int c) const { return data[static_cast<std::size_t>(r) * cols + c]; }
};

/// y = x * W for every token. Returns (B, N, W.cols).
inline FeatureSeq project(const FeatureSeq& x, const Matrix& w) {
    if (x.dim() != w.rows) {
        throw std::invalid_argument("project: feature dim " + std::to_string(x.dim()) +
                                    " does not match projection rows " + std::to_string(w.rows));
    }
    FeatureSeq y(x.batch(), x.tokens(), w.cols);
    for (int b = 0; b < x.batch(); ++b) {
        for (int n = 0; n < x.tokens(); ++n) {
            auto in = x.token(b, n);
            auto out = y.token(b, n);
            for (int i = 0; i < w.rows; ++i) {
                const double xi = in[i];
                const double* row = &w.data[static_cast<std::size_t>(i) * w.cols];
                for (int j = 0; j < w.cols; ++j) out[j] += xi * row[j];
            }
        }
    }
    return y;
}

} // namespace zepo
