#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace zepo {

/// RGB image with values in [0, 1], laid out (height, width, 3).
struct ImageBuffer {
    int height = 0;
    int width = 0;
    std::vector<double> pixels;
    std::string source_path;
    int original_height = 0;
    int original_width = 0;

    ImageBuffer() = default;
    ImageBuffer(int h, int w, double fill = 0.0)
        : height(h), width(w), pixels(static_cast<std::size_t>(h) * w * 3, fill), original_height(h),
          original_width(w) {}

    bool empty() const { return height <= 0 || width <= 0 || pixels.empty(); }

    double& at(int y, int x, int c) { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }
    double at(int y, int x, int c) const { return pixels[(static_cast<std::size_t>(y) * width + x) * 3 + c]; }

    void clamp() {
        for (double& v : pixels) v = std::isfinite(v) ? std::clamp(v, 0.0, 1.0) : 0.0;
    }
};

namespace detail {

// Half-pixel-centre bilinear sample of one channel from an (h, w) window starting at (y0, x0).
inline double bilinear(const ImageBuffer& img, int y0, int x0, int h, int w, double sy, double sx, int c) {
    sy = std::clamp(sy, 0.0, static_cast<double>(h - 1));
    sx = std::clamp(sx, 0.0, static_cast<double>(w - 1));
    const int iy = static_cast<int>(std::floor(sy));
    const int ix = static_cast<int>(std::floor(sx));
    const int iy1 = std::min(iy + 1, h - 1);
    const int ix1 = std::min(ix + 1, w - 1);
    const double fy = sy - iy;
    const double fx = sx - ix;
    const double top = (1 - fx) * img.at(y0 + iy, x0 + ix, c) + fx * img.at(y0 + iy, x0 + ix1, c);
    const double bot = (1 - fx) * img.at(y0 + iy1, x0 + ix, c) + fx * img.at(y0 + iy1, x0 + ix1, c);
    return (1 - fy) * top + fy * bot;
}

} // namespace detail

/// Centre-crops to a square, then bilinearly resamples to target_size x target_size.
inline ImageBuffer preprocess_image(const ImageBuffer& raw, int target_size) {
    if (raw.empty()) throw std::invalid_argument("preprocess_image: empty image");
    if (target_size <= 0) throw std::invalid_argument("preprocess_image: target_size must be positive");
    if (raw.pixels.size() != static_cast<std::size_t>(raw.height) * raw.width * 3) {
        throw std::invalid_argument("preprocess_image: pixel buffer does not match dimensions");
    }

    const int side = std::min(raw.height, raw.width);
    const int y0 = (raw.height - side) / 2;
    const int x0 = (raw.width - side) / 2;

    ImageBuffer out(target_size, target_size);
    out.source_path = raw.source_path;
    out.original_height = raw.original_height > 0 ? raw.original_height : raw.height;
    out.original_width = raw.original_width > 0 ? raw.original_width : raw.width;

    if (side == target_size) {
        for (int y = 0; y < side; ++y)
            for (int x = 0; x < side; ++x)
                for (int c = 0; c < 3; ++c) out.at(y, x, c) = raw.at(y0 + y, x0 + x, c);
    } else {
        const double scale = static_cast<double>(side) / target_size;
        for (int y = 0; y < target_size; ++y) {
            const double sy = (y + 0.5) * scale - 0.5;
            for (int x = 0; x < target_size; ++x) {
                const double sx = (x + 0.5) * scale - 0.5;
                for (int c = 0; c < 3; ++c) out.at(y, x, c) = detail::bilinear(raw, y0, x0, side, side, sy, sx, c);
            }
        }
    }
    out.clamp();
    return out;
}

/// Deterministic stand-in portrait: a shaded oval on a striped gradient, varied by seed.
inline ImageBuffer synthetic_portrait(int size, std::uint64_t seed) {
    if (size <= 0) throw std::invalid_argument("synthetic_portrait: size must be positive");
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(0.0, 1.0);
    const double skin[3] = {0.55 + 0.4 * u(rng), 0.35 + 0.4 * u(rng), 0.25 + 0.4 * u(rng)};
    const double bg[3] = {u(rng), u(rng), u(rng)};
    const double freq = 2.0 + 10.0 * u(rng);
    const double cx = 0.45 + 0.1 * u(rng);
    const double cy = 0.45 + 0.1 * u(rng);

    ImageBuffer img(size, size);
    for (int y = 0; y < size; ++y) {
        for (int x = 0; x < size; ++x) {
            const double fy = (y + 0.5) / size;
            const double fx = (x + 0.5) / size;
            const double r = std::hypot((fx - cx) / 0.28, (fy - cy) / 0.36);
            const double stripe = 0.5 + 0.5 * std::sin(freq * 6.283185307179586 * (fx + 0.3 * fy));
            for (int c = 0; c < 3; ++c) {
                const double back = bg[c] * (0.6 + 0.4 * fy) * (0.7 + 0.3 * stripe);
                const double face = skin[c] * (1.1 - 0.5 * r);
                img.at(y, x, c) = r < 1.0 ? face : back;
            }
        }
    }
    img.clamp();
    return img;
}

} // namespace zepo
