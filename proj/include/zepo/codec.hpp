#pragma once

#include <functional>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <type_traits>

#include "image.hpp"
#include "tensor.hpp"

namespace zepo {

/// Encoder/decoder pair mapping images to latents and back.
class LatentCodec {
public:
    virtual ~LatentCodec() = default;

    virtual LatentTensor encode(const ImageBuffer& image) const = 0;
    virtual ImageBuffer decode(const LatentTensor& latent) const = 0;
    virtual int scale_factor() const = 0;
    virtual int latent_channels() const = 0;
    virtual bool thread_safe() const { return true; }
    virtual std::string name() const = 0;

    /// Preprocessing size used when the caller does not choose one.
    virtual int default_image_size() const { return 512; }

protected:
    void check_divisible(const ImageBuffer& image) const {
        if (image.empty()) throw std::invalid_argument(name() + ": empty image");
        if (image.height % scale_factor() != 0 || image.width % scale_factor() != 0) {
            throw std::invalid_argument(name() + ": image " + std::to_string(image.height) + "x" +
                                        std::to_string(image.width) + " not divisible by scale factor " +
                                        std::to_string(scale_factor()));
        }
    }
};

/// Reshape-only codec: RGB goes to channels 0..2, further channels are zero and dropped on decode.
class IdentityCodec final : public LatentCodec {
public:
    explicit IdentityCodec(int latent_channels) : channels_(latent_channels) {
        if (latent_channels < 3) {
            throw std::invalid_argument("identity codec: latent_channels must be >= 3 to hold RGB losslessly");
        }
    }

    LatentTensor encode(const ImageBuffer& image) const override {
        check_divisible(image);
        LatentTensor z(1, channels_, image.height, image.width);
        for (int y = 0; y < image.height; ++y)
            for (int x = 0; x < image.width; ++x)
                for (int c = 0; c < 3; ++c) z.at(0, c, y, x) = image.at(y, x, c);
        return z;
    }

    ImageBuffer decode(const LatentTensor& latent) const override {
        if (latent.channels() != channels_) {
            throw std::invalid_argument("identity codec: expected " + std::to_string(channels_) + " channels, got " +
                                        std::to_string(latent.channels()));
        }
        ImageBuffer image(latent.height(), latent.width());
        for (int y = 0; y < latent.height(); ++y)
            for (int x = 0; x < latent.width(); ++x)
                for (int c = 0; c < 3; ++c) image.at(y, x, c) = latent.at(0, c, y, x);
        image.clamp();
        return image;
    }

    int scale_factor() const override { return 1; }
    int latent_channels() const override { return channels_; }
    std::string name() const override { return "identity"; }
    int default_image_size() const override { return 64; }

private:
    int channels_;
};

inline std::shared_ptr<const LatentCodec> identity_codec(int latent_channels = 4) {
    return std::make_shared<IdentityCodec>(latent_channels);
}

/// Declared properties of an external autoencoder.
struct AdapterTraits {
    int scale_factor = 8;
    int latent_channels = 4;
    double latent_scaling = 0.18215;
    bool thread_safe = false;
    std::string name = "adapter";
};

/// Wraps external encode/decode callables. The callables work in [-1, 1] pixel space and
/// unscaled latents; this wrapper owns the range conversion and the latent scaling constant.
/// Calls are serialised unless the adapter declares itself thread-safe.
class AdapterCodec final : public LatentCodec {
public:
    using EncodeFn = std::function<LatentTensor(const ImageBuffer&)>;
    using DecodeFn = std::function<ImageBuffer(const LatentTensor&)>;

    AdapterCodec(EncodeFn encode, DecodeFn decode, AdapterTraits traits)
        : encode_(std::move(encode)), decode_(std::move(decode)), traits_(std::move(traits)) {
        if (!encode_ || !decode_) throw std::invalid_argument("adapter codec: encode and decode must be set");
        if (traits_.scale_factor < 1 || traits_.latent_channels < 1 || !(traits_.latent_scaling > 0.0)) {
            throw std::invalid_argument("adapter codec: invalid declared traits");
        }
    }

    LatentTensor encode(const ImageBuffer& image) const override {
        check_divisible(image);
        ImageBuffer signed_image = image;
        for (double& v : signed_image.pixels) v = v * 2.0 - 1.0;
        LatentTensor z = guarded([&] { return encode_(signed_image); });
        if (z.channels() != traits_.latent_channels || z.height() * traits_.scale_factor != image.height ||
            z.width() * traits_.scale_factor != image.width) {
            throw std::runtime_error(name() + ": encoder returned latent " + z.shape_string() +
                                     " inconsistent with declared traits");
        }
        for (double& v : z.values()) v *= traits_.latent_scaling;
        return z;
    }

    ImageBuffer decode(const LatentTensor& latent) const override {
        LatentTensor unscaled = latent;
        for (double& v : unscaled.values()) v /= traits_.latent_scaling;
        ImageBuffer image = guarded([&] { return decode_(unscaled); });
        for (double& v : image.pixels) v = (v + 1.0) * 0.5;
        image.clamp();
        return image;
    }

    int scale_factor() const override { return traits_.scale_factor; }
    int latent_channels() const override { return traits_.latent_channels; }
    bool thread_safe() const override { return true; }
    std::string name() const override { return traits_.name; }

private:
    template <typename F>
    std::invoke_result_t<F> guarded(F&& f) const {
        if (traits_.thread_safe) return f();
        std::lock_guard lock(mutex_);
        return f();
    }

    EncodeFn encode_;
    DecodeFn decode_;
    AdapterTraits traits_;
    mutable std::mutex mutex_;
};

} // namespace zepo
