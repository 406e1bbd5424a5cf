#pragma once

#include <cstdint>
#include <random>

#include "tensor.hpp"

namespace zepo {

/// Seeded source of unit-normal noise. Every draw is addressed by (purpose, index),
/// so a given draw can be replayed without consuming the ones before it.
class NoiseStream {
public:
    enum class Purpose : std::uint32_t { extraction = 1, sampling = 2, merge = 3, test = 4 };

    explicit NoiseStream(std::uint64_t seed) : seed_(seed) {}

    std::uint64_t seed() const { return seed_; }

    std::mt19937_64 engine(Purpose purpose, std::uint64_t index) const {
        std::seed_seq seq{static_cast<std::uint32_t>(seed_), static_cast<std::uint32_t>(seed_ >> 32),
                          static_cast<std::uint32_t>(purpose), static_cast<std::uint32_t>(index),
                          static_cast<std::uint32_t>(index >> 32)};
        return std::mt19937_64(seq);
    }

    LatentTensor normal_like(const LatentTensor& shape, Purpose purpose, std::uint64_t index) const {
        LatentTensor out(shape.batch(), shape.channels(), shape.height(), shape.width());
        auto gen = engine(purpose, index);
        std::normal_distribution<double> dist(0.0, 1.0);
        for (double& v : out.values()) v = dist(gen);
        return out;
    }

private:
    std::uint64_t seed_;
};

} // namespace zepo
