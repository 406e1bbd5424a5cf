#pragma once

#include <openssl/evp.h>

#include <array>
#include <cstdint>
#include <cstring>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>

namespace zepo {

/// Incremental SHA-256 over raw bytes, rendered as lowercase hex.
class Digest {
public:
    Digest() : ctx_(EVP_MD_CTX_new(), &EVP_MD_CTX_free) {
        if (!ctx_ || EVP_DigestInit_ex(ctx_.get(), EVP_sha256(), nullptr) != 1) {
            throw std::runtime_error("Digest: failed to initialise SHA-256");
        }
    }

    Digest& update(std::span<const std::byte> bytes) {
        EVP_DigestUpdate(ctx_.get(), bytes.data(), bytes.size());
        return *this;
    }
    Digest& update(std::string_view text) { return update(std::as_bytes(std::span(text.data(), text.size()))); }
    Digest& update(std::span<const double> values) { return update(std::as_bytes(values)); }
    Digest& update(std::int64_t v) { return update(std::as_bytes(std::span(&v, 1))); }

    std::array<unsigned char, 32> finish_raw() {
        std::array<unsigned char, 32> out{};
        unsigned int len = 0;
        EVP_DigestFinal_ex(ctx_.get(), out.data(), &len);
        return out;
    }

    std::string finish_hex() {
        static constexpr char kHex[] = "0123456789abcdef";
        std::string s;
        for (unsigned char c : finish_raw()) {
            s.push_back(kHex[c >> 4]);
            s.push_back(kHex[c & 15]);
        }
        return s;
    }

private:
    std::unique_ptr<EVP_MD_CTX, decltype(&EVP_MD_CTX_free)> ctx_;
};

inline std::string sha256_hex(std::string_view text) { return Digest().update(text).finish_hex(); }

inline std::string sha256_hex(std::span<const double> values) { return Digest().update(values).finish_hex(); }

/// First eight digest bytes as an integer; used to seed prompt embeddings.
inline std::uint64_t hash64(std::string_view text) {
    auto raw = Digest().update(text).finish_raw();
    std::uint64_t v = 0;
    std::memcpy(&v, raw.data(), sizeof v);
    return v;
}

} // namespace zepo
