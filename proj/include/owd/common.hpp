#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace owd {

inline constexpr double kPi = 3.14159265358979323846;
inline constexpr double kHalfPi = kPi / 2.0;

// Error taxonomy shared by the whole library. The CLI maps these onto
// process exit codes (see tools/owd.cpp).
struct error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Bad argument or configuration value supplied by the caller.
struct parameter_error : error {
    using error::error;
};

// Malformed or inconsistent input data (files, manifests, annotations).
struct data_error : error {
    using error::error;
};

// Task-ordering / checkpoint contract violations.
struct protocol_error : error {
    using error::error;
};

// Tensor/box dimension mismatches, empty pooling regions.
struct shape_error : error {
    using error::error;
};

// NaN/Inf where a finite value is required.
struct numeric_error : error {
    using error::error;
};

// FNV-1a over raw bytes. Used for parameter hashing and config fingerprints.
inline std::uint64_t fnv1a(const void* data, std::size_t n, std::uint64_t seed = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    std::uint64_t h = seed;
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a(const std::string& s, std::uint64_t seed = 0xcbf29ce484222325ULL) {
    return fnv1a(s.data(), s.size(), seed);
}

}  // namespace owd
