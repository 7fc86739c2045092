#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>

namespace recosa {

// Error taxonomy mirrored by the CLI exit codes: usage=1, data=2, runtime=3.
enum class ErrorKind { usage, data, runtime };

class Error : public std::runtime_error {
public:
    Error(ErrorKind kind, const std::string& message)
        : std::runtime_error(message), kind_(kind) {}

    ErrorKind kind() const noexcept { return kind_; }

private:
    ErrorKind kind_;
};

[[noreturn]] inline void fail_usage(const std::string& msg) { throw Error(ErrorKind::usage, msg); }
[[noreturn]] inline void fail_data(const std::string& msg) { throw Error(ErrorKind::data, msg); }
[[noreturn]] inline void fail_runtime(const std::string& msg) { throw Error(ErrorKind::runtime, msg); }

// Writes via a temp file and renames into place so readers never observe a
// partially written output.
inline void write_text_atomic(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream os(tmp, std::ios::binary | std::ios::trunc);
        if (!os) fail_runtime("cannot open " + tmp + " for writing");
        os << content;
        os.flush();
        if (!os) fail_runtime("write failed for " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        std::remove(tmp.c_str());
        fail_runtime("cannot move " + tmp + " into place");
    }
}

// Deterministic 64-bit RNG (splitmix64). Self-contained so that seeded runs
// are bit-reproducible independent of the standard library's distributions.
class Rng {
public:
    explicit Rng(std::uint64_t seed) noexcept : state_(seed) {}

    std::uint64_t next_u64() noexcept {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 bits of mantissa.
    double next_unit() noexcept {
        return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
    }

    double uniform(double lo, double hi) noexcept {
        return lo + (hi - lo) * next_unit();
    }

    // Uniform integer in [0, n). n must be > 0.
    std::uint64_t next_below(std::uint64_t n) noexcept {
        return next_u64() % n;
    }

private:
    std::uint64_t state_;
};

inline std::uint64_t fnv1a64(const void* bytes, std::size_t len, std::uint64_t h = 0xCBF29CE484222325ull) noexcept {
    const auto* p = static_cast<const unsigned char*>(bytes);
    for (std::size_t i = 0; i < len; ++i) {
        h ^= p[i];
        h *= 0x100000001B3ull;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s, std::uint64_t h = 0xCBF29CE484222325ull) noexcept {
    return fnv1a64(s.data(), s.size(), h);
}

// Per-epoch shuffle seeds and similar derived streams.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) noexcept {
    std::uint64_t buf[2] = {seed, salt};
    return fnv1a64(buf, sizeof buf);
}

}  // namespace recosa
