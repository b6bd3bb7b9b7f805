#pragma once

#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace lesionkit {

// Errors that stem from bad user input (files, flags, manifests, parameters).
// The CLI maps these to exit code 1.
struct UsageError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ValidationError : UsageError {
    using UsageError::UsageError;
};

struct ParseError : UsageError {
    using UsageError::UsageError;
};

struct ConfigError : UsageError {
    using UsageError::UsageError;
};

struct DegenerateInputError : UsageError {
    using UsageError::UsageError;
};

struct UndefinedMetricError : UsageError {
    using UsageError::UsageError;
};

// Errors raised while computing (divergence, non-finite values, generation
// failures). The CLI maps these to exit code 2.
struct ComputeError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NumericError : ComputeError {
    using ComputeError::ComputeError;
};

struct GenerationError : ComputeError {
    using ComputeError::ComputeError;
};

// Deterministic 64-bit generator (splitmix64). Used everywhere instead of
// std:: distributions so that streams are identical across standard libraries.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1).
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform in [lo, hi).
    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    // Uniform integer in [0, n). n must be >= 1.
    std::uint64_t next_below(std::uint64_t n) { return next_u64() % n; }

    int uniform_int(int lo, int hi) {  // inclusive bounds
        return lo + static_cast<int>(next_below(static_cast<std::uint64_t>(hi - lo + 1)));
    }

    // Child stream k of a root seed; streams are independent for distinct k.
    static Rng stream(std::uint64_t root_seed, std::uint64_t k) {
        Rng mix(root_seed ^ (0x6a09e667f3bcc909ULL + k * 0x9e3779b97f4a7c15ULL));
        return Rng(mix.next_u64());
    }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(next_below(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t state_;
};

// FNV-1a 64-bit content digest for artifact manifests and regression pins.
inline std::uint64_t fnv1a64(const void* data, std::size_t n, std::uint64_t h = 0xcbf29ce484222325ULL) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::uint64_t fnv1a64(const std::string& s) { return fnv1a64(s.data(), s.size()); }

std::string to_hex(std::uint64_t v);

// Runs fn(i) for i in [0, n) on up to `workers` threads. Results must be
// written to pre-sized slots indexed by i so output order stays deterministic.
void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn);

inline int default_workers() {
    unsigned hc = std::thread::hardware_concurrency();
    return hc == 0 ? 1 : static_cast<int>(hc);
}

// Lossless double <-> text via hexadecimal float literals.
std::string double_to_hex(double v);
double hex_to_double(const std::string& s);

// Fixed 4-fractional-digit decimal used by all reports.
std::string format_fixed4(double v);

}  // namespace lesionkit
