#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <stdexcept>
#include <string>
#include <new>
#include <thread>
#include <vector>

namespace pointrel {

// ---------------------------------------------------------------------------
// Error taxonomy. Everything user-facing throws one of these; the CLI maps
// ConfigError to exit code 2 and NumericError during training to exit code 3.
// ---------------------------------------------------------------------------

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/extent mismatches between tensors or index tables.
struct DimensionError : Error {
    using Error::Error;
};

// Argument outside its mathematical domain (k > N, S > N, m > k, ...).
struct DomainError : Error {
    using Error::Error;
};

// Index out of range in a gather/lookup table.
struct IndexError : Error {
    using Error::Error;
};

// Non-finite values where finite ones are required.
struct NumericError : Error {
    using Error::Error;
};

// API misuse (non-scalar loss to backward, mismatched tape, ...).
struct ContractError : Error {
    using Error::Error;
};

// Bad or missing configuration input.
struct ConfigError : Error {
    using Error::Error;
};

// ---------------------------------------------------------------------------
// Aligned numeric storage. SIMD kernels choose their head/tail peeling from
// the buffer address, so the same multiplication on the same values can round
// differently when an operand lands at a different offset mod 64. Pinning
// every numeric buffer to one 64-byte alignment class makes each kernel a
// pure function of values and shape, which the bit-reproducibility guarantees
// in this library depend on.
// ---------------------------------------------------------------------------

template <class T, std::size_t Align>
struct AlignedAllocator {
    static_assert((Align & (Align - 1)) == 0, "alignment must be a power of two");
    using value_type = T;

    AlignedAllocator() noexcept = default;
    template <class U>
    AlignedAllocator(const AlignedAllocator<U, Align>&) noexcept {}
    template <class U>
    struct rebind {
        using other = AlignedAllocator<U, Align>;
    };

    T* allocate(std::size_t n) {
        return static_cast<T*>(::operator new(n * sizeof(T), std::align_val_t(Align)));
    }
    void deallocate(T* p, std::size_t) noexcept {
        ::operator delete(p, std::align_val_t(Align));
    }

    friend bool operator==(const AlignedAllocator&, const AlignedAllocator&) { return true; }
    friend bool operator!=(const AlignedAllocator&, const AlignedAllocator&) { return false; }
};

using dvec = std::vector<double, AlignedAllocator<double, 64>>;

// Value comparisons against plain vectors (test and call-site convenience).
inline bool operator==(const dvec& a, const std::vector<double>& b) {
    return a.size() == b.size() && std::equal(a.begin(), a.end(), b.begin());
}
inline bool operator==(const std::vector<double>& a, const dvec& b) { return b == a; }
inline bool operator!=(const dvec& a, const std::vector<double>& b) { return !(a == b); }
inline bool operator!=(const std::vector<double>& a, const dvec& b) { return !(b == a); }

// ---------------------------------------------------------------------------
// Deterministic RNG. std::mt19937_64's output sequence is pinned by the
// standard; the distributions are not, so we roll our own draws on top of the
// raw 64-bit stream. Same seed => bit-identical streams on every platform.
// ---------------------------------------------------------------------------

inline std::uint64_t splitmix64(std::uint64_t& state) {
    state += 0x9E3779B97F4A7C15ULL;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
    return z ^ (z >> 31);
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed) {
        // Expand the seed through splitmix64 so nearby seeds diverge.
        std::uint64_t s = seed;
        state_[0] = splitmix64(s);
        state_[1] = splitmix64(s);
        state_[2] = splitmix64(s);
        state_[3] = splitmix64(s);
    }

    std::uint64_t seed() const { return seed_; }

    // xoshiro256** core step.
    std::uint64_t next_u64() {
        auto rotl = [](std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); };
        const std::uint64_t result = rotl(state_[1] * 5, 7) * 9;
        const std::uint64_t t = state_[1] << 17;
        state_[2] ^= state_[0];
        state_[3] ^= state_[1];
        state_[1] ^= state_[2];
        state_[0] ^= state_[3];
        state_[2] ^= t;
        state_[3] = rotl(state_[3], 45);
        return result;
    }

    // Uniform in [0, 1) with 53-bit resolution.
    double uniform01() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Uniform integer in [0, n), unbiased via rejection.
    std::uint64_t uniform_index(std::uint64_t n) {
        if (n == 0) throw DomainError("uniform_index: n must be positive");
        const std::uint64_t limit = std::numeric_limits<std::uint64_t>::max() - std::numeric_limits<std::uint64_t>::max() % n;
        std::uint64_t x = next_u64();
        while (x >= limit) x = next_u64();
        return x % n;
    }

    // Standard normal via Box–Muller (two raw draws per value, no cache).
    double normal(double mean = 0.0, double stddev = 1.0) {
        double u1 = uniform01();
        double u2 = uniform01();
        // Guard against log(0).
        if (u1 <= 0.0) u1 = 0x1.0p-53;
        const double r = std::sqrt(-2.0 * std::log(u1));
        return mean + stddev * r * std::cos(2.0 * 3.141592653589793238462643383279502884 * u2);
    }

    // Independent child stream for a named purpose; deterministic in (seed, tag).
    Rng derive(std::uint64_t tag) const {
        std::uint64_t s = seed_ ^ (tag * 0xD6E8FEB86659FD93ULL + 0xA5A5A5A5A5A5A5A5ULL);
        return Rng(splitmix64(s));
    }

private:
    std::uint64_t seed_;
    std::uint64_t state_[4];
};

// ---------------------------------------------------------------------------
// Thread-count resolution and a minimal parallel_for. The PRA_THREADS
// environment variable caps whatever the caller requests. Default is one
// thread: all determinism guarantees are stated for single-threaded mode.
// ---------------------------------------------------------------------------

inline int pra_threads_cap() {
    if (const char* env = std::getenv("PRA_THREADS")) {
        try {
            int v = std::stoi(env);
            if (v >= 1) return v;
        } catch (...) {
            throw ConfigError(std::string("PRA_THREADS is not a positive integer: ") + env);
        }
        throw ConfigError(std::string("PRA_THREADS is not a positive integer: ") + env);
    }
    return 0;  // no cap configured
}

inline int resolve_threads(int requested) {
    int t = requested >= 1 ? requested : 1;
    const int cap = pra_threads_cap();
    if (cap >= 1 && t > cap) t = cap;
    return t;
}

// Writes a file via temp-and-rename so re-runs overwrite atomically and a
// crash never leaves a half-written artifact behind.
inline void atomic_write_text(const std::filesystem::path& path, const std::string& contents) {
    namespace fs = std::filesystem;
    if (path.has_parent_path()) fs::create_directories(path.parent_path());
    fs::path tmp = path;
    tmp += ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw ConfigError("cannot open for writing: " + tmp.string());
        out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
        if (!out) throw ConfigError("write failed: " + tmp.string());
    }
    fs::rename(tmp, path);
}

// Splits [0, n) into contiguous chunks, one per worker. fn(begin, end) must be
// safe to run concurrently on disjoint ranges. threads==1 runs inline.
template <typename Fn>
void parallel_for(std::size_t n, int threads, Fn&& fn) {
    if (n == 0) return;
    if (threads <= 1 || n == 1) {
        fn(std::size_t{0}, n);
        return;
    }
    const std::size_t workers = std::min<std::size_t>(static_cast<std::size_t>(threads), n);
    std::vector<std::thread> pool;
    pool.reserve(workers);
    const std::size_t chunk = (n + workers - 1) / workers;
    for (std::size_t w = 0; w < workers; ++w) {
        const std::size_t b = w * chunk;
        const std::size_t e = std::min(n, b + chunk);
        if (b >= e) break;
        pool.emplace_back([&fn, b, e] { fn(b, e); });
    }
    for (auto& th : pool) th.join();
}

}  // namespace pointrel
