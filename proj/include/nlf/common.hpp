// Shared basics: error types, deterministic RNG, small numeric helpers.
#pragma once

#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <algorithm>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>
#include <functional>

namespace nlf {

// Error taxonomy maps onto the CLI exit codes: validation -> 1,
// numerical -> 2, io -> 3.
struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ValidationError : Error {
    using Error::Error;
};
struct NumericalError : Error {
    using Error::Error;
};
struct IoError : Error {
    using Error::Error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ValidationError(msg);
}

inline bool is_finite(double x) { return std::isfinite(x); }

constexpr double kPi = 3.14159265358979323846;

// Deterministic RNG, self-contained so results do not depend on the standard
// library's distribution implementations. splitmix64 state advance, with
// normal variates via Box-Muller.
class Rng {
public:
    explicit Rng(uint64_t seed = 0) : state_(seed + 0x9E3779B97F4A7C15ull) {}

    uint64_t next_u64() {
        uint64_t z = (state_ += 0x9E3779B97F4A7C15ull);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
        return z ^ (z >> 31);
    }

    // uniform in [0, 1)
    double uniform() {
        return double(next_u64() >> 11) * (1.0 / 9007199254740992.0);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // integer in [0, n)
    uint64_t uniform_index(uint64_t n) {
        return n ? next_u64() % n : 0;
    }

    double normal(double mean = 0.0, double stddev = 1.0) {
        if (have_spare_) {
            have_spare_ = false;
            return mean + stddev * spare_;
        }
        double u1 = 0.0, u2 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 1e-300);
        u2 = uniform();
        double r = std::sqrt(-2.0 * std::log(u1));
        spare_ = r * std::sin(2.0 * kPi * u2);
        have_spare_ = true;
        return mean + stddev * r * std::cos(2.0 * kPi * u2);
    }

    // Derive an independent stream; used to give each sample/epoch its own
    // reproducible sequence.
    Rng fork(uint64_t salt) const {
        return Rng(state_ ^ (salt * 0xD1B54A32D192ED03ull + 0x2545F4914F6CDD1Dull));
    }

private:
    uint64_t state_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// NLF_THREADS caps worker threads; default is single-threaded. All parallel
// loops write disjoint ranges, so results are identical for any thread count.
inline int thread_count() {
    static int cached = [] {
        const char* env = std::getenv("NLF_THREADS");
        if (!env) return 1;
        int n = std::atoi(env);
        if (n < 1) n = 1;
        int hw = int(std::thread::hardware_concurrency());
        if (hw > 0) n = std::min(n, hw);
        return std::min(n, 64);
    }();
    return cached;
}

inline void parallel_for(int64_t n, const std::function<void(int64_t, int64_t)>& body) {
    int workers = thread_count();
    if (workers <= 1 || n < 256) {
        body(0, n);
        return;
    }
    workers = int(std::min<int64_t>(workers, n));
    std::vector<std::thread> pool;
    pool.reserve(size_t(workers - 1));
    int64_t chunk = (n + workers - 1) / workers;
    for (int w = 1; w < workers; ++w) {
        int64_t lo = w * chunk, hi = std::min<int64_t>(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([&body, lo, hi] { body(lo, hi); });
    }
    body(0, std::min<int64_t>(n, chunk));
    for (auto& t : pool) t.join();
}

inline double sqr(double x) { return x * x; }

}  // namespace nlf
