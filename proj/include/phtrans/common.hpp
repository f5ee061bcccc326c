#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <functional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

namespace phtrans {

class Error : public std::runtime_error {
  public:
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

namespace detail {
inline void format_into(std::ostringstream&) {}
template <class T, class... Rest>
void format_into(std::ostringstream& os, const T& v, const Rest&... rest) {
    os << v;
    format_into(os, rest...);
}
}  // namespace detail

template <class... Args>
[[noreturn]] void fail(const Args&... args) {
    std::ostringstream os;
    detail::format_into(os, args...);
    throw Error(os.str());
}

#define PH_CHECK(cond, ...)                    \
    do {                                       \
        if (!(cond)) ::phtrans::fail(__VA_ARGS__); \
    } while (0)

// Deterministic counter-based RNG. All randomness in the project is derived
// functionally from (seed, stream, counter) so that runs, resumes and
// parallel schedules reproduce bitwise.
class Rng {
  public:
    explicit Rng(uint64_t seed) : state_(splitmix(seed ^ 0x9e3779b97f4a7c15ull)) {}
    Rng(uint64_t seed, uint64_t stream) : Rng(splitmix(seed) ^ splitmix(stream * 0xbf58476d1ce4e5b9ull + 1)) {}

    uint64_t next_u64() {
        state_ += 0x9e3779b97f4a7c15ull;
        return mix(state_);
    }

    // uniform in [0,1)
    double next_double() { return double(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * next_double(); }

    int64_t uniform_int(int64_t lo, int64_t hi) {  // inclusive bounds
        return lo + int64_t(next_u64() % uint64_t(hi - lo + 1));
    }

    // standard normal via Box-Muller (deterministic across platforms)
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0, u2 = 0.0;
        do {
            u1 = next_double();
        } while (u1 <= 1e-300);
        u2 = next_double();
        double r = std::sqrt(-2.0 * std::log(u1));
        double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    template <class T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = size_t(next_u64() % i);
            std::swap(v[i - 1], v[j]);
        }
    }

    static uint64_t splitmix(uint64_t x) {
        x += 0x9e3779b97f4a7c15ull;
        return mix(x);
    }

  private:
    static uint64_t mix(uint64_t z) {
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
        return z ^ (z >> 31);
    }

    uint64_t state_;
    double spare_ = 0.0;
    bool have_spare_ = false;
};

// Deterministic parallel-for: the index range is split into contiguous chunks,
// each index is processed by exactly one thread and every per-index result is
// written independently, so results do not depend on the thread count.
inline int& thread_count() {
    static int n = [] {
        if (const char* env = std::getenv("PHTRANS_THREADS")) {
            int v = std::atoi(env);
            if (v >= 1) return v;
        }
        unsigned hc = std::thread::hardware_concurrency();
        return hc == 0 ? 1 : int(hc);
    }();
    return n;
}

template <class Fn>
void parallel_for(int64_t n, const Fn& fn, int64_t grain = 1024) {
    int threads = thread_count();
    if (threads <= 1 || n < 2 * grain) {
        for (int64_t i = 0; i < n; ++i) fn(i);
        return;
    }
    int64_t nchunks = std::min<int64_t>(threads, (n + grain - 1) / grain);
    std::vector<std::thread> pool;
    pool.reserve(size_t(nchunks));
    int64_t chunk = (n + nchunks - 1) / nchunks;
    for (int64_t c = 0; c < nchunks; ++c) {
        int64_t lo = c * chunk, hi = std::min(n, lo + chunk);
        if (lo >= hi) break;
        pool.emplace_back([lo, hi, &fn] {
            for (int64_t i = lo; i < hi; ++i) fn(i);
        });
    }
    for (auto& t : pool) t.join();
}

inline std::string shape_str(const std::vector<int64_t>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

}  // namespace phtrans
