#pragma once

#include <cmath>
#include <cstdint>

namespace copelab {

// Counter-based random stream: every draw is a pure function of
// (seed, stream_id, counter), so the same stream replays bit-identically
// on any platform and streams can be split freely per purpose.
struct RngStream {
    uint64_t seed = 0;
    uint64_t stream_id = 0;
    uint64_t counter = 0;

    RngStream() = default;
    RngStream(uint64_t seed_, uint64_t stream_id_) : seed(seed_), stream_id(stream_id_) {}

    static uint64_t mix(uint64_t x) {
        // splitmix64 finalizer
        x += 0x9e3779b97f4a7c15ull;
        x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ull;
        x = (x ^ (x >> 27)) * 0x94d049bb133111ebull;
        return x ^ (x >> 31);
    }

    uint64_t next_u64() {
        uint64_t h = mix(seed);
        h = mix(h ^ (stream_id + 0x632be59bd9b4e019ull));
        h = mix(h ^ (counter + 0xd6e8feb86659fd93ull));
        counter += 1;
        return h;
    }

    // uniform in [0, 1) with 53 random bits
    double next_double() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // uniform integer in [0, n)
    int next_int(int n) {
        return static_cast<int>((static_cast<unsigned __int128>(next_u64()) *
                                 static_cast<unsigned __int128>(n)) >> 64);
    }

    bool next_bernoulli(double p) { return next_double() < p; }

    // Box-Muller; draws two uniforms per call (no cached spare, so the
    // output stays a pure function of the counter)
    double next_gaussian() {
        double u1 = 1.0 - next_double();  // (0, 1]
        double u2 = next_double();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586 * u2);
    }

    // weighted choice; weights need not be normalized
    int next_weighted(const double* weights, int n) {
        double total = 0.0;
        for (int i = 0; i < n; ++i) total += weights[i];
        double r = next_double() * total;
        double cum = 0.0;
        for (int i = 0; i < n; ++i) {
            cum += weights[i];
            if (r < cum) return i;
        }
        return n - 1;
    }
};

// Stable stream ids for the harness: one purpose namespace, one sequence slot.
inline RngStream make_stream(uint64_t seed, uint64_t purpose, uint64_t index) {
    return RngStream(seed, RngStream::mix(purpose) ^ index);
}

// Independent child stream for one item of a parent stream.
inline RngStream substream(const RngStream& base, uint64_t index) {
    return RngStream(base.seed, RngStream::mix(base.stream_id ^ 0x7f4a7c15u) ^ index);
}

}  // namespace copelab
