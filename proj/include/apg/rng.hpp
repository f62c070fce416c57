#pragma once

#include <cstdint>
#include <numeric>
#include <random>
#include <string>
#include <string_view>
#include <vector>

#include "apg/core.hpp"
#include "apg/sha256.hpp"

namespace apg {

// Every random draw in the system descends from the experiment root seed via
// labelled derivations: root -> ("run", r) -> ("user", id) -> ("instance", i)
// -> ("request", j). Derivation hashes the label so sibling streams never
// collide and the tree is reproducible from the config alone.
inline std::uint64_t derive_seed(std::uint64_t base, std::string_view label, std::uint64_t index = 0) {
    sha256 h;
    std::uint8_t bytes[8];
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<std::uint8_t>(base >> (8 * i));
    h.update(bytes, 8);
    h.update(label);
    for (int i = 0; i < 8; ++i) bytes[i] = static_cast<std::uint8_t>(index >> (8 * i));
    h.update(bytes, 8);
    auto d = h.finish();
    std::uint64_t out = 0;
    for (int i = 0; i < 8; ++i) out |= std::uint64_t(d[i]) << (8 * i);
    return out;
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view label, std::string_view key) {
    return derive_seed(base, std::string(label) + ":" + std::string(key), 0);
}

// mt19937_64 with self-contained bounded sampling; std::uniform_int_distribution
// is not portable across standard libraries, these draws are.
class rng_stream {
public:
    explicit rng_stream(std::uint64_t seed) : engine_(seed) {}

    std::uint64_t next_u64() { return engine_(); }

    // Unbiased draw in [0, n) by rejection.
    std::uint64_t below(std::uint64_t n) {
        if (n == 0) throw error(errc::sampling, "rng bound must be positive");
        std::uint64_t rem = std::uint64_t(-1) % n;
        std::uint64_t limit = std::uint64_t(-1) - rem;
        std::uint64_t x;
        do {
            x = engine_();
        } while (x > limit);
        return x % n;
    }

    double next_double() { return (engine_() >> 11) * 0x1.0p-53; }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (std::size_t i = v.size(); i > 1; --i) std::swap(v[i - 1], v[below(i)]);
    }

    template <typename T>
    std::vector<T> sample_without_replacement(const std::vector<T>& pool, std::size_t k) {
        if (k > pool.size()) throw error(errc::sampling, "sample size exceeds pool size");
        std::vector<std::size_t> idx(pool.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::vector<T> out;
        out.reserve(k);
        for (std::size_t i = 0; i < k; ++i) {
            std::size_t j = i + below(idx.size() - i);
            std::swap(idx[i], idx[j]);
            out.push_back(pool[idx[i]]);
        }
        return out;
    }

private:
    std::mt19937_64 engine_;
};

} // namespace apg
