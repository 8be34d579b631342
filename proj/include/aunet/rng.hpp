#pragma once

#include <cstdint>
#include <string_view>
#include <vector>

namespace aunet {

// All randomness in a run flows from one root seed. Sub-streams are derived
// as mix(root ^ fnv1a64(purpose)) so that independent purposes ("model-init",
// "data", "shuffle", ...) never share a stream.
std::uint64_t fnv1a64(std::string_view s);
std::uint64_t mix64(std::uint64_t x);  // splitmix64 finalizer
std::uint64_t derive_seed(std::uint64_t root, std::string_view purpose);
std::uint64_t derive_seed(std::uint64_t root, std::string_view purpose, std::uint64_t index);

// Deterministic generator with hand-rolled distributions so that streams are
// pinned to the bit across standard-library versions.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    std::uint64_t next_u64();
    double uniform();                    // [0, 1)
    double uniform(double lo, double hi);
    std::uint64_t uniform_int(std::uint64_t n);  // [0, n)
    double normal();                     // Box-Muller, mean 0, std 1
    double truncated_normal(double std_dev, double clip_sigmas = 2.0);
    bool bernoulli(double p);

    template <typename T>
    void shuffle(std::vector<T>& v) {
        // Fisher-Yates; std::shuffle's draw pattern is not pinned by the standard.
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(uniform_int(i));
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::uint64_t state_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace aunet
