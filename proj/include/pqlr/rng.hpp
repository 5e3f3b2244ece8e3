// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstdint>
#include <vector>

namespace pqlr {

// Deterministic random stream keyed by (seed, stream). The generator is a
// xoshiro256** seeded through splitmix64; Gaussian draws use Box-Muller on
// 53-bit uniforms. Identical (seed, stream) gives the identical sequence on
// every platform (golden sequences are committed in the tests).
class Rng {
public:
    explicit Rng(std::uint64_t seed, std::uint64_t stream = 0);

    std::uint64_t next_u64();
    // Uniform in [0, 1) with 53 random bits.
    double uniform();
    // Uniform integer in [0, n).
    std::uint64_t below(std::uint64_t n);
    double normal(double mean = 0.0, double stddev = 1.0);

    std::vector<float> normal_vec(std::size_t n, double mean = 0.0, double stddev = 1.0);

    // Fisher-Yates shuffle of indices [0, n).
    std::vector<std::size_t> permutation(std::size_t n);

    std::uint64_t seed() const { return seed_; }
    std::uint64_t stream() const { return stream_; }

private:
    std::uint64_t state_[4];
    std::uint64_t seed_ = 0;
    std::uint64_t stream_ = 0;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

} // namespace pqlr
