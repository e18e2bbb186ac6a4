#pragma once

#include <cstdint>
#include <random>
#include <string>
#include <string_view>

namespace casdm {

// splitmix64 step; also the mixer behind derive_seed.
uint64_t splitmix64(uint64_t& state);

// Deterministically derives an independent stream seed from a master seed and
// a stream label ("theta_init", "noise", ...). Different labels give
// uncorrelated mt19937_64 seedings.
uint64_t derive_seed(uint64_t master, std::string_view stream);

// mt19937_64 plus a hand-rolled Box-Muller for normals. The spare-normal
// cache is part of the serialized state so resume replays the exact draw
// sequence.
class Rng {
public:
    explicit Rng(uint64_t seed);

    double uniform();                       // [0, 1)
    double normal();                        // N(0, 1)
    int64_t uniform_int(int64_t lo, int64_t hi); // inclusive ends, unbiased

    void fill_normal(float* p, int64_t n);
    void fill_normal(double* p, int64_t n);

    std::string state() const;
    void set_state(const std::string& s);

private:
    std::mt19937_64 eng_;
    bool has_spare_ = false;
    double spare_ = 0.0;
};

} // namespace casdm
