#include "casdm/rng.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <sstream>
#include <stdexcept>

namespace casdm {

uint64_t splitmix64(uint64_t& state) {
    uint64_t z = (state += 0x9e3779b97f4a7c15ull);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

uint64_t derive_seed(uint64_t master, std::string_view stream) {
    // FNV-1a over the label folded into a splitmix64 chain keyed on master.
    uint64_t h = 0xcbf29ce484222325ull;
    for (char c : stream) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ull;
    }
    uint64_t s = master;
    uint64_t a = splitmix64(s);
    s ^= h;
    uint64_t b = splitmix64(s);
    return a ^ (b + 0x9e3779b97f4a7c15ull);
}

Rng::Rng(uint64_t seed) : eng_(seed) {}

double Rng::uniform() {
    // 53 random bits -> [0, 1) with full double resolution.
    return static_cast<double>(eng_() >> 11) * 0x1.0p-53;
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    // Box-Muller. u1 must avoid 0 for the log; shift into (0, 1].
    double u1 = (static_cast<double>(eng_() >> 11) + 1.0) * 0x1.0p-53;
    double u2 = static_cast<double>(eng_() >> 11) * 0x1.0p-53;
    double m = std::sqrt(-2.0 * std::log(u1));
    double a = 2.0 * std::numbers::pi * u2;
    spare_ = m * std::sin(a);
    has_spare_ = true;
    return m * std::cos(a);
}

int64_t Rng::uniform_int(int64_t lo, int64_t hi) {
    if (lo > hi) throw std::invalid_argument("uniform_int: lo > hi");
    uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
    if (span == 0) return static_cast<int64_t>(eng_()); // full 64-bit range
    // Rejection sampling keeps the draw unbiased for any span.
    uint64_t limit = UINT64_MAX - UINT64_MAX % span;
    uint64_t v;
    do {
        v = eng_();
    } while (v >= limit);
    return lo + static_cast<int64_t>(v % span);
}

void Rng::fill_normal(float* p, int64_t n) {
    for (int64_t i = 0; i < n; ++i) p[i] = static_cast<float>(normal());
}

void Rng::fill_normal(double* p, int64_t n) {
    for (int64_t i = 0; i < n; ++i) p[i] = normal();
}

std::string Rng::state() const {
    std::ostringstream os;
    os << eng_ << ' ' << (has_spare_ ? 1 : 0);
    if (has_spare_) {
        char buf[32];
        std::snprintf(buf, sizeof(buf), "%a", spare_);
        os << ' ' << buf;
    }
    return os.str();
}

void Rng::set_state(const std::string& s) {
    std::istringstream is(s);
    is >> eng_;
    int flag = 0;
    is >> flag;
    if (!is) throw std::invalid_argument("rng state string is malformed");
    has_spare_ = flag != 0;
    spare_ = 0.0;
    if (has_spare_) {
        std::string hex;
        is >> hex;
        if (hex.empty()) throw std::invalid_argument("rng state string is missing the spare value");
        spare_ = std::strtod(hex.c_str(), nullptr);
    }
}

} // namespace casdm
