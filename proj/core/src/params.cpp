#include "casdm/params.hpp"

#include <cmath>
#include <stdexcept>

namespace casdm {

void ParamStore::add(const std::string& path, Tensor t) {
    if (path.empty()) throw std::invalid_argument("parameter path must be non-empty");
    auto [it, inserted] = params_.emplace(path, std::move(t));
    (void)it;
    if (!inserted) throw std::invalid_argument("duplicate parameter path: " + path);
}

Tensor& ParamStore::at(const std::string& path) {
    auto it = params_.find(path);
    if (it == params_.end()) throw std::invalid_argument("unknown parameter path: " + path);
    return it->second;
}

const Tensor& ParamStore::at(const std::string& path) const {
    auto it = params_.find(path);
    if (it == params_.end()) throw std::invalid_argument("unknown parameter path: " + path);
    return it->second;
}

int64_t ParamStore::total_size() const {
    int64_t n = 0;
    for (const auto& [k, v] : params_) n += v.size();
    return n;
}

void init_trunc_normal(Tensor& w, int64_t fan_in, Rng& rng) {
    if (fan_in <= 0) throw std::invalid_argument("fan_in must be positive");
    double sd = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (int64_t i = 0; i < w.size(); ++i) {
        double z;
        do {
            z = rng.normal();
        } while (std::abs(z) > 2.0);
        w[i] = static_cast<float>(z * sd);
    }
}

} // namespace casdm
