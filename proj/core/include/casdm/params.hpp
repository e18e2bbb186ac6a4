#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "casdm/rng.hpp"
#include "casdm/tensor.hpp"

namespace casdm {

// Named float32 parameter tensors keyed by a path like "down0.b0.conv1.w".
// Iteration order is lexicographic (std::map), which fixes the manifest
// order in checkpoints and the scan order in finite differencing.
class ParamStore {
public:
    void add(const std::string& path, Tensor t);
    bool has(const std::string& path) const { return params_.count(path) != 0; }
    Tensor& at(const std::string& path);
    const Tensor& at(const std::string& path) const;

    size_t count() const { return params_.size(); }
    int64_t total_size() const;

    auto begin() { return params_.begin(); }
    auto end() { return params_.end(); }
    auto begin() const { return params_.begin(); }
    auto end() const { return params_.end(); }

private:
    std::map<std::string, Tensor> params_;
};

// Truncated-normal init: N(0, 1/fan_in) resampled until |z| <= 2 sigma.
// Biases and norm offsets start at zero, norm scales at one.
void init_trunc_normal(Tensor& w, int64_t fan_in, Rng& rng);

} // namespace casdm
