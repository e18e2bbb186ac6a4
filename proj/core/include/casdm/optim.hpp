#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "casdm/params.hpp"

namespace casdm {

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

// Adam with bias correction. Moments are float32 (they round-trip exactly
// through checkpoints); the per-element update itself runs in double.
class AdamState {
public:
    AdamState(const ParamStore& ref, AdamConfig cfg);

    // grads must cover every parameter in `params` with matching shapes.
    void step(ParamStore& params, const std::map<std::string, Tensor>& grads);

    int64_t steps_done() const { return t_; }
    const AdamConfig& config() const { return cfg_; }
    const std::map<std::string, Tensor>& m() const { return m_; }
    const std::map<std::string, Tensor>& v() const { return v_; }

private:
    friend AdamState load_adam(const std::string&, const ParamStore&);
    AdamConfig cfg_;
    int64_t t_ = 0;
    std::map<std::string, Tensor> m_, v_;
};

// shadow <- decay * shadow + (1 - decay) * live, elementwise over all params.
void ema_update(ParamStore& shadow, const ParamStore& live, double decay);

// Central finite differences with a float-realizable step: each perturbed
// value is rounded to float first and the difference quotient divides by the
// realized spread, so the check measures the kernel, not the quantization.
std::map<std::string, std::vector<double>> finite_diff_grad(
    const std::function<double(const ParamStore&)>& f, ParamStore params, double h);

} // namespace casdm
