#pragma once

#include <functional>
#include <string>

#include "casdm/nets.hpp"
#include "casdm/schedule.hpp"

namespace casdm {

enum class ModelVariant { ddpm_eps, ddpm_x0, dual, casdm };
enum class PhiArch { unet_lite, fixres_cnn };
enum class PhiInput { x0_star_only, concat_x0star_eps };

ModelVariant model_variant_from_string(const std::string& s);
PhiArch phi_arch_from_string(const std::string& s);
PhiInput phi_input_from_string(const std::string& s);
std::string to_string(ModelVariant v);
std::string to_string(PhiArch a);
std::string to_string(PhiInput i);

struct ModelConfig {
    ModelVariant variant = ModelVariant::casdm;
    PhiArch phi_arch = PhiArch::unet_lite;
    PhiInput phi_input = PhiInput::x0_star_only;
    NetworkSpec net;
};

// One forward pass, all heads populated for every variant so sampling can
// treat them uniformly:
//   eps_pred [N,H,W,C], x0_star [N,H,W,C], x0_pred [N,H,W,C], r [N,H,W,1].
// x0_star is always behind a stop-gradient; for ddpm_x0 the eps head is the
// algebraic inversion of the predicted x0, and the r head of the plain DDPM
// variants is the constant matching their sampling rule (0 for eps, 1 for x0).
struct CasDmOutput {
    Var eps_pred;
    Var x0_star;
    Var x0_pred;
    Var r;
};

// Tensor-valued view of one denoising step, for samplers that run outside a
// gradient tape.
struct DenoisePrediction {
    Tensor x0;
    Tensor r;
    Tensor eps;
};
using DenoiseFn = std::function<DenoisePrediction(const Tensor& x_t, int t)>;

// Two parameter stores: "theta" holds the noise predictor (or the single
// shared trunk for ddpm_*/dual), "phi" holds the refiner and is empty for
// every variant except casdm. The cascade detaches x0_star (and the eps fed
// onward) before phi sees it, so no phi-side loss can reach theta.
class Model {
public:
    Model(const ModelConfig& cfg, const NoiseSchedule& sched);

    const ModelConfig& config() const { return cfg_; }
    const NoiseSchedule& schedule() const { return sched_; }
    ParamStore& theta() { return theta_; }
    const ParamStore& theta() const { return theta_; }
    ParamStore& phi() { return phi_; }
    const ParamStore& phi() const { return phi_; }

    // Fresh parameters from per-network streams derived off the master seed,
    // so theta's draw sequence does not depend on whether phi exists.
    void init_params(uint64_t master_seed);

    // Raw theta-network output: eps_pred for ddpm_eps/casdm, x0_pred for
    // ddpm_x0, the 2C+1-channel stack for dual.
    Var forward_theta(Tape& tp, Var x_t, const std::vector<int>& ts) const;

    // Refiner only (variant casdm): phi_in is the already-detached input,
    // [N,H,W,C] or [N,H,W,2C] per phi_input. Returns (x0_pred, r).
    std::pair<Var, Var> forward_phi(Tape& tp, Var phi_in, const std::vector<int>& ts) const;

    // Full variant dispatch. All entries of ts must be equal (the recovery
    // coefficients are scalar per step).
    CasDmOutput forward(Tape& tp, Var x_t, const std::vector<int>& ts) const;

    // No-grad forward for sampling; captures this, so the model must outlive
    // the returned function. Parameters are read at call time.
    DenoiseFn denoise_fn() const;

    int image_channels() const { return cfg_.net.image_channels; }
    int image_size() const { return cfg_.net.image_size; }

private:
    ModelConfig cfg_;
    NoiseSchedule sched_;
    ParamStore theta_, phi_;
    UNetLite theta_net_;
    UNetLite phi_unet_;
    FixResCNN phi_cnn_;
    bool has_phi_ = false;
};

} // namespace casdm
