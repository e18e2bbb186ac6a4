#include "casdm/model.hpp"

#include <cmath>
#include <stdexcept>

#include "casdm/errors.hpp"

namespace casdm {

ModelVariant model_variant_from_string(const std::string& s) {
    if (s == "ddpm_eps") return ModelVariant::ddpm_eps;
    if (s == "ddpm_x0") return ModelVariant::ddpm_x0;
    if (s == "dual") return ModelVariant::dual;
    if (s == "casdm") return ModelVariant::casdm;
    throw ConfigError("unknown model variant '" + s +
                      "' (expected ddpm_eps, ddpm_x0, dual, or casdm)");
}

PhiArch phi_arch_from_string(const std::string& s) {
    if (s == "unet_lite") return PhiArch::unet_lite;
    if (s == "fixres_cnn") return PhiArch::fixres_cnn;
    throw ConfigError("unknown phi_arch '" + s + "' (expected unet_lite or fixres_cnn)");
}

PhiInput phi_input_from_string(const std::string& s) {
    if (s == "x0_star_only") return PhiInput::x0_star_only;
    if (s == "concat_x0star_eps") return PhiInput::concat_x0star_eps;
    throw ConfigError("unknown phi_input '" + s +
                      "' (expected x0_star_only or concat_x0star_eps)");
}

std::string to_string(ModelVariant v) {
    switch (v) {
        case ModelVariant::ddpm_eps: return "ddpm_eps";
        case ModelVariant::ddpm_x0: return "ddpm_x0";
        case ModelVariant::dual: return "dual";
        case ModelVariant::casdm: return "casdm";
    }
    return "?";
}

std::string to_string(PhiArch a) {
    return a == PhiArch::unet_lite ? "unet_lite" : "fixres_cnn";
}

std::string to_string(PhiInput i) {
    return i == PhiInput::x0_star_only ? "x0_star_only" : "concat_x0star_eps";
}

Model::Model(const ModelConfig& cfg, const NoiseSchedule& sched) : cfg_(cfg), sched_(sched) {
    const int C = cfg.net.image_channels;
    const int theta_out = cfg.variant == ModelVariant::dual ? 2 * C + 1 : C;
    theta_net_ = UNetLite{"theta", cfg.net, C, theta_out};
    if (cfg.variant == ModelVariant::casdm) {
        has_phi_ = true;
        const int phi_in = cfg.phi_input == PhiInput::concat_x0star_eps ? 2 * C : C;
        if (cfg.phi_arch == PhiArch::unet_lite)
            phi_unet_ = UNetLite{"phi", cfg.net, phi_in, C + 1};
        else
            phi_cnn_ = FixResCNN{"phi", cfg.net, phi_in, C + 1};
    }
}

void Model::init_params(uint64_t master_seed) {
    theta_ = ParamStore{};
    phi_ = ParamStore{};
    Rng theta_rng(derive_seed(master_seed, "theta_init"));
    theta_net_.init(theta_, theta_rng);
    if (has_phi_) {
        Rng phi_rng(derive_seed(master_seed, "phi_init"));
        if (cfg_.phi_arch == PhiArch::unet_lite)
            phi_unet_.init(phi_, phi_rng);
        else
            phi_cnn_.init(phi_, phi_rng);
    }
}

Var Model::forward_theta(Tape& tp, Var x_t, const std::vector<int>& ts) const {
    return theta_net_.forward(tp, theta_, x_t, ts);
}

std::pair<Var, Var> Model::forward_phi(Tape& tp, Var phi_in, const std::vector<int>& ts) const {
    if (!has_phi_) throw std::invalid_argument("forward_phi: variant has no refiner network");
    const int C = cfg_.net.image_channels;
    Var out = cfg_.phi_arch == PhiArch::unet_lite ? phi_unet_.forward(tp, phi_, phi_in, ts)
                                                  : phi_cnn_.forward(tp, phi_, phi_in, ts);
    Var x0_pred = tp.slice_c(out, 0, C);
    Var r = tp.sigmoid(tp.slice_c(out, C, C + 1));
    return {x0_pred, r};
}

CasDmOutput Model::forward(Tape& tp, Var x_t, const std::vector<int>& ts) const {
    if (ts.empty()) throw std::invalid_argument("forward: ts must be non-empty");
    for (int t : ts)
        if (t != ts[0]) throw std::invalid_argument("forward: all timesteps in a batch must match");
    const int t = ts[0];
    const int C = cfg_.net.image_channels;
    const auto rc = recover_coeffs_f(sched_, t); // also validates t
    // copy dims now: node values move when the tape grows
    const Tensor& xv0 = tp.value(x_t);
    const int64_t N = xv0.dim(0), H = xv0.rank() > 1 ? xv0.dim(1) : 0,
                  W = xv0.rank() > 2 ? xv0.dim(2) : 0;

    Var theta_out = forward_theta(tp, x_t, ts);
    CasDmOutput o;
    switch (cfg_.variant) {
        case ModelVariant::ddpm_eps: {
            o.eps_pred = theta_out;
            o.x0_star = tp.stop_gradient(tp.recover_x0(x_t, o.eps_pred, rc.b, rc.inva));
            o.x0_pred = o.x0_star;
            o.r = tp.input(Tensor::zeros({N, H, W, 1}));
            break;
        }
        case ModelVariant::ddpm_x0: {
            o.x0_pred = theta_out;
            // eps implied by the x0 prediction: (x_t - sqrt(abar)*x0') / sqrt(1-abar)
            const double ab = sched_.alpha_bar(t);
            const float ea = static_cast<float>(1.0 / std::sqrt(1.0 - ab));
            const float eb = static_cast<float>(-std::sqrt(ab) / std::sqrt(1.0 - ab));
            o.eps_pred = tp.affine2(ea, x_t, eb, o.x0_pred);
            o.x0_star = tp.stop_gradient(tp.recover_x0(x_t, o.eps_pred, rc.b, rc.inva));
            o.r = tp.input(Tensor::full({N, H, W, 1}, 1.0f));
            break;
        }
        case ModelVariant::dual: {
            o.eps_pred = tp.slice_c(theta_out, 0, C);
            o.x0_pred = tp.slice_c(theta_out, C, 2 * C);
            o.r = tp.sigmoid(tp.slice_c(theta_out, 2 * C, 2 * C + 1));
            o.x0_star = tp.stop_gradient(tp.recover_x0(x_t, o.eps_pred, rc.b, rc.inva));
            break;
        }
        case ModelVariant::casdm: {
            o.eps_pred = theta_out;
            o.x0_star = tp.stop_gradient(tp.recover_x0(x_t, o.eps_pred, rc.b, rc.inva));
            Var phi_in = cfg_.phi_input == PhiInput::x0_star_only
                             ? o.x0_star
                             : tp.concat_c(o.x0_star, tp.stop_gradient(o.eps_pred));
            auto [x0_pred, r] = forward_phi(tp, phi_in, ts);
            o.x0_pred = x0_pred;
            o.r = r;
            break;
        }
    }
    return o;
}

DenoiseFn Model::denoise_fn() const {
    return [this](const Tensor& x_t, int t) {
        Tape tp(false);
        std::vector<int> ts(static_cast<size_t>(x_t.dim(0)), t);
        CasDmOutput o = forward(tp, tp.input(x_t), ts);
        return DenoisePrediction{o.x0_pred.val(), o.r.val(), o.eps_pred.val()};
    };
}

} // namespace casdm
