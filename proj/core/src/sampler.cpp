#include "casdm/sampler.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "casdm/errors.hpp"
#include "casdm/kernels.hpp"
#include "casdm/rng.hpp"

namespace casdm {

MuEpsForm mu_eps_form_from_string(const std::string& s) {
    if (s == "paper") return MuEpsForm::paper;
    if (s == "alpha_bar") return MuEpsForm::alpha_bar;
    throw ConfigError("unknown mu_eps_form '" + s + "' (expected paper|alpha_bar)");
}

const char* to_string(MuEpsForm f) {
    return f == MuEpsForm::paper ? "paper" : "alpha_bar";
}

namespace {

void check_step_pair(const NoiseSchedule& s, int t, int t_prev) {
    if (t < 1 || t > s.T)
        throw std::invalid_argument("ddim: t = " + std::to_string(t) +
                                    " outside [1, " + std::to_string(s.T) + "]");
    if (t_prev < 0 || t_prev >= t)
        throw std::invalid_argument("ddim: t_prev = " + std::to_string(t_prev) +
                                    " must lie in [0, t)");
}

// dir = sqrt(1 - abar_prev - sigma^2), guarding the documented precondition.
double direction_coeff(double abar_prev, double sigma_t) {
    if (sigma_t < 0.0) throw std::invalid_argument("ddim: sigma must be >= 0");
    const double room = 1.0 - abar_prev;
    if (sigma_t * sigma_t > room)
        throw std::invalid_argument("ddim: sigma^2 = " + std::to_string(sigma_t * sigma_t) +
                                    " exceeds 1 - alpha_bar_prev = " + std::to_string(room));
    return std::sqrt(std::max(0.0, room - sigma_t * sigma_t));
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.dims() != b.dims())
        throw std::invalid_argument(std::string("ddim: ") + what + " shape mismatch: " +
                                    a.shape_str() + " vs " + b.shape_str());
}

// Both mu updates are affine in (x_t, pred); demote the double coefficients
// once so trajectories are reproducible float paths.
struct MuCoeffs { float cx, cp; };

MuCoeffs mu_x0_coeffs(const NoiseSchedule& s, int t, int t_prev, double sigma_t) {
    const double abar = s.alpha_bar(t), abar_prev = s.alpha_bar(t_prev);
    const double dir = direction_coeff(abar_prev, sigma_t);
    const double cx = dir / std::sqrt(1.0 - abar);
    const double cp = std::sqrt(abar_prev) - cx * std::sqrt(abar);
    return {static_cast<float>(cx), static_cast<float>(cp)};
}

MuCoeffs mu_eps_coeffs(const NoiseSchedule& s, int t, int t_prev, double sigma_t,
                       MuEpsForm form) {
    const double abar = s.alpha_bar(t), abar_prev = s.alpha_bar(t_prev);
    const double dir = direction_coeff(abar_prev, sigma_t);
    const double recov = form == MuEpsForm::paper
                             ? 1.0 / std::sqrt(s.alpha(t))
                             : std::sqrt(abar_prev / abar);
    const double cx = recov;
    const double cp = dir - recov * std::sqrt(1.0 - abar);
    return {static_cast<float>(cx), static_cast<float>(cp)};
}

Tensor apply_affine(const MuCoeffs& c, const Tensor& x, const Tensor& p) {
    Tensor out(x.dims());
    kern::affine2(c.cx, x.data(), c.cp, p.data(), out.data(), x.size());
    return out;
}

double mean_abs(const Tensor& x) {
    double acc = 0.0;
    for (int64_t i = 0; i < x.size(); ++i) acc += std::abs(static_cast<double>(x[i]));
    return acc / static_cast<double>(x.size());
}

} // namespace

double ddim_sigma(const NoiseSchedule& s, int t, int t_prev, double eta) {
    check_step_pair(s, t, t_prev);
    if (eta < 0.0) throw std::invalid_argument("ddim: eta must be >= 0");
    if (eta == 0.0) return 0.0;
    const double abar = s.alpha_bar(t), abar_prev = s.alpha_bar(t_prev);
    return eta * std::sqrt((1.0 - abar_prev) / (1.0 - abar)) *
           std::sqrt(1.0 - abar / abar_prev);
}

Tensor ddim_mu_from_x0(const Tensor& x_t, const Tensor& x0_pred, int t, int t_prev,
                       double sigma_t, const NoiseSchedule& s) {
    check_step_pair(s, t, t_prev);
    check_same_shape(x_t, x0_pred, "x0_pred");
    return apply_affine(mu_x0_coeffs(s, t, t_prev, sigma_t), x_t, x0_pred);
}

Tensor ddim_mu_from_eps(const Tensor& x_t, const Tensor& eps_pred, int t, int t_prev,
                        double sigma_t, const NoiseSchedule& s, MuEpsForm form) {
    check_step_pair(s, t, t_prev);
    check_same_shape(x_t, eps_pred, "eps_pred");
    return apply_affine(mu_eps_coeffs(s, t, t_prev, sigma_t, form), x_t, eps_pred);
}

Tensor ddim_step(const Tensor& x_t, const DenoisePrediction& pred, int t, int t_prev,
                 const SamplerConfig& cfg, const NoiseSchedule& s, const Tensor* noise) {
    const double sigma = ddim_sigma(s, t, t_prev, cfg.eta);
    Tensor mu_x0 = ddim_mu_from_x0(x_t, pred.x0, t, t_prev, sigma, s);
    Tensor mu_eps = ddim_mu_from_eps(x_t, pred.eps, t, t_prev, sigma, s, cfg.mu_eps_form);
    Tensor out = mix_mu(pred.r, mu_x0, mu_eps);
    if (sigma > 0.0) {
        if (noise == nullptr) throw std::invalid_argument("ddim_step: sigma > 0 needs noise");
        check_same_shape(x_t, *noise, "noise");
        const float sf = static_cast<float>(sigma);
        for (int64_t i = 0; i < out.size(); ++i) out[i] += sf * (*noise)[i];
    }
    return out;
}

double consistency_gap(const Tensor& x_t, const Tensor& x0_pred, int t, int t_prev,
                       const NoiseSchedule& s, MuEpsForm form) {
    check_step_pair(s, t, t_prev);
    check_same_shape(x_t, x0_pred, "x0_pred");
    // eps paired with x0 through the forward identity at step t, computed in
    // double so pairing error does not pollute the measured gap
    Tensor eps(x_t.dims());
    const double abar = s.alpha_bar(t);
    const double sa = std::sqrt(abar), sb = std::sqrt(1.0 - abar);
    for (int64_t i = 0; i < eps.size(); ++i)
        eps[i] = static_cast<float>(
            (static_cast<double>(x_t[i]) - sa * static_cast<double>(x0_pred[i])) / sb);
    Tensor mu_x0 = ddim_mu_from_x0(x_t, x0_pred, t, t_prev, 0.0, s);
    Tensor mu_eps = ddim_mu_from_eps(x_t, eps, t, t_prev, 0.0, s, form);
    double gap = 0.0;
    for (int64_t i = 0; i < mu_x0.size(); ++i)
        gap = std::max(gap, std::abs(static_cast<double>(mu_x0[i]) -
                                     static_cast<double>(mu_eps[i])));
    return gap;
}

Tensor ancestral_step(const Tensor& x_t, const DenoisePrediction& pred, int t,
                      const NoiseSchedule& s, const Tensor* noise) {
    if (t < 1 || t > s.T)
        throw std::invalid_argument("ancestral_step: t outside [1, T]");
    check_same_shape(x_t, pred.x0, "x0_pred");
    check_same_shape(x_t, pred.eps, "eps_pred");
    Tensor mu = mix_mu(pred.r, posterior_mean(pred.x0, x_t, s, t),
                       mu_from_eps(x_t, pred.eps, s, t));
    const double abar = s.alpha_bar(t), abar_prev = s.alpha_bar(t - 1);
    const double beta_tilde = s.beta(t) * (1.0 - abar_prev) / (1.0 - abar);
    if (t > 1 && beta_tilde > 0.0) {
        if (noise == nullptr)
            throw std::invalid_argument("ancestral_step: t > 1 needs noise");
        check_same_shape(x_t, *noise, "noise");
        const float sf = static_cast<float>(std::sqrt(beta_tilde));
        for (int64_t i = 0; i < mu.size(); ++i) mu[i] += sf * (*noise)[i];
    }
    return mu;
}

SampleResult sample(const DenoiseFn& fn, const RespacedSchedule& rs,
                    const SamplerConfig& cfg, int n, std::array<int64_t, 3> image_shape) {
    if (!fn) throw std::invalid_argument("sample: empty denoise function");
    if (n < 1) throw std::invalid_argument("sample: n must be >= 1");
    const int64_t H = image_shape[0], W = image_shape[1], C = image_shape[2];
    if (H < 1 || W < 1 || C < 1)
        throw std::invalid_argument("sample: image shape must be positive");
    const int64_t per = H * W * C;

    // One stream per image keeps output independent of batch chunking.
    std::vector<Rng> streams;
    streams.reserve(static_cast<size_t>(n));
    for (int i = 0; i < n; ++i)
        streams.emplace_back(derive_seed(cfg.seed, "sample.img" + std::to_string(i)));

    Tensor x({n, H, W, C});
    for (int i = 0; i < n; ++i)
        streams[static_cast<size_t>(i)].fill_normal(x.data() + i * per, per);

    SampleResult res;
    Tensor noise({n, H, W, C});
    for (int i = rs.steps() - 1; i >= 0; --i) {
        const int t = rs.t_at(i);
        const int t_prev = i > 0 ? rs.t_at(i - 1) : 0;
        const double entering_abs = mean_abs(x);

        DenoisePrediction pred = fn(x, t);
        double mean_r = 0.0;
        for (int64_t k = 0; k < pred.r.size(); ++k) mean_r += pred.r[k];
        mean_r /= static_cast<double>(pred.r.size());
        res.trajectory.points.push_back({t, mean_r, entering_abs});
        if (cfg.snapshot_every > 0 && (rs.steps() - 1 - i) % cfg.snapshot_every == 0)
            res.trajectory.snapshots.emplace_back(t, x);

        const double sigma = ddim_sigma(rs.base, t, t_prev, cfg.eta);
        const Tensor* np = nullptr;
        if (sigma > 0.0) {
            for (int b = 0; b < n; ++b)
                streams[static_cast<size_t>(b)].fill_normal(noise.data() + b * per, per);
            np = &noise;
        }
        Tensor next = ddim_step(x, pred, t, t_prev, cfg, rs.base, np);
        const double last_r = mean_r;
        x = std::move(next);
        if (i == 0) {
            for (int64_t k = 0; k < x.size(); ++k)
                x[k] = std::clamp(x[k], -1.0f, 1.0f);
            res.trajectory.points.push_back({0, last_r, mean_abs(x)});
            if (cfg.snapshot_every > 0) res.trajectory.snapshots.emplace_back(0, x);
        }
    }
    res.images = std::move(x);
    return res;
}

DenoiseFn oracle_eps_predictor(Tensor m, double s2, const NoiseSchedule& s) {
    if (s2 <= 0.0) throw std::invalid_argument("oracle_eps_predictor: s2 must be > 0");
    if (m.size() < 1) throw std::invalid_argument("oracle_eps_predictor: empty mean");
    return [m = std::move(m), s2, s](const Tensor& x_t, int t) -> DenoisePrediction {
        if (t < 1 || t > s.T)
            throw std::invalid_argument("oracle predictor: t outside [1, T]");
        if (x_t.rank() != 4)
            throw std::invalid_argument("oracle predictor: want [N,H,W,C], got " +
                                        x_t.shape_str());
        const int64_t n = x_t.dim(0), per = x_t.size() / n;
        if (m.size() != 1 && m.size() != per)
            throw std::invalid_argument("oracle predictor: mean holds " +
                                        std::to_string(m.size()) +
                                        " values, image has " + std::to_string(per));
        const double abar = s.alpha_bar(t);
        const double sa = std::sqrt(abar), sb = std::sqrt(1.0 - abar);
        const double den = abar * s2 + (1.0 - abar);
        DenoisePrediction pred;
        pred.eps = Tensor(x_t.dims());
        pred.x0 = Tensor(x_t.dims());
        for (int64_t i = 0; i < x_t.size(); ++i) {
            const double mi = m.size() == 1 ? m[0] : m[i % per];
            const double e = sb * (static_cast<double>(x_t[i]) - sa * mi) / den;
            pred.eps[i] = static_cast<float>(e);
            pred.x0[i] = static_cast<float>((static_cast<double>(x_t[i]) - sb * e) / sa);
        }
        pred.r = Tensor::full({n, x_t.dim(1), x_t.dim(2), 1}, 0.5f);
        return pred;
    };
}

} // namespace casdm
