#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "casdm/model.hpp"
#include "casdm/schedule.hpp"
#include "casdm/tensor.hpp"

namespace casdm {

// The mu-from-eps DDIM update exists in two algebraic forms that agree only
// for contiguous steps (t_prev == t-1): `paper` divides the recovery term by
// sqrt(alpha_t), `alpha_bar` by sqrt(alpha_bar_t / alpha_bar_prev). Under
// respacing the forms diverge; `consistency_gap` below measures it.
enum class MuEpsForm { paper, alpha_bar };

MuEpsForm mu_eps_form_from_string(const std::string& s);
const char* to_string(MuEpsForm f);

struct SamplerConfig {
    int steps = 100;      // respaced evaluation count
    double eta = 0.0;     // sigma scale; 0 = deterministic DDIM
    uint64_t seed = 0;
    MuEpsForm mu_eps_form = MuEpsForm::paper;
    int snapshot_every = 0; // record x_t snapshots every k evals; 0 = off
};

// One row per model evaluation plus a final row at t = 0 describing the
// emitted batch; t is strictly decreasing.
struct TrajectoryPoint {
    int t = 0;
    double mean_r = 0.0;
    double mean_abs_x = 0.0; // over the state entering step t (emitted at 0)
};

struct Trajectory {
    std::vector<TrajectoryPoint> points;
    std::vector<std::pair<int, Tensor>> snapshots;
};

struct SampleResult {
    Tensor images; // [n,H,W,C], clipped to [-1,1] at emission
    Trajectory trajectory;
};

// sigma_t = eta * sqrt((1-abar_prev)/(1-abar_t)) * sqrt(1 - abar_t/abar_prev);
// zero whenever t_prev == 0 (virtual abar = 1).
double ddim_sigma(const NoiseSchedule& s, int t, int t_prev, double eta);

// sqrt(abar_prev)*x0 + sqrt(1-abar_prev-sigma^2) * (x_t - sqrt(abar_t)*x0)
//                                                  / sqrt(1-abar_t)
Tensor ddim_mu_from_x0(const Tensor& x_t, const Tensor& x0_pred, int t, int t_prev,
                       double sigma_t, const NoiseSchedule& s);

// paper:     (x_t - sqrt(1-abar_t)*eps)/sqrt(alpha_t)    + dir(sigma)*eps
// alpha_bar: sqrt(abar_prev/abar_t)*(x_t - sqrt(1-abar_t)*eps)
//                                                        + dir(sigma)*eps
Tensor ddim_mu_from_eps(const Tensor& x_t, const Tensor& eps_pred, int t, int t_prev,
                        double sigma_t, const NoiseSchedule& s, MuEpsForm form);

// x_{t_prev} = r*mu_x0 + (1-r)*mu_eps + sigma*noise. noise may be null when
// sigma is zero.
Tensor ddim_step(const Tensor& x_t, const DenoisePrediction& pred, int t, int t_prev,
                 const SamplerConfig& cfg, const NoiseSchedule& s, const Tensor* noise);

// Max |mu_x0 - mu_eps| over a consistent (x0, eps) pairing of x_t, i.e. how
// far the chosen form breaks the r-independence identity for this (t, t_prev).
double consistency_gap(const Tensor& x_t, const Tensor& x0_pred, int t, int t_prev,
                       const NoiseSchedule& s, MuEpsForm form);

// DDPM move around the mixed posterior mean with fixed variance
// beta_tilde_t = beta_t*(1-abar_{t-1})/(1-abar_t); zero at t = 1.
Tensor ancestral_step(const Tensor& x_t, const DenoisePrediction& pred, int t,
                      const NoiseSchedule& s, const Tensor* noise);

// Walks the respaced chain from pure noise. Per-image noise streams are
// derived from cfg.seed, so results do not depend on how a run is chunked
// into batches.
SampleResult sample(const DenoiseFn& fn, const RespacedSchedule& rs,
                    const SamplerConfig& cfg, int n, std::array<int64_t, 3> image_shape);

// Bayes-optimal noise estimate for x0 ~ N(m, s2*I):
// eps_hat = sqrt(1-abar_t) * (x_t - sqrt(abar_t)*m) / (abar_t*s2 + 1-abar_t).
// m must hold either one value (broadcast) or one value per pixel.
DenoiseFn oracle_eps_predictor(Tensor m, double s2, const NoiseSchedule& s);

} // namespace casdm
