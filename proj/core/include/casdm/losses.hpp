#pragma once

#include <string>
#include <utility>

#include "casdm/metric.hpp"
#include "casdm/tape.hpp"

namespace casdm {

struct LossWeights {
    float lambda_eps = 1.0f;
    float lambda_x0 = 1.0f;
    float lambda_mu = 1.0f;
    float lambda_lpips = 0.1f;
};

// One training step's scalars; csv_row emits them in the log column order.
struct LossReport {
    int64_t step = 0;
    int t = 0;
    double l_eps = 0.0, l_x0 = 0.0, l_mu = 0.0, l_lpips = 0.0;
    double l_theta = 0.0, l_phi = 0.0;

    static std::string csv_header(); // step,t,l_eps,l_x0,l_mu,l_lpips,l_theta,l_phi
    std::string csv_row() const;
};

// All MSE terms reduce by the mean over every element, so the default
// weights behave the same at any image size.
Var loss_eps(Tape& tp, Var eps_true, Var eps_pred);
Var loss_x0(Tape& tp, Var x0_true, Var x0_pred);

// || mu_tilde - (r*mu_x0 + (1-r)*mu_eps) ||^2 with stop-gradient applied to
// both mu estimates HERE, so only r's producer ever sees this loss.
Var loss_mu(Tape& tp, Var mu_tilde, Var mu_x0, Var mu_eps, Var r);

// feature_distance between extracted features of the transformed images;
// differentiable w.r.t. both image arguments.
Var metric_loss(Tape& tp, Var x0_true, Var x0_pred, const FeatureExtractor& ex,
                const MetricTransform& mt);

// (l_theta, l_phi) = (w_eps*eps, w_x0*x0 + w_mu*mu + w_lpips*lpips).
std::pair<Var, Var> compose_losses(Tape& tp, Var l_eps, Var l_x0, Var l_mu, Var l_lpips,
                                   const LossWeights& w);

} // namespace casdm
