#include "casdm/losses.hpp"

#include <cstdio>
#include <stdexcept>

namespace casdm {

std::string LossReport::csv_header() {
    return "step,t,l_eps,l_x0,l_mu,l_lpips,l_theta,l_phi";
}

std::string LossReport::csv_row() const {
    char buf[256];
    std::snprintf(buf, sizeof(buf), "%lld,%d,%.9g,%.9g,%.9g,%.9g,%.9g,%.9g",
                  static_cast<long long>(step), t, l_eps, l_x0, l_mu, l_lpips, l_theta, l_phi);
    return buf;
}

Var loss_eps(Tape& tp, Var eps_true, Var eps_pred) { return tp.mse(eps_true, eps_pred); }

Var loss_x0(Tape& tp, Var x0_true, Var x0_pred) { return tp.mse(x0_true, x0_pred); }

Var loss_mu(Tape& tp, Var mu_tilde, Var mu_x0, Var mu_eps, Var r) {
    Var mixed = tp.mix(r, tp.stop_gradient(mu_x0), tp.stop_gradient(mu_eps));
    return tp.mse(mu_tilde, mixed);
}

Var metric_loss(Tape& tp, Var x0_true, Var x0_pred, const FeatureExtractor& ex,
                const MetricTransform& mt) {
    auto fa = extract_features(tp, ex, metric_transform(tp, x0_true, mt));
    auto fb = extract_features(tp, ex, metric_transform(tp, x0_pred, mt));
    return feature_distance(tp, fa, fb);
}

std::pair<Var, Var> compose_losses(Tape& tp, Var l_eps, Var l_x0, Var l_mu, Var l_lpips,
                                   const LossWeights& w) {
    if (w.lambda_eps < 0 || w.lambda_x0 < 0 || w.lambda_mu < 0 || w.lambda_lpips < 0)
        throw std::invalid_argument("compose_losses: loss weights must be nonnegative");
    Var l_theta = tp.scale(l_eps, w.lambda_eps);
    Var l_phi = tp.add(tp.add(tp.scale(l_x0, w.lambda_x0), tp.scale(l_mu, w.lambda_mu)),
                       tp.scale(l_lpips, w.lambda_lpips));
    return {l_theta, l_phi};
}

} // namespace casdm
