#include "casdm/schedule.hpp"

#include <cmath>
#include <cstdio>
#include <numbers>
#include <ostream>
#include <stdexcept>

#include "casdm/kernels.hpp"

namespace casdm {

ScheduleKind schedule_kind_from_string(const std::string& s) {
    if (s == "cosine") return ScheduleKind::cosine;
    if (s == "linear") return ScheduleKind::linear;
    throw std::invalid_argument("unknown schedule kind: " + s);
}

const char* to_string(ScheduleKind k) {
    return k == ScheduleKind::cosine ? "cosine" : "linear";
}

namespace {

void check_t(const NoiseSchedule& s, int t, int lo) {
    if (t < lo || t > s.T)
        throw std::invalid_argument("timestep " + std::to_string(t) + " outside [" +
                                    std::to_string(lo) + ", " + std::to_string(s.T) + "]");
}

} // namespace

double NoiseSchedule::beta(int t) const {
    check_t(*this, t, 1);
    return betas[static_cast<size_t>(t - 1)];
}

double NoiseSchedule::alpha(int t) const {
    check_t(*this, t, 1);
    return alphas[static_cast<size_t>(t - 1)];
}

double NoiseSchedule::alpha_bar(int t) const {
    if (t == 0) return 1.0;
    check_t(*this, t, 1);
    return alpha_bars[static_cast<size_t>(t - 1)];
}

NoiseSchedule make_schedule(ScheduleKind kind, int T) {
    if (T < 2) throw std::invalid_argument("schedule needs T >= 2, got " + std::to_string(T));
    if (T > 1000000) throw std::invalid_argument("schedule T too large: " + std::to_string(T));

    NoiseSchedule s;
    s.kind = kind;
    s.T = T;
    s.betas.resize(static_cast<size_t>(T));

    if (kind == ScheduleKind::linear) {
        // Interpolated (not stepped) so both endpoints are hit exactly for any T.
        constexpr double b1 = 1e-4, bT = 0.02;
        for (int t = 1; t <= T; ++t) {
            double u = static_cast<double>(t - 1) / static_cast<double>(T - 1);
            s.betas[static_cast<size_t>(t - 1)] = b1 * (1.0 - u) + bT * u;
        }
    } else {
        constexpr double shift = 0.008;
        auto f = [&](double t) {
            double u = (t / static_cast<double>(T) + shift) / (1.0 + shift);
            double c = std::cos(u * std::numbers::pi / 2.0);
            return c * c;
        };
        double f0 = f(0.0);
        double prev = f0 / f0; // == 1, keeps the ratio chain uniform
        for (int t = 1; t <= T; ++t) {
            double cur = f(static_cast<double>(t)) / f0;
            double beta = 1.0 - cur / prev;
            if (beta > 0.999) beta = 0.999;
            s.betas[static_cast<size_t>(t - 1)] = beta;
            prev = cur;
        }
    }

    s.alphas.resize(static_cast<size_t>(T));
    s.alpha_bars.resize(static_cast<size_t>(T));
    double run = 1.0;
    for (int i = 0; i < T; ++i) {
        s.alphas[static_cast<size_t>(i)] = 1.0 - s.betas[static_cast<size_t>(i)];
        run *= s.alphas[static_cast<size_t>(i)];
        s.alpha_bars[static_cast<size_t>(i)] = run;
    }
    return s;
}

RespacedSchedule respace(const NoiseSchedule& s, int n_steps) {
    if (n_steps < 1) throw std::invalid_argument("respace needs at least 1 step");
    if (n_steps > s.T)
        throw std::invalid_argument("respace to " + std::to_string(n_steps) +
                                    " steps exceeds T = " + std::to_string(s.T));
    RespacedSchedule r;
    r.base = s;
    r.timesteps.resize(static_cast<size_t>(n_steps));
    int k = s.T / n_steps;
    // Anchored at T so the chain always starts from pure noise; the smallest
    // index stays >= T/n >= 1.
    for (int i = 0; i < n_steps; ++i)
        r.timesteps[static_cast<size_t>(i)] = s.T - (n_steps - 1 - i) * k;
    return r;
}

// ---- shared validation ----------------------------------------------------

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + a.shape_str() +
                                    " vs " + b.shape_str());
}

// Forward/posterior ops take t in [1, T]; alpha_bar(0) == 1 is only the
// virtual predecessor inside the posterior coefficients.
void check_op_t(const NoiseSchedule& s, int t, const char* what) {
    if (t < 1 || t > s.T)
        throw std::invalid_argument(std::string(what) + ": timestep " + std::to_string(t) +
                                    " outside [1, " + std::to_string(s.T) + "]");
}

} // namespace

// ---- double-precision core ------------------------------------------------

void q_sample_d(const double* x0, const double* eps, double* out, int64_t n,
                const NoiseSchedule& s, int t) {
    check_op_t(s, t, "q_sample");
    double ab = s.alpha_bar(t);
    kern::affine2(std::sqrt(ab), x0, std::sqrt(1.0 - ab), eps, out, n);
}

void x0_from_eps_d(const double* xt, const double* eps, double* out, int64_t n,
                   const NoiseSchedule& s, int t) {
    check_op_t(s, t, "x0_from_eps");
    double ab = s.alpha_bar(t);
    kern::recover_x0(xt, eps, std::sqrt(1.0 - ab), 1.0 / std::sqrt(ab), out, n);
}

void posterior_mean_d(const double* x0, const double* xt, double* out, int64_t n,
                      const NoiseSchedule& s, int t) {
    check_op_t(s, t, "posterior_mean");
    double ab = s.alpha_bar(t);
    double abp = s.alpha_bar(t - 1);
    double beta = s.beta(t);
    double cx0 = std::sqrt(abp) * beta / (1.0 - ab);
    double cxt = std::sqrt(s.alpha(t)) * (1.0 - abp) / (1.0 - ab);
    kern::affine2(cx0, x0, cxt, xt, out, n);
}

void mu_from_eps_d(const double* xt, const double* eps, double* out, int64_t n,
                   const NoiseSchedule& s, int t) {
    check_op_t(s, t, "mu_from_eps");
    double a = s.alpha(t);
    double ab = s.alpha_bar(t);
    double cxt = 1.0 / std::sqrt(a);
    double ceps = -(1.0 - a) / (std::sqrt(1.0 - ab) * std::sqrt(a));
    kern::affine2(cxt, xt, ceps, eps, out, n);
}

void mix_mu_d(const double* r, const double* mu_x0, const double* mu_eps, double* out,
              int64_t outer, int64_t c, int64_t rc) {
    kern::mix(r, mu_x0, mu_eps, out, outer, c, rc);
}

// ---- float coefficient bundles ---------------------------------------------

QSampleCoeffsF q_sample_coeffs_f(const NoiseSchedule& s, int t) {
    check_op_t(s, t, "q_sample");
    double ab = s.alpha_bar(t);
    return {static_cast<float>(std::sqrt(ab)), static_cast<float>(std::sqrt(1.0 - ab))};
}

RecoverCoeffsF recover_coeffs_f(const NoiseSchedule& s, int t) {
    check_op_t(s, t, "x0_from_eps");
    double ab = s.alpha_bar(t);
    return {static_cast<float>(std::sqrt(1.0 - ab)), static_cast<float>(1.0 / std::sqrt(ab))};
}

AffinePairF posterior_coeffs_f(const NoiseSchedule& s, int t) {
    check_op_t(s, t, "posterior_mean");
    double ab = s.alpha_bar(t);
    double abp = s.alpha_bar(t - 1);
    double beta = s.beta(t);
    return {static_cast<float>(std::sqrt(abp) * beta / (1.0 - ab)),
            static_cast<float>(std::sqrt(s.alpha(t)) * (1.0 - abp) / (1.0 - ab))};
}

AffinePairF mu_eps_coeffs_f(const NoiseSchedule& s, int t) {
    check_op_t(s, t, "mu_from_eps");
    double a = s.alpha(t);
    double ab = s.alpha_bar(t);
    return {static_cast<float>(1.0 / std::sqrt(a)),
            static_cast<float>(-(1.0 - a) / (std::sqrt(1.0 - ab) * std::sqrt(a)))};
}

// ---- float32 model path -----------------------------------------------------

Tensor q_sample(const Tensor& x0, const Tensor& eps, const NoiseSchedule& s, int t) {
    check_same_shape(x0, eps, "q_sample");
    auto [a, b] = q_sample_coeffs_f(s, t);
    Tensor out(x0.dims());
    kern::affine2(a, x0.data(), b, eps.data(), out.data(), x0.size());
    return out;
}

Tensor x0_from_eps(const Tensor& xt, const Tensor& eps, const NoiseSchedule& s, int t) {
    check_same_shape(xt, eps, "x0_from_eps");
    auto [b, inva] = recover_coeffs_f(s, t);
    Tensor out(xt.dims());
    kern::recover_x0(xt.data(), eps.data(), b, inva, out.data(), xt.size());
    return out;
}

Tensor posterior_mean(const Tensor& x0, const Tensor& xt, const NoiseSchedule& s, int t) {
    check_same_shape(x0, xt, "posterior_mean");
    auto [cx0, cxt] = posterior_coeffs_f(s, t);
    Tensor out(x0.dims());
    kern::affine2(cx0, x0.data(), cxt, xt.data(), out.data(), x0.size());
    return out;
}

Tensor mu_from_eps(const Tensor& xt, const Tensor& eps, const NoiseSchedule& s, int t) {
    check_same_shape(xt, eps, "mu_from_eps");
    auto [cxt, ceps] = mu_eps_coeffs_f(s, t);
    Tensor out(xt.dims());
    kern::affine2(cxt, xt.data(), ceps, eps.data(), out.data(), xt.size());
    return out;
}

Tensor mix_mu(const Tensor& r, const Tensor& mu_x0, const Tensor& mu_eps) {
    check_same_shape(mu_x0, mu_eps, "mix_mu");
    int64_t c = mu_x0.rank() >= 1 ? mu_x0.dim(mu_x0.rank() - 1) : 1;
    int64_t rc;
    if (r.same_shape(mu_x0)) {
        rc = c;
    } else {
        // channel-broadcast form: r matches mu with a trailing dim of 1
        if (r.rank() != mu_x0.rank() || r.dim(r.rank() - 1) != 1)
            throw std::invalid_argument("mix_mu: r shape " + r.shape_str() +
                                        " incompatible with mu shape " + mu_x0.shape_str());
        for (int64_t i = 0; i + 1 < r.rank(); ++i)
            if (r.dim(i) != mu_x0.dim(i))
                throw std::invalid_argument("mix_mu: r shape " + r.shape_str() +
                                            " incompatible with mu shape " + mu_x0.shape_str());
        rc = 1;
    }
    for (int64_t i = 0; i < r.size(); ++i)
        if (!(r[i] >= 0.0f && r[i] <= 1.0f))
            throw std::invalid_argument("mix_mu: r value " + std::to_string(r[i]) +
                                        " outside [0, 1]");
    Tensor out(mu_x0.dims());
    kern::mix(r.data(), mu_x0.data(), mu_eps.data(), out.data(), mu_x0.size() / c, c, rc);
    return out;
}

void dump_schedule_csv(const NoiseSchedule& s, std::ostream& os) {
    os << "t,beta,alpha,alpha_bar\n";
    char buf[128];
    for (int t = 1; t <= s.T; ++t) {
        std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%.17g\n", t, s.beta(t), s.alpha(t),
                      s.alpha_bar(t));
        os << buf;
    }
}

} // namespace casdm
