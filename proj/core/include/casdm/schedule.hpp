#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "casdm/tensor.hpp"

namespace casdm {

enum class ScheduleKind { cosine, linear };

ScheduleKind schedule_kind_from_string(const std::string& s);
const char* to_string(ScheduleKind k);

// Forward-process noise schedule. Index 0 of each vector holds the t = 1
// entry; accessors take t in [1, T] and define alpha_bar(0) = 1.
// alpha_bars is the running product of alphas to the last bit, so the
// chain is recomputable from betas alone.
struct NoiseSchedule {
    ScheduleKind kind{};
    int T = 0;
    std::vector<double> betas;
    std::vector<double> alphas;
    std::vector<double> alpha_bars;

    double beta(int t) const;
    double alpha(int t) const;
    double alpha_bar(int t) const; // alpha_bar(0) == 1 exactly
};

// kind = cosine: abar_t = f(t)/f(0), f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)
// with s = 0.008 and beta clipped at 0.999.
// kind = linear: beta interpolates 1e-4 -> 0.02 with exact endpoints.
NoiseSchedule make_schedule(ScheduleKind kind, int T);

// Subsequence view for few-step sampling. Effective alpha_bars are read from
// the base schedule unchanged; position 0 conceptually follows a virtual
// alpha_bar = 1.
struct RespacedSchedule {
    NoiseSchedule base;
    std::vector<int> timesteps; // ascending, last == base.T

    int steps() const { return static_cast<int>(timesteps.size()); }
    int t_at(int i) const { return timesteps[static_cast<size_t>(i)]; }
    double alpha_bar_at(int i) const { return base.alpha_bar(t_at(i)); }
    double alpha_bar_prev(int i) const { return i == 0 ? 1.0 : alpha_bar_at(i - 1); }
};

RespacedSchedule respace(const NoiseSchedule& s, int n_steps);

// ---- double-precision core (oracle / test path) -------------------------

void q_sample_d(const double* x0, const double* eps, double* out, int64_t n,
                const NoiseSchedule& s, int t);
void x0_from_eps_d(const double* xt, const double* eps, double* out, int64_t n,
                   const NoiseSchedule& s, int t);
void posterior_mean_d(const double* x0, const double* xt, double* out, int64_t n,
                      const NoiseSchedule& s, int t);
void mu_from_eps_d(const double* xt, const double* eps, double* out, int64_t n,
                   const NoiseSchedule& s, int t);
void mix_mu_d(const double* r, const double* mu_x0, const double* mu_eps, double* out,
              int64_t outer, int64_t c, int64_t rc);

// ---- float32 model path --------------------------------------------------

Tensor q_sample(const Tensor& x0, const Tensor& eps, const NoiseSchedule& s, int t);
Tensor x0_from_eps(const Tensor& xt, const Tensor& eps, const NoiseSchedule& s, int t);
Tensor posterior_mean(const Tensor& x0, const Tensor& xt, const NoiseSchedule& s, int t);
Tensor mu_from_eps(const Tensor& xt, const Tensor& eps, const NoiseSchedule& s, int t);
// r is per-pixel [N,H,W,1] (broadcast over channels) or elementwise; values
// must lie in [0, 1].
Tensor mix_mu(const Tensor& r, const Tensor& mu_x0, const Tensor& mu_eps);

// Float coefficient bundles. Computed in double, demoted once; the tape ops
// use these same casts so tensor-path and tape-path results are bit-equal.
struct QSampleCoeffsF { float a, b; };      // a*x0 + b*eps
struct RecoverCoeffsF { float b, inva; };   // (xt - b*eps) * inva
struct AffinePairF { float a, b; };         // a*first + b*second

QSampleCoeffsF q_sample_coeffs_f(const NoiseSchedule& s, int t);
RecoverCoeffsF recover_coeffs_f(const NoiseSchedule& s, int t);
AffinePairF posterior_coeffs_f(const NoiseSchedule& s, int t); // (x0, xt)
AffinePairF mu_eps_coeffs_f(const NoiseSchedule& s, int t);    // (xt, eps), eps term negative

void dump_schedule_csv(const NoiseSchedule& s, std::ostream& os);

} // namespace casdm
