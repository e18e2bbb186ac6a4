#include "casdm/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace casdm {

AdamState::AdamState(const ParamStore& ref, AdamConfig cfg) : cfg_(cfg) {
    if (!(cfg.lr > 0.0)) throw std::invalid_argument("adam: lr must be positive");
    for (const auto& [path, t] : ref) {
        m_.emplace(path, Tensor::zeros(t.dims()));
        v_.emplace(path, Tensor::zeros(t.dims()));
    }
}

void AdamState::step(ParamStore& params, const std::map<std::string, Tensor>& grads) {
    if (params.count() != m_.size())
        throw std::invalid_argument("adam: store has a different parameter set than this state");
    ++t_;
    double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
    double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
    for (auto& [path, p] : params) {
        auto gi = grads.find(path);
        if (gi == grads.end()) throw std::invalid_argument("adam: missing gradient for " + path);
        const Tensor& g = gi->second;
        auto mi = m_.find(path);
        if (mi == m_.end()) throw std::invalid_argument("adam: unknown parameter " + path);
        Tensor& m = mi->second;
        Tensor& v = v_.find(path)->second;
        if (!g.same_shape(p) || !m.same_shape(p))
            throw std::invalid_argument("adam: shape mismatch for " + path);
        for (int64_t i = 0; i < p.size(); ++i) {
            double gd = g[i];
            double md = cfg_.beta1 * m[i] + (1.0 - cfg_.beta1) * gd;
            double vd = cfg_.beta2 * v[i] + (1.0 - cfg_.beta2) * gd * gd;
            m[i] = static_cast<float>(md);
            v[i] = static_cast<float>(vd);
            double mhat = static_cast<double>(m[i]) / bc1;
            double vhat = static_cast<double>(v[i]) / bc2;
            p[i] = static_cast<float>(p[i] - cfg_.lr * mhat / (std::sqrt(vhat) + cfg_.eps));
        }
    }
}

void ema_update(ParamStore& shadow, const ParamStore& live, double decay) {
    if (shadow.count() != live.count())
        throw std::invalid_argument("ema_update: parameter sets differ");
    if (!(decay >= 0.0 && decay <= 1.0))
        throw std::invalid_argument("ema_update: decay outside [0, 1]");
    for (const auto& [path, lp] : live) {
        Tensor& sp = shadow.at(path);
        if (!sp.same_shape(lp)) throw std::invalid_argument("ema_update: shape mismatch for " + path);
        for (int64_t i = 0; i < sp.size(); ++i)
            sp[i] = static_cast<float>(decay * sp[i] + (1.0 - decay) * lp[i]);
    }
}

std::map<std::string, std::vector<double>> finite_diff_grad(
    const std::function<double(const ParamStore&)>& f, ParamStore params, double h) {
    if (!(h > 0.0)) throw std::invalid_argument("finite_diff_grad: h must be positive");
    std::map<std::string, std::vector<double>> out;
    for (auto& [path, p] : params) {
        std::vector<double>& g = out[path];
        g.resize(static_cast<size_t>(p.size()));
        for (int64_t i = 0; i < p.size(); ++i) {
            float orig = p[i];
            float hi = static_cast<float>(static_cast<double>(orig) + h);
            float lo = static_cast<float>(static_cast<double>(orig) - h);
            p[i] = hi;
            double fp = f(params);
            p[i] = lo;
            double fm = f(params);
            p[i] = orig;
            double denom = static_cast<double>(hi) - static_cast<double>(lo);
            g[static_cast<size_t>(i)] = denom != 0.0 ? (fp - fm) / denom : 0.0;
        }
    }
    return out;
}

} // namespace casdm
