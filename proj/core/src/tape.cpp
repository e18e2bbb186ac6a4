#include "casdm/tape.hpp"

#include <stdexcept>

#include "casdm/kernels.hpp"

namespace casdm {

const Tensor& Var::val() const {
    if (!valid()) throw std::invalid_argument("Var::val on an invalid handle");
    return tape->value(*this);
}

// ---- Gradients --------------------------------------------------------------

bool Gradients::has(Var v) const {
    return v.valid() && v.tape == tape_ && static_cast<size_t>(v.id) < has_.size() &&
           has_[static_cast<size_t>(v.id)] != 0;
}

const Tensor* Gradients::maybe(Var v) const {
    if (!has(v)) return nullptr;
    return &grads_[static_cast<size_t>(v.id)];
}

Tensor Gradients::wrt(Var v) const {
    if (const Tensor* g = maybe(v)) return *g;
    if (!v.valid() || v.tape != tape_) throw std::invalid_argument("wrt: Var from another tape");
    return Tensor::zeros(tape_->v(v.id).dims());
}

std::map<std::string, Tensor> Gradients::for_store(const ParamStore& store) const {
    std::map<std::string, Tensor> out;
    auto sub = tape_->param_ids_.find(&store);
    for (const auto& [path, tensor] : store) {
        int id = -1;
        if (sub != tape_->param_ids_.end()) {
            auto it = sub->second.find(path);
            if (it != sub->second.end()) id = it->second;
        }
        if (id >= 0 && has_[static_cast<size_t>(id)])
            out.emplace(path, grads_[static_cast<size_t>(id)]);
        else
            out.emplace(path, Tensor::zeros(tensor.dims()));
    }
    return out;
}

Tensor& Gradients::buf(int id, const std::vector<int64_t>& dims) {
    auto i = static_cast<size_t>(id);
    if (!has_[i]) {
        grads_[i] = Tensor::zeros(dims);
        has_[i] = 1;
    }
    return grads_[i];
}

// ---- Tape -------------------------------------------------------------------

const Tensor& Tape::value(Var v) const {
    check(v, "value");
    return nodes_[static_cast<size_t>(v.id)].value;
}

bool Tape::requires_grad(Var v) const {
    check(v, "requires_grad");
    return nodes_[static_cast<size_t>(v.id)].requires_grad;
}

void Tape::check(Var x, const char* op) const {
    if (!x.valid() || x.tape != this || static_cast<size_t>(x.id) >= nodes_.size())
        throw std::invalid_argument(std::string(op) + ": Var does not belong to this tape");
}

Var Tape::make(Tensor value, bool requires_grad,
               std::function<void(const Tensor&, Gradients&)> bwd) {
    Node n;
    n.value = std::move(value);
    n.requires_grad = grad_enabled_ && requires_grad;
    if (n.requires_grad) n.backward = std::move(bwd);
    nodes_.push_back(std::move(n));
    return Var{this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::input(Tensor v) { return make(std::move(v), false, nullptr); }

Var Tape::param(const ParamStore& store, const std::string& path) {
    auto& sub = param_ids_[&store];
    auto it = sub.find(path);
    if (it != sub.end()) return Var{this, it->second};
    Var out = make(store.at(path), true, nullptr); // leaf: backward is a no-op
    sub.emplace(path, out.id);
    return out;
}

Var Tape::stop_gradient(Var x) {
    check(x, "stop_gradient");
    return make(v(x.id), false, nullptr);
}

namespace {

void need_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + a.shape_str() +
                                    " vs " + b.shape_str());
}

} // namespace

Var Tape::add(Var a, Var b) {
    check(a, "add"); check(b, "add");
    need_same_shape(v(a.id), v(b.id), "add");
    Tensor out(v(a.id).dims());
    kern::add(v(a.id).data(), v(b.id).data(), out.data(), out.size());
    bool ra = requires_grad(a), rb = requires_grad(b);
    return make(std::move(out), ra || rb,
                [this, ia = a.id, ib = b.id, ra, rb](const Tensor& g, Gradients& gs) {
                    if (ra) {
                        Tensor& ga = gs.buf(ia, v(ia).dims());
                        for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                    }
                    if (rb) {
                        Tensor& gb = gs.buf(ib, v(ib).dims());
                        for (int64_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                    }
                });
}

Var Tape::sub(Var a, Var b) {
    check(a, "sub"); check(b, "sub");
    need_same_shape(v(a.id), v(b.id), "sub");
    Tensor out(v(a.id).dims());
    kern::sub(v(a.id).data(), v(b.id).data(), out.data(), out.size());
    bool ra = requires_grad(a), rb = requires_grad(b);
    return make(std::move(out), ra || rb,
                [this, ia = a.id, ib = b.id, ra, rb](const Tensor& g, Gradients& gs) {
                    if (ra) {
                        Tensor& ga = gs.buf(ia, v(ia).dims());
                        for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                    }
                    if (rb) {
                        Tensor& gb = gs.buf(ib, v(ib).dims());
                        for (int64_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
                    }
                });
}

Var Tape::mul(Var a, Var b) {
    check(a, "mul"); check(b, "mul");
    need_same_shape(v(a.id), v(b.id), "mul");
    Tensor out(v(a.id).dims());
    kern::mul(v(a.id).data(), v(b.id).data(), out.data(), out.size());
    bool ra = requires_grad(a), rb = requires_grad(b);
    return make(std::move(out), ra || rb,
                [this, ia = a.id, ib = b.id, ra, rb](const Tensor& g, Gradients& gs) {
                    if (ra) {
                        Tensor& ga = gs.buf(ia, v(ia).dims());
                        const Tensor& bv = v(ib);
                        for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * bv[i];
                    }
                    if (rb) {
                        Tensor& gb = gs.buf(ib, v(ib).dims());
                        const Tensor& av = v(ia);
                        for (int64_t i = 0; i < g.size(); ++i) gb[i] += g[i] * av[i];
                    }
                });
}

Var Tape::scale(Var x, float a) {
    check(x, "scale");
    Tensor out(v(x.id).dims());
    kern::scale(v(x.id).data(), a, out.data(), out.size());
    return make(std::move(out), requires_grad(x),
                [this, ix = x.id, a](const Tensor& g, Gradients& gs) {
                    Tensor& gx = gs.buf(ix, v(ix).dims());
                    for (int64_t i = 0; i < g.size(); ++i) gx[i] += a * g[i];
                });
}

Var Tape::add_scalar(Var x, float c) {
    check(x, "add_scalar");
    Tensor out(v(x.id).dims());
    kern::add_scalar(v(x.id).data(), c, out.data(), out.size());
    return make(std::move(out), requires_grad(x),
                [this, ix = x.id](const Tensor& g, Gradients& gs) {
                    Tensor& gx = gs.buf(ix, v(ix).dims());
                    for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                });
}

Var Tape::affine2(float a, Var x, float b, Var y) {
    check(x, "affine2"); check(y, "affine2");
    need_same_shape(v(x.id), v(y.id), "affine2");
    Tensor out(v(x.id).dims());
    kern::affine2(a, v(x.id).data(), b, v(y.id).data(), out.data(), out.size());
    bool rx = requires_grad(x), ry = requires_grad(y);
    return make(std::move(out), rx || ry,
                [this, ix = x.id, iy = y.id, a, b, rx, ry](const Tensor& g, Gradients& gs) {
                    if (rx) {
                        Tensor& gx = gs.buf(ix, v(ix).dims());
                        for (int64_t i = 0; i < g.size(); ++i) gx[i] += a * g[i];
                    }
                    if (ry) {
                        Tensor& gy = gs.buf(iy, v(iy).dims());
                        for (int64_t i = 0; i < g.size(); ++i) gy[i] += b * g[i];
                    }
                });
}

Var Tape::recover_x0(Var xt, Var eps, float b, float inva) {
    check(xt, "recover_x0"); check(eps, "recover_x0");
    need_same_shape(v(xt.id), v(eps.id), "recover_x0");
    Tensor out(v(xt.id).dims());
    kern::recover_x0(v(xt.id).data(), v(eps.id).data(), b, inva, out.data(), out.size());
    bool rx = requires_grad(xt), re = requires_grad(eps);
    return make(std::move(out), rx || re,
                [this, ix = xt.id, ie = eps.id, b, inva, rx, re](const Tensor& g, Gradients& gs) {
                    if (rx) {
                        Tensor& gx = gs.buf(ix, v(ix).dims());
                        for (int64_t i = 0; i < g.size(); ++i) gx[i] += inva * g[i];
                    }
                    if (re) {
                        Tensor& ge = gs.buf(ie, v(ie).dims());
                        float c = -b * inva;
                        for (int64_t i = 0; i < g.size(); ++i) ge[i] += c * g[i];
                    }
                });
}

Var Tape::mix(Var r, Var a, Var b) {
    check(r, "mix"); check(a, "mix"); check(b, "mix");
    const Tensor& rv = v(r.id);
    const Tensor& av = v(a.id);
    need_same_shape(av, v(b.id), "mix");
    int64_t c = av.dim(av.rank() - 1);
    int64_t rc;
    if (rv.same_shape(av)) {
        rc = c;
    } else {
        bool ok = rv.rank() == av.rank() && rv.dim(rv.rank() - 1) == 1;
        for (int64_t i = 0; ok && i + 1 < rv.rank(); ++i) ok = rv.dim(i) == av.dim(i);
        if (!ok)
            throw std::invalid_argument("mix: r shape " + rv.shape_str() +
                                        " incompatible with " + av.shape_str());
        rc = 1;
    }
    int64_t outer = av.size() / c;
    Tensor out(av.dims());
    kern::mix(rv.data(), av.data(), v(b.id).data(), out.data(), outer, c, rc);
    bool rr = requires_grad(r), ra = requires_grad(a), rb = requires_grad(b);
    return make(std::move(out), rr || ra || rb,
                [this, ir = r.id, ia = a.id, ib = b.id, rr, ra, rb, outer, c,
                 rc](const Tensor& g, Gradients& gs) {
                    const Tensor& rv2 = v(ir);
                    const Tensor& av2 = v(ia);
                    const Tensor& bv2 = v(ib);
                    if (rr) {
                        Tensor& gr = gs.buf(ir, rv2.dims());
                        if (rc == c) {
                            for (int64_t i = 0; i < g.size(); ++i)
                                gr[i] += g[i] * (av2[i] - bv2[i]);
                        } else {
                            for (int64_t o = 0; o < outer; ++o) {
                                float s = 0.0f;
                                for (int64_t k = 0; k < c; ++k) {
                                    int64_t i = o * c + k;
                                    s += g[i] * (av2[i] - bv2[i]);
                                }
                                gr[o] += s;
                            }
                        }
                    }
                    if (ra) {
                        Tensor& ga = gs.buf(ia, av2.dims());
                        if (rc == c)
                            for (int64_t i = 0; i < g.size(); ++i) ga[i] += g[i] * rv2[i];
                        else
                            for (int64_t o = 0; o < outer; ++o)
                                for (int64_t k = 0; k < c; ++k)
                                    ga[o * c + k] += g[o * c + k] * rv2[o];
                    }
                    if (rb) {
                        Tensor& gb = gs.buf(ib, bv2.dims());
                        if (rc == c)
                            for (int64_t i = 0; i < g.size(); ++i) gb[i] += g[i] * (1.0f - rv2[i]);
                        else
                            for (int64_t o = 0; o < outer; ++o)
                                for (int64_t k = 0; k < c; ++k)
                                    gb[o * c + k] += g[o * c + k] * (1.0f - rv2[o]);
                    }
                });
}

Var Tape::concat_c(Var a, Var b) {
    check(a, "concat_c"); check(b, "concat_c");
    const Tensor& av = v(a.id);
    const Tensor& bv = v(b.id);
    if (av.rank() != bv.rank() || av.rank() < 2)
        throw std::invalid_argument("concat_c: rank mismatch");
    for (int64_t i = 0; i + 1 < av.rank(); ++i)
        if (av.dim(i) != bv.dim(i))
            throw std::invalid_argument("concat_c: shape mismatch " + av.shape_str() + " vs " +
                                        bv.shape_str());
    int64_t ca = av.dim(av.rank() - 1), cb = bv.dim(bv.rank() - 1);
    std::vector<int64_t> dims = av.dims();
    dims.back() = ca + cb;
    int64_t outer = av.size() / ca;
    Tensor out(dims);
    for (int64_t o = 0; o < outer; ++o) {
        float* dst = out.data() + o * (ca + cb);
        const float* pa = av.data() + o * ca;
        const float* pb = bv.data() + o * cb;
        for (int64_t k = 0; k < ca; ++k) dst[k] = pa[k];
        for (int64_t k = 0; k < cb; ++k) dst[ca + k] = pb[k];
    }
    bool ra = requires_grad(a), rb = requires_grad(b);
    return make(std::move(out), ra || rb,
                [this, ia = a.id, ib = b.id, ra, rb, ca, cb, outer](const Tensor& g, Gradients& gs) {
                    if (ra) {
                        Tensor& ga = gs.buf(ia, v(ia).dims());
                        for (int64_t o = 0; o < outer; ++o)
                            for (int64_t k = 0; k < ca; ++k)
                                ga[o * ca + k] += g[o * (ca + cb) + k];
                    }
                    if (rb) {
                        Tensor& gb = gs.buf(ib, v(ib).dims());
                        for (int64_t o = 0; o < outer; ++o)
                            for (int64_t k = 0; k < cb; ++k)
                                gb[o * cb + k] += g[o * (ca + cb) + ca + k];
                    }
                });
}

Var Tape::slice_c(Var x, int64_t c0, int64_t c1) {
    check(x, "slice_c");
    const Tensor& xv = v(x.id);
    int64_t c = xv.dim(xv.rank() - 1);
    if (c0 < 0 || c1 <= c0 || c1 > c)
        throw std::invalid_argument("slice_c: bad channel range [" + std::to_string(c0) + ", " +
                                    std::to_string(c1) + ") for C = " + std::to_string(c));
    std::vector<int64_t> dims = xv.dims();
    dims.back() = c1 - c0;
    int64_t outer = xv.size() / c;
    int64_t cw = c1 - c0;
    Tensor out(dims);
    for (int64_t o = 0; o < outer; ++o) {
        const float* src = xv.data() + o * c + c0;
        float* dst = out.data() + o * cw;
        for (int64_t k = 0; k < cw; ++k) dst[k] = src[k];
    }
    return make(std::move(out), requires_grad(x),
                [this, ix = x.id, c0, cw, c, outer](const Tensor& g, Gradients& gs) {
                    Tensor& gx = gs.buf(ix, v(ix).dims());
                    for (int64_t o = 0; o < outer; ++o)
                        for (int64_t k = 0; k < cw; ++k)
                            gx[o * c + c0 + k] += g[o * cw + k];
                });
}

namespace {

void need_rank(const Tensor& t, int64_t r, const char* op) {
    if (t.rank() != r)
        throw std::invalid_argument(std::string(op) + ": expected rank " + std::to_string(r) +
                                    ", got " + t.shape_str());
}

} // namespace

Var Tape::conv2d(Var x, Var w, Var b) {
    check(x, "conv2d"); check(w, "conv2d"); check(b, "conv2d");
    const Tensor& xv = v(x.id);
    const Tensor& wv = v(w.id);
    const Tensor& bv = v(b.id);
    need_rank(xv, 4, "conv2d");
    need_rank(wv, 4, "conv2d weight");
    need_rank(bv, 1, "conv2d bias");
    int64_t N = xv.dim(0), H = xv.dim(1), W = xv.dim(2), Ci = xv.dim(3);
    int64_t kh = wv.dim(0), kw = wv.dim(1), Co = wv.dim(3);
    if (wv.dim(2) != Ci)
        throw std::invalid_argument("conv2d: weight expects " + std::to_string(wv.dim(2)) +
                                    " input channels, activation has " + std::to_string(Ci));
    if (bv.dim(0) != Co) throw std::invalid_argument("conv2d: bias/output channel mismatch");
    if (kh % 2 == 0 || kw % 2 == 0)
        throw std::invalid_argument("conv2d: kernel dims must be odd for same padding");
    Tensor out({N, H, W, Co});
    kern::conv2d(xv.data(), wv.data(), bv.data(), out.data(), N, H, W, Ci, Co, kh, kw);
    bool rx = requires_grad(x), rw = requires_grad(w), rb = requires_grad(b);
    return make(std::move(out), rx || rw || rb,
                [this, ix = x.id, iw = w.id, ib = b.id, rx, rw, rb, N, H, W, Ci, Co, kh,
                 kw](const Tensor& g, Gradients& gs) {
                    if (rx)
                        kern::conv2d_bwd_input(g.data(), v(iw).data(),
                                               gs.buf(ix, v(ix).dims()).data(), N, H, W, Ci, Co,
                                               kh, kw);
                    if (rw || rb)
                        kern::conv2d_bwd_params(
                            v(ix).data(), g.data(),
                            rw ? gs.buf(iw, v(iw).dims()).data() : nullptr,
                            rb ? gs.buf(ib, v(ib).dims()).data() : nullptr, N, H, W, Ci, Co, kh,
                            kw);
                });
}

Var Tape::linear(Var x, Var w, Var b) {
    check(x, "linear"); check(w, "linear"); check(b, "linear");
    const Tensor& xv = v(x.id);
    const Tensor& wv = v(w.id);
    const Tensor& bv = v(b.id);
    need_rank(xv, 2, "linear");
    need_rank(wv, 2, "linear weight");
    need_rank(bv, 1, "linear bias");
    int64_t N = xv.dim(0), K = xv.dim(1), M = wv.dim(1);
    if (wv.dim(0) != K || bv.dim(0) != M)
        throw std::invalid_argument("linear: shape mismatch " + xv.shape_str() + " x " +
                                    wv.shape_str() + " + " + bv.shape_str());
    Tensor out({N, M});
    kern::linear(xv.data(), wv.data(), bv.data(), out.data(), N, K, M);
    bool rx = requires_grad(x), rw = requires_grad(w), rb = requires_grad(b);
    return make(std::move(out), rx || rw || rb,
                [this, ix = x.id, iw = w.id, ib = b.id, rx, rw, rb, N, K,
                 M](const Tensor& g, Gradients& gs) {
                    kern::linear_bwd(v(ix).data(), v(iw).data(), g.data(),
                                     rx ? gs.buf(ix, v(ix).dims()).data() : nullptr,
                                     rw ? gs.buf(iw, v(iw).dims()).data() : nullptr,
                                     rb ? gs.buf(ib, v(ib).dims()).data() : nullptr, N, K, M);
                });
}

Var Tape::group_norm(Var x, Var gamma, Var beta, int64_t groups, float eps) {
    check(x, "group_norm"); check(gamma, "group_norm"); check(beta, "group_norm");
    const Tensor& xv = v(x.id);
    need_rank(xv, 4, "group_norm");
    int64_t N = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
    if (groups < 1 || C % groups != 0)
        throw std::invalid_argument("group_norm: C = " + std::to_string(C) +
                                    " not divisible by groups = " + std::to_string(groups));
    if (v(gamma.id).size() != C || v(beta.id).size() != C)
        throw std::invalid_argument("group_norm: gamma/beta must have C entries");
    Tensor out(xv.dims());
    Tensor mean({N, groups}), rstd({N, groups});
    kern::group_norm(xv.data(), v(gamma.id).data(), v(beta.id).data(), out.data(), mean.data(),
                     rstd.data(), N, H, W, C, groups, eps);
    bool rx = requires_grad(x), rg = requires_grad(gamma), rb = requires_grad(beta);
    return make(std::move(out), rx || rg || rb,
                [this, ix = x.id, ig = gamma.id, ib = beta.id, rx, rg, rb, N, H, W, C, groups,
                 mean = std::move(mean), rstd = std::move(rstd)](const Tensor& g, Gradients& gs) {
                    kern::group_norm_bwd(v(ix).data(), v(ig).data(), g.data(), mean.data(),
                                         rstd.data(),
                                         rx ? gs.buf(ix, v(ix).dims()).data() : nullptr,
                                         rg ? gs.buf(ig, v(ig).dims()).data() : nullptr,
                                         rb ? gs.buf(ib, v(ib).dims()).data() : nullptr, N, H, W,
                                         C, groups);
                });
}

Var Tape::silu(Var x) {
    check(x, "silu");
    Tensor out(v(x.id).dims());
    kern::silu(v(x.id).data(), out.data(), out.size());
    return make(std::move(out), requires_grad(x),
                [this, ix = x.id](const Tensor& g, Gradients& gs) {
                    kern::silu_bwd(v(ix).data(), g.data(), gs.buf(ix, v(ix).dims()).data(),
                                   g.size());
                });
}

Var Tape::sigmoid(Var x) {
    check(x, "sigmoid");
    Tensor out(v(x.id).dims());
    kern::sigmoid(v(x.id).data(), out.data(), out.size());
    Var o = make(std::move(out), requires_grad(x), nullptr);
    if (nodes_[static_cast<size_t>(o.id)].requires_grad)
        nodes_[static_cast<size_t>(o.id)].backward =
            [this, ix = x.id, io = o.id](const Tensor& g, Gradients& gs) {
                kern::sigmoid_bwd(v(io).data(), g.data(), gs.buf(ix, v(ix).dims()).data(),
                                  g.size());
            };
    return o;
}

Var Tape::avg_pool2(Var x) {
    check(x, "avg_pool2");
    const Tensor& xv = v(x.id);
    need_rank(xv, 4, "avg_pool2");
    int64_t N = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
    if (H % 2 != 0 || W % 2 != 0)
        throw std::invalid_argument("avg_pool2: spatial dims must be even, got " + xv.shape_str());
    Tensor out({N, H / 2, W / 2, C});
    kern::avg_pool2(xv.data(), out.data(), N, H, W, C);
    return make(std::move(out), requires_grad(x),
                [this, ix = x.id, N, H, W, C](const Tensor& g, Gradients& gs) {
                    kern::avg_pool2_bwd(g.data(), gs.buf(ix, v(ix).dims()).data(), N, H, W, C);
                });
}

Var Tape::upsample2_nn(Var x) {
    check(x, "upsample2_nn");
    const Tensor& xv = v(x.id);
    need_rank(xv, 4, "upsample2_nn");
    int64_t N = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
    Tensor out({N, 2 * H, 2 * W, C});
    kern::upsample2_nn(xv.data(), out.data(), N, H, W, C);
    return make(std::move(out), requires_grad(x),
                [this, ix = x.id, N, H, W, C](const Tensor& g, Gradients& gs) {
                    kern::upsample2_nn_bwd(g.data(), gs.buf(ix, v(ix).dims()).data(), N, H, W, C);
                });
}

Var Tape::bilinear_resize(Var x, int64_t ho, int64_t wo) {
    check(x, "bilinear_resize");
    const Tensor& xv = v(x.id);
    need_rank(xv, 4, "bilinear_resize");
    if (ho < 1 || wo < 1) throw std::invalid_argument("bilinear_resize: bad target size");
    int64_t N = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
    Tensor out({N, ho, wo, C});
    kern::bilinear_resize(xv.data(), out.data(), N, H, W, C, ho, wo);
    return make(std::move(out), requires_grad(x),
                [this, ix = x.id, N, H, W, C, ho, wo](const Tensor& g, Gradients& gs) {
                    kern::bilinear_resize_bwd(g.data(), gs.buf(ix, v(ix).dims()).data(), N, H, W,
                                              C, ho, wo);
                });
}

Var Tape::channel_unit_norm(Var x, float eps) {
    check(x, "channel_unit_norm");
    const Tensor& xv = v(x.id);
    if (xv.rank() < 1) throw std::invalid_argument("channel_unit_norm: rank must be >= 1");
    int64_t C = xv.dim(xv.rank() - 1);
    int64_t outer = xv.size() / C;
    Tensor out(xv.dims());
    kern::channel_unit_norm(xv.data(), out.data(), outer, C, eps);
    return make(std::move(out), requires_grad(x),
                [this, ix = x.id, outer, C, eps](const Tensor& g, Gradients& gs) {
                    kern::channel_unit_norm_bwd(v(ix).data(), g.data(),
                                                gs.buf(ix, v(ix).dims()).data(), outer, C, eps);
                });
}

Var Tape::add_spatial_bias(Var x, Var b) {
    check(x, "add_spatial_bias"); check(b, "add_spatial_bias");
    const Tensor& xv = v(x.id);
    const Tensor& bv = v(b.id);
    need_rank(xv, 4, "add_spatial_bias");
    need_rank(bv, 2, "add_spatial_bias bias");
    int64_t N = xv.dim(0), H = xv.dim(1), W = xv.dim(2), C = xv.dim(3);
    if (bv.dim(0) != N || bv.dim(1) != C)
        throw std::invalid_argument("add_spatial_bias: bias " + bv.shape_str() +
                                    " does not match activation " + xv.shape_str());
    Tensor out(xv.dims());
    kern::add_spatial_bias(xv.data(), bv.data(), out.data(), N, H * W, C);
    bool rx = requires_grad(x), rb = requires_grad(b);
    return make(std::move(out), rx || rb,
                [this, ix = x.id, ib = b.id, rx, rb, N, H, W, C](const Tensor& g, Gradients& gs) {
                    if (rx) {
                        Tensor& gx = gs.buf(ix, v(ix).dims());
                        for (int64_t i = 0; i < g.size(); ++i) gx[i] += g[i];
                    }
                    if (rb)
                        kern::spatial_bias_bwd(g.data(), gs.buf(ib, v(ib).dims()).data(), N,
                                               H * W, C);
                });
}

Var Tape::mse(Var a, Var b) {
    check(a, "mse"); check(b, "mse");
    need_same_shape(v(a.id), v(b.id), "mse");
    Tensor out({1});
    out[0] = kern::mse(v(a.id).data(), v(b.id).data(), v(a.id).size());
    bool ra = requires_grad(a), rb = requires_grad(b);
    return make(std::move(out), ra || rb,
                [this, ia = a.id, ib = b.id, ra, rb](const Tensor& g, Gradients& gs) {
                    const Tensor& av = v(ia);
                    const Tensor& bv = v(ib);
                    float c = 2.0f * g[0] / static_cast<float>(av.size());
                    if (ra) {
                        Tensor& ga = gs.buf(ia, av.dims());
                        for (int64_t i = 0; i < av.size(); ++i) ga[i] += c * (av[i] - bv[i]);
                    }
                    if (rb) {
                        Tensor& gb = gs.buf(ib, bv.dims());
                        for (int64_t i = 0; i < av.size(); ++i) gb[i] -= c * (av[i] - bv[i]);
                    }
                });
}

Var Tape::mean_all(Var x) {
    check(x, "mean_all");
    const Tensor& xv = v(x.id);
    Tensor out({1});
    out[0] = kern::sum(xv.data(), xv.size()) / static_cast<float>(xv.size());
    return make(std::move(out), requires_grad(x),
                [this, ix = x.id](const Tensor& g, Gradients& gs) {
                    Tensor& gx = gs.buf(ix, v(ix).dims());
                    float c = g[0] / static_cast<float>(gx.size());
                    for (int64_t i = 0; i < gx.size(); ++i) gx[i] += c;
                });
}

Var Tape::sum_all(Var x) {
    check(x, "sum_all");
    const Tensor& xv = v(x.id);
    Tensor out({1});
    out[0] = kern::sum(xv.data(), xv.size());
    return make(std::move(out), requires_grad(x),
                [this, ix = x.id](const Tensor& g, Gradients& gs) {
                    Tensor& gx = gs.buf(ix, v(ix).dims());
                    for (int64_t i = 0; i < gx.size(); ++i) gx[i] += g[0];
                });
}

Gradients Tape::backward(Var loss) const {
    check(loss, "backward");
    if (v(loss.id).size() != 1)
        throw std::invalid_argument("backward: loss must be a scalar, got " +
                                    v(loss.id).shape_str());
    Gradients gs;
    gs.tape_ = this;
    gs.grads_.resize(nodes_.size());
    gs.has_.assign(nodes_.size(), 0);
    gs.buf(loss.id, v(loss.id).dims())[0] = 1.0f;
    for (int id = loss.id; id >= 0; --id) {
        if (!gs.has_[static_cast<size_t>(id)]) continue;
        const Node& n = nodes_[static_cast<size_t>(id)];
        if (n.backward) n.backward(gs.grads_[static_cast<size_t>(id)], gs);
    }
    return gs;
}

} // namespace casdm
