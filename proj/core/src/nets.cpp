#include "casdm/nets.hpp"

#include <cmath>
#include <stdexcept>

#include "casdm/errors.hpp"

namespace casdm {

int gn_groups(int channels) {
    if (channels <= 0) throw std::invalid_argument("gn_groups: channels must be positive");
    int best = 1;
    for (int g = 1; g <= std::min(32, channels); ++g)
        if (channels % g == 0) best = g;
    return best;
}

Tensor sinusoidal_embedding(const std::vector<int>& ts, int dim) {
    if (dim < 4 || dim % 2 != 0)
        throw std::invalid_argument("sinusoidal_embedding: dim must be even and >= 4");
    const int64_t n = static_cast<int64_t>(ts.size());
    const int half = dim / 2;
    Tensor out({n, dim});
    float* o = out.data();
    for (int64_t i = 0; i < n; ++i) {
        const double t = static_cast<double>(ts[static_cast<size_t>(i)]);
        for (int j = 0; j < half; ++j) {
            const double f = std::pow(10000.0, -static_cast<double>(j) / (half - 1));
            o[i * dim + j] = static_cast<float>(std::sin(t * f));
            o[i * dim + half + j] = static_cast<float>(std::cos(t * f));
        }
    }
    return out;
}

void Conv2d::init(ParamStore& ps, Rng& rng) const {
    Tensor w({kh, kw, ci, co});
    if (!zero_init) init_trunc_normal(w, static_cast<int64_t>(kh) * kw * ci, rng);
    ps.add(path + ".w", std::move(w));
    ps.add(path + ".b", Tensor::zeros({co}));
}

Var Conv2d::operator()(Tape& tp, const ParamStore& ps, Var x) const {
    return tp.conv2d(x, tp.param(ps, path + ".w"), tp.param(ps, path + ".b"));
}

void Linear::init(ParamStore& ps, Rng& rng) const {
    Tensor w({in, out});
    init_trunc_normal(w, in, rng);
    ps.add(path + ".w", std::move(w));
    ps.add(path + ".b", Tensor::zeros({out}));
}

Var Linear::operator()(Tape& tp, const ParamStore& ps, Var x) const {
    return tp.linear(x, tp.param(ps, path + ".w"), tp.param(ps, path + ".b"));
}

void GroupNorm::init(ParamStore& ps) const {
    ps.add(path + ".gamma", Tensor::full({ch}, 1.0f));
    ps.add(path + ".beta", Tensor::zeros({ch}));
}

Var GroupNorm::operator()(Tape& tp, const ParamStore& ps, Var x) const {
    return tp.group_norm(x, tp.param(ps, path + ".gamma"), tp.param(ps, path + ".beta"),
                         gn_groups(ch), 1e-5f);
}

ResBlock::ResBlock(const std::string& path, int ci_, int co_, int emb_dim) {
    ci = ci_;
    co = co_;
    gn1 = GroupNorm{path + ".gn1", ci};
    conv1 = Conv2d{path + ".conv1", 3, 3, ci, co};
    emb_proj = Linear{path + ".emb", emb_dim, co};
    gn2 = GroupNorm{path + ".gn2", co};
    conv2 = Conv2d{path + ".conv2", 3, 3, co, co};
    projected_skip = ci != co;
    if (projected_skip) skip = Conv2d{path + ".skip", 1, 1, ci, co};
}

void ResBlock::init(ParamStore& ps, Rng& rng) const {
    gn1.init(ps);
    conv1.init(ps, rng);
    emb_proj.init(ps, rng);
    gn2.init(ps);
    conv2.init(ps, rng);
    if (projected_skip) skip.init(ps, rng);
}

Var ResBlock::operator()(Tape& tp, const ParamStore& ps, Var x, Var emb) const {
    Var h = conv1(tp, ps, tp.silu(gn1(tp, ps, x)));
    h = tp.add_spatial_bias(h, emb_proj(tp, ps, tp.silu(emb)));
    h = conv2(tp, ps, tp.silu(gn2(tp, ps, h)));
    Var s = projected_skip ? skip(tp, ps, x) : x;
    return tp.add(h, s);
}

TimeEmbed::TimeEmbed(const std::string& path, int sin_dim_, int out_dim_) {
    sin_dim = sin_dim_;
    out_dim = out_dim_;
    l1 = Linear{path + ".l1", sin_dim, out_dim};
    l2 = Linear{path + ".l2", out_dim, out_dim};
}

void TimeEmbed::init(ParamStore& ps, Rng& rng) const {
    l1.init(ps, rng);
    l2.init(ps, rng);
}

Var TimeEmbed::operator()(Tape& tp, const ParamStore& ps, const std::vector<int>& ts) const {
    Var e = tp.input(sinusoidal_embedding(ts, sin_dim));
    return l2(tp, ps, tp.silu(l1(tp, ps, e)));
}

namespace {

void check_spec(const NetworkSpec& spec, int in_ch, int out_ch, bool needs_levels) {
    if (spec.channels < 2 || spec.blocks < 1 || in_ch < 1 || out_ch < 1)
        throw std::invalid_argument("network spec: channels/blocks/io channels out of range");
    if (spec.time_dim < 4 || spec.time_dim % 2 != 0)
        throw std::invalid_argument("network spec: time_dim must be even and >= 4");
    if (spec.attention)
        throw std::invalid_argument("network spec: attention is not supported");
    if (needs_levels) {
        if (spec.levels < 1) throw std::invalid_argument("network spec: levels must be >= 1");
        const int div = 1 << (spec.levels - 1);
        if (spec.image_size < div || spec.image_size % div != 0)
            throw std::invalid_argument("network spec: image_size must be divisible by 2^(levels-1)");
    }
}

} // namespace

UNetLite::UNetLite(const std::string& prefix, const NetworkSpec& spec, int in_ch, int out_ch)
    : spec_(spec), in_ch_(in_ch), out_ch_(out_ch) {
    check_spec(spec, in_ch, out_ch, true);
    const int L = spec.levels;
    const int B = spec.blocks;
    auto ch = [&](int l) { return spec.channels << l; };

    temb_ = TimeEmbed{prefix + ".temb", spec.channels, spec.time_dim};
    in_conv_ = Conv2d{prefix + ".in_conv", 3, 3, in_ch, ch(0)};

    down_.resize(static_cast<size_t>(L));
    for (int l = 0; l < L; ++l) {
        int cin = l == 0 ? ch(0) : ch(l - 1);
        for (int b = 0; b < B; ++b) {
            std::string p = prefix + ".down" + std::to_string(l) + ".b" + std::to_string(b);
            down_[static_cast<size_t>(l)].emplace_back(p, b == 0 ? cin : ch(l), ch(l), spec.time_dim);
        }
    }
    mid_ = ResBlock{prefix + ".mid", ch(L - 1), ch(L - 1), spec.time_dim};
    up_.resize(static_cast<size_t>(L - 1));
    for (int l = L - 2; l >= 0; --l) {
        // After upsampling, level l sees ch(l+1) channels concatenated with
        // the ch(l) skip saved on the way down.
        for (int b = 0; b < B; ++b) {
            std::string p = prefix + ".up" + std::to_string(l) + ".b" + std::to_string(b);
            int cin = b == 0 ? ch(l + 1) + ch(l) : ch(l);
            up_[static_cast<size_t>(L - 2 - l)].emplace_back(p, cin, ch(l), spec.time_dim);
        }
    }
    out_norm_ = GroupNorm{prefix + ".out_norm", ch(0)};
    out_conv_ = Conv2d{prefix + ".out_conv", 3, 3, ch(0), out_ch, true};
}

void UNetLite::init(ParamStore& ps, Rng& rng) const {
    temb_.init(ps, rng);
    in_conv_.init(ps, rng);
    for (const auto& level : down_)
        for (const auto& rb : level) rb.init(ps, rng);
    mid_.init(ps, rng);
    for (const auto& level : up_)
        for (const auto& rb : level) rb.init(ps, rng);
    out_norm_.init(ps);
    out_conv_.init(ps, rng);
}

Var UNetLite::forward(Tape& tp, const ParamStore& ps, Var x, const std::vector<int>& ts) const {
    const Tensor& xv = tp.value(x);
    if (xv.rank() != 4 || xv.dim(1) != spec_.image_size || xv.dim(2) != spec_.image_size ||
        xv.dim(3) != in_ch_)
        throw std::invalid_argument("UNetLite: input must be [N," + std::to_string(spec_.image_size) +
                                    "," + std::to_string(spec_.image_size) + "," +
                                    std::to_string(in_ch_) + "], got " + xv.shape_str());
    if (static_cast<int64_t>(ts.size()) != xv.dim(0))
        throw std::invalid_argument("UNetLite: ts size must match batch");

    Var emb = temb_(tp, ps, ts);
    Var h = in_conv_(tp, ps, x);
    const int L = spec_.levels;
    std::vector<Var> skips;
    for (int l = 0; l < L; ++l) {
        for (const auto& rb : down_[static_cast<size_t>(l)]) h = rb(tp, ps, h, emb);
        if (l < L - 1) {
            skips.push_back(h);
            h = tp.avg_pool2(h);
        }
    }
    h = mid_(tp, ps, h, emb);
    for (int i = 0; i < L - 1; ++i) {
        h = tp.upsample2_nn(h);
        h = tp.concat_c(h, skips[static_cast<size_t>(L - 2 - i)]);
        for (const auto& rb : up_[static_cast<size_t>(i)]) h = rb(tp, ps, h, emb);
    }
    return out_conv_(tp, ps, tp.silu(out_norm_(tp, ps, h)));
}

FixResCNN::FixResCNN(const std::string& prefix, const NetworkSpec& spec, int in_ch, int out_ch)
    : spec_(spec), in_ch_(in_ch), out_ch_(out_ch) {
    check_spec(spec, in_ch, out_ch, false);
    temb_ = TimeEmbed{prefix + ".temb", spec.channels, spec.time_dim};
    in_conv_ = Conv2d{prefix + ".in_conv", 3, 3, in_ch, spec.channels};
    for (int b = 0; b < spec.blocks; ++b)
        body_.emplace_back(prefix + ".body.b" + std::to_string(b), spec.channels, spec.channels,
                           spec.time_dim);
    out_norm_ = GroupNorm{prefix + ".out_norm", spec.channels};
    out_conv_ = Conv2d{prefix + ".out_conv", 3, 3, spec.channels, out_ch, true};
}

void FixResCNN::init(ParamStore& ps, Rng& rng) const {
    temb_.init(ps, rng);
    in_conv_.init(ps, rng);
    for (const auto& rb : body_) rb.init(ps, rng);
    out_norm_.init(ps);
    out_conv_.init(ps, rng);
}

Var FixResCNN::forward(Tape& tp, const ParamStore& ps, Var x, const std::vector<int>& ts) const {
    const Tensor& xv = tp.value(x);
    if (xv.rank() != 4 || xv.dim(3) != in_ch_)
        throw std::invalid_argument("FixResCNN: input must be [N,H,W," + std::to_string(in_ch_) +
                                    "], got " + xv.shape_str());
    if (static_cast<int64_t>(ts.size()) != xv.dim(0))
        throw std::invalid_argument("FixResCNN: ts size must match batch");
    Var emb = temb_(tp, ps, ts);
    Var h = in_conv_(tp, ps, x);
    for (const auto& rb : body_) h = rb(tp, ps, h, emb);
    return out_conv_(tp, ps, tp.silu(out_norm_(tp, ps, h)));
}

} // namespace casdm
