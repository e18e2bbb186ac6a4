#include "casdm/metric.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "casdm/checkpoint.hpp"
#include "casdm/errors.hpp"
#include "casdm/rng.hpp"

namespace casdm {

namespace {

std::string stage_path(int s, const char* leaf) {
    return "s" + std::to_string(s) + "." + leaf;
}

std::string hex64(uint64_t v) {
    char buf[20];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

FeatureExtractor build_seeded(const std::string& key, std::vector<int> channels, int kernel,
                              int in_channels, uint64_t seed) {
    if (in_channels < 1) throw std::invalid_argument("make_extractor: in_channels must be >= 1");
    FeatureExtractor ex;
    ex.channels = std::move(channels);
    ex.kernel = kernel;
    ex.in_channels = in_channels;
    Rng rng(derive_seed(seed, "metric." + key));
    int cin = in_channels;
    for (int s = 0; s < ex.stages(); ++s) {
        const int cout = ex.channels[static_cast<size_t>(s)];
        Tensor w({kernel, kernel, cin, cout});
        init_trunc_normal(w, static_cast<int64_t>(kernel) * kernel * cin, rng);
        // small random biases so even a zero image produces distinct
        // per-channel constants
        Tensor b({cout});
        for (int64_t i = 0; i < b.size(); ++i)
            b.data()[i] = 0.1f * static_cast<float>(rng.normal());
        ex.weights.add(stage_path(s, "w"), std::move(w));
        ex.weights.add(stage_path(s, "b"), std::move(b));
        cin = cout;
    }
    std::string chs;
    for (int c : ex.channels) chs += std::to_string(c) + "-";
    chs.pop_back();
    ex.id = key + "/k" + std::to_string(kernel) + "/c" + chs + "/in" +
            std::to_string(in_channels) + "/seed" + hex64(seed);
    return ex;
}

int meta_int(const ParamStore& ps, const std::string& path, int64_t index, int lo, int hi) {
    if (!ps.has(path)) throw FormatError("extractor file: missing " + path);
    const Tensor& t = ps.at(path);
    if (index >= t.size()) throw FormatError("extractor file: " + path + " too short");
    const float v = t.vec()[static_cast<size_t>(index)];
    if (v != std::floor(v) || v < static_cast<float>(lo) || v > static_cast<float>(hi))
        throw FormatError("extractor file: " + path + " holds invalid value " + std::to_string(v));
    return static_cast<int>(v);
}

} // namespace

FeatureExtractor make_extractor(const std::string& backbone, int in_channels, uint64_t seed) {
    if (backbone == "lpips_avgpool")
        return build_seeded(backbone, {8, 16, 32, 64}, 3, in_channels, seed);
    if (backbone == "plain_cnn")
        return build_seeded(backbone, {16, 32, 32}, 5, in_channels, seed);
    if (backbone.rfind("file:", 0) == 0) {
        FeatureExtractor ex = load_extractor_file(backbone.substr(5));
        if (ex.in_channels != in_channels)
            throw ConfigError("extractor file expects " + std::to_string(ex.in_channels) +
                              " input channels, config uses " + std::to_string(in_channels));
        return ex;
    }
    throw ConfigError("unknown metric backbone '" + backbone +
                      "' (expected lpips_avgpool, plain_cnn, or file:<path>)");
}

void save_extractor(const std::string& path, const FeatureExtractor& ex) {
    ParamStore out;
    Tensor chans({static_cast<int64_t>(ex.channels.size())});
    for (size_t i = 0; i < ex.channels.size(); ++i)
        chans.data()[i] = static_cast<float>(ex.channels[i]);
    out.add("meta.channels", std::move(chans));
    out.add("meta.kernel", Tensor::full({1}, static_cast<float>(ex.kernel)));
    out.add("meta.in_channels", Tensor::full({1}, static_cast<float>(ex.in_channels)));
    for (const auto& [p, t] : ex.weights) out.add(p, t);
    save_params(path, out);
}

FeatureExtractor load_extractor_file(const std::string& path) {
    ParamStore raw = load_params(path);
    FeatureExtractor ex;
    ex.kernel = meta_int(raw, "meta.kernel", 0, 1, 15);
    if (ex.kernel % 2 == 0) throw FormatError("extractor file: meta.kernel must be odd");
    ex.in_channels = meta_int(raw, "meta.in_channels", 0, 1, 64);
    if (!raw.has("meta.channels")) throw FormatError("extractor file: missing meta.channels");
    const int64_t stages = raw.at("meta.channels").size();
    if (stages < 1 || stages > 8) throw FormatError("extractor file: meta.channels has bad length");
    for (int64_t s = 0; s < stages; ++s)
        ex.channels.push_back(meta_int(raw, "meta.channels", s, 1, 1024));

    int cin = ex.in_channels;
    size_t expected = 3; // the meta entries
    for (int s = 0; s < ex.stages(); ++s) {
        const int cout = ex.channels[static_cast<size_t>(s)];
        const std::string wp = stage_path(s, "w"), bp = stage_path(s, "b");
        if (!raw.has(wp)) throw FormatError("extractor file: missing " + wp);
        if (!raw.has(bp)) throw FormatError("extractor file: missing " + bp);
        const Tensor& w = raw.at(wp);
        const std::vector<int64_t> want{ex.kernel, ex.kernel, cin, cout};
        if (w.dims() != want)
            throw FormatError("extractor file: " + wp + " has shape " + w.shape_str());
        if (raw.at(bp).dims() != std::vector<int64_t>{cout})
            throw FormatError("extractor file: " + bp + " has shape " + raw.at(bp).shape_str());
        ex.weights.add(wp, w);
        ex.weights.add(bp, raw.at(bp));
        expected += 2;
        cin = cout;
    }
    if (raw.count() != expected)
        throw FormatError("extractor file: unexpected extra entries (" +
                          std::to_string(raw.count()) + " vs " + std::to_string(expected) + ")");
    ex.id = "file:" + path;
    return ex;
}

std::vector<Var> extract_features(Tape& tp, const FeatureExtractor& ex, Var x) {
    {
        const Tensor& xv = tp.value(x);
        if (xv.rank() != 4 || xv.dim(3) != ex.in_channels)
            throw std::invalid_argument("extract_features: input must be [N,H,W," +
                                        std::to_string(ex.in_channels) + "], got " + xv.shape_str());
        const int64_t mult = ex.input_multiple();
        if (xv.dim(1) < mult || xv.dim(2) < mult || xv.dim(1) % mult != 0 || xv.dim(2) % mult != 0)
            throw std::invalid_argument("extract_features: spatial dims must be multiples of " +
                                        std::to_string(mult) + " for " +
                                        std::to_string(ex.stages()) + " stages, got " +
                                        xv.shape_str());
    }
    std::vector<Var> taps;
    Var h = x;
    for (int s = 0; s < ex.stages(); ++s) {
        Var w = tp.input(ex.weights.at(stage_path(s, "w")));
        Var b = tp.input(ex.weights.at(stage_path(s, "b")));
        h = tp.avg_pool2(tp.silu(tp.conv2d(h, w, b)));
        taps.push_back(h);
    }
    return taps;
}

Var metric_transform(Tape& tp, Var x, const MetricTransform& mt) {
    if (mt.resolution < 1)
        throw std::invalid_argument("metric_transform: resolution must be positive");
    Var y = tp.bilinear_resize(x, mt.resolution, mt.resolution);
    return tp.add_scalar(tp.scale(y, 0.5f), 0.5f);
}

Var feature_distance(Tape& tp, const std::vector<Var>& a, const std::vector<Var>& b) {
    if (a.empty() || a.size() != b.size())
        throw std::invalid_argument("feature_distance: tap count mismatch");
    Var total;
    for (size_t i = 0; i < a.size(); ++i) {
        const int64_t ca = tp.value(a[i]).dim(3);
        if (tp.value(a[i]).dims() != tp.value(b[i]).dims())
            throw std::invalid_argument("feature_distance: tap " + std::to_string(i) +
                                        " shape mismatch");
        Var na = tp.channel_unit_norm(a[i], 1e-8f);
        Var nb = tp.channel_unit_norm(b[i], 1e-8f);
        Var d = tp.sub(na, nb);
        // mean over batch and space of the channel-summed square
        Var term = tp.scale(tp.mean_all(tp.mul(d, d)), static_cast<float>(ca));
        total = i == 0 ? term : tp.add(total, term);
    }
    return total;
}

Tensor extract_features_flat(const FeatureExtractor& ex, const MetricTransform& mt,
                             const Tensor& images, int tap) {
    if (images.rank() != 4)
        throw std::invalid_argument("extract_features_flat: images must be [N,H,W,C]");
    if (tap < -1 || tap >= ex.stages())
        throw std::invalid_argument("extract_features_flat: tap out of range");
    const int64_t n = images.dim(0);
    const int64_t chunk = 64;
    Tensor out;
    int64_t d = 0;
    for (int64_t start = 0; start < n; start += chunk) {
        const int64_t m = std::min(chunk, n - start);
        Tensor batch({m, images.dim(1), images.dim(2), images.dim(3)});
        std::copy_n(images.data() + start * images.size() / n, batch.size(), batch.data());
        Tape tp(false);
        std::vector<Var> taps = extract_features(tp, ex, metric_transform(tp, tp.input(batch), mt));

        // one row per image
        std::vector<std::vector<float>> rows(static_cast<size_t>(m));
        if (tap >= 0) {
            const Tensor& tv = taps[static_cast<size_t>(tap)].val();
            const int64_t per = tv.size() / m;
            for (int64_t i = 0; i < m; ++i)
                rows[static_cast<size_t>(i)].assign(tv.data() + i * per, tv.data() + (i + 1) * per);
        } else {
            for (const Var& t : taps) {
                const Tensor& tv = t.val();
                const int64_t hw = tv.dim(1) * tv.dim(2), c = tv.dim(3);
                for (int64_t i = 0; i < m; ++i) {
                    std::vector<float> means(static_cast<size_t>(c), 0.0f);
                    const float* p = tv.data() + i * hw * c;
                    for (int64_t s = 0; s < hw; ++s)
                        for (int64_t k = 0; k < c; ++k) means[static_cast<size_t>(k)] += p[s * c + k];
                    for (int64_t k = 0; k < c; ++k)
                        rows[static_cast<size_t>(i)].push_back(means[static_cast<size_t>(k)] /
                                                               static_cast<float>(hw));
                }
            }
        }
        if (start == 0) {
            d = static_cast<int64_t>(rows[0].size());
            out = Tensor({n, d});
        }
        for (int64_t i = 0; i < m; ++i)
            std::copy(rows[static_cast<size_t>(i)].begin(), rows[static_cast<size_t>(i)].end(),
                      out.data() + (start + i) * d);
    }
    return out;
}

} // namespace casdm
