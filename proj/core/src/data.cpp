#include "casdm/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <stdexcept>

#include "casdm/errors.hpp"
#include "casdm/image_io.hpp"
#include "casdm/rng.hpp"

namespace casdm {

DataKind data_kind_from_string(const std::string& s) {
    if (s == "synthetic_gaussian") return DataKind::synthetic_gaussian;
    if (s == "synthetic_patterns") return DataKind::synthetic_patterns;
    if (s == "folder") return DataKind::folder;
    if (s == "tensor_file") return DataKind::tensor_file;
    throw ConfigError("unknown data kind '" + s + "'");
}

const char* to_string(DataKind k) {
    switch (k) {
        case DataKind::synthetic_gaussian: return "synthetic_gaussian";
        case DataKind::synthetic_patterns: return "synthetic_patterns";
        case DataKind::folder: return "folder";
        case DataKind::tensor_file: return "tensor_file";
    }
    return "?";
}

std::vector<Tensor> pattern_motifs(int k, int64_t h, int64_t w, int64_t c, float jitter) {
    if (k < 1) throw std::invalid_argument("pattern_motifs: need at least one motif");
    if (h < 1 || w < 1 || c < 1)
        throw std::invalid_argument("pattern_motifs: bad shape");
    if (jitter < 0.0f || jitter >= 1.0f)
        throw std::invalid_argument("pattern_motifs: jitter must lie in [0, 1)");
    const float amp = std::min(0.8f, 1.0f - jitter);

    std::vector<Tensor> out;
    out.reserve(static_cast<size_t>(k));
    for (int m = 0; m < k; ++m) {
        Tensor t({h, w, c});
        const int fam = m % 3, var = m / 3;
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x) {
                float v = 0.0f;
                if (fam == 0) { // stripes, alternating orientation per variant
                    const int64_t band = 1 + var % 3;
                    const int64_t coord = (var % 2 == 0) ? y : x;
                    v = ((coord / band) % 2 == 0) ? amp : -amp;
                } else if (fam == 1) { // checkers
                    const int64_t cell = 1 + var % 2;
                    v = (((y / cell) + (x / cell)) % 2 == 0) ? amp : -amp;
                } else { // blob: radial bump at a variant-dependent center
                    const double cy = static_cast<double>((3 + 5 * var) % h);
                    const double cx = static_cast<double>((2 + 7 * var) % w);
                    const double sg = static_cast<double>(std::max(h, w)) / 4.0;
                    const double d2 = (y - cy) * (y - cy) + (x - cx) * (x - cx);
                    v = amp * static_cast<float>(2.0 * std::exp(-d2 / (2.0 * sg * sg)) - 1.0);
                }
                for (int64_t ch = 0; ch < c; ++ch)
                    t[(y * w + x) * c + ch] = v;
            }
        out.push_back(std::move(t));
    }
    return out;
}

Dataset make_synthetic(const DataConfig& cfg) {
    if (cfg.n < 1) throw std::invalid_argument("make_synthetic: n must be >= 1");
    if (cfg.image_size < 1 || cfg.channels < 1)
        throw std::invalid_argument("make_synthetic: bad image shape");
    const int64_t n = cfg.n, hw = cfg.image_size, c = cfg.channels;
    const int64_t per = hw * hw * c;

    Dataset ds;
    ds.source = cfg.kind;
    ds.items = Tensor({n, hw, hw, c});
    Rng rng(derive_seed(cfg.seed, "data"));

    if (cfg.kind == DataKind::synthetic_gaussian) {
        if (cfg.gauss_std <= 0.0f)
            throw std::invalid_argument("make_synthetic: gauss_std must be > 0");
        rng.fill_normal(ds.items.data(), ds.items.size());
        for (int64_t i = 0; i < ds.items.size(); ++i)
            ds.items[i] = std::clamp(cfg.gauss_mean + cfg.gauss_std * ds.items[i],
                                     -1.0f, 1.0f);
    } else if (cfg.kind == DataKind::synthetic_patterns) {
        const std::vector<Tensor> motifs =
            pattern_motifs(cfg.motifs, hw, hw, c, cfg.jitter);
        for (int64_t i = 0; i < n; ++i) {
            const auto& motif = motifs[static_cast<size_t>(
                rng.uniform_int(0, static_cast<int64_t>(motifs.size()) - 1))];
            float* dst = ds.items.data() + i * per;
            for (int64_t j = 0; j < per; ++j) {
                const float eps =
                    cfg.jitter * (2.0f * static_cast<float>(rng.uniform()) - 1.0f);
                dst[j] = std::clamp(motif[j] + eps, -1.0f, 1.0f);
            }
        }
    } else {
        throw std::invalid_argument("make_synthetic: kind is not synthetic");
    }
    return ds;
}

Dataset load_folder(const std::string& path) {
    namespace fs = std::filesystem;
    if (!fs::is_directory(path)) throw IoError(path + " is not a directory");
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(path)) {
        if (!e.is_regular_file()) continue;
        std::string ext = e.path().extension().string();
        std::transform(ext.begin(), ext.end(), ext.begin(),
                       [](unsigned char ch) { return static_cast<char>(std::tolower(ch)); });
        if (ext == ".png") files.push_back(e.path().string());
    }
    if (files.empty()) throw IoError(path + " holds no .png files");
    std::sort(files.begin(), files.end());

    Dataset ds;
    ds.source = DataKind::folder;
    int64_t h = 0, w = 0;
    for (size_t i = 0; i < files.size(); ++i) {
        ImageU8 img = read_png(files[i]);
        if (i == 0) {
            h = img.height;
            w = img.width;
            ds.items = Tensor({static_cast<int64_t>(files.size()), h, w, 3});
        } else if (img.height != h || img.width != w) {
            throw FormatError(files[i] + ": size " + std::to_string(img.height) + "x" +
                              std::to_string(img.width) + " differs from first image " +
                              std::to_string(h) + "x" + std::to_string(w));
        }
        float* dst = ds.items.data() + static_cast<int64_t>(i) * h * w * 3;
        for (int64_t p = 0; p < h * w; ++p)
            for (int64_t ch = 0; ch < 3; ++ch) {
                const uint8_t u =
                    img.channels == 1
                        ? img.pixels[static_cast<size_t>(p)]
                        : img.pixels[static_cast<size_t>(p * 3 + ch)];
                dst[p * 3 + ch] = static_cast<float>(u) / 127.5f - 1.0f;
            }
    }
    return ds;
}

Dataset load_tensor_file(const std::string& path) {
    Dataset ds;
    ds.source = DataKind::tensor_file;
    ds.items = load_tensor(path);
    if (ds.items.rank() != 4)
        throw FormatError(path + ": dataset container must be rank 4 [n,H,W,C], got " +
                          ds.items.shape_str());
    for (int64_t i = 0; i < ds.items.size(); ++i) {
        if (std::abs(ds.items[i]) > 1.0f + 1e-6f)
            throw FormatError(path + ": values fall outside [-1,1]");
        ds.items[i] = std::clamp(ds.items[i], -1.0f, 1.0f);
    }
    return ds;
}

Dataset make_dataset(const DataConfig& cfg) {
    switch (cfg.kind) {
        case DataKind::folder: return load_folder(cfg.path);
        case DataKind::tensor_file: return load_tensor_file(cfg.path);
        default: return make_synthetic(cfg);
    }
}

BatchIterator::BatchIterator(const Dataset& ds, int batch, uint64_t seed)
    : ds_(&ds), batch_(batch), seed_(seed) {
    if (batch < 1) throw std::invalid_argument("BatchIterator: batch must be >= 1");
    if (ds.count() < batch)
        throw std::invalid_argument("BatchIterator: dataset holds " +
                                    std::to_string(ds.count()) +
                                    " items, fewer than one batch of " +
                                    std::to_string(batch));
    reshuffle();
}

void BatchIterator::reshuffle() {
    const int64_t n = ds_->count();
    perm_.resize(static_cast<size_t>(n));
    for (int64_t i = 0; i < n; ++i) perm_[static_cast<size_t>(i)] = i;
    Rng rng(derive_seed(seed_, "epoch" + std::to_string(st_.epoch)));
    for (int64_t i = 0; i < n - 1; ++i)
        std::swap(perm_[static_cast<size_t>(i)],
                  perm_[static_cast<size_t>(rng.uniform_int(i, n - 1))]);
}

Tensor BatchIterator::next() {
    const int64_t n = ds_->count();
    if (st_.cursor + batch_ > n) {
        ++st_.epoch;
        st_.cursor = 0;
        reshuffle();
    }
    const auto sh = ds_->image_shape();
    const int64_t per = sh[0] * sh[1] * sh[2];
    Tensor out({batch_, sh[0], sh[1], sh[2]});
    for (int i = 0; i < batch_; ++i) {
        const int64_t src = perm_[static_cast<size_t>(st_.cursor + i)];
        std::copy_n(ds_->items.data() + src * per, per, out.data() + i * per);
    }
    st_.cursor += batch_;
    return out;
}

void BatchIterator::restore(const State& s) {
    if (s.epoch < 0 || s.cursor < 0 || s.cursor > ds_->count())
        throw std::invalid_argument("BatchIterator::restore: state out of range");
    st_ = s;
    reshuffle();
}

} // namespace casdm
