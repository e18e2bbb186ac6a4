#include "casdm/eval.hpp"

#include <Eigen/Dense>

#include <cmath>
#include <cstdio>
#include <stdexcept>

#include "casdm/errors.hpp"

namespace casdm {

namespace {

using Mat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

Mat to_mat(const std::vector<double>& a, int64_t d) {
    if (d < 1) throw std::invalid_argument("matrix side must be >= 1");
    if (static_cast<int64_t>(a.size()) != d * d)
        throw std::invalid_argument("matrix buffer size does not match d*d");
    Mat m(d, d);
    for (int64_t i = 0; i < d * d; ++i) m.data()[i] = a[static_cast<size_t>(i)];
    return m;
}

std::vector<double> from_mat(const Mat& m) {
    std::vector<double> out(static_cast<size_t>(m.rows() * m.cols()));
    for (int64_t i = 0; i < m.rows() * m.cols(); ++i) out[static_cast<size_t>(i)] = m.data()[i];
    return out;
}

void check_symmetric(const Mat& m, const char* what) {
    double worst = 0.0;
    for (int64_t i = 0; i < m.rows(); ++i)
        for (int64_t j = i + 1; j < m.cols(); ++j)
            worst = std::max(worst, std::abs(m(i, j) - m(j, i)));
    if (worst > 1e-8)
        throw std::invalid_argument(std::string(what) + " is not symmetric (max asymmetry " +
                                    std::to_string(worst) + ")");
}

// Symmetric PSD square root; input already validated symmetric.
Mat sqrt_psd(const Mat& a, const char* what) {
    Eigen::SelfAdjointEigenSolver<Mat> es(a);
    if (es.info() != Eigen::Success) throw NumericError("eigendecomposition failed");
    Eigen::VectorXd lam = es.eigenvalues();
    for (int64_t i = 0; i < lam.size(); ++i) {
        if (lam[i] < -1e-6)
            throw std::invalid_argument(std::string(what) + " is not PSD (eigenvalue " +
                                        std::to_string(lam[i]) + ")");
        lam[i] = lam[i] > 0.0 ? std::sqrt(lam[i]) : 0.0;
    }
    Mat b = es.eigenvectors() * lam.asDiagonal() * es.eigenvectors().transpose();
    // mirror the upper triangle so the result is exactly symmetric
    for (int64_t i = 0; i < b.rows(); ++i)
        for (int64_t j = 0; j < i; ++j) b(i, j) = b(j, i);
    return b;
}

} // namespace

FrechetStats stats_from_rows(const Tensor& rows) {
    if (rows.rank() != 2) throw std::invalid_argument("feature rows must be [n,d], got " + rows.shape_str());
    const int64_t n = rows.dim(0);
    const int64_t d = rows.dim(1);
    if (n < 2) throw std::invalid_argument("need at least 2 feature rows for covariance, got " + std::to_string(n));
    if (d < 1) throw std::invalid_argument("feature dimension must be >= 1");
    if (n <= d)
        std::fprintf(stderr, "warning: %lld feature rows for dimension %lld; covariance is rank-deficient\n",
                     static_cast<long long>(n), static_cast<long long>(d));

    FrechetStats st;
    st.n = n;
    st.mu.assign(static_cast<size_t>(d), 0.0);
    st.sigma.assign(static_cast<size_t>(d * d), 0.0);

    const float* x = rows.data();
    for (int64_t i = 0; i < n; ++i)
        for (int64_t j = 0; j < d; ++j) st.mu[static_cast<size_t>(j)] += static_cast<double>(x[i * d + j]);
    for (int64_t j = 0; j < d; ++j) st.mu[static_cast<size_t>(j)] /= static_cast<double>(n);

    // upper triangle only, then mirror: keeps sigma exactly symmetric
    std::vector<double> c(static_cast<size_t>(d));
    for (int64_t i = 0; i < n; ++i) {
        for (int64_t j = 0; j < d; ++j) c[static_cast<size_t>(j)] = static_cast<double>(x[i * d + j]) - st.mu[static_cast<size_t>(j)];
        for (int64_t j = 0; j < d; ++j)
            for (int64_t k = j; k < d; ++k)
                st.sigma[static_cast<size_t>(j * d + k)] += c[static_cast<size_t>(j)] * c[static_cast<size_t>(k)];
    }
    const double inv = 1.0 / static_cast<double>(n - 1);
    for (int64_t j = 0; j < d; ++j)
        for (int64_t k = j; k < d; ++k) {
            const double v = st.sigma[static_cast<size_t>(j * d + k)] * inv;
            st.sigma[static_cast<size_t>(j * d + k)] = v;
            st.sigma[static_cast<size_t>(k * d + j)] = v;
        }
    return st;
}

FrechetStats feature_stats(const Tensor& images, const FeatureExtractor& ex,
                           const MetricTransform& mt, int tap) {
    return stats_from_rows(extract_features_flat(ex, mt, images, tap));
}

std::vector<double> matrix_sqrt_psd(const std::vector<double>& a, int64_t d) {
    Mat m = to_mat(a, d);
    check_symmetric(m, "matrix_sqrt_psd input");
    return from_mat(sqrt_psd(m, "matrix_sqrt_psd input"));
}

double frechet_distance(const FrechetStats& a, const FrechetStats& b) {
    const int64_t d = a.d();
    if (d != b.d())
        throw std::invalid_argument("frechet_distance dimension mismatch: " + std::to_string(d) +
                                    " vs " + std::to_string(b.d()));
    if (d < 1) throw std::invalid_argument("frechet_distance needs d >= 1");
    Mat sa = to_mat(a.sigma, d);
    Mat sb = to_mat(b.sigma, d);
    check_symmetric(sa, "first covariance");
    check_symmetric(sb, "second covariance");

    double mean2 = 0.0;
    for (int64_t i = 0; i < d; ++i) {
        const double dm = a.mu[static_cast<size_t>(i)] - b.mu[static_cast<size_t>(i)];
        mean2 += dm * dm;
    }

    Mat sah = sqrt_psd(sa, "first covariance");
    Mat inner = sah * sb * sah;
    inner = 0.5 * (inner + inner.transpose().eval()); // symmetric in exact arithmetic
    Mat cross = sqrt_psd(inner, "cross term");

    double val = mean2 + sa.trace() + sb.trace() - 2.0 * cross.trace();
    if (val < 0.0) {
        if (val < -1e-6)
            throw NumericError("frechet_distance produced " + std::to_string(val) +
                               "; beyond numerical tolerance");
        val = 0.0;
    }
    return val;
}

ImageU8 make_grid(const Tensor& images, int cols) {
    if (images.rank() != 4) throw std::invalid_argument("grid images must be [n,H,W,C], got " + images.shape_str());
    const int64_t n = images.dim(0), h = images.dim(1), w = images.dim(2), c = images.dim(3);
    if (n < 1) throw std::invalid_argument("grid needs at least one image");
    if (c != 1 && c != 3) throw std::invalid_argument("grid images must have 1 or 3 channels, got " + std::to_string(c));
    if (cols < 1) throw std::invalid_argument("grid cols must be >= 1");

    const int64_t sep = 2;
    const int64_t gcols = std::min<int64_t>(cols, n);
    const int64_t grows = (n + gcols - 1) / gcols;

    ImageU8 img;
    img.channels = c;
    img.width = gcols * w + (gcols + 1) * sep;
    img.height = grows * h + (grows + 1) * sep;
    img.pixels.assign(static_cast<size_t>(img.height * img.width * c), 128);

    const float* src = images.data();
    for (int64_t i = 0; i < n; ++i) {
        const int64_t gr = i / gcols, gc = i % gcols;
        const int64_t top = sep + gr * (h + sep);
        const int64_t left = sep + gc * (w + sep);
        for (int64_t y = 0; y < h; ++y)
            for (int64_t x = 0; x < w; ++x)
                for (int64_t ch = 0; ch < c; ++ch) {
                    const float v = src[((i * h + y) * w + x) * c + ch];
                    long u = std::lround((static_cast<double>(v) + 1.0) * 127.5);
                    u = u < 0 ? 0 : (u > 255 ? 255 : u);
                    img.pixels[static_cast<size_t>(((top + y) * img.width + left + x) * c + ch)] =
                        static_cast<uint8_t>(u);
                }
    }
    return img;
}

void render_grid(const Tensor& images, int cols, const std::string& path) {
    write_png(path, make_grid(images, cols));
}

} // namespace casdm
