#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "casdm/image_io.hpp"
#include "casdm/metric.hpp"
#include "casdm/tensor.hpp"

namespace casdm {

// Feature-moment summary for the proxy Frechet distance. sigma is d*d
// row-major, exactly symmetric by construction.
struct FrechetStats {
    std::vector<double> mu;
    std::vector<double> sigma;
    int64_t n = 0;

    int64_t d() const { return static_cast<int64_t>(mu.size()); }
};

// Unbiased moments (n-1 covariance) of the rows of a [n,d] tensor. n < 2
// throws; n <= d warns on stderr (the covariance is then rank-deficient).
FrechetStats stats_from_rows(const Tensor& rows);

// Runs images through the metric transform and extractor, then summarizes
// the chosen tap (-1 = pooled per-tap channel means; see
// extract_features_flat).
FrechetStats feature_stats(const Tensor& images, const FeatureExtractor& ex,
                           const MetricTransform& mt, int tap);

// Symmetric PSD square root via eigendecomposition. Eigenvalues in
// [-1e-6, 0) are clamped to zero; lower ones reject the input. Asymmetry
// beyond 1e-8 rejects the input.
std::vector<double> matrix_sqrt_psd(const std::vector<double>& a, int64_t d);

// |mu_a - mu_b|^2 + Tr(Sa + Sb - 2*sqrt(Sa^1/2 Sb Sa^1/2)). Tiny negative
// results (> -1e-6) clamp to 0; anything lower is a numeric failure.
double frechet_distance(const FrechetStats& a, const FrechetStats& b);

// [-1,1] -> [0,255] round-to-nearest, row-major tiling with a 2px separator
// frame; unused cells stay separator-colored. Channels must be 1 or 3.
ImageU8 make_grid(const Tensor& images, int cols);

void render_grid(const Tensor& images, int cols, const std::string& path);

} // namespace casdm
