#pragma once

#include <string>
#include <vector>

#include "casdm/params.hpp"
#include "casdm/tape.hpp"

namespace casdm {

// Fixed-weight convolutional feature stack. Stage s maps channels[s-1] (or
// in_channels) to channels[s] with a kernel x kernel convolution, SiLU, then
// 2x2 average pooling; the tap after each pool is compared by
// feature_distance. Average pooling keeps the whole stack differentiable;
// nothing here max-pools. Weights are frozen: they enter tapes as plain
// inputs, never as parameters, so no gradient can touch them.
struct FeatureExtractor {
    std::vector<int> channels;
    int kernel = 3;
    int in_channels = 1;
    ParamStore weights;
    std::string id;

    int stages() const { return static_cast<int>(channels.size()); }
    // every stage halves, so H and W must be positive multiples of this
    int input_multiple() const { return 1 << stages(); }
};

// Image preconditioning ahead of the extractor: bilinear resize to a fixed
// resolution and the affine map [-1,1] -> [0,1].
struct MetricTransform {
    int resolution = 32;
};

// backbone: "lpips_avgpool" (4 stages, 3x3, widths 8/16/32/64),
// "plain_cnn" (3 stages, 5x5, widths 16/32/32), or "file:<path>" for weights
// saved by save_extractor. Seeded variants are deterministic in (backbone,
// in_channels, seed).
FeatureExtractor make_extractor(const std::string& backbone, int in_channels, uint64_t seed);

void save_extractor(const std::string& path, const FeatureExtractor& ex);
FeatureExtractor load_extractor_file(const std::string& path);

// x: [N,H,W,in_channels], expected in [0,1] (post-transform). One tap per
// stage, spatial size halving each time. Differentiable w.r.t. x.
std::vector<Var> extract_features(Tape& tp, const FeatureExtractor& ex, Var x);

// [-1,1] image -> [0,1] at mt.resolution.
Var metric_transform(Tape& tp, Var x, const MetricTransform& mt);

// Sum over taps of the spatial/batch mean of the channel-summed squared
// difference between channel-unit-normalised features. Scalar Var.
Var feature_distance(Tape& tp, const std::vector<Var>& a, const std::vector<Var>& b);

// Evaluation helper: transform images from [-1,1], extract without gradients,
// and return one row per image. tap in [0, stages) flattens that tap;
// tap = -1 spatially averages every tap and concatenates the channel means.
Tensor extract_features_flat(const FeatureExtractor& ex, const MetricTransform& mt,
                             const Tensor& images, int tap);

} // namespace casdm
