#pragma once

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "casdm/tensor.hpp"

namespace casdm {

enum class DataKind { synthetic_gaussian, synthetic_patterns, folder, tensor_file };

DataKind data_kind_from_string(const std::string& s);
const char* to_string(DataKind k);

struct DataConfig {
    DataKind kind = DataKind::synthetic_gaussian;
    std::string path;     // folder / tensor_file sources
    int n = 512;          // synthetic item count
    int image_size = 8;
    int channels = 1;     // synthetic default; folder sources load as 3
    uint64_t seed = 0;
    float gauss_mean = 0.2f;
    float gauss_std = 0.3f;
    float jitter = 0.1f;  // patterns: additive amplitude, also the L-inf bound
    int motifs = 4;       // patterns: number of fixed motifs
};

// Immutable after construction; items live in [-1,1].
struct Dataset {
    Tensor items; // [n,H,W,C]
    DataKind source = DataKind::synthetic_gaussian;

    int64_t count() const { return items.dim(0); }
    std::array<int64_t, 3> image_shape() const {
        return {items.dim(1), items.dim(2), items.dim(3)};
    }
};

// The fixed motif bank behind synthetic_patterns: index k cycles through
// stripes / checkers / blobs with k-dependent scale and placement. Values
// stay inside [-1 + jitter, 1 - jitter] so jittered items never clip.
std::vector<Tensor> pattern_motifs(int k, int64_t h, int64_t w, int64_t c, float jitter);

Dataset make_synthetic(const DataConfig& cfg);

// Decodes every *.png directly inside path (sorted by filename); all images
// must share one size. Gray pixels are replicated to RGB; values map through
// x/127.5 - 1.
Dataset load_folder(const std::string& path);

// Loads a [n,H,W,C] container saved with save_tensor.
Dataset load_tensor_file(const std::string& path);

Dataset make_dataset(const DataConfig& cfg);

// Seeded epoch permutations; batches are full-sized, the remainder of each
// epoch is dropped. State is two integers so training can resume mid-epoch.
class BatchIterator {
public:
    struct State {
        int64_t epoch = 0;
        int64_t cursor = 0;
    };

    BatchIterator(const Dataset& ds, int batch, uint64_t seed);

    Tensor next(); // [batch,H,W,C]
    State state() const { return st_; }
    void restore(const State& s);

private:
    void reshuffle();

    const Dataset* ds_;
    int batch_;
    uint64_t seed_;
    State st_;
    std::vector<int64_t> perm_;
};

} // namespace casdm
