#pragma once

#include <cstdint>
#include <map>
#include <string>

#include "casdm/optim.hpp"
#include "casdm/params.hpp"

namespace casdm {

// Parameter checkpoint ("CDM1"): magic, u64 count, manifest of
// (u64 pathlen, path bytes, u64 rank, u64 dims...) in lexicographic path
// order, then the float32 LE payloads in the same order. Loading a file
// whose manifest disagrees with expectations raises FormatError naming the
// offending parameter.
void save_params(const std::string& path, const ParamStore& store);
ParamStore load_params(const std::string& path);

// Optimizer sibling ("CDO1"): magic, u64 step, f64 lr/beta1/beta2/eps, the
// same manifest, then per parameter the first-moment payload followed by the
// second-moment payload.
void save_adam(const std::string& path, const AdamState& state);
AdamState load_adam(const std::string& path, const ParamStore& ref);

// Train-state blob ("CDS1"): global step, config hash, named RNG state
// strings. Restoring these replays the exact batch, timestep and noise
// sequence after a resume.
struct TrainStateBlob {
    uint64_t step = 0;
    uint64_t config_hash = 0;
    std::map<std::string, std::string> rng_states;
};

void save_train_state(const std::string& path, const TrainStateBlob& blob);
TrainStateBlob load_train_state(const std::string& path);

} // namespace casdm
