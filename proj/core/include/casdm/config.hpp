#pragma once

#include <cstdint>
#include <string>

#include "casdm/data.hpp"
#include "casdm/losses.hpp"
#include "casdm/model.hpp"
#include "casdm/sampler.hpp"
#include "casdm/schedule.hpp"

namespace casdm {

// Metric-function keys of the loss block (backbone "lpips_avgpool",
// "plain_cnn", or "file:<path>").
struct MetricBlock {
    std::string backbone = "lpips_avgpool";
    uint64_t seed = 0;
    int resolution = 32;
};

struct TrainBlock {
    double lr = 1e-4;
    int batch = 32;
    int64_t total_steps = 2000;
    int64_t ckpt_every = 500;
    bool ema = false;
    double ema_decay = 0.999;
    uint64_t seed = 0;
    std::string out_dir = "runs/exp";
};

struct SampleBlock {
    int steps = 50;
    double eta = 0.0;
    int n = 16;
    MuEpsForm mu_eps_form = MuEpsForm::paper;
    int snapshot_every = 0;
};

// Data keys that are not derived: image geometry comes from the model block
// and the dataset seed from the training seed, so one config cannot describe
// a model/data shape mismatch.
struct DataBlock {
    DataKind kind = DataKind::synthetic_patterns;
    std::string path;
    int64_t n = 512;
    float gauss_mean = 0.2f;
    float gauss_std = 0.3f;
    float jitter = 0.1f;
    int motifs = 4;
};

struct ExperimentConfig {
    ModelConfig model;
    ScheduleKind schedule_kind = ScheduleKind::cosine;
    int T = 1000;
    LossWeights loss;
    MetricBlock metric;
    TrainBlock train;
    SampleBlock sample;
    DataBlock data;
};

// Desk defaults: T = 1000, 8x8x1, batch 32, 2000 steps, 50 sampling steps.
ExperimentConfig default_config();

// "desk" = default_config(); "paper" mirrors the source hyperparameters that
// fit on a desk (T = 4000 cosine, 100 sampling steps, lr 1e-4, the default
// loss weights) while keeping desk-scale geometry.
ExperimentConfig preset_config(const std::string& name);

// Strict parser for `section { key value }` text: unknown sections or keys,
// duplicates, and malformed values all throw ConfigError before any compute.
// Missing keys keep their desk defaults. '#' starts a comment.
ExperimentConfig parse_config_text(const std::string& text);
ExperimentConfig load_config_file(const std::string& path);
void save_config_file(const std::string& path, const ExperimentConfig& cfg);

// Deterministic full serialization; parse_config_text(canonical_text(c))
// reproduces c exactly.
std::string canonical_text(const ExperimentConfig& cfg);

// FNV-1a over the canonical text minus train.total_steps and train.out_dir,
// so extending a run or relocating its directory still resumes; any other
// edit changes the hash and is refused at resume time.
uint64_t config_hash(const ExperimentConfig& cfg);

// Range/consistency checks shared by the parser and the presets.
void validate_config(const ExperimentConfig& cfg);

DataConfig to_data_config(const ExperimentConfig& cfg);
SamplerConfig to_sampler_config(const ExperimentConfig& cfg, uint64_t seed);

} // namespace casdm
