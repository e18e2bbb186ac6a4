#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "casdm/config.hpp"

namespace casdm {

struct TrainResult {
    int64_t steps_run = 0;   // steps executed by this invocation
    int64_t final_step = 0;  // global step counter afterwards
    std::vector<int64_t> checkpoint_steps;
    std::string run_dir;
    // mean of l_eps over the first/last 100 steps of this invocation
    double first_window_l_eps = 0.0;
    double last_window_l_eps = 0.0;
};

// Fresh run into cfg.train.out_dir: writes config.cfg, the step-0 checkpoint,
// an append-only loss.csv, checkpoints at the configured cadence plus the
// final step, and summary.json. Refuses a directory that already holds a run.
TrainResult train(const ExperimentConfig& cfg);

// Continue from a checkpoint directory (ckpt_<n>) or a run directory (the
// highest checkpoint wins). The stored config is reloaded and its hash
// checked against the checkpoint; cfg_override replaces it but must hash
// identically (total_steps and out_dir are outside the hash, so extending a
// run is the supported edit). loss.csv rows past the checkpoint are dropped
// before continuing, so an interrupted run resumes onto a consistent file.
TrainResult resume_train(const std::string& dir,
                         const ExperimentConfig* cfg_override = nullptr);

} // namespace casdm
