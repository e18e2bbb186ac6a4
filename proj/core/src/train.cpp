#include "casdm/train.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <sstream>

#include <nlohmann/json.hpp>

#include "casdm/checkpoint.hpp"
#include "casdm/errors.hpp"
#include "casdm/optim.hpp"

namespace casdm {

namespace fs = std::filesystem;

namespace {

constexpr int kWindow = 100; // summary window for l_eps

std::string ckpt_dir_name(int64_t step) { return "ckpt_" + std::to_string(step); }

// Loaded parameters must describe exactly the architecture the config built.
void check_store_matches(const ParamStore& loaded, const ParamStore& expected,
                         const std::string& what) {
    if (loaded.count() != expected.count())
        throw FormatError(what + ": parameter count " + std::to_string(loaded.count()) +
                          " does not match the configured model (" +
                          std::to_string(expected.count()) + ")");
    for (const auto& [path, t] : expected) {
        if (!loaded.has(path)) throw FormatError(what + ": missing parameter '" + path + "'");
        if (!loaded.at(path).same_shape(t))
            throw FormatError(what + ": shape mismatch for parameter '" + path + "'");
    }
}

struct RunState {
    ExperimentConfig cfg;
    fs::path run_dir;
    int64_t start_step = 0;

    NoiseSchedule sched;
    std::unique_ptr<Model> model;
    std::unique_ptr<AdamState> adam_theta, adam_phi;
    ParamStore theta_ema, phi_ema;
    std::unique_ptr<FeatureExtractor> extractor;
    MetricTransform mtr;
    Dataset dataset;
    std::unique_ptr<BatchIterator> batches;
    Rng noise_rng{0};
};

void build_fresh(RunState& rs) {
    const auto& cfg = rs.cfg;
    rs.sched = make_schedule(cfg.schedule_kind, cfg.T);
    rs.model = std::make_unique<Model>(cfg.model, rs.sched);
    rs.model->init_params(cfg.train.seed);
    AdamConfig ac;
    ac.lr = cfg.train.lr;
    rs.adam_theta = std::make_unique<AdamState>(rs.model->theta(), ac);
    if (cfg.model.variant == ModelVariant::casdm)
        rs.adam_phi = std::make_unique<AdamState>(rs.model->phi(), ac);
    if (cfg.train.ema) {
        rs.theta_ema = rs.model->theta();
        rs.phi_ema = rs.model->phi();
    }
    if (cfg.loss.lambda_lpips != 0.0f)
        rs.extractor = std::make_unique<FeatureExtractor>(
            make_extractor(cfg.metric.backbone, cfg.model.net.image_channels, cfg.metric.seed));
    rs.mtr.resolution = cfg.metric.resolution;
    rs.dataset = make_dataset(to_data_config(cfg));
    rs.batches = std::make_unique<BatchIterator>(rs.dataset, cfg.train.batch,
                                                 derive_seed(cfg.train.seed, "train.batches"));
    rs.noise_rng = Rng(derive_seed(cfg.train.seed, "train.noise"));
}

void save_checkpoint(const RunState& rs, int64_t step) {
    const fs::path dir = rs.run_dir / ckpt_dir_name(step);
    fs::create_directories(dir);
    save_params((dir / "theta.cdm").string(), rs.model->theta());
    save_adam((dir / "theta_opt.cdo").string(), *rs.adam_theta);
    if (rs.cfg.model.variant == ModelVariant::casdm) {
        save_params((dir / "phi.cdm").string(), rs.model->phi());
        save_adam((dir / "phi_opt.cdo").string(), *rs.adam_phi);
    }
    if (rs.cfg.train.ema) {
        save_params((dir / "theta_ema.cdm").string(), rs.theta_ema);
        if (rs.cfg.model.variant == ModelVariant::casdm)
            save_params((dir / "phi_ema.cdm").string(), rs.phi_ema);
    }
    TrainStateBlob blob;
    blob.step = static_cast<uint64_t>(step);
    blob.config_hash = config_hash(rs.cfg);
    blob.rng_states["train.noise"] = rs.noise_rng.state();
    const auto bst = rs.batches->state();
    blob.rng_states["data.batch.epoch"] = std::to_string(bst.epoch);
    blob.rng_states["data.batch.cursor"] = std::to_string(bst.cursor);
    save_train_state((dir / "state.cds").string(), blob);
}

void load_checkpoint(RunState& rs, const fs::path& dir) {
    const auto need = [&](const char* name) {
        const fs::path p = dir / name;
        if (!fs::exists(p))
            throw IoError("resume refused: checkpoint file '" + p.string() + "' is missing");
        return p.string();
    };

    TrainStateBlob blob = load_train_state(need("state.cds"));
    if (blob.config_hash != config_hash(rs.cfg))
        throw ConfigError("resume refused: the config does not match the checkpoint "
                          "(hash mismatch; only train.total_steps and train.out_dir may change)");

    ParamStore theta = load_params(need("theta.cdm"));
    check_store_matches(theta, rs.model->theta(), "theta.cdm");
    rs.model->theta() = theta;
    rs.adam_theta = std::make_unique<AdamState>(load_adam(need("theta_opt.cdo"), rs.model->theta()));
    if (rs.cfg.model.variant == ModelVariant::casdm) {
        ParamStore phi = load_params(need("phi.cdm"));
        check_store_matches(phi, rs.model->phi(), "phi.cdm");
        rs.model->phi() = phi;
        rs.adam_phi = std::make_unique<AdamState>(load_adam(need("phi_opt.cdo"), rs.model->phi()));
    }
    if (rs.cfg.train.ema) {
        rs.theta_ema = load_params(need("theta_ema.cdm"));
        check_store_matches(rs.theta_ema, rs.model->theta(), "theta_ema.cdm");
        if (rs.cfg.model.variant == ModelVariant::casdm) {
            rs.phi_ema = load_params(need("phi_ema.cdm"));
            check_store_matches(rs.phi_ema, rs.model->phi(), "phi_ema.cdm");
        }
    }

    const auto rng_entry = [&](const char* key) -> const std::string& {
        auto it = blob.rng_states.find(key);
        if (it == blob.rng_states.end())
            throw FormatError("checkpoint state is missing rng entry '" + std::string(key) + "'");
        return it->second;
    };
    rs.noise_rng.set_state(rng_entry("train.noise"));
    BatchIterator::State bst;
    bst.epoch = std::stoll(rng_entry("data.batch.epoch"));
    bst.cursor = std::stoll(rng_entry("data.batch.cursor"));
    rs.batches->restore(bst);
    rs.start_step = static_cast<int64_t>(blob.step);
}

double scalar(const Var& v) { return static_cast<double>(v.val()[0]); }

// Keep the header and rows with step <= keep_to; an interrupted run may have
// written rows past its last checkpoint.
void truncate_csv(const fs::path& csv, int64_t keep_to) {
    std::ifstream in(csv);
    if (!in) throw IoError("resume refused: cannot read '" + csv.string() + "'");
    std::ostringstream kept;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (first) {
            kept << line << "\n";
            first = false;
            continue;
        }
        if (line.empty()) continue;
        const int64_t step = std::strtoll(line.c_str(), nullptr, 10);
        if (step <= keep_to) kept << line << "\n";
    }
    in.close();
    std::ofstream out(csv, std::ios::trunc);
    out << kept.str();
    if (!out) throw IoError("cannot rewrite '" + csv.string() + "'");
}

void write_summary(const RunState& rs, const TrainResult& res, double wall_seconds) {
    nlohmann::json j;
    j["run_dir"] = res.run_dir;
    j["variant"] = to_string(rs.cfg.model.variant);
    j["final_step"] = res.final_step;
    j["steps_run"] = res.steps_run;
    j["checkpoints"] = res.checkpoint_steps;
    j["config_hash"] = config_hash(rs.cfg);
    j["l_eps_first_window"] = res.first_window_l_eps;
    j["l_eps_last_window"] = res.last_window_l_eps;
    j["wall_seconds"] = wall_seconds;
    std::ofstream out(rs.run_dir / "summary.json");
    out << j.dump(2) << "\n";
    if (!out) throw IoError("cannot write summary.json");
}

TrainResult run_loop(RunState& rs) {
    const auto t_begin = std::chrono::steady_clock::now();
    const auto& cfg = rs.cfg;
    const bool is_casdm = cfg.model.variant == ModelVariant::casdm;
    const int T = cfg.T;
    const int64_t total = cfg.train.total_steps;

    std::ofstream csv(rs.run_dir / "loss.csv", std::ios::app);
    if (!csv) throw IoError("cannot open loss.csv for appending");

    TrainResult res;
    res.run_dir = rs.run_dir.string();
    if (rs.start_step == 0) {
        save_checkpoint(rs, 0);
        res.checkpoint_steps.push_back(0);
    }

    std::vector<double> l_eps_hist;

    for (int64_t step = rs.start_step + 1; step <= total; ++step) {
        Tensor x0 = rs.batches->next();
        const int t = rs.noise_rng.uniform_int(1, T);
        Tensor eps(x0.dims());
        rs.noise_rng.fill_normal(eps.data(), eps.size());
        Tensor x_t = q_sample(x0, eps, rs.sched, t);

        Tape tp;
        Var vxt = tp.input(std::move(x_t));
        Var vx0 = tp.input(std::move(x0));
        Var veps = tp.input(std::move(eps));
        std::vector<int> tvec(static_cast<size_t>(cfg.train.batch), t);
        CasDmOutput out = rs.model->forward(tp, vxt, tvec);

        Var l_eps = loss_eps(tp, veps, out.eps_pred);
        Var l_x0 = loss_x0(tp, vx0, out.x0_pred);
        const AffinePairF pc = posterior_coeffs_f(rs.sched, t);
        Var mu_tilde = tp.affine2(pc.a, vx0, pc.b, vxt);
        Var mu_x0p = tp.affine2(pc.a, out.x0_pred, pc.b, vxt);
        const AffinePairF mc = mu_eps_coeffs_f(rs.sched, t);
        Var mu_epsp = tp.affine2(mc.a, vxt, mc.b, out.eps_pred);
        Var l_mu = loss_mu(tp, mu_tilde, mu_x0p, mu_epsp, out.r);
        Var l_lpips = rs.extractor ? metric_loss(tp, vx0, out.x0_pred, *rs.extractor, rs.mtr)
                                   : tp.input(Tensor::zeros({1}));
        auto [l_theta, l_phi] = compose_losses(tp, l_eps, l_x0, l_mu, l_lpips, cfg.loss);

        LossReport rep;
        rep.step = step;
        rep.t = t;
        rep.l_eps = scalar(l_eps);
        rep.l_x0 = scalar(l_x0);
        rep.l_mu = scalar(l_mu);
        rep.l_lpips = scalar(l_lpips);
        rep.l_theta = scalar(l_theta);
        rep.l_phi = scalar(l_phi);
        if (!std::isfinite(rep.l_theta) || !std::isfinite(rep.l_phi))
            throw NumericError("non-finite loss at step " + std::to_string(step));

        if (is_casdm) {
            // two optimizer steps on disjoint stores; phi's loss cannot reach
            // theta through the stop-gradient, and the separate Adam states
            // keep the trajectories independent
            Gradients g_theta = tp.backward(l_theta);
            Gradients g_phi = tp.backward(l_phi);
            rs.adam_theta->step(rs.model->theta(), g_theta.for_store(rs.model->theta()));
            rs.adam_phi->step(rs.model->phi(), g_phi.for_store(rs.model->phi()));
        } else {
            // single network: one combined step
            Gradients g = tp.backward(tp.add(l_theta, l_phi));
            rs.adam_theta->step(rs.model->theta(), g.for_store(rs.model->theta()));
        }
        if (cfg.train.ema) {
            ema_update(rs.theta_ema, rs.model->theta(), cfg.train.ema_decay);
            if (is_casdm) ema_update(rs.phi_ema, rs.model->phi(), cfg.train.ema_decay);
        }

        csv << rep.csv_row() << "\n";
        l_eps_hist.push_back(rep.l_eps);
        ++res.steps_run;
        res.final_step = step;

        if (step % cfg.train.ckpt_every == 0 || step == total) {
            csv.flush();
            if (!csv) throw IoError("short write to loss.csv");
            save_checkpoint(rs, step);
            res.checkpoint_steps.push_back(step);
        }
    }
    csv.flush();
    res.final_step = std::max(rs.start_step, res.final_step);

    const int64_t n = static_cast<int64_t>(l_eps_hist.size());
    const int64_t w = std::min<int64_t>(kWindow, n);
    for (int64_t i = 0; i < w; ++i) {
        res.first_window_l_eps += l_eps_hist[static_cast<size_t>(i)] / static_cast<double>(w);
        res.last_window_l_eps += l_eps_hist[static_cast<size_t>(n - 1 - i)] / static_cast<double>(w);
    }

    const double wall =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_begin).count();
    write_summary(rs, res, wall);
    return res;
}

} // namespace

TrainResult train(const ExperimentConfig& cfg) {
    validate_config(cfg);
    if (cfg.train.out_dir.empty()) throw ConfigError("train.out_dir must be nonempty");

    RunState rs;
    rs.cfg = cfg;
    rs.run_dir = cfg.train.out_dir;
    if (fs::exists(rs.run_dir / "loss.csv"))
        throw IoError("'" + rs.run_dir.string() +
                      "' already contains a run; resume it or pick a fresh out_dir");
    fs::create_directories(rs.run_dir);

    build_fresh(rs);
    save_config_file((rs.run_dir / "config.cfg").string(), cfg);
    {
        std::ofstream csv(rs.run_dir / "loss.csv");
        csv << LossReport::csv_header() << "\n";
        if (!csv) throw IoError("cannot create loss.csv");
    }
    return run_loop(rs);
}

TrainResult resume_train(const std::string& dir, const ExperimentConfig* cfg_override) {
    fs::path p(dir);
    if (!fs::is_directory(p)) throw IoError("resume: '" + dir + "' is not a directory");

    fs::path run_dir, ckpt;
    if (fs::exists(p / "state.cds")) {
        ckpt = p;
        run_dir = p.parent_path();
    } else {
        run_dir = p;
        int64_t best = -1;
        for (const auto& e : fs::directory_iterator(p)) {
            if (!e.is_directory()) continue;
            const std::string name = e.path().filename().string();
            if (name.rfind("ckpt_", 0) != 0) continue;
            const int64_t step = std::strtoll(name.c_str() + 5, nullptr, 10);
            if (step > best && fs::exists(e.path() / "state.cds")) {
                best = step;
                ckpt = e.path();
            }
        }
        if (best < 0) throw IoError("resume: no checkpoint found under '" + dir + "'");
    }

    RunState rs;
    rs.cfg = cfg_override ? *cfg_override : load_config_file((run_dir / "config.cfg").string());
    validate_config(rs.cfg);
    rs.run_dir = run_dir;

    build_fresh(rs);
    load_checkpoint(rs, ckpt);
    truncate_csv(run_dir / "loss.csv", rs.start_step);
    return run_loop(rs);
}

} // namespace casdm
