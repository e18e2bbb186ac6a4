// casdm: train / sample / eval / inspect-schedule / inspect-ckpt / grid.
// Thin wrappers over the library; all policy (formats, seeding, resume
// rules) lives in core. Exit codes: 0 ok, 2 config error, 3 I/O error,
// 4 numerical failure.

#include <CLI11.hpp>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "casdm/checkpoint.hpp"
#include "casdm/config.hpp"
#include "casdm/data.hpp"
#include "casdm/errors.hpp"
#include "casdm/eval.hpp"
#include "casdm/metric.hpp"
#include "casdm/model.hpp"
#include "casdm/sampler.hpp"
#include "casdm/schedule.hpp"
#include "casdm/tensor.hpp"
#include "casdm/train.hpp"

namespace fs = std::filesystem;

namespace {

using namespace casdm;

// Accepts a ckpt_<n> directory or a run directory (highest step wins).
fs::path resolve_ckpt_dir(const std::string& arg) {
    const fs::path p(arg);
    if (!fs::is_directory(p))
        throw IoError("'" + arg + "' is not a directory");
    if (fs::exists(p / "state.cds")) return p;
    int64_t best_step = -1;
    fs::path best;
    for (const auto& e : fs::directory_iterator(p)) {
        if (!e.is_directory()) continue;
        const std::string name = e.path().filename().string();
        if (name.rfind("ckpt_", 0) != 0) continue;
        if (!fs::exists(e.path() / "state.cds")) continue;
        try {
            const int64_t step = std::stoll(name.substr(5));
            if (step > best_step) { best_step = step; best = e.path(); }
        } catch (const std::exception&) { continue; }
    }
    if (best_step < 0)
        throw IoError("no checkpoint found under '" + arg + "'");
    return best;
}

void check_store_matches(const ParamStore& loaded, const ParamStore& expected,
                         const std::string& what) {
    if (loaded.count() != expected.count())
        throw FormatError(what + ": parameter count " + std::to_string(loaded.count()) +
                          " does not match the configured model (" +
                          std::to_string(expected.count()) + ")");
    for (const auto& [path, t] : expected) {
        if (!loaded.has(path))
            throw FormatError(what + ": parameter '" + path + "' is missing");
        if (loaded.at(path).dims() != t.dims())
            throw FormatError(what + ": parameter '" + path + "' has shape " +
                              loaded.at(path).shape_str() + ", expected " + t.shape_str());
    }
}

struct LoadedCkpt {
    ExperimentConfig cfg;
    NoiseSchedule sched;
    std::unique_ptr<Model> model;
    TrainStateBlob state;
    fs::path dir;
};

// Reconstructs the model a checkpoint was trained with. The run's config.cfg
// (one level up) is the architecture authority; its hash must match the one
// stored beside the weights, so a foreign config cannot silently reshape them.
LoadedCkpt load_ckpt_model(const std::string& arg, bool ema) {
    LoadedCkpt lc;
    lc.dir = resolve_ckpt_dir(arg);
    const fs::path cfg_path = lc.dir.parent_path() / "config.cfg";
    if (!fs::exists(cfg_path))
        throw IoError("run config '" + cfg_path.string() + "' is missing");
    lc.cfg = load_config_file(cfg_path.string());
    lc.state = load_train_state((lc.dir / "state.cds").string());
    if (lc.state.config_hash != config_hash(lc.cfg))
        throw ConfigError("config.cfg does not match the checkpoint (hash mismatch)");

    lc.sched = make_schedule(lc.cfg.schedule_kind, lc.cfg.T);
    lc.model = std::make_unique<Model>(lc.cfg.model, lc.sched);
    lc.model->init_params(lc.cfg.train.seed); // establishes the expected key set

    const auto load_into = [&](const char* file, ParamStore& dst) {
        const fs::path p = lc.dir / file;
        if (!fs::exists(p)) throw IoError("checkpoint file '" + p.string() + "' is missing");
        ParamStore s = load_params(p.string());
        check_store_matches(s, dst, file);
        dst = std::move(s);
    };
    if (ema && !lc.cfg.train.ema)
        throw ConfigError("--ema requested but the run was trained with train.ema off");
    load_into(ema ? "theta_ema.cdm" : "theta.cdm", lc.model->theta());
    if (lc.cfg.model.variant == ModelVariant::casdm)
        load_into(ema ? "phi_ema.cdm" : "phi.cdm", lc.model->phi());
    return lc;
}

int grid_cols(int cols, int64_t n) {
    if (cols > 0) return cols;
    return static_cast<int>(std::ceil(std::sqrt(static_cast<double>(n))));
}

Tensor load_images_arg(const std::string& arg, const char* what) {
    const fs::path p(arg);
    if (fs::is_directory(p)) {
        const fs::path t = p / "samples.cdt";
        if (fs::exists(t)) return load_tensor(t.string());
        // not a sample dir: treat as a PNG folder
        return load_folder(arg).items;
    }
    if (!fs::exists(p))
        throw IoError(std::string(what) + " '" + arg + "' does not exist");
    return load_tensor(arg);
}

// ---- subcommand bodies ----------------------------------------------------

struct TrainArgs {
    std::string config;
    std::string resume;
};

void run_train(const TrainArgs& a) {
    TrainResult r;
    if (!a.resume.empty()) {
        if (!a.config.empty()) {
            ExperimentConfig cfg = load_config_file(a.config);
            r = resume_train(a.resume, &cfg);
        } else {
            r = resume_train(a.resume);
        }
    } else {
        r = train(load_config_file(a.config));
    }
    std::cout << "run_dir: " << r.run_dir << "\n"
              << "steps_run: " << r.steps_run << " (final step " << r.final_step << ")\n";
    std::cout << "checkpoints:";
    for (int64_t s : r.checkpoint_steps) std::cout << ' ' << s;
    std::cout << "\n";
    if (r.steps_run > 0)
        std::cout << "l_eps window mean: " << r.first_window_l_eps << " -> "
                  << r.last_window_l_eps << "\n";
}

struct SampleArgs {
    std::string ckpt;
    std::string out;
    int steps = -1;
    double eta = -1.0;
    int n = -1;
    uint64_t seed = 0;
    bool seed_set = false;
    std::string form;
    int snapshot_every = -1;
    bool trace = false;
    bool ema = false;
    int cols = 0;
};

void run_sample(const SampleArgs& a) {
    LoadedCkpt lc = load_ckpt_model(a.ckpt, a.ema);
    SamplerConfig sc = to_sampler_config(lc.cfg, a.seed_set ? a.seed : 0);
    if (a.steps >= 0) sc.steps = a.steps;
    if (a.eta >= 0.0) sc.eta = a.eta;
    if (!a.form.empty()) sc.mu_eps_form = mu_eps_form_from_string(a.form);
    if (a.snapshot_every >= 0) sc.snapshot_every = a.snapshot_every;
    const int n = a.n > 0 ? a.n : lc.cfg.sample.n;

    const RespacedSchedule rs = respace(lc.sched, sc.steps);
    const std::array<int64_t, 3> shape = {lc.model->image_size(), lc.model->image_size(),
                                          lc.model->image_channels()};
    const SampleResult res = sample(lc.model->denoise_fn(), rs, sc, n, shape);

    fs::create_directories(a.out);
    const fs::path out(a.out);
    save_tensor((out / "samples.cdt").string(), res.images);
    render_grid(res.images, grid_cols(a.cols, n), (out / "grid.png").string());
    if (a.trace) {
        std::ofstream os(out / "trace.csv");
        if (!os) throw IoError("cannot write '" + (out / "trace.csv").string() + "'");
        os << "t,mean_r,mean_abs_x\n";
        for (const auto& p : res.trajectory.points)
            os << p.t << ',' << p.mean_r << ',' << p.mean_abs_x << "\n";
    }
    for (const auto& [t, x] : res.trajectory.snapshots)
        save_tensor((out / ("snapshot_" + std::to_string(t) + ".cdt")).string(), x);

    std::cout << "sampled " << n << " images (step " << lc.state.step
              << (a.ema ? ", ema" : "") << ", steps " << sc.steps << ", eta " << sc.eta
              << ", form " << to_string(sc.mu_eps_form) << ", seed " << sc.seed << ") -> "
              << out.string() << "\n";
}

struct EvalArgs {
    std::string ref;
    std::string gen;
    std::string metric = "proxy_fd";
    std::string backbone = "lpips_avgpool";
    uint64_t metric_seed = 0;
    int resolution = 32;
    int tap = -1;
};

void run_eval(const EvalArgs& a) {
    if (a.metric != "proxy_fd")
        throw ConfigError("unknown metric '" + a.metric + "' (only proxy_fd is available)");
    const Tensor ref = load_images_arg(a.ref, "--ref");
    const Tensor gen = load_images_arg(a.gen, "--gen");
    if (ref.rank() != 4 || gen.rank() != 4)
        throw FormatError("eval expects [n,H,W,C] image tensors, got " + ref.shape_str() +
                          " and " + gen.shape_str());
    if (ref.dim(3) != gen.dim(3))
        throw ConfigError("channel mismatch: ref has " + std::to_string(ref.dim(3)) +
                          ", gen has " + std::to_string(gen.dim(3)));

    const FeatureExtractor ex =
        make_extractor(a.backbone, static_cast<int>(ref.dim(3)), a.metric_seed);
    const MetricTransform mt{a.resolution};
    const FrechetStats sr = feature_stats(ref, ex, mt, a.tap);
    const FrechetStats sg = feature_stats(gen, ex, mt, a.tap);
    const double v = frechet_distance(sr, sg);

    nlohmann::json report = {{"metric", "proxy_fd"},
                             {"value", v},
                             {"n_ref", sr.n},
                             {"n_gen", sg.n},
                             {"extractor", ex.id},
                             {"tap", a.tap},
                             {"resolution", a.resolution}};
    const fs::path gp(a.gen);
    const fs::path report_path =
        (fs::is_directory(gp) ? gp : gp.parent_path()) / "eval_report.json";
    std::ofstream os(report_path);
    if (!os) throw IoError("cannot write '" + report_path.string() + "'");
    os << report.dump(2) << "\n";

    std::cout << "proxy-FD: " << v << "\n";
    std::cout << "report: " << report_path.string() << " (n_ref " << sr.n << ", n_gen "
              << sg.n << ", extractor " << ex.id << ")\n";
}

void run_inspect_schedule(const std::string& config, const std::string& out) {
    const ExperimentConfig cfg = load_config_file(config);
    const NoiseSchedule s = make_schedule(cfg.schedule_kind, cfg.T);
    if (out.empty() || out == "-") {
        dump_schedule_csv(s, std::cout);
        return;
    }
    std::ofstream os(out);
    if (!os) throw IoError("cannot write '" + out + "'");
    dump_schedule_csv(s, os);
}

void run_inspect_ckpt(const std::string& arg) {
    const fs::path dir = resolve_ckpt_dir(arg);
    const TrainStateBlob st = load_train_state((dir / "state.cds").string());
    std::cout << "checkpoint: " << dir.string() << "\n"
              << "step: " << st.step << "\n"
              << "config_hash: " << std::hex << st.config_hash << std::dec << "\n";

    const fs::path cfg_path = dir.parent_path() / "config.cfg";
    if (fs::exists(cfg_path)) {
        const ExperimentConfig cfg = load_config_file(cfg_path.string());
        std::cout << "variant: " << to_string(cfg.model.variant) << " (schedule "
                  << (cfg.schedule_kind == ScheduleKind::cosine ? "cosine" : "linear")
                  << ", T " << cfg.T << ")\n";
        std::cout << "config match: "
                  << (config_hash(cfg) == st.config_hash ? "yes" : "NO (hash differs)")
                  << "\n";
    }

    const auto show_store = [&](const char* file) {
        const fs::path p = dir / file;
        if (!fs::exists(p)) return;
        const ParamStore s = load_params(p.string());
        std::cout << file << ": " << s.count() << " tensors, " << s.total_size()
                  << " parameters\n";
    };
    show_store("theta.cdm");
    show_store("phi.cdm");
    show_store("theta_ema.cdm");
    show_store("phi_ema.cdm");
    for (const char* f : {"theta_opt.cdo", "phi_opt.cdo"})
        if (fs::exists(dir / f)) std::cout << f << ": present\n";
    std::cout << "rng streams:";
    for (const auto& [k, v] : st.rng_states) std::cout << ' ' << k;
    std::cout << "\n";
}

void run_grid(const std::string& tensor_file, const std::string& out, int cols) {
    const Tensor images = load_tensor(tensor_file);
    if (images.rank() != 4)
        throw FormatError("grid expects a [n,H,W,C] tensor, got " + images.shape_str());
    render_grid(images, grid_cols(cols, images.dim(0)), out);
    std::cout << "wrote " << out << " (" << images.dim(0) << " images)\n";
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"cascaded diffusion laboratory"};
    app.require_subcommand(1);

    TrainArgs ta;
    auto* t = app.add_subcommand("train", "train a model from a config file");
    t->add_option("-c,--config", ta.config, "experiment config file");
    t->add_option("--resume", ta.resume, "checkpoint or run directory to continue");
    t->callback([&] {
        if (ta.config.empty() && ta.resume.empty())
            throw casdm::ConfigError("train needs -c <config> or --resume <dir>");
        run_train(ta);
    });

    SampleArgs sa;
    auto* s = app.add_subcommand("sample", "draw samples from a checkpoint");
    s->add_option("--ckpt", sa.ckpt, "checkpoint or run directory")->required();
    s->add_option("--out", sa.out, "output directory")->required();
    s->add_option("--steps", sa.steps, "sampling steps (default: run config)");
    s->add_option("--eta", sa.eta, "DDIM eta (default: run config)");
    s->add_option("--n", sa.n, "number of images (default: run config)");
    auto* seed_opt = s->add_option("--seed", sa.seed, "sampling seed (default 0)");
    s->add_option("--form", sa.form, "mu-from-eps form: paper | alpha_bar");
    s->add_option("--snapshot-every", sa.snapshot_every,
                  "save x_t every k evaluations (0 = off)");
    s->add_flag("--trace", sa.trace, "write trace.csv (t, mean r_t, mean |x_t|)");
    s->add_flag("--ema", sa.ema, "load EMA weights");
    s->add_option("--cols", sa.cols, "grid columns (default: ceil(sqrt(n)))");
    s->callback([&] {
        sa.seed_set = seed_opt->count() > 0;
        run_sample(sa);
    });

    EvalArgs ea;
    auto* e = app.add_subcommand("eval", "proxy-FD between two image sets");
    e->add_option("--ref", ea.ref, "reference images: tensor file or PNG folder")->required();
    e->add_option("--gen", ea.gen, "generated images: sample directory or tensor file")
        ->required();
    e->add_option("--metric", ea.metric, "metric name (proxy_fd)");
    e->add_option("--backbone", ea.backbone,
                  "extractor backbone: lpips_avgpool | plain_cnn | file:<path>");
    e->add_option("--metric-seed", ea.metric_seed, "extractor weight seed");
    e->add_option("--resolution", ea.resolution, "transform resolution");
    e->add_option("--tap", ea.tap, "feature tap (-1 = pooled channel means)");
    e->callback([&] { run_eval(ea); });

    std::string is_cfg, is_out;
    auto* is = app.add_subcommand("inspect-schedule", "dump the noise schedule as CSV");
    is->add_option("-c,--config", is_cfg, "experiment config file")->required();
    is->add_option("-o,--out", is_out, "output file ('-' = stdout)");
    is->callback([&] { run_inspect_schedule(is_cfg, is_out); });

    std::string ic_dir;
    auto* ic = app.add_subcommand("inspect-ckpt", "describe a checkpoint");
    ic->add_option("dir", ic_dir, "checkpoint or run directory")->required();
    ic->callback([&] { run_inspect_ckpt(ic_dir); });

    std::string g_file, g_out;
    int g_cols = 0;
    auto* g = app.add_subcommand("grid", "render a tensor file as a PNG grid");
    g->add_option("tensor_file", g_file, "[n,H,W,C] tensor container")->required();
    g->add_option("-o,--out", g_out, "output PNG path")->required();
    g->add_option("--cols", g_cols, "grid columns (default: ceil(sqrt(n)))");
    g->callback([&] { run_grid(g_file, g_out, g_cols); });

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const casdm::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const casdm::NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return 4;
    } catch (const casdm::IoError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return 3;
    } catch (const std::invalid_argument& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
