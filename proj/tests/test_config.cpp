#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <unistd.h>

#include <filesystem>
#include <string>

#include "casdm/config.hpp"
#include "casdm/errors.hpp"

using namespace casdm;

namespace {

struct TempDir {
    std::filesystem::path path;
    TempDir() {
        static int c = 0;
        path = std::filesystem::temp_directory_path() /
               ("casdm_cfg_" + std::to_string(::getpid()) + "_" + std::to_string(c++));
        std::filesystem::create_directories(path);
    }
    ~TempDir() {
        std::error_code ec;
        std::filesystem::remove_all(path, ec);
    }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

} // namespace

TEST_CASE("defaults: desk-scale values") {
    auto c = default_config();
    CHECK(c.T == 1000);
    CHECK(c.schedule_kind == ScheduleKind::cosine);
    CHECK(c.model.variant == ModelVariant::casdm);
    CHECK(c.model.net.image_size == 8);
    CHECK(c.model.net.image_channels == 1);
    CHECK(c.train.batch == 32);
    CHECK(c.train.total_steps == 2000);
    CHECK(c.train.lr == 1e-4);
    CHECK(c.sample.steps == 50);
    CHECK(c.loss.lambda_eps == 1.0f);
    CHECK(c.loss.lambda_lpips == 0.1f);
    CHECK(c.data.kind == DataKind::synthetic_patterns);
    CHECK_NOTHROW(validate_config(c));
}

TEST_CASE("presets: desk equals default, paper raises T and sampling steps") {
    CHECK(canonical_text(preset_config("desk")) == canonical_text(default_config()));
    auto p = preset_config("paper");
    CHECK(p.T == 4000);
    CHECK(p.sample.steps == 100);
    CHECK(p.train.lr == 1e-4);
    CHECK(p.loss.lambda_lpips == 0.1f);
    CHECK_NOTHROW(validate_config(p));
    CHECK_THROWS_AS(preset_config("desktop"), ConfigError);
}

TEST_CASE("parse: empty text reproduces the defaults") {
    CHECK(canonical_text(parse_config_text("")) == canonical_text(default_config()));
}

TEST_CASE("parse: canonical round trip at defaults and with every key overridden") {
    auto base = default_config();
    CHECK(canonical_text(parse_config_text(canonical_text(base))) == canonical_text(base));

    const std::string all = R"(
# full override, every key non-default
model {
  variant dual
  phi_arch fixres_cnn
  phi_input concat_x0star_eps
  channels 16
  blocks 1
  levels 1
  time_dim 64
  image_size 16
  image_channels 3
  attention off
}
schedule {
  kind linear
  T 500
}
loss {
  lambda_eps 0.5
  lambda_x0 2
  lambda_mu 0.25
  lambda_lpips 0
  metric_backbone plain_cnn
  metric_seed 99
  metric_resolution 16
}
train {
  lr 0.0003
  batch 8
  total_steps 100
  ckpt_every 25
  ema on
  ema_decay 0.995
  seed 42
  out_dir runs/other
}
sample {
  steps 10
  eta 0.5
  n 4
  mu_eps_form alpha_bar
  snapshot_every 2
}
data {
  kind synthetic_gaussian
  path some/where
  n 64
  gauss_mean 0.1
  gauss_std 0.2
  jitter 0.05
  motifs 3
}
)";
    auto c = parse_config_text(all);
    CHECK(c.model.variant == ModelVariant::dual);
    CHECK(c.model.phi_arch == PhiArch::fixres_cnn);
    CHECK(c.model.net.image_channels == 3);
    CHECK(c.schedule_kind == ScheduleKind::linear);
    CHECK(c.T == 500);
    CHECK(c.loss.lambda_x0 == 2.0f);
    CHECK(c.metric.backbone == "plain_cnn");
    CHECK(c.metric.seed == 99);
    CHECK(c.train.ema);
    CHECK(c.train.ema_decay == 0.995);
    CHECK(c.train.out_dir == "runs/other");
    CHECK(c.sample.mu_eps_form == MuEpsForm::alpha_bar);
    CHECK(c.data.kind == DataKind::synthetic_gaussian);
    CHECK(c.data.path == "some/where");
    // the canonical form of a parse is a fixed point
    CHECK(canonical_text(parse_config_text(canonical_text(c))) == canonical_text(c));
}

TEST_CASE("parse: comments, blank lines, inline comments") {
    auto c = parse_config_text("# top\n\ntrain {\n  batch 8 # inline\n\n  seed 7\n}\n");
    CHECK(c.train.batch == 8);
    CHECK(c.train.seed == 7);
}

TEST_CASE("parse: strictness fails fast") {
    CHECK_THROWS_AS(parse_config_text("nope {\n}\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("train {\n  batchh 8\n}\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("train {\n  batch 8\n  batch 9\n}\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("train {\n}\ntrain {\n}\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("train {\n  batch eight\n}\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("train {\n  batch\n}\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("train\n{\n  batch 8\n}\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("train {\n  batch 8\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("train { junk\n  batch 8\n}\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("model {\n  variant vae\n}\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("train {\n  lr inf\n}\n"), ConfigError);
}

TEST_CASE("parse: attention accepted only as off") {
    CHECK_NOTHROW(parse_config_text("model {\n  attention off\n}\n"));
    CHECK_THROWS_AS(parse_config_text("model {\n  attention on\n}\n"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("model {\n  attention maybe\n}\n"), ConfigError);
}

TEST_CASE("validate: range checks") {
    auto ok = default_config();
    CHECK_NOTHROW(validate_config(ok));

    auto c = ok; c.train.batch = 0;
    CHECK_THROWS_AS(validate_config(c), ConfigError);
    c = ok; c.train.lr = 0.0;
    CHECK_THROWS_AS(validate_config(c), ConfigError);
    c = ok; c.train.ema_decay = 1.0;
    CHECK_THROWS_AS(validate_config(c), ConfigError);
    c = ok; c.train.ckpt_every = 0;
    CHECK_THROWS_AS(validate_config(c), ConfigError);
    c = ok; c.T = 0;
    CHECK_THROWS_AS(validate_config(c), ConfigError);
    c = ok; c.sample.steps = 2000; // > T
    CHECK_THROWS_AS(validate_config(c), ConfigError);
    c = ok; c.sample.eta = -0.1;
    CHECK_THROWS_AS(validate_config(c), ConfigError);
    c = ok; c.model.net.image_size = 7; // levels 2 needs a multiple of 2
    CHECK_THROWS_AS(validate_config(c), ConfigError);
    c = ok; c.model.net.image_channels = 2;
    CHECK_THROWS_AS(validate_config(c), ConfigError);
    c = ok; c.model.net.time_dim = 5;
    CHECK_THROWS_AS(validate_config(c), ConfigError);
    c = ok; c.loss.lambda_mu = -0.1f;
    CHECK_THROWS_AS(validate_config(c), ConfigError);
    c = ok; c.data.jitter = 1.0f;
    CHECK_THROWS_AS(validate_config(c), ConfigError);
    c = ok; c.data.gauss_std = 0.0f;
    CHECK_THROWS_AS(validate_config(c), ConfigError);
    c = ok; c.data.kind = DataKind::folder; c.data.path.clear();
    CHECK_THROWS_AS(validate_config(c), ConfigError);
}

TEST_CASE("hash: stable, sensitive to training-relevant keys only") {
    auto a = default_config();
    auto b = default_config();
    CHECK(config_hash(a) == config_hash(b));

    // excluded keys: extending a run or moving its directory keeps the hash
    b.train.total_steps = 9999;
    b.train.out_dir = "somewhere/else";
    CHECK(config_hash(a) == config_hash(b));

    // every other block participates
    auto c = a; c.train.seed = 1;
    CHECK(config_hash(a) != config_hash(c));
    c = a; c.train.batch = 16;
    CHECK(config_hash(a) != config_hash(c));
    c = a; c.loss.lambda_lpips = 0.0f;
    CHECK(config_hash(a) != config_hash(c));
    c = a; c.model.variant = ModelVariant::dual;
    CHECK(config_hash(a) != config_hash(c));
    c = a; c.T = 999;
    CHECK(config_hash(a) != config_hash(c));
    c = a; c.sample.steps = 49;
    CHECK(config_hash(a) != config_hash(c));
    c = a; c.data.motifs = 5;
    CHECK(config_hash(a) != config_hash(c));
    c = a; c.metric.seed = 3;
    CHECK(config_hash(a) != config_hash(c));
}

TEST_CASE("derived configs: data geometry follows the model block") {
    auto c = default_config();
    c.model.net.image_size = 16;
    c.model.net.image_channels = 3;
    c.train.seed = 77;
    c.data.n = 128;
    auto d = to_data_config(c);
    CHECK(d.image_size == 16);
    CHECK(d.channels == 3);
    CHECK(d.seed == 77);
    CHECK(d.n == 128);
    CHECK(d.kind == DataKind::synthetic_patterns);

    auto s = to_sampler_config(c, 1234);
    CHECK(s.steps == c.sample.steps);
    CHECK(s.eta == c.sample.eta);
    CHECK(s.seed == 1234);
    CHECK(s.mu_eps_form == c.sample.mu_eps_form);
}

TEST_CASE("file io: save/load round trip; missing file is an io error") {
    TempDir td;
    auto c = preset_config("paper");
    c.train.seed = 5;
    c.train.out_dir = "runs/x";
    const std::string path = td.file("exp.cfg");
    save_config_file(path, c);
    auto back = load_config_file(path);
    CHECK(canonical_text(back) == canonical_text(c));
    CHECK(config_hash(back) == config_hash(c));

    CHECK_THROWS_AS(load_config_file(td.file("missing.cfg")), IoError);
}
