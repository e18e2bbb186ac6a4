#include "casdm/config.hpp"

#include <charconv>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <set>
#include <sstream>
#include <vector>

#include "casdm/errors.hpp"

namespace casdm {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

[[noreturn]] void bad_value(const std::string& where, const char* want, const std::string& got) {
    throw ConfigError(where + ": expected " + want + ", got '" + got + "'");
}

int64_t parse_int(const std::string& where, const std::string& v) {
    int64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size()) bad_value(where, "an integer", v);
    return out;
}

uint64_t parse_u64(const std::string& where, const std::string& v) {
    uint64_t out = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc{} || p != v.data() + v.size()) bad_value(where, "an unsigned integer", v);
    return out;
}

double parse_double(const std::string& where, const std::string& v) {
    // strtod instead of from_chars<double>: libstdc++ shipped here lacks it
    char* end = nullptr;
    const double out = std::strtod(v.c_str(), &end);
    if (v.empty() || end != v.c_str() + v.size() || !std::isfinite(out))
        bad_value(where, "a finite number", v);
    return out;
}

float parse_float(const std::string& where, const std::string& v) {
    return static_cast<float>(parse_double(where, v));
}

bool parse_onoff(const std::string& where, const std::string& v) {
    if (v == "on" || v == "true") return true;
    if (v == "off" || v == "false") return false;
    bad_value(where, "on or off", v);
}

std::string fmt_double(double x) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), x);
    (void)ec;
    return std::string(buf, p);
}

std::string fmt_float(float x) {
    char buf[64];
    auto [p, ec] = std::to_chars(buf, buf + sizeof(buf), x);
    (void)ec;
    return std::string(buf, p);
}

struct Setter {
    ExperimentConfig* cfg;

    void apply(const std::string& sec, const std::string& key, const std::string& val) {
        const std::string where = sec + "." + key;
        if (sec == "model") {
            auto& m = cfg->model;
            if (key == "variant") m.variant = model_variant_from_string(val);
            else if (key == "phi_arch") m.phi_arch = phi_arch_from_string(val);
            else if (key == "phi_input") m.phi_input = phi_input_from_string(val);
            else if (key == "channels") m.net.channels = static_cast<int>(parse_int(where, val));
            else if (key == "blocks") m.net.blocks = static_cast<int>(parse_int(where, val));
            else if (key == "levels") m.net.levels = static_cast<int>(parse_int(where, val));
            else if (key == "time_dim") m.net.time_dim = static_cast<int>(parse_int(where, val));
            else if (key == "image_size") m.net.image_size = static_cast<int>(parse_int(where, val));
            else if (key == "image_channels") m.net.image_channels = static_cast<int>(parse_int(where, val));
            else if (key == "attention") m.net.attention = parse_onoff(where, val);
            else throw ConfigError("unknown key '" + key + "' in section 'model'");
        } else if (sec == "schedule") {
            if (key == "kind") cfg->schedule_kind = schedule_kind_from_string(val);
            else if (key == "T") cfg->T = static_cast<int>(parse_int(where, val));
            else throw ConfigError("unknown key '" + key + "' in section 'schedule'");
        } else if (sec == "loss") {
            auto& l = cfg->loss;
            if (key == "lambda_eps") l.lambda_eps = parse_float(where, val);
            else if (key == "lambda_x0") l.lambda_x0 = parse_float(where, val);
            else if (key == "lambda_mu") l.lambda_mu = parse_float(where, val);
            else if (key == "lambda_lpips") l.lambda_lpips = parse_float(where, val);
            else if (key == "metric_backbone") cfg->metric.backbone = val;
            else if (key == "metric_seed") cfg->metric.seed = parse_u64(where, val);
            else if (key == "metric_resolution") cfg->metric.resolution = static_cast<int>(parse_int(where, val));
            else throw ConfigError("unknown key '" + key + "' in section 'loss'");
        } else if (sec == "train") {
            auto& t = cfg->train;
            if (key == "lr") t.lr = parse_double(where, val);
            else if (key == "batch") t.batch = static_cast<int>(parse_int(where, val));
            else if (key == "total_steps") t.total_steps = parse_int(where, val);
            else if (key == "ckpt_every") t.ckpt_every = parse_int(where, val);
            else if (key == "ema") t.ema = parse_onoff(where, val);
            else if (key == "ema_decay") t.ema_decay = parse_double(where, val);
            else if (key == "seed") t.seed = parse_u64(where, val);
            else if (key == "out_dir") t.out_dir = val;
            else throw ConfigError("unknown key '" + key + "' in section 'train'");
        } else if (sec == "sample") {
            auto& s = cfg->sample;
            if (key == "steps") s.steps = static_cast<int>(parse_int(where, val));
            else if (key == "eta") s.eta = parse_double(where, val);
            else if (key == "n") s.n = static_cast<int>(parse_int(where, val));
            else if (key == "mu_eps_form") s.mu_eps_form = mu_eps_form_from_string(val);
            else if (key == "snapshot_every") s.snapshot_every = static_cast<int>(parse_int(where, val));
            else throw ConfigError("unknown key '" + key + "' in section 'sample'");
        } else if (sec == "data") {
            auto& d = cfg->data;
            if (key == "kind") d.kind = data_kind_from_string(val);
            else if (key == "path") d.path = val;
            else if (key == "n") d.n = parse_int(where, val);
            else if (key == "gauss_mean") d.gauss_mean = parse_float(where, val);
            else if (key == "gauss_std") d.gauss_std = parse_float(where, val);
            else if (key == "jitter") d.jitter = parse_float(where, val);
            else if (key == "motifs") d.motifs = static_cast<int>(parse_int(where, val));
            else throw ConfigError("unknown key '" + key + "' in section 'data'");
        } else {
            throw ConfigError("unknown config section '" + sec + "'");
        }
    }
};

void emit_kv(std::ostringstream& os, const char* key, const std::string& val) {
    os << "  " << key << " " << val << "\n";
}

std::string render(const ExperimentConfig& c, bool for_hash) {
    std::ostringstream os;
    os << "model {\n";
    emit_kv(os, "variant", to_string(c.model.variant));
    emit_kv(os, "phi_arch", to_string(c.model.phi_arch));
    emit_kv(os, "phi_input", to_string(c.model.phi_input));
    emit_kv(os, "channels", std::to_string(c.model.net.channels));
    emit_kv(os, "blocks", std::to_string(c.model.net.blocks));
    emit_kv(os, "levels", std::to_string(c.model.net.levels));
    emit_kv(os, "time_dim", std::to_string(c.model.net.time_dim));
    emit_kv(os, "image_size", std::to_string(c.model.net.image_size));
    emit_kv(os, "image_channels", std::to_string(c.model.net.image_channels));
    emit_kv(os, "attention", c.model.net.attention ? "on" : "off");
    os << "}\nschedule {\n";
    emit_kv(os, "kind", to_string(c.schedule_kind));
    emit_kv(os, "T", std::to_string(c.T));
    os << "}\nloss {\n";
    emit_kv(os, "lambda_eps", fmt_float(c.loss.lambda_eps));
    emit_kv(os, "lambda_x0", fmt_float(c.loss.lambda_x0));
    emit_kv(os, "lambda_mu", fmt_float(c.loss.lambda_mu));
    emit_kv(os, "lambda_lpips", fmt_float(c.loss.lambda_lpips));
    emit_kv(os, "metric_backbone", c.metric.backbone);
    emit_kv(os, "metric_seed", std::to_string(c.metric.seed));
    emit_kv(os, "metric_resolution", std::to_string(c.metric.resolution));
    os << "}\ntrain {\n";
    emit_kv(os, "lr", fmt_double(c.train.lr));
    emit_kv(os, "batch", std::to_string(c.train.batch));
    if (!for_hash) emit_kv(os, "total_steps", std::to_string(c.train.total_steps));
    emit_kv(os, "ckpt_every", std::to_string(c.train.ckpt_every));
    emit_kv(os, "ema", c.train.ema ? "on" : "off");
    emit_kv(os, "ema_decay", fmt_double(c.train.ema_decay));
    emit_kv(os, "seed", std::to_string(c.train.seed));
    if (!for_hash && !c.train.out_dir.empty()) emit_kv(os, "out_dir", c.train.out_dir);
    os << "}\nsample {\n";
    emit_kv(os, "steps", std::to_string(c.sample.steps));
    emit_kv(os, "eta", fmt_double(c.sample.eta));
    emit_kv(os, "n", std::to_string(c.sample.n));
    emit_kv(os, "mu_eps_form", to_string(c.sample.mu_eps_form));
    emit_kv(os, "snapshot_every", std::to_string(c.sample.snapshot_every));
    os << "}\ndata {\n";
    emit_kv(os, "kind", to_string(c.data.kind));
    if (!c.data.path.empty()) emit_kv(os, "path", c.data.path);
    emit_kv(os, "n", std::to_string(c.data.n));
    emit_kv(os, "gauss_mean", fmt_float(c.data.gauss_mean));
    emit_kv(os, "gauss_std", fmt_float(c.data.gauss_std));
    emit_kv(os, "jitter", fmt_float(c.data.jitter));
    emit_kv(os, "motifs", std::to_string(c.data.motifs));
    os << "}\n";
    return os.str();
}

} // namespace

ExperimentConfig default_config() { return ExperimentConfig{}; }

ExperimentConfig preset_config(const std::string& name) {
    if (name == "desk") return default_config();
    if (name == "paper") {
        ExperimentConfig c;
        c.T = 4000;
        c.sample.steps = 100;
        return c;
    }
    throw ConfigError("unknown preset '" + name + "' (expected desk or paper)");
}

ExperimentConfig parse_config_text(const std::string& text) {
    ExperimentConfig cfg = default_config();
    Setter setter{&cfg};
    std::set<std::string> seen_sections, seen_keys;

    std::istringstream in(text);
    std::string raw, section;
    int lineno = 0;
    while (std::getline(in, raw)) {
        ++lineno;
        const size_t hash = raw.find('#');
        if (hash != std::string::npos) raw.erase(hash);
        const std::string line = trim(raw);
        if (line.empty()) continue;
        const std::string at = "line " + std::to_string(lineno);

        if (section.empty()) {
            std::istringstream ls(line);
            std::string name, brace, extra;
            ls >> name >> brace;
            if (brace != "{" || (ls >> extra))
                throw ConfigError(at + ": expected 'section {', got '" + line + "'");
            if (name != "model" && name != "schedule" && name != "loss" && name != "train" &&
                name != "sample" && name != "data")
                throw ConfigError(at + ": unknown config section '" + name + "'");
            if (!seen_sections.insert(name).second)
                throw ConfigError(at + ": duplicate section '" + name + "'");
            section = name;
            continue;
        }
        if (line == "}") {
            section.clear();
            continue;
        }
        const size_t sp = line.find_first_of(" \t");
        if (sp == std::string::npos)
            throw ConfigError(at + ": key '" + line + "' in section '" + section + "' has no value");
        const std::string key = line.substr(0, sp);
        const std::string val = trim(line.substr(sp + 1));
        if (val.empty())
            throw ConfigError(at + ": key '" + key + "' in section '" + section + "' has no value");
        if (!seen_keys.insert(section + "." + key).second)
            throw ConfigError(at + ": duplicate key '" + key + "' in section '" + section + "'");
        setter.apply(section, key, val);
    }
    if (!section.empty()) throw ConfigError("unterminated section '" + section + "'");
    validate_config(cfg);
    return cfg;
}

ExperimentConfig load_config_file(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw IoError("cannot open config file '" + path + "'");
    std::ostringstream buf;
    buf << in.rdbuf();
    return parse_config_text(buf.str());
}

void save_config_file(const std::string& path, const ExperimentConfig& cfg) {
    std::ofstream out(path);
    if (!out) throw IoError("cannot write config file '" + path + "'");
    out << canonical_text(cfg);
    if (!out) throw IoError("short write to config file '" + path + "'");
}

std::string canonical_text(const ExperimentConfig& cfg) { return render(cfg, false); }

uint64_t config_hash(const ExperimentConfig& cfg) {
    const std::string s = render(cfg, true);
    uint64_t h = 14695981039346656037ull;
    for (unsigned char c : s) {
        h ^= c;
        h *= 1099511628211ull;
    }
    return h;
}

void validate_config(const ExperimentConfig& c) {
    const auto& net = c.model.net;
    if (net.channels < 1) throw ConfigError("model.channels must be >= 1");
    if (net.blocks < 1) throw ConfigError("model.blocks must be >= 1");
    if (net.levels < 1) throw ConfigError("model.levels must be >= 1");
    if (net.time_dim < 4 || net.time_dim % 2 != 0)
        throw ConfigError("model.time_dim must be an even integer >= 4");
    if (net.image_channels != 1 && net.image_channels != 3)
        throw ConfigError("model.image_channels must be 1 or 3");
    if (net.image_size < 1) throw ConfigError("model.image_size must be >= 1");
    const int down = 1 << (net.levels - 1);
    if (net.image_size % down != 0)
        throw ConfigError("model.image_size must be a multiple of " + std::to_string(down) +
                          " for " + std::to_string(net.levels) + " levels");
    if (net.attention) throw ConfigError("model.attention is accepted only as off");

    if (c.T < 1) throw ConfigError("schedule.T must be >= 1");

    if (c.loss.lambda_eps < 0 || c.loss.lambda_x0 < 0 || c.loss.lambda_mu < 0 ||
        c.loss.lambda_lpips < 0)
        throw ConfigError("loss weights must be nonnegative");
    if (c.metric.resolution < 1) throw ConfigError("loss.metric_resolution must be >= 1");
    if (c.metric.backbone.empty()) throw ConfigError("loss.metric_backbone must be nonempty");

    if (!(c.train.lr > 0)) throw ConfigError("train.lr must be > 0");
    if (c.train.batch < 1) throw ConfigError("train.batch must be >= 1");
    if (c.train.total_steps < 0) throw ConfigError("train.total_steps must be >= 0");
    if (c.train.ckpt_every < 1) throw ConfigError("train.ckpt_every must be >= 1");
    if (!(c.train.ema_decay >= 0.0 && c.train.ema_decay < 1.0))
        throw ConfigError("train.ema_decay must be in [0, 1)");

    if (c.sample.steps < 1) throw ConfigError("sample.steps must be >= 1");
    if (c.sample.steps > c.T) throw ConfigError("sample.steps must be <= schedule.T");
    if (c.sample.eta < 0) throw ConfigError("sample.eta must be >= 0");
    if (c.sample.n < 1) throw ConfigError("sample.n must be >= 1");
    if (c.sample.snapshot_every < 0) throw ConfigError("sample.snapshot_every must be >= 0");

    if (c.data.n < 1) throw ConfigError("data.n must be >= 1");
    if (!(c.data.gauss_std > 0)) throw ConfigError("data.gauss_std must be > 0");
    if (!(c.data.jitter >= 0.0f && c.data.jitter < 1.0f))
        throw ConfigError("data.jitter must be in [0, 1)");
    if (c.data.motifs < 1) throw ConfigError("data.motifs must be >= 1");
    if ((c.data.kind == DataKind::folder || c.data.kind == DataKind::tensor_file) &&
        c.data.path.empty())
        throw ConfigError("data.path is required for folder and tensor_file datasets");
}

DataConfig to_data_config(const ExperimentConfig& c) {
    DataConfig d;
    d.kind = c.data.kind;
    d.path = c.data.path;
    d.n = c.data.n;
    d.image_size = c.model.net.image_size;
    d.channels = c.model.net.image_channels;
    d.seed = c.train.seed;
    d.gauss_mean = c.data.gauss_mean;
    d.gauss_std = c.data.gauss_std;
    d.jitter = c.data.jitter;
    d.motifs = c.data.motifs;
    return d;
}

SamplerConfig to_sampler_config(const ExperimentConfig& c, uint64_t seed) {
    SamplerConfig s;
    s.steps = c.sample.steps;
    s.eta = c.sample.eta;
    s.seed = seed;
    s.mu_eps_form = c.sample.mu_eps_form;
    s.snapshot_every = c.sample.snapshot_every;
    return s;
}

} // namespace casdm
