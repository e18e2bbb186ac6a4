#include "casdm/checkpoint.hpp"

#include <cstdio>
#include <cstring>
#include <memory>
#include <vector>

#include "casdm/errors.hpp"

namespace casdm {

namespace {

struct FileCloser {
    void operator()(std::FILE* f) const { if (f) std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

FilePtr open_write(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw IoError("cannot open for writing: " + path);
    return f;
}

FilePtr open_read(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IoError("cannot open: " + path);
    return f;
}

void put_u64(std::FILE* f, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    if (std::fwrite(b, 1, 8, f) != 8) throw IoError("short write");
}

void put_f64(std::FILE* f, double v) {
    uint64_t u;
    std::memcpy(&u, &v, 8);
    put_u64(f, u);
}

uint64_t get_u64(std::FILE* f, const std::string& path, const std::string& field) {
    unsigned char b[8];
    if (std::fread(b, 1, 8, f) != 8) throw FormatError(path + ": truncated at " + field);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

double get_f64(std::FILE* f, const std::string& path, const std::string& field) {
    uint64_t u = get_u64(f, path, field);
    double v;
    std::memcpy(&v, &u, 8);
    return v;
}

void put_str(std::FILE* f, const std::string& s) {
    put_u64(f, s.size());
    if (!s.empty() && std::fwrite(s.data(), 1, s.size(), f) != s.size())
        throw IoError("short write");
}

std::string get_str(std::FILE* f, const std::string& path, const std::string& field,
                    uint64_t max_len = 1 << 20) {
    uint64_t n = get_u64(f, path, field);
    if (n > max_len) throw FormatError(path + ": implausible length for " + field);
    std::string s(n, '\0');
    if (n && std::fread(s.data(), 1, n, f) != n)
        throw FormatError(path + ": truncated at " + field);
    return s;
}

void put_magic(std::FILE* f, const char* magic) {
    if (std::fwrite(magic, 1, 4, f) != 4) throw IoError("short write");
}

void expect_magic(std::FILE* f, const char* magic, const std::string& path) {
    char got[4];
    if (std::fread(got, 1, 4, f) != 4 || std::memcmp(got, magic, 4) != 0)
        throw FormatError(path + ": bad magic, expected " + std::string(magic, 4));
}

void put_manifest(std::FILE* f, const ParamStore& store) {
    put_u64(f, store.count());
    for (const auto& [path, t] : store) {
        put_str(f, path);
        put_u64(f, static_cast<uint64_t>(t.rank()));
        for (int64_t i = 0; i < t.rank(); ++i) put_u64(f, static_cast<uint64_t>(t.dim(i)));
    }
}

struct ManifestEntry {
    std::string name;
    std::vector<int64_t> dims;
};

std::vector<ManifestEntry> get_manifest(std::FILE* f, const std::string& path) {
    uint64_t count = get_u64(f, path, "parameter count");
    if (count > 1 << 20) throw FormatError(path + ": implausible parameter count");
    std::vector<ManifestEntry> m(count);
    for (auto& e : m) {
        e.name = get_str(f, path, "parameter path", 4096);
        if (e.name.empty()) throw FormatError(path + ": empty parameter path in manifest");
        uint64_t rank = get_u64(f, path, "rank of " + e.name);
        if (rank == 0 || rank > 8)
            throw FormatError(path + ": implausible rank for " + e.name);
        e.dims.resize(rank);
        for (auto& d : e.dims) {
            uint64_t dv = get_u64(f, path, "dims of " + e.name);
            if (dv == 0 || dv > (1ull << 32))
                throw FormatError(path + ": implausible dim for " + e.name);
            d = static_cast<int64_t>(dv);
        }
    }
    return m;
}

void put_payload(std::FILE* f, const Tensor& t) {
    size_t n = static_cast<size_t>(t.size());
    if (n && std::fwrite(t.data(), sizeof(float), n, f) != n) throw IoError("short write");
}

Tensor get_payload(std::FILE* f, const ManifestEntry& e, const std::string& path) {
    Tensor t(e.dims);
    size_t n = static_cast<size_t>(t.size());
    if (n && std::fread(t.data(), sizeof(float), n, f) != n)
        throw FormatError(path + ": parameter " + e.name + " payload truncated");
    return t;
}

void expect_eof(std::FILE* f, const std::string& path) {
    unsigned char extra;
    if (std::fread(&extra, 1, 1, f) == 1)
        throw FormatError(path + ": trailing bytes after payload");
}

constexpr char kParamsMagic[] = "CDM1";
constexpr char kAdamMagic[] = "CDO1";
constexpr char kStateMagic[] = "CDS1";

} // namespace

void save_params(const std::string& path, const ParamStore& store) {
    FilePtr f = open_write(path);
    put_magic(f.get(), kParamsMagic);
    put_manifest(f.get(), store);
    for (const auto& [name, t] : store) put_payload(f.get(), t);
    if (std::fflush(f.get()) != 0) throw IoError("flush failed: " + path);
}

ParamStore load_params(const std::string& path) {
    FilePtr f = open_read(path);
    expect_magic(f.get(), kParamsMagic, path);
    auto manifest = get_manifest(f.get(), path);
    ParamStore store;
    for (const auto& e : manifest) {
        if (store.has(e.name)) throw FormatError(path + ": duplicate parameter " + e.name);
        store.add(e.name, Tensor(e.dims));
    }
    // Payload order is manifest order, which save writes lexicographically;
    // tolerate any manifest order by matching names.
    for (const auto& e : manifest) store.at(e.name) = get_payload(f.get(), e, path);
    expect_eof(f.get(), path);
    return store;
}

void save_adam(const std::string& path, const AdamState& state) {
    FilePtr f = open_write(path);
    put_magic(f.get(), kAdamMagic);
    put_u64(f.get(), static_cast<uint64_t>(state.steps_done()));
    put_f64(f.get(), state.config().lr);
    put_f64(f.get(), state.config().beta1);
    put_f64(f.get(), state.config().beta2);
    put_f64(f.get(), state.config().eps);
    put_u64(f.get(), state.m().size());
    for (const auto& [name, t] : state.m()) {
        put_str(f.get(), name);
        put_u64(f.get(), static_cast<uint64_t>(t.rank()));
        for (int64_t i = 0; i < t.rank(); ++i) put_u64(f.get(), static_cast<uint64_t>(t.dim(i)));
    }
    for (const auto& [name, t] : state.m()) {
        put_payload(f.get(), t);
        put_payload(f.get(), state.v().find(name)->second);
    }
    if (std::fflush(f.get()) != 0) throw IoError("flush failed: " + path);
}

AdamState load_adam(const std::string& path, const ParamStore& ref) {
    FilePtr f = open_read(path);
    expect_magic(f.get(), kAdamMagic, path);
    uint64_t step = get_u64(f.get(), path, "step");
    AdamConfig cfg;
    cfg.lr = get_f64(f.get(), path, "lr");
    cfg.beta1 = get_f64(f.get(), path, "beta1");
    cfg.beta2 = get_f64(f.get(), path, "beta2");
    cfg.eps = get_f64(f.get(), path, "eps");
    auto manifest = get_manifest(f.get(), path);
    if (manifest.size() != ref.count())
        throw FormatError(path + ": optimizer state covers " + std::to_string(manifest.size()) +
                          " parameters, model has " + std::to_string(ref.count()));
    AdamState state(ref, cfg);
    state.t_ = static_cast<int64_t>(step);
    for (const auto& e : manifest) {
        if (!ref.has(e.name))
            throw FormatError(path + ": optimizer state for unknown parameter " + e.name);
        if (ref.at(e.name).dims() != e.dims)
            throw FormatError(path + ": shape mismatch for " + e.name);
        state.m_.find(e.name)->second = get_payload(f.get(), e, path);
        state.v_.find(e.name)->second = get_payload(f.get(), e, path);
    }
    expect_eof(f.get(), path);
    return state;
}

void save_train_state(const std::string& path, const TrainStateBlob& blob) {
    FilePtr f = open_write(path);
    put_magic(f.get(), kStateMagic);
    put_u64(f.get(), blob.step);
    put_u64(f.get(), blob.config_hash);
    put_u64(f.get(), blob.rng_states.size());
    for (const auto& [name, st] : blob.rng_states) {
        put_str(f.get(), name);
        put_str(f.get(), st);
    }
    if (std::fflush(f.get()) != 0) throw IoError("flush failed: " + path);
}

TrainStateBlob load_train_state(const std::string& path) {
    FilePtr f = open_read(path);
    expect_magic(f.get(), kStateMagic, path);
    TrainStateBlob blob;
    blob.step = get_u64(f.get(), path, "step");
    blob.config_hash = get_u64(f.get(), path, "config hash");
    uint64_t n = get_u64(f.get(), path, "stream count");
    if (n > 1024) throw FormatError(path + ": implausible stream count");
    for (uint64_t i = 0; i < n; ++i) {
        std::string name = get_str(f.get(), path, "stream name", 4096);
        std::string st = get_str(f.get(), path, "stream state");
        blob.rng_states.emplace(std::move(name), std::move(st));
    }
    expect_eof(f.get(), path);
    return blob;
}

} // namespace casdm
