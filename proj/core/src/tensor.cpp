#include "casdm/tensor.hpp"

#include <cstdio>
#include <cstring>
#include <memory>
#include <sstream>

#include "casdm/errors.hpp"

namespace casdm {

int64_t shape_numel(const std::vector<int64_t>& dims) {
    int64_t n = 1;
    for (int64_t d : dims) {
        if (d <= 0) throw std::invalid_argument("tensor dim must be positive, got " + std::to_string(d));
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<int64_t> dims) : dims_(std::move(dims)) {
    data_.assign(static_cast<size_t>(shape_numel(dims_)), 0.0f);
}

Tensor::Tensor(std::vector<int64_t> dims, std::vector<float> data) : dims_(std::move(dims)), data_(std::move(data)) {
    if (shape_numel(dims_) != static_cast<int64_t>(data_.size()))
        throw std::invalid_argument("tensor data length does not match shape");
}

Tensor Tensor::full(std::vector<int64_t> dims, float v) {
    Tensor t(std::move(dims));
    for (auto& x : t.data_) x = v;
    return t;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << '[';
    for (size_t i = 0; i < dims_.size(); ++i) {
        if (i) os << ',';
        os << dims_[i];
    }
    os << ']';
    return os.str();
}

namespace {

constexpr char kTensorMagic[4] = {'C', 'D', 'T', '1'};

void write_u64(std::FILE* f, uint64_t v) {
    unsigned char b[8];
    for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
    if (std::fwrite(b, 1, 8, f) != 8) throw IoError("short write");
}

uint64_t read_u64(std::FILE* f, const std::string& path, const char* field) {
    unsigned char b[8];
    if (std::fread(b, 1, 8, f) != 8)
        throw FormatError(path + ": truncated while reading " + field);
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(b[i]) << (8 * i);
    return v;
}

struct FileCloser {
    void operator()(std::FILE* f) const { if (f) std::fclose(f); }
};
using FilePtr = std::unique_ptr<std::FILE, FileCloser>;

} // namespace

void save_tensor(const std::string& path, const Tensor& t) {
    FilePtr f(std::fopen(path.c_str(), "wb"));
    if (!f) throw IoError("cannot open for writing: " + path);
    if (std::fwrite(kTensorMagic, 1, 4, f.get()) != 4) throw IoError("short write: " + path);
    write_u64(f.get(), static_cast<uint64_t>(t.rank()));
    for (int64_t i = 0; i < t.rank(); ++i) write_u64(f.get(), static_cast<uint64_t>(t.dim(i)));
    size_t n = static_cast<size_t>(t.size());
    if (n && std::fwrite(t.data(), sizeof(float), n, f.get()) != n) throw IoError("short write: " + path);
    if (std::fflush(f.get()) != 0) throw IoError("flush failed: " + path);
}

Tensor load_tensor(const std::string& path) {
    FilePtr f(std::fopen(path.c_str(), "rb"));
    if (!f) throw IoError("cannot open: " + path);
    char magic[4];
    if (std::fread(magic, 1, 4, f.get()) != 4 || std::memcmp(magic, kTensorMagic, 4) != 0)
        throw FormatError(path + ": bad magic, expected CDT1");
    uint64_t rank = read_u64(f.get(), path, "rank");
    if (rank == 0 || rank > 8) throw FormatError(path + ": implausible rank " + std::to_string(rank));
    std::vector<int64_t> dims(rank);
    uint64_t numel = 1;
    for (uint64_t i = 0; i < rank; ++i) {
        uint64_t d = read_u64(f.get(), path, "dims");
        if (d == 0 || d > (1ull << 32)) throw FormatError(path + ": implausible dim " + std::to_string(d));
        dims[i] = static_cast<int64_t>(d);
        numel *= d;
        if (numel > (1ull << 33)) throw FormatError(path + ": payload too large");
    }
    std::vector<float> data(numel);
    if (numel && std::fread(data.data(), sizeof(float), numel, f.get()) != numel)
        throw FormatError(path + ": payload shorter than dims imply");
    // Trailing bytes mean the dims line about the payload length.
    unsigned char extra;
    if (std::fread(&extra, 1, 1, f.get()) == 1)
        throw FormatError(path + ": payload longer than dims imply");
    return Tensor(std::move(dims), std::move(data));
}

} // namespace casdm
