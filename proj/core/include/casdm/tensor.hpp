#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace casdm {

// Dense float32 tensor, row-major. Rank-4 image tensors use [N,H,W,C]
// (channels-last) so the innermost stride is the channel axis.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int64_t> dims);
    Tensor(std::vector<int64_t> dims, std::vector<float> data);

    static Tensor zeros(std::vector<int64_t> dims) { return Tensor(std::move(dims)); }
    static Tensor full(std::vector<int64_t> dims, float v);

    const std::vector<int64_t>& dims() const { return dims_; }
    int64_t rank() const { return static_cast<int64_t>(dims_.size()); }
    int64_t dim(int64_t i) const { return dims_[static_cast<size_t>(i)]; }
    int64_t size() const { return static_cast<int64_t>(data_.size()); }
    bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }

    float* data() { return data_.data(); }
    const float* data() const { return data_.data(); }
    float& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    float operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    std::vector<float>& vec() { return data_; }
    const std::vector<float>& vec() const { return data_; }

    std::string shape_str() const;

private:
    std::vector<int64_t> dims_;
    std::vector<float> data_;
};

int64_t shape_numel(const std::vector<int64_t>& dims);

// Tensor container file ("CDT1"): magic, rank and dims as u64 LE, then the
// row-major float32 payload. Round-trips bit-exactly.
void save_tensor(const std::string& path, const Tensor& t);
Tensor load_tensor(const std::string& path);

} // namespace casdm
