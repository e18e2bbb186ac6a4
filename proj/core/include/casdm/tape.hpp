#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "casdm/params.hpp"
#include "casdm/tensor.hpp"

namespace casdm {

class Tape;

// Handle into a Tape. Cheap to copy; invalid() handles mark outputs a model
// variant does not produce.
struct Var {
    Tape* tape = nullptr;
    int id = -1;
    bool valid() const { return tape != nullptr && id >= 0; }
    const Tensor& val() const;
};

// Result of one backward pass. Nodes with no gradient path from the loss
// have no entry; wrt() materializes exact zeros for them so "unreachable
// means zero" is an API guarantee, not an accident of initialization.
class Gradients {
public:
    bool has(Var v) const;
    const Tensor* maybe(Var v) const;       // nullptr when unreachable
    Tensor wrt(Var v) const;                // zeros when unreachable
    // Per-parameter grads for one store; zeros for parameters the loss does
    // not reach (or that never entered this tape).
    std::map<std::string, Tensor> for_store(const ParamStore& store) const;

private:
    friend class Tape;
    Tensor& buf(int id, const std::vector<int64_t>& dims);
    const Tape* tape_ = nullptr;
    std::vector<Tensor> grads_;
    std::vector<char> has_;
};

// Reverse-mode tape. Records one forward graph, then backward() walks nodes
// in reverse insertion order, which both respects dependencies and makes
// gradient accumulation order deterministic. A tape built with
// grad_enabled = false records values only (sampling path).
//
// Ops validate shapes and throw std::invalid_argument on mismatch.
// Parameter values are copied in at record time, so distinct tapes may run
// concurrently over one read-only ParamStore.
class Tape {
public:
    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var input(Tensor v);
    Var param(const ParamStore& store, const std::string& path);

    // Detach: same value, no parents, never requires grad. Anything reachable
    // from the loss only through this node gets an exactly-zero gradient.
    Var stop_gradient(Var x);

    Var add(Var a, Var b);
    Var sub(Var a, Var b);
    Var mul(Var a, Var b);
    Var scale(Var x, float a);
    Var add_scalar(Var x, float c);
    Var affine2(float a, Var x, float b, Var y);
    Var recover_x0(Var xt, Var eps, float b, float inva);
    Var mix(Var r, Var a, Var b); // r elementwise or trailing-dim-1 broadcast
    Var concat_c(Var a, Var b);
    Var slice_c(Var x, int64_t c0, int64_t c1); // [c0, c1)
    Var conv2d(Var x, Var w, Var b);            // stride 1, same padding
    Var linear(Var x, Var w, Var b);
    Var group_norm(Var x, Var gamma, Var beta, int64_t groups, float eps);
    Var silu(Var x);
    Var sigmoid(Var x);
    Var avg_pool2(Var x);
    Var upsample2_nn(Var x);
    Var bilinear_resize(Var x, int64_t ho, int64_t wo);
    Var channel_unit_norm(Var x, float eps);
    Var add_spatial_bias(Var x, Var b); // x [N,H,W,C], b [N,C]
    Var mse(Var a, Var b);              // scalar mean squared difference
    Var mean_all(Var x);
    Var sum_all(Var x);

    // loss must be scalar. May be called multiple times on one tape (e.g.
    // the theta loss and the phi loss of a single forward graph).
    Gradients backward(Var loss) const;

    const Tensor& value(Var v) const;
    bool requires_grad(Var v) const;
    int num_nodes() const { return static_cast<int>(nodes_.size()); }

private:
    struct Node {
        Tensor value;
        bool requires_grad = false;
        std::function<void(const Tensor& g, Gradients& gs)> backward;
    };

    Var make(Tensor value, bool requires_grad,
             std::function<void(const Tensor&, Gradients&)> bwd);
    const Tensor& v(int id) const { return nodes_[static_cast<size_t>(id)].value; }
    void check(Var x, const char* op) const;

    std::vector<Node> nodes_;
    std::map<const ParamStore*, std::map<std::string, int>> param_ids_;
    bool grad_enabled_;

    friend class Gradients;
};

} // namespace casdm
