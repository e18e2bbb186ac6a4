#pragma once

#include <string>
#include <vector>

#include "casdm/params.hpp"
#include "casdm/rng.hpp"
#include "casdm/tape.hpp"

namespace casdm {

// Largest divisor of channels that is <= min(32, channels).
int gn_groups(int channels);

// [N, dim] rows [sin(t*f_0)..sin(t*f_{h-1}), cos(t*f_0)..cos(t*f_{h-1})]
// with h = dim/2 and f_j = 10000^(-j/(h-1)). dim must be even and >= 4.
Tensor sinusoidal_embedding(const std::vector<int>& ts, int dim);

struct NetworkSpec {
    int image_size = 8;
    int image_channels = 1;
    int channels = 32; // base width; level l runs at channels << l
    int blocks = 2;    // residual blocks per level
    int levels = 2;    // resolution levels (levels-1 halvings)
    int time_dim = 128;
    bool attention = false; // accepted only as false
};

// Layer descriptors: shapes plus a parameter path prefix. init() registers
// freshly initialised tensors in a ParamStore; operator() replays the layer
// on a tape against whatever that store currently holds.
struct Conv2d {
    std::string path;
    int kh = 3, kw = 3, ci = 0, co = 0;
    bool zero_init = false;

    void init(ParamStore& ps, Rng& rng) const;
    Var operator()(Tape& tp, const ParamStore& ps, Var x) const;
};

struct Linear {
    std::string path;
    int in = 0, out = 0;

    void init(ParamStore& ps, Rng& rng) const;
    Var operator()(Tape& tp, const ParamStore& ps, Var x) const;
};

struct GroupNorm {
    std::string path;
    int ch = 0;

    void init(ParamStore& ps) const;
    Var operator()(Tape& tp, const ParamStore& ps, Var x) const;
};

// conv(silu(gn(x))), add projected time embedding, conv(silu(gn(.))),
// plus an identity skip (1x1 conv when the channel count changes).
struct ResBlock {
    ResBlock() = default;
    ResBlock(const std::string& path, int ci, int co, int emb_dim);

    void init(ParamStore& ps, Rng& rng) const;
    Var operator()(Tape& tp, const ParamStore& ps, Var x, Var emb) const;

    int ci = 0, co = 0;
    GroupNorm gn1, gn2;
    Conv2d conv1, conv2, skip;
    Linear emb_proj;
    bool projected_skip = false;
};

// Sinusoidal features -> linear -> silu -> linear, shared by every ResBlock
// of one network. Each network owns its embedding; nothing is shared across
// networks.
struct TimeEmbed {
    TimeEmbed() = default;
    TimeEmbed(const std::string& path, int sin_dim, int out_dim);

    void init(ParamStore& ps, Rng& rng) const;
    Var operator()(Tape& tp, const ParamStore& ps, const std::vector<int>& ts) const;

    int sin_dim = 0, out_dim = 0;
    Linear l1, l2;
};

// Small U-Net: in_conv, per-level ResBlocks with average-pool halvings on the
// way down, one mid block, nearest-neighbour upsampling with skip concats on
// the way up, then gn/silu/out_conv. The final conv is zero-initialised so an
// untrained network emits zeros.
class UNetLite {
public:
    UNetLite() = default;
    UNetLite(const std::string& prefix, const NetworkSpec& spec, int in_ch, int out_ch);

    void init(ParamStore& ps, Rng& rng) const;
    // x [N,H,W,in_ch] with H = W = spec.image_size; ts holds one timestep per
    // batch row. Returns [N,H,W,out_ch].
    Var forward(Tape& tp, const ParamStore& ps, Var x, const std::vector<int>& ts) const;

    int in_channels() const { return in_ch_; }
    int out_channels() const { return out_ch_; }

private:
    NetworkSpec spec_;
    int in_ch_ = 0, out_ch_ = 0;
    TimeEmbed temb_;
    Conv2d in_conv_, out_conv_;
    GroupNorm out_norm_;
    std::vector<std::vector<ResBlock>> down_; // [level][block]
    ResBlock mid_;
    std::vector<std::vector<ResBlock>> up_; // [levels-1][block], deepest first
};

// Constant-resolution CNN: in_conv, `blocks` ResBlocks at the base width with
// time conditioning, gn/silu/out_conv (zero-initialised). No pooling or
// upsampling anywhere; spec.levels is ignored.
class FixResCNN {
public:
    FixResCNN() = default;
    FixResCNN(const std::string& prefix, const NetworkSpec& spec, int in_ch, int out_ch);

    void init(ParamStore& ps, Rng& rng) const;
    Var forward(Tape& tp, const ParamStore& ps, Var x, const std::vector<int>& ts) const;

    int in_channels() const { return in_ch_; }
    int out_channels() const { return out_ch_; }

private:
    NetworkSpec spec_;
    int in_ch_ = 0, out_ch_ = 0;
    TimeEmbed temb_;
    Conv2d in_conv_, out_conv_;
    GroupNorm out_norm_;
    std::vector<ResBlock> body_;
};

} // namespace casdm
