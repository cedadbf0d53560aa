#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gradseg/rng.hpp"
#include "gradseg/volume.hpp"

namespace gradseg {

/// Channel-major activation tensor (c planes of nx*ny*nz, x fastest) with a
/// gradient buffer of identical shape.
struct Tensor4 {
    int c = 0, nx = 0, ny = 0, nz = 0;
    std::vector<float> v;
    std::vector<float> g;

    Tensor4() = default;
    Tensor4(int c_, int nx_, int ny_, int nz_) { resize(c_, nx_, ny_, nz_); }

    void resize(int c_, int nx_, int ny_, int nz_) {
        c = c_;
        nx = nx_;
        ny = ny_;
        nz = nz_;
        v.assign(size(), 0.0f);
        g.assign(size(), 0.0f);
    }
    std::size_t spatial() const {
        return static_cast<std::size_t>(nx) * ny * nz;
    }
    std::size_t size() const { return spatial() * c; }
    void zero_grad() { std::fill(g.begin(), g.end(), 0.0f); }

    float* channel(int ci) { return v.data() + ci * spatial(); }
    const float* channel(int ci) const { return v.data() + ci * spatial(); }
    float* channel_grad(int ci) { return g.data() + ci * spatial(); }
    const float* channel_grad(int ci) const { return g.data() + ci * spatial(); }
};

namespace nn {

/// 3x3x3 (or 1x1x1) convolution, stride 1, zero padding, with stored weight
/// gradients. Forward/backward loops are deterministic for any thread count.
struct Conv {
    int cin = 0, cout = 0, kernel = 3;  // kernel in {1, 3}
    std::vector<float> w;  // [cout][cin][k^3]
    std::vector<float> b;  // [cout]
    std::vector<float> wg, bg;

    void init(int cin_, int cout_, int kernel_, Rng& rng);
    void forward(const Tensor4& x, Tensor4& y) const;
    /// Reads y.g; accumulates into x.g, wg, bg.
    void backward(Tensor4& x, const Tensor4& y);
    void zero_grad();
    std::size_t param_count() const { return w.size() + b.size(); }

private:
    mutable std::vector<float> scratch_;  // padded-input buffer, reused across calls
};

/// Per-channel instance normalization without affine parameters.
/// Constant channels normalize to zero.
struct InstanceNorm {
    double eps = 1e-5;
    std::vector<double> inv_std;  // saved by forward, per channel

    void forward(const Tensor4& x, Tensor4& y);
    void backward(Tensor4& x, const Tensor4& y) const;  // y holds normalized values
};

void relu_forward(const Tensor4& x, Tensor4& y);
void relu_backward(Tensor4& x, const Tensor4& y);  // accumulates into x.g

void sigmoid_forward(const Tensor4& x, Tensor4& y);
void sigmoid_backward(Tensor4& x, const Tensor4& y);  // uses y.v, accumulates x.g

/// y = a ⊙ b (elementwise, same shape).
void hadamard_forward(const Tensor4& a, const Tensor4& b, Tensor4& y);
void hadamard_backward(Tensor4& a, Tensor4& b, const Tensor4& y);

/// 2x2x2 average pooling (dims must be even).
void avg_pool2_forward(const Tensor4& x, Tensor4& y);
void avg_pool2_backward(Tensor4& x, const Tensor4& y);

/// Integer-factor nearest-neighbor upsampling.
void upsample_nearest_forward(const Tensor4& x, int scale, Tensor4& y);
void upsample_nearest_backward(Tensor4& x, int scale, const Tensor4& y);

/// Integer-factor trilinear upsampling (half-voxel aligned, clamped edges).
void upsample_trilinear_forward(const Tensor4& x, int scale, Tensor4& y);
void upsample_trilinear_backward(Tensor4& x, int scale, const Tensor4& y);

}  // namespace nn

enum class BlockRole { Plain, Down, Up };

struct BlockSpec {
    int in_channels = 0;
    int out_channels = 0;
    int attention_stages = 2;  // 1 or 2 cascaded spatial-attention stages
    BlockRole role = BlockRole::Plain;
    int skip_from = -1;  // encoder block concatenated after upsampling (Up only)
    int group = 0;
    bool pyramid = true;   // contributes f_g to its group's feature pyramid
    int conv_kernel = 3;
    bool normalize = true;  // instance normalization after the main conv
};

struct NetSpec {
    std::vector<BlockSpec> blocks;
    int input_channels = 1;
    int pyramid_channels = 2;
    double dropout_p = 0.0;          // SpatialDropout probability p_d
    bool trilinear_pyramid = false;  // f_g upsampling mode; nearest by default

    int group_count() const;
    std::vector<int> block_scales() const;  // resolution divisor per block
    int decoder_start() const;              // index of the first Up block (or size())
    std::vector<std::vector<int>> pyramid_members() const;  // per group
    int prediction_group() const;                           // group of the last block
    bool group_is_decoder_side(int gid) const;
    void validate() const;

    /// Ten-block encoder/decoder with channels 4/8/16 for 32^3 patches.
    static NetSpec desk_default();
    /// Four-block toy for 16^3 inputs, used by gradient checks.
    static NetSpec toy();
};

enum class SupervisionKind { Final, Deep, PerBlock, Groups };
enum class GroupMode { Successive, Cross };

struct SupervisionScheme {
    SupervisionKind kind = SupervisionKind::Groups;
    int k = 2;
    GroupMode mode = GroupMode::Successive;
    double alpha_e = 0.1;  // loss alpha for encoder-side groups
    double alpha_d = 0.1;  // loss alpha for decoder-side groups

    static SupervisionScheme parse(const std::string& text, double alpha_e, double alpha_d);
    std::string name() const;
};

/// Rewrites the group partition (and pyramid membership) of a NetSpec.
void apply_scheme(NetSpec& spec, const SupervisionScheme& scheme);

/// Per-group channel keep masks for SpatialDropout.
struct DropoutPlan {
    double p = 0.0;
    std::vector<std::vector<std::uint8_t>> keep;  // [group][concat channel]
};

/// The differentiable model. A Net instance is exclusively owned during
/// forward/backward; distinct instances are independent.
class Net {
public:
    Net(NetSpec spec, std::uint64_t seed);
    ~Net();
    Net(Net&&) noexcept;
    Net& operator=(Net&&) noexcept;
    Net(const Net&);
    Net& operator=(const Net&);

    const NetSpec& spec() const { return spec_; }

    /// Draws channel keep masks for one training step.
    DropoutPlan draw_dropout(Rng& rng) const;

    /// Runs the full forward pass. `dropout` enables training-mode
    /// SpatialDropout with the given masks; null means inference.
    /// `only_final_head` skips the pyramid paths of non-final groups.
    void forward(const Tensor4& input, const DropoutPlan* dropout = nullptr,
                 bool only_final_head = false);

    int group_count() const { return spec_.group_count(); }
    /// Group probability map (full resolution, single channel). Seed its .g
    /// with dL/dP before calling backward().
    Tensor4& group_prediction(int gid);
    const Tensor4& prediction() const;  // final group's P

    /// Backpropagates from the seeded group-prediction gradients down to
    /// parameter and input gradients. Requires a prior forward().
    void backward();

    void zero_grad();

    struct Param {
        std::string name;
        std::vector<float>* value;
        std::vector<float>* grad;
    };
    std::vector<Param> parameters();

    /// Block output activations f_b (values + gradients) for probes.
    const Tensor4& block_output(int i) const;
    int block_count() const { return static_cast<int>(spec_.blocks.size()); }

    void save(const std::filesystem::path& path) const;
    static Net load(const std::filesystem::path& path);

private:
    struct BlockState;
    struct GroupState;

    void block_forward(int i, const Tensor4& input);
    void block_backward(int i, Tensor4& input);

    NetSpec spec_;
    std::vector<int> scales_;
    std::vector<BlockState> blocks_;
    std::vector<GroupState> groups_;
    Tensor4 input_copy_;
    bool have_forward_ = false;
    bool only_final_head_ = false;
};

/// Normalized attention maps per block: O = sum_c |f_c| / max, G likewise on
/// the gradient buffers. Zero layers map to all-zero.
struct AttentionMaps {
    std::vector<Volume> output;    // O^m per block
    std::vector<Volume> gradient;  // G^m per block
};
AttentionMaps attention_probe(const Net& net, const Spacing& spacing);

/// Backward propagation of a seeded loss-gradient field through a stack of
/// identical linear 3x3x3 kernels. Foreground voxels start at -seed_ratio,
/// background at +1 (union-loss sign structure). Reports, after each layer,
/// the |mean| foreground / background magnitude ratio and the
/// foreground-attributable gradient reaching background voxels adjacent to
/// the structure (relative to the far-background level).
struct ProbeTrace {
    std::vector<double> fg_bg_ratio;     // [0..layers]
    std::vector<double> near_bg_influx;  // [0..layers]
};
ProbeTrace erosion_dilation_probe(const Volume& fg_template, double seed_ratio, int layers,
                                  const std::array<float, 27>* kernel = nullptr);

}  // namespace gradseg
