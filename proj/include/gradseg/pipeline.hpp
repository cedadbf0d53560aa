#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "gradseg/losses.hpp"
#include "gradseg/metrics.hpp"
#include "gradseg/net.hpp"
#include "gradseg/phantom.hpp"
#include "gradseg/rng.hpp"
#include "gradseg/skeleton.hpp"
#include "gradseg/volume.hpp"

namespace gradseg {

/// One training case with everything the sampler and losses need
/// precomputed: the ground-truth centerline (taken from the graph paths)
/// and the normalized centerline-distance field used to build
/// distance-decay weight maps for any (m, r_d).
struct TrainingVolume {
    Volume image;
    Volume mask;
    CenterlineGraph graph;
    std::vector<Voxel> centerline;
    std::vector<float> dist_norm;  // d_i/d_max on foreground, 0 elsewhere
};

TrainingVolume make_training_volume(Volume image, Volume mask, CenterlineGraph graph);

struct Dataset {
    std::vector<TrainingVolume> train;
    std::vector<TrainingVolume> test;
};

struct SamplerConfig {
    Dims patch{32, 32, 32};
    double p_hard = 0.5;  // probability of hard skeleton sampling (p_s)
    int patches_per_volume = 8;
};

struct PatchProvenance {
    bool hard_mode = false;
    Voxel target;  // skeleton voxel the patch was positioned around
    Voxel origin;  // patch corner in volume coordinates
};

/// Chooses a patch origin. With probability p_hard and a nonempty hard set,
/// the patch is positioned uniformly among placements containing a randomly
/// chosen hard skeleton voxel; otherwise the patch centers on a uniformly
/// chosen skeleton voxel (clamped into bounds).
PatchProvenance sample_patch(const TrainingVolume& vol, const std::vector<Voxel>& hard_set,
                             const SamplerConfig& cfg, Rng& rng);

Volume crop_volume(const Volume& v, const Voxel& origin, Dims patch);

/// Centerline voxels the model currently misses: prediction < 0.5 at the
/// voxel after sliding-window inference.
std::vector<Voxel> refresh_hard_set(Net& net, const TrainingVolume& vol, Dims patch, Dims stride);

/// Random rotation about the z axis through the patch center, intensity
/// resampled trilinearly (zero beyond the edges), mask resampled then
/// binarized at `threshold`. angle_lo == angle_hi pins the rotation.
struct RotatedPatch {
    Volume image;
    Volume mask;
    double angle_deg = 0.0;
};
RotatedPatch augment_rotate(const Volume& image, const Volume& mask, double angle_lo_deg,
                            double angle_hi_deg, double threshold, Rng& rng);

/// Rotates an auxiliary scalar field with the same transform (trilinear).
Volume rotate_field(const Volume& field, double angle_deg);

/// Weight map from a cropped normalized-distance field: w = 1 - m*dn^r_d on
/// mask foreground, 1 elsewhere.
WeightMap weights_from_distance(const Volume& mask, const Volume& dist_norm, double m, double r_d);

/// Per-group supervision target.
struct GroupLossSpec {
    LossKind kind = LossKind::GeneralUnion;
    LossConfig cfg;
    const WeightMap* weights = nullptr;  // required by weighted kinds
    double weight = 1.0;                 // contribution to the total objective
};

struct ForwardBackwardResult {
    std::vector<double> group_losses;
    double total = 0.0;
};

/// One optimization step's worth of gradients: forward, per-group losses on
/// the group predictions, seeded backward. Parameter gradients are zeroed
/// first.
ForwardBackwardResult forward_backward(Net& net, const Tensor4& input, const Volume& gt,
                                       const std::vector<GroupLossSpec>& groups,
                                       const DropoutPlan* dropout);

/// SGD with momentum and decoupled-from-nothing classic weight decay
/// (v = mu*v + g + wd*w; w -= lr*v).
class Sgd {
public:
    Sgd(double momentum, double weight_decay) : momentum_(momentum), weight_decay_(weight_decay) {}
    void step(std::vector<Net::Param> params, double lr);

private:
    double momentum_, weight_decay_;
    std::vector<std::vector<float>> velocity_;
};

struct StageConfig {
    int epochs = 30;
    double lr = 0.01;
    std::vector<int> lr_drop_epochs;  // 1-based epochs where lr is divided by 10
    LossKind loss = LossKind::GeneralUnion;
    double alpha_e = 0.1;
    double alpha_d = 0.1;
    double root = 0.7;           // r_l
    double distance_root = 0.5;  // r_d
    double epsilon = 1e-4;
    double aug_threshold = 0.7;
    double aug_angle_deg = 15.0;
    bool augment = true;
};

struct TrainConfig {
    std::vector<StageConfig> stages;
    SamplerConfig sampler;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    std::uint64_t seed = 1;
    int hard_refresh_every = 10;  // epochs
    int validate_every = 5;       // epochs; validation always runs on the last epoch
    Dims predict_patch{32, 32, 32};
    Dims predict_stride{16, 16, 16};
    double tau_b = 0.8;

    /// Two-stage schedule with the published hyperparameters, shrunk to
    /// desk scale (30+10 epochs, drops at 18/27 and 5/8).
    static TrainConfig desk_default();
};

struct ValidationRow {
    double dsc = 0.0;
    double precision = 0.0;
    double length_detected = 0.0;
    double branch_detected = 0.0;
    double thin_length_detected = 0.0;  // smallest populated diameter stratum
};

struct EpochTrace {
    int epoch = 0;  // global, 1-based
    int stage = 0;
    double lr = 0.0;
    std::vector<double> group_losses;  // mean over the epoch's patches
    std::optional<ValidationRow> validation;
};

struct TrainResult {
    Net net;
    std::vector<EpochTrace> trace;
};

/// Multi-stage training. Fully deterministic given (spec, scheme, dataset,
/// cfg): every patch's RNG derives from (seed, stage, epoch, volume, patch).
/// A non-finite loss aborts with a checkpoint dump next to `dump_prefix`.
TrainResult train(const NetSpec& spec, const SupervisionScheme& scheme, const Dataset& data,
                  const TrainConfig& cfg, const std::filesystem::path& dump_prefix = {});

enum class Aggregate { Mean, Max };

/// Sliding-window inference covering the whole volume; overlapping window
/// probabilities are averaged (or maxed).
Volume predict(Net& net, const Volume& volume, Dims patch, Dims stride,
               Aggregate agg = Aggregate::Mean);

/// Threshold at 0.5 and keep the largest connected component.
Volume finalize_mask(const Volume& prob);

/// Intensity patch normalization applied before the net (values / 255).
Tensor4 to_input_tensor(const Volume& intensity_patch);

void write_trace_csv(const std::vector<EpochTrace>& trace, const std::filesystem::path& path);

}  // namespace gradseg
