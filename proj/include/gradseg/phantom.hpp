#pragma once

#include <cstdint>
#include <vector>

#include "gradseg/skeleton.hpp"
#include "gradseg/volume.hpp"

namespace gradseg {

struct IntensityModel {
    double lumen = 30.0;
    double wall = 200.0;
    double wall_thickness_mm = 1.5;
    double background = 90.0;
    double noise_sigma = 25.0;
};

/// Branching-tube phantom: a binary tree of capsules (cylinders with
/// hemispherical caps) with per-generation radius and length decay. The
/// rasterized mask, the intensity rendering and the analytic centerline
/// graph are all derived from the same tree, so ground truth is exact.
struct PhantomSpec {
    int depth = 5;                 // generations; 1 = a single segment
    double root_radius_mm = 5.0;
    double radius_decay = 0.62;
    double segment_length_mm = 16.0;
    double length_decay = 0.75;
    double branch_angle_deg = 38.0;
    double angle_jitter_deg = 6.0;  // seeded perturbation per child
    Dims dims{64, 64, 64};
    Spacing spacing{1.0, 1.0, 1.0};
    IntensityModel intensity;
    std::uint64_t seed = 1;

    void validate() const;
};

struct PhantomSample {
    Volume image;           // intensity rendering
    Volume mask;            // binary lumen mask
    CenterlineGraph graph;  // analytic tree; diameters are exact (2*radius)
};

/// Builds the phantom. Throws std::invalid_argument if the spec is invalid
/// or the tree would exit the volume bounds. Same seed, same bytes.
PhantomSample generate(const PhantomSpec& spec);

struct ImbalanceProfile {
    double foreground_fraction = 0.0;
    std::vector<double> generation_share;  // foreground volume share per generation
};

/// Inter-class ratio (foreground/total) and intra-class distribution
/// (share of foreground volume per tree generation). Generations are
/// branch-graph distances from node 0; voxels attribute to their nearest
/// branch.
ImbalanceProfile imbalance_profile(const Volume& mask, const CenterlineGraph& graph);

/// Branch generations via breadth-first traversal from node 0.
std::vector<int> branch_generations(const CenterlineGraph& graph);

}  // namespace gradseg
