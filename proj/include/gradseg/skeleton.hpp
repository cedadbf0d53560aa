#pragma once

#include <compare>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "gradseg/volume.hpp"
#include "gradseg/weights.hpp"

namespace gradseg {

struct Voxel {
    int x = 0, y = 0, z = 0;
    auto operator<=>(const Voxel&) const = default;
};

/// One-voxel-thick medial representation of a binary mask.
struct Skeleton {
    Dims dims;
    Spacing spacing;
    std::vector<Voxel> voxels;  // raster order (z, then y, then x)

    Volume as_mask() const;
    std::vector<std::uint8_t> flags() const;  // flat 0/1 lookup
};

enum class NodeKind { Endpoint, Bifurcation, Isolated };

const char* to_string(NodeKind kind);
NodeKind node_kind_from_string(const std::string& s);

struct GraphNode {
    int id = 0;
    Voxel pos;
    NodeKind kind = NodeKind::Endpoint;
};

struct GraphBranch {
    int id = 0;
    int node_a = -1, node_b = -1;
    std::vector<Voxel> path;   // ordered, includes the terminal node voxels
    double length_mm = 0.0;    // polyline length of `path` under physical spacing
    double diameter_mm = 0.0;  // mean lumen diameter; 0 until populated
};

struct CenterlineGraph {
    Dims dims;
    Spacing spacing;
    std::vector<GraphNode> nodes;
    std::vector<GraphBranch> branches;

    double total_length_mm() const;
};

/// 3D binary thinning to a centerline skeleton. Preserves topology
/// (26-connectivity foreground, 6-connectivity background) and curve
/// endpoints; deletion order is a fixed raster scan per border direction,
/// so the result is deterministic. Throws on an empty mask.
Skeleton thin(const Volume& mask);

/// Decomposes a skeleton into nodes and branches. Voxels with one skeleton
/// neighbor become endpoints, voxels with three or more become bifurcations
/// (mutually adjacent bifurcation voxels merge into one junction node), and
/// chains of two-neighbor voxels become branch paths.
CenterlineGraph parse_tree(const Skeleton& sk);

/// Distance-based loss weights: w = 1 - m*(d/d_max)^r_d on foreground,
/// w = 1 on background, with d the exact Euclidean distance (mm) to the
/// nearest skeleton voxel. d_max is taken over the whole volume, or per
/// 26-connected mask component when `per_component` is set.
WeightMap distance_weights(const Volume& mask, const Skeleton& sk, double m, double r_d,
                           bool per_component = false);

/// Fills per-branch mean diameter: 2x the mean distance-to-background (mm)
/// over each branch's centerline voxels.
CenterlineGraph branch_diameters(CenterlineGraph graph, const Volume& mask);

/// Exact squared Euclidean distance transform (mm^2) to the nearest seed
/// voxel, anisotropic spacing supported. seeds[i] != 0 marks a seed.
std::vector<double> squared_distance_field(Dims dims, Spacing spacing,
                                           const std::vector<std::uint8_t>& seeds);

/// Feature-transform companion: exact squared distance plus the id of the
/// winning seed. seed_ids[i] >= 0 marks a seed carrying that id; -1 marks
/// free space.
struct FeatureField {
    std::vector<double> d2;
    std::vector<std::int32_t> id;
};
FeatureField nearest_seed_field(Dims dims, Spacing spacing,
                                const std::vector<std::int32_t>& seed_ids);

/// Euler characteristic of the cubical complex spanned by foreground
/// voxels (V - E + F - C). Used to verify that thinning introduces no
/// cavities or tunnels.
long long euler_characteristic(const Volume& mask);

void write_skeleton(const Skeleton& sk, const std::filesystem::path& path);
Skeleton read_skeleton(const std::filesystem::path& path);
void write_graph(const CenterlineGraph& g, const std::filesystem::path& path);
CenterlineGraph read_graph(const std::filesystem::path& path);

}  // namespace gradseg
