#include "gradseg/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <queue>
#include <stdexcept>

#include "gradseg/rng.hpp"

namespace gradseg {

namespace {

struct Vec3 {
    double x = 0.0, y = 0.0, z = 0.0;

    Vec3 operator+(const Vec3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Vec3 operator-(const Vec3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Vec3 operator*(double s) const { return {x * s, y * s, z * s}; }
    double dot(const Vec3& o) const { return x * o.x + y * o.y + z * o.z; }
    double norm() const { return std::sqrt(dot(*this)); }
    Vec3 normalized() const {
        const double n = norm();
        return {x / n, y / n, z / n};
    }
    Vec3 cross(const Vec3& o) const {
        return {y * o.z - z * o.y, z * o.x - x * o.z, x * o.y - y * o.x};
    }
};

// Rodrigues rotation of v around unit axis k.
Vec3 rotate(const Vec3& v, const Vec3& k, double angle_rad) {
    const double c = std::cos(angle_rad), s = std::sin(angle_rad);
    return v * c + k.cross(v) * s + k * (k.dot(v) * (1.0 - c));
}

struct Capsule {
    Vec3 a, b;      // segment endpoints, mm
    double radius;  // mm
    int branch_id;
    int generation;
};

double point_segment_dist2(const Vec3& p, const Vec3& a, const Vec3& b) {
    const Vec3 ab = b - a;
    const double len2 = ab.dot(ab);
    double t = len2 > 0.0 ? (p - a).dot(ab) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    const Vec3 q = a + ab * t;
    return (p - q).dot(p - q);
}

// 26-connected voxel line between two voxels (3D DDA on the dominant axis).
std::vector<Voxel> voxel_line(const Voxel& a, const Voxel& b) {
    std::vector<Voxel> path;
    const int dx = b.x - a.x, dy = b.y - a.y, dz = b.z - a.z;
    const int steps = std::max({std::abs(dx), std::abs(dy), std::abs(dz)});
    if (steps == 0) return {a};
    path.reserve(steps + 1);
    for (int i = 0; i <= steps; ++i) {
        const double t = static_cast<double>(i) / steps;
        path.push_back({a.x + static_cast<int>(std::lround(dx * t)),
                        a.y + static_cast<int>(std::lround(dy * t)),
                        a.z + static_cast<int>(std::lround(dz * t))});
    }
    path.erase(std::unique(path.begin(), path.end()), path.end());
    return path;
}

}  // namespace

void PhantomSpec::validate() const {
    if (depth < 1) throw std::invalid_argument("phantom depth must be >= 1");
    if (!(root_radius_mm > 0.0)) throw std::invalid_argument("root radius must be positive");
    if (!(radius_decay > 0.0 && radius_decay <= 1.0))
        throw std::invalid_argument("radius decay must be in (0,1]");
    if (!(segment_length_mm > 0.0)) throw std::invalid_argument("segment length must be positive");
    if (!(length_decay > 0.0 && length_decay <= 1.0))
        throw std::invalid_argument("length decay must be in (0,1]");
    if (dims.nx < 1 || dims.ny < 1 || dims.nz < 1)
        throw std::invalid_argument("phantom dims must be >= 1");
    const double max_spacing = std::max({spacing.sx, spacing.sy, spacing.sz});
    const double leaf_radius = root_radius_mm * std::pow(radius_decay, depth - 1);
    if (leaf_radius < 0.5 * max_spacing)
        throw std::invalid_argument("deepest-generation radius is not representable");
}

PhantomSample generate(const PhantomSpec& spec) {
    spec.validate();
    Rng rng(derive_seed(spec.seed, 0x9e3779b9));

    const double size_x = spec.dims.nx * spec.spacing.sx;
    const double size_y = spec.dims.ny * spec.spacing.sy;
    const double size_z = spec.dims.nz * spec.spacing.sz;

    struct PendingBranch {
        Vec3 start, dir;
        int generation;
        int parent_node;
    };

    std::vector<Capsule> capsules;
    CenterlineGraph graph;
    graph.dims = spec.dims;
    graph.spacing = spec.spacing;

    auto to_voxel = [&](const Vec3& p) {
        return Voxel{static_cast<int>(std::lround(p.x / spec.spacing.sx - 0.5)),
                     static_cast<int>(std::lround(p.y / spec.spacing.sy - 0.5)),
                     static_cast<int>(std::lround(p.z / spec.spacing.sz - 0.5))};
    };

    const Vec3 root_start{size_x / 2.0, size_y / 2.0,
                          std::min(4.0 * spec.spacing.sz, size_z / 8.0) + spec.root_radius_mm};
    graph.nodes.push_back({0, to_voxel(root_start), NodeKind::Endpoint});

    std::queue<PendingBranch> pending;
    pending.push({root_start, Vec3{0.0, 0.0, 1.0}, 0, 0});

    const double angle = spec.branch_angle_deg * std::numbers::pi / 180.0;
    const double jitter = spec.angle_jitter_deg * std::numbers::pi / 180.0;

    while (!pending.empty()) {
        const PendingBranch pb = pending.front();
        pending.pop();

        const double radius = spec.root_radius_mm * std::pow(spec.radius_decay, pb.generation);
        const double length = spec.segment_length_mm * std::pow(spec.length_decay, pb.generation);
        const Vec3 end = pb.start + pb.dir * length;

        const double margin = radius + 0.5 * std::max({spec.spacing.sx, spec.spacing.sy, spec.spacing.sz});
        if (end.x < margin || end.x > size_x - margin || end.y < margin ||
            end.y > size_y - margin || end.z < margin || end.z > size_z - margin)
            throw std::invalid_argument("tree exits volume bounds");

        const int branch_id = static_cast<int>(graph.branches.size());
        const int end_node = static_cast<int>(graph.nodes.size());

        GraphBranch b;
        b.id = branch_id;
        b.node_a = pb.parent_node;
        b.node_b = end_node;
        b.path = voxel_line(graph.nodes[pb.parent_node].pos, to_voxel(end));
        double plen = 0.0;
        for (std::size_t i = 1; i < b.path.size(); ++i) {
            const double ddx = (b.path[i].x - b.path[i - 1].x) * spec.spacing.sx;
            const double ddy = (b.path[i].y - b.path[i - 1].y) * spec.spacing.sy;
            const double ddz = (b.path[i].z - b.path[i - 1].z) * spec.spacing.sz;
            plen += std::sqrt(ddx * ddx + ddy * ddy + ddz * ddz);
        }
        b.length_mm = plen;
        b.diameter_mm = 2.0 * radius;
        graph.branches.push_back(std::move(b));

        capsules.push_back({pb.start, end, radius, branch_id, pb.generation});

        const bool is_leaf = pb.generation + 1 >= spec.depth;
        graph.nodes.push_back(
            {end_node, to_voxel(end), is_leaf ? NodeKind::Endpoint : NodeKind::Bifurcation});

        if (!is_leaf) {
            // Branching plane orientation is drawn per bifurcation; the two
            // children tilt to either side with independent jitter.
            const Vec3 d = pb.dir.normalized();
            Vec3 ref = std::abs(d.z) < 0.9 ? Vec3{0.0, 0.0, 1.0} : Vec3{1.0, 0.0, 0.0};
            Vec3 u = d.cross(ref).normalized();
            const double azimuth = rng.uniform(0.0, 2.0 * std::numbers::pi);
            u = rotate(u, d, azimuth);
            for (int side = 0; side < 2; ++side) {
                const double theta =
                    (side == 0 ? 1.0 : -1.0) * (angle + rng.uniform(-jitter, jitter));
                const Vec3 cd = rotate(d, u, theta).normalized();
                pending.push({end, cd, pb.generation + 1, end_node});
            }
        }
    }

    // Rasterize the capsule union over per-capsule bounding boxes.
    Volume mask(spec.dims, spec.spacing, ElementKind::Binary);
    for (const Capsule& c : capsules) {
        const double r = c.radius;
        const int x0 = std::max(0, static_cast<int>(std::floor((std::min(c.a.x, c.b.x) - r) / spec.spacing.sx)) - 1);
        const int x1 = std::min(spec.dims.nx - 1, static_cast<int>(std::ceil((std::max(c.a.x, c.b.x) + r) / spec.spacing.sx)) + 1);
        const int y0 = std::max(0, static_cast<int>(std::floor((std::min(c.a.y, c.b.y) - r) / spec.spacing.sy)) - 1);
        const int y1 = std::min(spec.dims.ny - 1, static_cast<int>(std::ceil((std::max(c.a.y, c.b.y) + r) / spec.spacing.sy)) + 1);
        const int z0 = std::max(0, static_cast<int>(std::floor((std::min(c.a.z, c.b.z) - r) / spec.spacing.sz)) - 1);
        const int z1 = std::min(spec.dims.nz - 1, static_cast<int>(std::ceil((std::max(c.a.z, c.b.z) + r) / spec.spacing.sz)) + 1);
        const double r2 = r * r;
        for (int z = z0; z <= z1; ++z)
            for (int y = y0; y <= y1; ++y)
                for (int x = x0; x <= x1; ++x) {
                    const Vec3 p{(x + 0.5) * spec.spacing.sx, (y + 0.5) * spec.spacing.sy,
                                 (z + 0.5) * spec.spacing.sz};
                    if (point_segment_dist2(p, c.a, c.b) <= r2) mask.at(x, y, z) = 1.0f;
                }
    }

    // Intensity: noisy background, bright wall shell around the lumen,
    // dark constant lumen.
    Volume image(spec.dims, spec.spacing, ElementKind::Intensity);
    Rng noise(derive_seed(spec.seed, 0x51a9e));
    for (std::size_t i = 0; i < image.size(); ++i)
        image.data[i] =
            static_cast<float>(noise.normal(spec.intensity.background, spec.intensity.noise_sigma));

    std::vector<std::uint8_t> fg(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) fg[i] = mask.data[i] != 0.0f;
    const auto d2 = squared_distance_field(spec.dims, spec.spacing, fg);
    const double wall2 = spec.intensity.wall_thickness_mm * spec.intensity.wall_thickness_mm;
    for (std::size_t i = 0; i < image.size(); ++i) {
        if (mask.data[i] != 0.0f)
            image.data[i] = static_cast<float>(spec.intensity.lumen);
        else if (d2[i] <= wall2)
            image.data[i] = static_cast<float>(spec.intensity.wall);
    }

    return {std::move(image), std::move(mask), std::move(graph)};
}

std::vector<int> branch_generations(const CenterlineGraph& graph) {
    std::vector<int> gen(graph.branches.size(), 0);
    std::vector<int> node_depth(graph.nodes.size(), -1);
    if (graph.nodes.empty()) return gen;

    std::queue<int> q;
    node_depth[0] = 0;
    q.push(0);
    // Branch adjacency by node.
    std::vector<std::vector<int>> incident(graph.nodes.size());
    for (const GraphBranch& b : graph.branches) {
        incident[b.node_a].push_back(b.id);
        incident[b.node_b].push_back(b.id);
    }
    while (!q.empty()) {
        const int n = q.front();
        q.pop();
        for (int bid : incident[n]) {
            const GraphBranch& b = graph.branches[bid];
            const int other = b.node_a == n ? b.node_b : b.node_a;
            if (node_depth[other] < 0) {
                gen[bid] = node_depth[n];
                node_depth[other] = node_depth[n] + 1;
                q.push(other);
            }
        }
    }
    return gen;
}

ImbalanceProfile imbalance_profile(const Volume& mask, const CenterlineGraph& graph) {
    if (mask.kind != ElementKind::Binary)
        throw std::invalid_argument("imbalance_profile expects a binary mask");
    if (mask.dims != graph.dims) throw std::invalid_argument("mask/graph dim mismatch");
    if (graph.branches.empty()) throw std::invalid_argument("imbalance_profile: empty graph");

    const std::vector<int> gen = branch_generations(graph);
    const int max_gen = *std::max_element(gen.begin(), gen.end());

    std::vector<std::int32_t> seeds(mask.size(), -1);
    for (const GraphBranch& b : graph.branches)
        for (const Voxel& v : b.path) {
            auto& slot = seeds[mask.index(v.x, v.y, v.z)];
            if (slot < 0) slot = b.id;
        }
    const FeatureField nearest = nearest_seed_field(mask.dims, mask.spacing, seeds);

    ImbalanceProfile prof;
    prof.generation_share.assign(max_gen + 1, 0.0);
    std::size_t n_fg = 0;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask.data[i] == 0.0f) continue;
        ++n_fg;
        prof.generation_share[gen[nearest.id[i]]] += 1.0;
    }
    prof.foreground_fraction = static_cast<double>(n_fg) / static_cast<double>(mask.size());
    if (n_fg > 0)
        for (double& s : prof.generation_share) s /= static_cast<double>(n_fg);
    return prof;
}

}  // namespace gradseg
