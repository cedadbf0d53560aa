#include "gradseg/skeleton.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <set>
#include <sstream>
#include <stdexcept>

#include "gradseg/labeling.hpp"

namespace gradseg {

const char* to_string(NodeKind kind) {
    switch (kind) {
        case NodeKind::Endpoint: return "endpoint";
        case NodeKind::Bifurcation: return "bifurcation";
        case NodeKind::Isolated: return "isolated";
    }
    return "endpoint";
}

NodeKind node_kind_from_string(const std::string& s) {
    if (s == "endpoint") return NodeKind::Endpoint;
    if (s == "bifurcation") return NodeKind::Bifurcation;
    if (s == "isolated") return NodeKind::Isolated;
    throw std::invalid_argument("unknown node kind '" + s + "'");
}

Volume Skeleton::as_mask() const {
    Volume m(dims, spacing, ElementKind::Binary);
    for (const Voxel& v : voxels) m.at(v.x, v.y, v.z) = 1.0f;
    return m;
}

std::vector<std::uint8_t> Skeleton::flags() const {
    std::vector<std::uint8_t> f(dims.voxels(), 0);
    for (const Voxel& v : voxels)
        f[(static_cast<std::size_t>(v.z) * dims.ny + v.y) * dims.nx + v.x] = 1;
    return f;
}

double CenterlineGraph::total_length_mm() const {
    double t = 0.0;
    for (const GraphBranch& b : branches) t += b.length_mm;
    return t;
}

// ---------------------------------------------------------------------------
// Lee et al. 1994 three-dimensional thinning.
//
// Neighborhoods are flattened with dz outermost: index = (dz+1)*9 +
// (dy+1)*3 + (dx+1), center at 13. A foreground point is deletable when it
// is a border point of the current direction, not a curve endpoint,
// Euler-invariant (LUT below), and simple (octree labeling of the
// neighborhood stays one component after removal).
// ---------------------------------------------------------------------------
namespace lee {

constexpr std::array<int, 256> euler_lut() {
    std::array<int, 256> lut{};
    constexpr int odd[128] = {
        1,  -1, -1, 1,  -3, -1, -1, 1,  -1, 1,  1,  -1, 3,  1,  1,  -1, -3, -1, 3,  1,  1, -1,
        3,  1,  -1, 1,  1,  -1, 3,  1,  1,  -1, -3, 3,  -1, 1,  1,  3,  -1, 1,  -1, 1,  1, -1,
        3,  1,  1,  -1, 1,  3,  3,  1,  5,  3,  3,  1,  -1, 1,  1,  -1, 3,  1,  1,  -1, -7, -1,
        -1, 1,  -3, -1, -1, 1,  -1, 1,  1,  -1, 3,  1,  1,  -1, -3, -1, 3,  1,  1,  -1, 3, 1,
        -1, 1,  1,  -1, 3,  1,  1,  -1, -3, 3,  -1, 1,  1,  3,  -1, 1,  -1, 1,  1,  -1, 3, 1,
        1,  -1, 1,  3,  3,  1,  5,  3,  3,  1,  -1, 1,  1,  -1, 3,  1,  1,  -1};
    for (int i = 0; i < 128; ++i) lut[2 * i + 1] = odd[i];
    return lut;
}

// Eight octants; each row lists the 7 neighborhood indices contributing the
// bits 128,64,32,16,8,4,2 of the octant code (bit 1 is the center).
constexpr int octant_bits[8][7] = {
    {24, 25, 15, 16, 21, 22, 12},  // SWU
    {26, 23, 17, 14, 25, 22, 16},  // SEU
    {18, 21, 9, 12, 19, 22, 10},   // NWU
    {20, 23, 19, 22, 11, 14, 10},  // NEU
    {6, 15, 7, 16, 3, 12, 4},      // SWB
    {8, 7, 17, 16, 5, 4, 14},      // SEB
    {0, 9, 3, 12, 1, 10, 4},       // NWB
    {2, 1, 11, 10, 5, 4, 14},      // NEB
};

bool is_euler_invariant(const std::array<std::uint8_t, 27>& nb) {
    static const std::array<int, 256> lut = euler_lut();
    int chi = 0;
    for (const auto& bits : octant_bits) {
        unsigned n = 1;
        unsigned bit = 128;
        for (int idx : bits) {
            if (nb[idx]) n |= bit;
            bit >>= 1;
        }
        chi += lut[n];
    }
    return chi == 0;
}

// Octree adjacency for the simple-point test: per octant, each entry maps a
// 26-neighborhood cube index (center removed) to the octants sharing it.
struct OctreeEntry {
    int cube;
    std::array<int, 3> next;  // 0-terminated octant list
};

constexpr OctreeEntry octree[8][7] = {
    {{0, {0, 0, 0}},
     {1, {2, 0, 0}},
     {3, {3, 0, 0}},
     {4, {2, 3, 4}},
     {9, {5, 0, 0}},
     {10, {2, 5, 6}},
     {12, {3, 5, 7}}},
    {{1, {1, 0, 0}},
     {4, {1, 3, 4}},
     {10, {1, 5, 6}},
     {2, {0, 0, 0}},
     {5, {4, 0, 0}},
     {11, {6, 0, 0}},
     {13, {4, 6, 8}}},
    {{3, {1, 0, 0}},
     {4, {1, 2, 4}},
     {12, {1, 5, 7}},
     {6, {0, 0, 0}},
     {7, {4, 0, 0}},
     {14, {7, 0, 0}},
     {15, {4, 7, 8}}},
    {{4, {1, 2, 3}},
     {5, {2, 0, 0}},
     {13, {2, 6, 8}},
     {7, {3, 0, 0}},
     {15, {3, 7, 8}},
     {8, {0, 0, 0}},
     {16, {8, 0, 0}}},
    {{9, {1, 0, 0}},
     {10, {1, 2, 6}},
     {12, {1, 3, 7}},
     {17, {0, 0, 0}},
     {18, {6, 0, 0}},
     {20, {7, 0, 0}},
     {21, {6, 7, 8}}},
    {{10, {1, 2, 5}},
     {11, {2, 0, 0}},
     {13, {2, 4, 8}},
     {18, {5, 0, 0}},
     {21, {5, 7, 8}},
     {19, {0, 0, 0}},
     {22, {8, 0, 0}}},
    {{12, {1, 3, 5}},
     {14, {3, 0, 0}},
     {15, {3, 4, 8}},
     {20, {5, 0, 0}},
     {21, {5, 6, 8}},
     {23, {0, 0, 0}},
     {24, {8, 0, 0}}},
    {{13, {2, 4, 6}},
     {15, {3, 4, 7}},
     {16, {4, 0, 0}},
     {21, {5, 6, 7}},
     {22, {6, 0, 0}},
     {24, {7, 0, 0}},
     {25, {0, 0, 0}}},
};

void octree_label(int octant, int label, std::array<int, 26>& cube) {
    for (const OctreeEntry& e : octree[octant - 1]) {
        if (cube[e.cube] != 1) continue;
        cube[e.cube] = label;
        for (int nx : e.next) {
            if (nx == 0) break;
            octree_label(nx, label, cube);
        }
    }
}

bool is_simple_point(const std::array<std::uint8_t, 27>& nb) {
    std::array<int, 26> cube;
    for (int i = 0; i < 13; ++i) cube[i] = nb[i];
    for (int i = 14; i < 27; ++i) cube[i - 1] = nb[i];

    // First octant containing each cube position, mirroring the octant
    // decomposition above.
    static constexpr int start_octant[26] = {1, 1, 2, 1, 1, 2, 3, 3, 4, 1, 1, 2, 1,
                                             2, 3, 3, 4, 5, 5, 6, 5, 5, 6, 7, 7, 8};
    int label = 2;
    for (int i = 0; i < 26; ++i) {
        if (cube[i] != 1) continue;
        octree_label(start_octant[i], label, cube);
        ++label;
        if (label - 2 >= 2) return false;
    }
    return true;
}

}  // namespace lee

namespace {

struct Grid {
    int nx, ny, nz;
    std::vector<std::uint8_t> v;

    std::uint8_t get(int x, int y, int z) const {
        if (x < 0 || x >= nx || y < 0 || y >= ny || z < 0 || z >= nz) return 0;
        return v[(static_cast<std::size_t>(z) * ny + y) * nx + x];
    }
    std::uint8_t& ref(int x, int y, int z) {
        return v[(static_cast<std::size_t>(z) * ny + y) * nx + x];
    }

    std::array<std::uint8_t, 27> neighborhood(int x, int y, int z) const {
        std::array<std::uint8_t, 27> nb;
        int n = 0;
        for (int dz = -1; dz <= 1; ++dz)
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx) nb[n++] = get(x + dx, y + dy, z + dz);
        return nb;
    }

    int neighbor_count(int x, int y, int z) const {
        int n = 0;
        for (int dz = -1; dz <= 1; ++dz)
            for (int dy = -1; dy <= 1; ++dy)
                for (int dx = -1; dx <= 1; ++dx)
                    if ((dx | dy | dz) != 0 && get(x + dx, y + dy, z + dz)) ++n;
        return n;
    }
};

// Border directions in a fixed order: N, S, E, W, U, B.
constexpr int border_offsets[6][3] = {{0, -1, 0}, {0, 1, 0},  {1, 0, 0},
                                      {-1, 0, 0}, {0, 0, 1},  {0, 0, -1}};

}  // namespace

Skeleton thin(const Volume& mask) {
    if (mask.kind != ElementKind::Binary)
        throw std::invalid_argument("thin expects a binary volume");
    mask.validate();
    const int nx = mask.dims.nx, ny = mask.dims.ny, nz = mask.dims.nz;

    Grid g{nx, ny, nz, std::vector<std::uint8_t>(mask.size(), 0)};
    bool any = false;
    for (std::size_t i = 0; i < mask.size(); ++i) {
        g.v[i] = mask.data[i] != 0.0f ? 1 : 0;
        any |= g.v[i] != 0;
    }
    if (!any) throw std::invalid_argument("thin: mask is empty");

    std::vector<Voxel> candidates;
    int unchanged_borders = 0;
    while (unchanged_borders < 6) {
        unchanged_borders = 0;
        for (const auto& off : border_offsets) {
            candidates.clear();
            for (int z = 0; z < nz; ++z)
                for (int y = 0; y < ny; ++y)
                    for (int x = 0; x < nx; ++x) {
                        if (!g.get(x, y, z)) continue;
                        if (g.get(x + off[0], y + off[1], z + off[2])) continue;  // not border
                        const int n = g.neighbor_count(x, y, z);
                        if (n <= 1) continue;  // endpoint or isolated
                        const auto nb = g.neighborhood(x, y, z);
                        if (!lee::is_euler_invariant(nb)) continue;
                        if (!lee::is_simple_point(nb)) continue;
                        candidates.push_back({x, y, z});
                    }
            // Sequential re-check: parallel-collected candidates are deleted
            // one by one, restoring any whose removal would now break the
            // local connectivity.
            bool changed = false;
            for (const Voxel& c : candidates) {
                g.ref(c.x, c.y, c.z) = 0;
                if (!lee::is_simple_point(g.neighborhood(c.x, c.y, c.z)))
                    g.ref(c.x, c.y, c.z) = 1;
                else
                    changed = true;
            }
            if (!changed) ++unchanged_borders;
        }
    }

    Skeleton sk;
    sk.dims = mask.dims;
    sk.spacing = mask.spacing;
    for (int z = 0; z < nz; ++z)
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x)
                if (g.get(x, y, z)) sk.voxels.push_back({x, y, z});
    return sk;
}

// ---------------------------------------------------------------------------
// Branch decomposition
// ---------------------------------------------------------------------------
namespace {

constexpr int kNoNode = -1;

std::vector<Voxel> skeleton_neighbors(const Grid& g, const Voxel& v) {
    std::vector<Voxel> out;
    for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) {
                if ((dx | dy | dz) == 0) continue;
                if (g.get(v.x + dx, v.y + dy, v.z + dz)) out.push_back({v.x + dx, v.y + dy, v.z + dz});
            }
    std::sort(out.begin(), out.end(), [](const Voxel& a, const Voxel& b) {
        return std::tie(a.z, a.y, a.x) < std::tie(b.z, b.y, b.x);
    });
    return out;
}

double polyline_length(const std::vector<Voxel>& path, const Spacing& sp) {
    double len = 0.0;
    for (std::size_t i = 1; i < path.size(); ++i) {
        const double dx = (path[i].x - path[i - 1].x) * sp.sx;
        const double dy = (path[i].y - path[i - 1].y) * sp.sy;
        const double dz = (path[i].z - path[i - 1].z) * sp.sz;
        len += std::sqrt(dx * dx + dy * dy + dz * dz);
    }
    return len;
}

}  // namespace

CenterlineGraph parse_tree(const Skeleton& sk) {
    if (sk.voxels.empty()) throw std::invalid_argument("parse_tree: skeleton is empty");
    const int nx = sk.dims.nx, ny = sk.dims.ny, nz = sk.dims.nz;
    Grid g{nx, ny, nz, sk.flags()};

    auto flat = [&](const Voxel& v) {
        return (static_cast<std::size_t>(v.z) * ny + v.y) * nx + v.x;
    };

    std::vector<std::uint8_t> degree(sk.dims.voxels(), 0);
    for (const Voxel& v : sk.voxels)
        degree[flat(v)] = static_cast<std::uint8_t>(g.neighbor_count(v.x, v.y, v.z));

    CenterlineGraph graph;
    graph.dims = sk.dims;
    graph.spacing = sk.spacing;

    std::vector<int> node_of(sk.dims.voxels(), kNoNode);

    // Endpoints and isolated voxels are their own nodes; mutually adjacent
    // bifurcation voxels merge into a single junction node.
    for (const Voxel& v : sk.voxels) {
        const std::uint8_t d = degree[flat(v)];
        if (d == 2 || node_of[flat(v)] != kNoNode) continue;
        if (d == 0 || d == 1) {
            const int id = static_cast<int>(graph.nodes.size());
            node_of[flat(v)] = id;
            graph.nodes.push_back({id, v, d == 0 ? NodeKind::Isolated : NodeKind::Endpoint});
            continue;
        }
        // Flood the cluster of adjacent bifurcation voxels.
        const int id = static_cast<int>(graph.nodes.size());
        std::vector<Voxel> stack{v};
        node_of[flat(v)] = id;
        Voxel rep = v;
        while (!stack.empty()) {
            const Voxel cur = stack.back();
            stack.pop_back();
            if (std::tie(cur.z, cur.y, cur.x) < std::tie(rep.z, rep.y, rep.x)) rep = cur;
            for (const Voxel& nb : skeleton_neighbors(g, cur)) {
                if (degree[flat(nb)] >= 3 && node_of[flat(nb)] == kNoNode) {
                    node_of[flat(nb)] = id;
                    stack.push_back(nb);
                }
            }
        }
        graph.nodes.push_back({id, rep, NodeKind::Bifurcation});
    }

    std::vector<std::uint8_t> visited(sk.dims.voxels(), 0);

    auto add_branch = [&](int na, int nb, std::vector<Voxel> path) {
        GraphBranch b;
        b.id = static_cast<int>(graph.branches.size());
        b.node_a = na;
        b.node_b = nb;
        b.length_mm = polyline_length(path, sk.spacing);
        b.path = std::move(path);
        graph.branches.push_back(std::move(b));
    };

    // Chains of degree-2 voxels between node voxels.
    for (const Voxel& v : sk.voxels) {
        if (node_of[flat(v)] == kNoNode) continue;
        for (const Voxel& first : skeleton_neighbors(g, v)) {
            if (degree[flat(first)] != 2 || visited[flat(first)]) continue;
            std::vector<Voxel> path{v, first};
            visited[flat(first)] = 1;
            Voxel prev = v, cur = first;
            while (true) {
                const auto nbs = skeleton_neighbors(g, cur);
                Voxel next{-1, -1, -1};
                for (const Voxel& nb : nbs)
                    if (nb != prev) { next = nb; break; }
                path.push_back(next);
                if (node_of[flat(next)] != kNoNode) break;
                visited[flat(next)] = 1;
                prev = cur;
                cur = next;
            }
            const int end_node = node_of[flat(path.back())];
            add_branch(node_of[flat(v)], end_node, std::move(path));
        }
    }

    // Direct adjacencies between distinct nodes (no interior chain). Multiple
    // voxel contacts between the same node pair collapse to one branch.
    std::set<std::pair<int, int>> direct_seen;
    for (const Voxel& v : sk.voxels) {
        const int na = node_of[flat(v)];
        if (na == kNoNode) continue;
        for (const Voxel& nb : skeleton_neighbors(g, v)) {
            const int nbid = node_of[flat(nb)];
            if (nbid == kNoNode || nbid == na) continue;
            const auto key = std::minmax(na, nbid);
            if (!direct_seen.insert({key.first, key.second}).second) continue;
            add_branch(na, nbid, {v, nb});
        }
    }

    // Pure cycles: degree-2 components with no node voxel anywhere.
    for (const Voxel& v : sk.voxels) {
        if (degree[flat(v)] != 2 || visited[flat(v)] || node_of[flat(v)] != kNoNode) continue;
        // Check quickly whether this voxel was part of a traced chain; if
        // not, it belongs to an untouched cycle. Create an anchor node.
        const int id = static_cast<int>(graph.nodes.size());
        graph.nodes.push_back({id, v, NodeKind::Bifurcation});
        node_of[flat(v)] = id;
        visited[flat(v)] = 1;
        std::vector<Voxel> path{v};
        Voxel prev = v, cur = skeleton_neighbors(g, v)[0];
        while (cur != v) {
            path.push_back(cur);
            visited[flat(cur)] = 1;
            const auto nbs = skeleton_neighbors(g, cur);
            Voxel next{-1, -1, -1};
            for (const Voxel& nb : nbs)
                if (nb != prev) { next = nb; break; }
            prev = cur;
            cur = next;
        }
        path.push_back(v);
        add_branch(id, id, std::move(path));
    }

    return graph;
}

// ---------------------------------------------------------------------------
// Exact Euclidean distance transform (Felzenszwalb & Huttenlocher), with
// per-axis physical spacing.
// ---------------------------------------------------------------------------
namespace {

constexpr double kFarAway = 1e30;

void edt_pass(std::vector<double>& f, std::vector<double>& d, std::vector<int>& v,
              std::vector<double>& z, int n, double step) {
    const double s2 = step * step;
    int k = 0;
    v[0] = 0;
    z[0] = -std::numeric_limits<double>::infinity();
    z[1] = std::numeric_limits<double>::infinity();
    for (int q = 1; q < n; ++q) {
        double s;
        while (true) {
            const int p = v[k];
            s = ((f[q] + s2 * q * q) - (f[p] + s2 * p * p)) / (2.0 * s2 * (q - p));
            if (s > z[k]) break;
            --k;
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = std::numeric_limits<double>::infinity();
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[k + 1] < q) ++k;
        const double dq = (q - v[k]) * step;
        d[q] = dq * dq + f[v[k]];
    }
}

}  // namespace

std::vector<double> squared_distance_field(Dims dims, Spacing spacing,
                                           const std::vector<std::uint8_t>& seeds) {
    const int nx = dims.nx, ny = dims.ny, nz = dims.nz;
    if (seeds.size() != dims.voxels())
        throw std::invalid_argument("seed mask size mismatch");

    std::vector<double> dist(dims.voxels());
    for (std::size_t i = 0; i < seeds.size(); ++i) dist[i] = seeds[i] ? 0.0 : kFarAway;

    const int nmax = std::max({nx, ny, nz});
    std::vector<double> f(nmax), d(nmax), z(nmax + 1);
    std::vector<int> v(nmax);

    auto at = [&](int x, int y, int z_) -> double& {
        return dist[(static_cast<std::size_t>(z_) * ny + y) * nx + x];
    };

    for (int zz = 0; zz < nz; ++zz)
        for (int y = 0; y < ny; ++y) {
            for (int x = 0; x < nx; ++x) f[x] = at(x, y, zz);
            edt_pass(f, d, v, z, nx, spacing.sx);
            for (int x = 0; x < nx; ++x) at(x, y, zz) = d[x];
        }
    for (int zz = 0; zz < nz; ++zz)
        for (int x = 0; x < nx; ++x) {
            for (int y = 0; y < ny; ++y) f[y] = at(x, y, zz);
            edt_pass(f, d, v, z, ny, spacing.sy);
            for (int y = 0; y < ny; ++y) at(x, y, zz) = d[y];
        }
    for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x) {
            for (int zz = 0; zz < nz; ++zz) f[zz] = at(x, y, zz);
            edt_pass(f, d, v, z, nz, spacing.sz);
            for (int zz = 0; zz < nz; ++zz) at(x, y, zz) = d[zz];
        }
    return dist;
}

FeatureField nearest_seed_field(Dims dims, Spacing spacing,
                                const std::vector<std::int32_t>& seed_ids) {
    const int nx = dims.nx, ny = dims.ny, nz = dims.nz;
    if (seed_ids.size() != dims.voxels())
        throw std::invalid_argument("seed id field size mismatch");

    FeatureField out;
    out.d2.resize(dims.voxels());
    out.id.resize(dims.voxels());
    for (std::size_t i = 0; i < seed_ids.size(); ++i) {
        out.d2[i] = seed_ids[i] >= 0 ? 0.0 : kFarAway;
        out.id[i] = seed_ids[i];
    }

    const int nmax = std::max({nx, ny, nz});
    std::vector<double> f(nmax), d(nmax), z(nmax + 1);
    std::vector<std::int32_t> fid(nmax), did(nmax);
    std::vector<int> v(nmax);

    auto pass = [&](int n, double step) {
        const double s2 = step * step;
        int k = 0;
        v[0] = 0;
        z[0] = -std::numeric_limits<double>::infinity();
        z[1] = std::numeric_limits<double>::infinity();
        for (int q = 1; q < n; ++q) {
            double s;
            while (true) {
                const int p = v[k];
                s = ((f[q] + s2 * q * q) - (f[p] + s2 * p * p)) / (2.0 * s2 * (q - p));
                if (s > z[k]) break;
                --k;
            }
            ++k;
            v[k] = q;
            z[k] = s;
            z[k + 1] = std::numeric_limits<double>::infinity();
        }
        k = 0;
        for (int q = 0; q < n; ++q) {
            while (z[k + 1] < q) ++k;
            const double dq = (q - v[k]) * step;
            d[q] = dq * dq + f[v[k]];
            did[q] = fid[v[k]];
        }
    };

    auto flat = [&](int x, int y, int z_) {
        return (static_cast<std::size_t>(z_) * ny + y) * nx + x;
    };

    for (int zz = 0; zz < nz; ++zz)
        for (int y = 0; y < ny; ++y) {
            for (int x = 0; x < nx; ++x) { f[x] = out.d2[flat(x, y, zz)]; fid[x] = out.id[flat(x, y, zz)]; }
            pass(nx, spacing.sx);
            for (int x = 0; x < nx; ++x) { out.d2[flat(x, y, zz)] = d[x]; out.id[flat(x, y, zz)] = did[x]; }
        }
    for (int zz = 0; zz < nz; ++zz)
        for (int x = 0; x < nx; ++x) {
            for (int y = 0; y < ny; ++y) { f[y] = out.d2[flat(x, y, zz)]; fid[y] = out.id[flat(x, y, zz)]; }
            pass(ny, spacing.sy);
            for (int y = 0; y < ny; ++y) { out.d2[flat(x, y, zz)] = d[y]; out.id[flat(x, y, zz)] = did[y]; }
        }
    for (int y = 0; y < ny; ++y)
        for (int x = 0; x < nx; ++x) {
            for (int zz = 0; zz < nz; ++zz) { f[zz] = out.d2[flat(x, y, zz)]; fid[zz] = out.id[flat(x, y, zz)]; }
            pass(nz, spacing.sz);
            for (int zz = 0; zz < nz; ++zz) { out.d2[flat(x, y, zz)] = d[zz]; out.id[flat(x, y, zz)] = did[zz]; }
        }
    return out;
}

WeightMap distance_weights(const Volume& mask, const Skeleton& sk, double m, double r_d,
                           bool per_component) {
    if (mask.kind != ElementKind::Binary)
        throw std::invalid_argument("distance_weights expects a binary mask");
    if (mask.dims != sk.dims) throw std::invalid_argument("mask/skeleton dim mismatch");
    if (sk.voxels.empty()) throw std::invalid_argument("distance_weights: skeleton is empty");
    if (!(m >= 0.0 && m < 1.0)) throw std::invalid_argument("m must be in [0,1)");
    if (!(r_d > 0.0)) throw std::invalid_argument("r_d must be positive");

    const auto seed = sk.flags();
    for (const Voxel& v : sk.voxels)
        if (mask.at(v.x, v.y, v.z) == 0.0f)
            throw std::invalid_argument("skeleton voxel outside the mask");

    const auto d2 = squared_distance_field(mask.dims, mask.spacing, seed);

    WeightMap wm(mask.dims, 1.0);
    wm.m = m;
    wm.distance_root = r_d;

    if (!per_component) {
        double dmax2 = 0.0;
        for (std::size_t i = 0; i < mask.size(); ++i)
            if (mask.data[i] != 0.0f) dmax2 = std::max(dmax2, d2[i]);
        const double dmax = std::sqrt(dmax2);
        wm.d_max_mm = dmax;
        if (dmax > 0.0)
            for (std::size_t i = 0; i < mask.size(); ++i)
                if (mask.data[i] != 0.0f)
                    wm.w[i] = 1.0 - m * std::pow(std::sqrt(d2[i]) / dmax, r_d);
        return wm;
    }

    const ComponentLabels cc = label_components_26(mask);
    std::vector<double> dmax2(cc.count + 1, 0.0);
    for (std::size_t i = 0; i < mask.size(); ++i)
        if (mask.data[i] != 0.0f)
            dmax2[cc.labels[i]] = std::max(dmax2[cc.labels[i]], d2[i]);
    double global = 0.0;
    for (double v : dmax2) global = std::max(global, v);
    wm.d_max_mm = std::sqrt(global);
    for (std::size_t i = 0; i < mask.size(); ++i) {
        if (mask.data[i] == 0.0f) continue;
        const double dmax = std::sqrt(dmax2[cc.labels[i]]);
        if (dmax > 0.0) wm.w[i] = 1.0 - m * std::pow(std::sqrt(d2[i]) / dmax, r_d);
    }
    return wm;
}

CenterlineGraph branch_diameters(CenterlineGraph graph, const Volume& mask) {
    if (mask.kind != ElementKind::Binary)
        throw std::invalid_argument("branch_diameters expects a binary mask");
    if (mask.dims != graph.dims) throw std::invalid_argument("mask/graph dim mismatch");

    std::vector<std::uint8_t> bg(mask.size());
    for (std::size_t i = 0; i < mask.size(); ++i) bg[i] = mask.data[i] == 0.0f ? 1 : 0;
    const auto d2 = squared_distance_field(mask.dims, mask.spacing, bg);

    for (GraphBranch& b : graph.branches) {
        double sum = 0.0;
        for (const Voxel& v : b.path)
            sum += std::sqrt(d2[(static_cast<std::size_t>(v.z) * mask.dims.ny + v.y) * mask.dims.nx +
                                v.x]);
        b.diameter_mm = b.path.empty() ? 0.0 : 2.0 * sum / static_cast<double>(b.path.size());
    }
    return graph;
}

long long euler_characteristic(const Volume& mask) {
    const int nx = mask.dims.nx, ny = mask.dims.ny, nz = mask.dims.nz;
    auto make = [](int a, int b, int c) {
        return std::vector<std::uint8_t>(static_cast<std::size_t>(a) * b * c, 0);
    };
    auto vtx = make(nx + 1, ny + 1, nz + 1);
    auto ex = make(nx, ny + 1, nz + 1);
    auto ey = make(nx + 1, ny, nz + 1);
    auto ez = make(nx + 1, ny + 1, nz);
    auto fxy = make(nx, ny, nz + 1);
    auto fxz = make(nx, ny + 1, nz);
    auto fyz = make(nx + 1, ny, nz);

    auto idx = [](int x, int y, int z, int sx, int sy) {
        return (static_cast<std::size_t>(z) * sy + y) * sx + x;
    };

    long long cubes = 0;
    for (int z = 0; z < nz; ++z)
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x) {
                if (mask.at(x, y, z) == 0.0f) continue;
                ++cubes;
                for (int dz = 0; dz <= 1; ++dz)
                    for (int dy = 0; dy <= 1; ++dy)
                        for (int dx = 0; dx <= 1; ++dx)
                            vtx[idx(x + dx, y + dy, z + dz, nx + 1, ny + 1)] = 1;
                for (int dz = 0; dz <= 1; ++dz)
                    for (int dy = 0; dy <= 1; ++dy) ex[idx(x, y + dy, z + dz, nx, ny + 1)] = 1;
                for (int dz = 0; dz <= 1; ++dz)
                    for (int dx = 0; dx <= 1; ++dx) ey[idx(x + dx, y, z + dz, nx + 1, ny)] = 1;
                for (int dy = 0; dy <= 1; ++dy)
                    for (int dx = 0; dx <= 1; ++dx) ez[idx(x + dx, y + dy, z, nx + 1, ny + 1)] = 1;
                for (int dz = 0; dz <= 1; ++dz) fxy[idx(x, y, z + dz, nx, ny)] = 1;
                for (int dy = 0; dy <= 1; ++dy) fxz[idx(x, y + dy, z, nx, ny + 1)] = 1;
                for (int dx = 0; dx <= 1; ++dx) fyz[idx(x + dx, y, z, nx + 1, ny)] = 1;
            }

    auto total = [](const std::vector<std::uint8_t>& m) {
        long long t = 0;
        for (std::uint8_t b : m) t += b;
        return t;
    };
    const long long v = total(vtx);
    const long long e = total(ex) + total(ey) + total(ez);
    const long long f = total(fxy) + total(fxz) + total(fyz);
    return v - e + f - cubes;
}

// ---------------------------------------------------------------------------
// Text serialization
// ---------------------------------------------------------------------------

void write_skeleton(const Skeleton& sk, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    char buf[160];
    std::snprintf(buf, sizeof buf, "spacing %.17g %.17g %.17g", sk.spacing.sx, sk.spacing.sy,
                  sk.spacing.sz);
    out << "skeleton 1\n"
        << "dims " << sk.dims.nx << ' ' << sk.dims.ny << ' ' << sk.dims.nz << '\n'
        << buf << '\n'
        << "voxels " << sk.voxels.size() << '\n';
    for (const Voxel& v : sk.voxels) out << v.x << ' ' << v.y << ' ' << v.z << '\n';
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

Skeleton read_skeleton(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open skeleton file: " + path.string());
    std::string tag;
    int version;
    in >> tag >> version;
    if (tag != "skeleton" || version != 1)
        throw std::invalid_argument("malformed skeleton file: " + path.string());
    Skeleton sk;
    std::size_t n = 0;
    in >> tag >> sk.dims.nx >> sk.dims.ny >> sk.dims.nz;
    if (tag != "dims") throw std::invalid_argument("malformed skeleton file: dims");
    in >> tag >> sk.spacing.sx >> sk.spacing.sy >> sk.spacing.sz;
    if (tag != "spacing") throw std::invalid_argument("malformed skeleton file: spacing");
    in >> tag >> n;
    if (tag != "voxels") throw std::invalid_argument("malformed skeleton file: voxels");
    sk.voxels.resize(n);
    for (std::size_t i = 0; i < n; ++i) in >> sk.voxels[i].x >> sk.voxels[i].y >> sk.voxels[i].z;
    if (!in) throw std::invalid_argument("malformed skeleton file: truncated");
    return sk;
}

void write_graph(const CenterlineGraph& g, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    char buf[160];
    std::snprintf(buf, sizeof buf, "spacing %.17g %.17g %.17g", g.spacing.sx, g.spacing.sy,
                  g.spacing.sz);
    out << "graph 1\n"
        << "dims " << g.dims.nx << ' ' << g.dims.ny << ' ' << g.dims.nz << '\n'
        << buf << '\n'
        << "nodes " << g.nodes.size() << " branches " << g.branches.size() << '\n';
    for (const GraphNode& n : g.nodes)
        out << "node " << n.id << ' ' << n.pos.x << ' ' << n.pos.y << ' ' << n.pos.z << ' '
            << to_string(n.kind) << '\n';
    for (const GraphBranch& b : g.branches) {
        std::snprintf(buf, sizeof buf, "branch %d %d %d %.17g %.17g %zu", b.id, b.node_a, b.node_b,
                      b.length_mm, b.diameter_mm, b.path.size());
        out << buf << '\n';
        for (const Voxel& v : b.path) out << v.x << ' ' << v.y << ' ' << v.z << '\n';
    }
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

CenterlineGraph read_graph(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::invalid_argument("cannot open graph file: " + path.string());
    std::string tag;
    int version;
    in >> tag >> version;
    if (tag != "graph" || version != 1)
        throw std::invalid_argument("malformed graph file: " + path.string());
    CenterlineGraph g;
    std::size_t nn = 0, nb = 0;
    in >> tag >> g.dims.nx >> g.dims.ny >> g.dims.nz;
    if (tag != "dims") throw std::invalid_argument("malformed graph file: dims");
    in >> tag >> g.spacing.sx >> g.spacing.sy >> g.spacing.sz;
    if (tag != "spacing") throw std::invalid_argument("malformed graph file: spacing");
    in >> tag >> nn >> tag >> nb;
    g.nodes.resize(nn);
    for (std::size_t i = 0; i < nn; ++i) {
        std::string kind;
        in >> tag >> g.nodes[i].id >> g.nodes[i].pos.x >> g.nodes[i].pos.y >> g.nodes[i].pos.z >>
            kind;
        if (tag != "node") throw std::invalid_argument("malformed graph file: node line");
        g.nodes[i].kind = node_kind_from_string(kind);
    }
    g.branches.resize(nb);
    for (std::size_t i = 0; i < nb; ++i) {
        GraphBranch& b = g.branches[i];
        std::size_t npts = 0;
        in >> tag >> b.id >> b.node_a >> b.node_b >> b.length_mm >> b.diameter_mm >> npts;
        if (tag != "branch") throw std::invalid_argument("malformed graph file: branch line");
        b.path.resize(npts);
        for (std::size_t k = 0; k < npts; ++k) in >> b.path[k].x >> b.path[k].y >> b.path[k].z;
    }
    if (!in) throw std::invalid_argument("malformed graph file: truncated");
    return g;
}

}  // namespace gradseg
