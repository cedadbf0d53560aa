#include <algorithm>
#include <cmath>
#include <set>

#include "doctest.h"
#include "gradseg/labeling.hpp"
#include "gradseg/rng.hpp"
#include "gradseg/skeleton.hpp"

using namespace gradseg;

namespace {

Volume empty_mask(Dims d, Spacing s = {1, 1, 1}) {
    return Volume(d, s, ElementKind::Binary);
}

// Solid cylinder along z: voxel centers within `radius` of the (cx, cy) axis.
Volume cylinder_mask(int nx, int ny, int nz, double cx, double cy, double radius, int z0, int z1) {
    Volume m = empty_mask({nx, ny, nz});
    for (int z = z0; z <= z1; ++z)
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x) {
                const double dx = x - cx, dy = y - cy;
                if (dx * dx + dy * dy <= radius * radius) m.at(x, y, z) = 1.0f;
            }
    return m;
}

// Brute-force nearest-seed oracle used to pin the exact distance transform.
std::vector<double> brute_force_d2(const Volume& seeds_vol) {
    const auto& d = seeds_vol.dims;
    std::vector<Voxel> seeds;
    for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < d.nx; ++x)
                if (seeds_vol.at(x, y, z) != 0.0f) seeds.push_back({x, y, z});
    std::vector<double> out(d.voxels(), 1e30);
    for (int z = 0; z < d.nz; ++z)
        for (int y = 0; y < d.ny; ++y)
            for (int x = 0; x < d.nx; ++x) {
                double best = 1e30;
                for (const Voxel& s : seeds) {
                    const double dx = (x - s.x) * seeds_vol.spacing.sx;
                    const double dy = (y - s.y) * seeds_vol.spacing.sy;
                    const double dz = (z - s.z) * seeds_vol.spacing.sz;
                    best = std::min(best, dx * dx + dy * dy + dz * dz);
                }
                out[seeds_vol.index(x, y, z)] = best;
            }
    return out;
}

}  // namespace

TEST_CASE("distance transform matches the brute-force oracle") {
    Rng rng(3);
    for (int t = 0; t < 8; ++t) {
        Volume seeds({7, 6, 5}, {1.0, 1.5, 0.8}, ElementKind::Binary);
        int n = 0;
        for (float& v : seeds.data) {
            v = rng.bernoulli(0.1) ? 1.0f : 0.0f;
            n += v != 0.0f;
        }
        if (n == 0) seeds.data[17] = 1.0f;
        std::vector<std::uint8_t> flags(seeds.size());
        for (std::size_t i = 0; i < seeds.size(); ++i) flags[i] = seeds.data[i] != 0.0f;

        const auto fast = squared_distance_field(seeds.dims, seeds.spacing, flags);
        const auto slow = brute_force_d2(seeds);
        for (std::size_t i = 0; i < fast.size(); ++i)
            CHECK(fast[i] == doctest::Approx(slow[i]).epsilon(1e-12));
    }
}

TEST_CASE("feature transform returns the true nearest seed") {
    Rng rng(4);
    Volume seeds({6, 6, 6}, {1.0, 1.0, 2.0}, ElementKind::Binary);
    std::vector<std::int32_t> ids(seeds.size(), -1);
    std::vector<Voxel> seed_pos;
    for (int i = 0; i < 5; ++i) {
        const int x = static_cast<int>(rng.uniform_int(0, 5));
        const int y = static_cast<int>(rng.uniform_int(0, 5));
        const int z = static_cast<int>(rng.uniform_int(0, 5));
        if (ids[seeds.index(x, y, z)] < 0) {
            ids[seeds.index(x, y, z)] = static_cast<int>(seed_pos.size());
            seed_pos.push_back({x, y, z});
        }
    }
    const auto ff = nearest_seed_field(seeds.dims, seeds.spacing, ids);
    for (int z = 0; z < 6; ++z)
        for (int y = 0; y < 6; ++y)
            for (int x = 0; x < 6; ++x) {
                const std::size_t i = seeds.index(x, y, z);
                REQUIRE(ff.id[i] >= 0);
                const Voxel w = seed_pos[ff.id[i]];
                const double dx = (x - w.x) * 1.0, dy = (y - w.y) * 1.0, dz = (z - w.z) * 2.0;
                CHECK(ff.d2[i] == doctest::Approx(dx * dx + dy * dy + dz * dz).epsilon(1e-12));
            }
}

TEST_CASE("thinning a single voxel keeps it") {
    Volume m = empty_mask({5, 5, 5});
    m.at(2, 2, 2) = 1.0f;
    const Skeleton sk = thin(m);
    REQUIRE(sk.voxels.size() == 1);
    CHECK(sk.voxels[0] == Voxel{2, 2, 2});
}

TEST_CASE("thinning rejects an empty mask") {
    CHECK_THROWS_AS(thin(empty_mask({4, 4, 4})), std::invalid_argument);
}

TEST_CASE("thinning preserves the component count of two disjoint cubes") {
    Volume m = empty_mask({16, 8, 8});
    for (int z = 1; z < 4; ++z)
        for (int y = 1; y < 4; ++y)
            for (int x = 1; x < 4; ++x) m.at(x, y, z) = 1.0f;
    for (int z = 4; z < 7; ++z)
        for (int y = 4; y < 7; ++y)
            for (int x = 10; x < 13; ++x) m.at(x, y, z) = 1.0f;
    const Skeleton sk = thin(m);
    const auto cc = label_components_26(sk.as_mask());
    CHECK(cc.count == 2);
}

TEST_CASE("cylinder thins to a single axis-hugging path") {
    const Volume m = cylinder_mask(16, 16, 44, 8.0, 8.0, 3.0, 2, 41);
    const Skeleton sk = thin(m);

    // skeleton lies inside the mask
    for (const Voxel& v : sk.voxels) CHECK(m.at(v.x, v.y, v.z) != 0.0f);

    // one 26-connected component, all voxels within sqrt(3) of the axis
    const auto cc = label_components_26(sk.as_mask());
    CHECK(cc.count == 1);
    for (const Voxel& v : sk.voxels) {
        const double r = std::hypot(v.x - 8.0, v.y - 8.0);
        CHECK(r <= std::sqrt(3.0) + 1e-9);
    }

    // a path: exactly two endpoints, everything else with two neighbors
    const CenterlineGraph g = parse_tree(sk);
    CHECK(g.branches.size() == 1);
    int endpoints = 0;
    for (const GraphNode& n : g.nodes) endpoints += n.kind == NodeKind::Endpoint;
    CHECK(endpoints == 2);

    // idempotent
    const Skeleton again = thin(sk.as_mask());
    CHECK(again.voxels == sk.voxels);
}

TEST_CASE("thinning preserves the Euler characteristic of a solid cylinder") {
    const Volume m = cylinder_mask(12, 12, 20, 6.0, 6.0, 2.5, 2, 17);
    CHECK(euler_characteristic(m) == 1);
    const Skeleton sk = thin(m);
    CHECK(euler_characteristic(sk.as_mask()) == 1);
}

TEST_CASE("euler characteristic flags cavities and tunnels") {
    // solid cube
    Volume solid = empty_mask({6, 6, 6});
    for (int z = 1; z < 5; ++z)
        for (int y = 1; y < 5; ++y)
            for (int x = 1; x < 5; ++x) solid.at(x, y, z) = 1.0f;
    CHECK(euler_characteristic(solid) == 1);

    // hollow cube: one cavity
    Volume hollow = solid;
    hollow.at(2, 2, 2) = 0.0f;
    CHECK(euler_characteristic(hollow) == 2);

    // square ring: one tunnel
    Volume ring = empty_mask({6, 6, 3});
    for (int y = 1; y < 5; ++y)
        for (int x = 1; x < 5; ++x)
            if (x == 1 || x == 4 || y == 1 || y == 4) ring.at(x, y, 1) = 1.0f;
    CHECK(euler_characteristic(ring) == 0);
}

TEST_CASE("straight path parses to one branch with the right length") {
    Volume m = empty_mask({12, 3, 3});
    for (int x = 1; x <= 10; ++x) m.at(x, 1, 1) = 1.0f;
    const Skeleton sk = thin(m);
    REQUIRE(sk.voxels.size() == 10);
    const CenterlineGraph g = parse_tree(sk);
    REQUIRE(g.branches.size() == 1);
    CHECK(g.branches[0].length_mm == doctest::Approx(9.0));
    CHECK(g.branches[0].path.size() == 10);
    CHECK(g.nodes.size() == 2);
    for (const GraphNode& n : g.nodes) CHECK(n.kind == NodeKind::Endpoint);
    CHECK(g.total_length_mm() == doctest::Approx(9.0));
}

TEST_CASE("Y-shape parses to three branches and one bifurcation") {
    Volume m = empty_mask({16, 16, 3});
    // three straight arms meeting at (8,8)
    for (int i = 0; i <= 6; ++i) {
        m.at(8, 8 - i, 1) = 1.0f;        // south arm
        m.at(8 - i, 8 + i, 1) = 1.0f;    // north-west diagonal
        m.at(8 + i, 8 + i, 1) = 1.0f;    // north-east diagonal
    }
    Skeleton sk;
    sk.dims = m.dims;
    sk.spacing = m.spacing;
    for (int z = 0; z < 3; ++z)
        for (int y = 0; y < 16; ++y)
            for (int x = 0; x < 16; ++x)
                if (m.at(x, y, z) != 0.0f) sk.voxels.push_back({x, y, z});

    const CenterlineGraph g = parse_tree(sk);
    CHECK(g.branches.size() == 3);
    int bif = 0, end = 0;
    for (const GraphNode& n : g.nodes) {
        bif += n.kind == NodeKind::Bifurcation;
        end += n.kind == NodeKind::Endpoint;
    }
    CHECK(bif == 1);
    CHECK(end == 3);

    // total branch length equals the skeleton polyline length
    const double expect = 6.0 + 2.0 * 6.0 * std::sqrt(2.0);
    CHECK(g.total_length_mm() == doctest::Approx(expect).epsilon(1e-12));
}

TEST_CASE("isolated voxel becomes an isolated node with no branches") {
    Skeleton sk;
    sk.dims = {3, 3, 3};
    sk.spacing = {1, 1, 1};
    sk.voxels = {{1, 1, 1}};
    const CenterlineGraph g = parse_tree(sk);
    CHECK(g.branches.empty());
    REQUIRE(g.nodes.size() == 1);
    CHECK(g.nodes[0].kind == NodeKind::Isolated);
}

TEST_CASE("distance weights follow the decay rule exactly") {
    // Anisotropic spacing realizes d = 1.5 and d = 3.0 mm exactly:
    // mask spans |dy| <= 2 voxels at sy = 1.5 around a straight centerline.
    Volume m = empty_mask({3, 5, 10}, {1.0, 1.5, 1.0});
    Skeleton sk;
    sk.dims = m.dims;
    sk.spacing = m.spacing;
    for (int z = 0; z < 10; ++z) {
        for (int dy = -2; dy <= 2; ++dy) m.at(1, 2 + dy, z) = 1.0f;
        sk.voxels.push_back({1, 2, z});
    }
    std::sort(sk.voxels.begin(), sk.voxels.end(), [](const Voxel& a, const Voxel& b) {
        return std::tie(a.z, a.y, a.x) < std::tie(b.z, b.y, b.x);
    });

    const WeightMap w = distance_weights(m, sk, 0.5, 1.0);
    CHECK(w.d_max_mm == doctest::Approx(3.0));
    CHECK(w.w[m.index(1, 2, 4)] == doctest::Approx(1.0));    // centerline
    CHECK(w.w[m.index(1, 3, 4)] == doctest::Approx(0.75));   // d = 1.5
    CHECK(w.w[m.index(1, 4, 4)] == doctest::Approx(0.5));    // d = 3 = d_max
    CHECK(w.w[m.index(0, 0, 0)] == doctest::Approx(1.0));    // background

    // substitution with m = 8/9 at d_max
    const WeightMap w2 = distance_weights(m, sk, 8.0 / 9.0, 1.0);
    CHECK(w2.w[m.index(1, 4, 4)] == doctest::Approx(1.0 / 9.0).epsilon(1e-12));
}

TEST_CASE("weight map bounds and monotonicity hold voxel-wise") {
    const Volume m = cylinder_mask(14, 14, 20, 7.0, 7.0, 3.0, 2, 17);
    const Skeleton sk = thin(m);
    const double decay_m = 0.7, rd = 0.5;
    const WeightMap w = distance_weights(m, sk, decay_m, rd);

    const auto d2 = squared_distance_field(m.dims, m.spacing, sk.flags());
    for (std::size_t i = 0; i < m.size(); ++i) {
        if (m.data[i] == 0.0f) {
            CHECK(w.w[i] == 1.0);
        } else {
            CHECK(w.w[i] >= 1.0 - decay_m - 1e-12);
            CHECK(w.w[i] <= 1.0 + 1e-12);
        }
    }
    // w monotone nonincreasing in d
    std::vector<std::pair<double, double>> dw;
    for (std::size_t i = 0; i < m.size(); ++i)
        if (m.data[i] != 0.0f) dw.push_back({d2[i], w.w[i]});
    std::sort(dw.begin(), dw.end());
    for (std::size_t i = 1; i < dw.size(); ++i) CHECK(dw[i].second <= dw[i - 1].second + 1e-12);
}

TEST_CASE("distance weights validate their inputs") {
    Volume m = empty_mask({4, 4, 4});
    m.at(1, 1, 1) = 1.0f;
    Skeleton sk;
    sk.dims = m.dims;
    sk.spacing = m.spacing;
    CHECK_THROWS_AS(distance_weights(m, sk, 0.5, 1.0), std::invalid_argument);  // empty skeleton
    sk.voxels = {{2, 2, 2}};  // outside the mask
    CHECK_THROWS_AS(distance_weights(m, sk, 0.5, 1.0), std::invalid_argument);
}

TEST_CASE("branch diameters recover the cylinder radius within quantization") {
    const Volume m = cylinder_mask(16, 16, 30, 8.0, 8.0, 3.0, 2, 27);
    const Skeleton sk = thin(m);
    CenterlineGraph g = parse_tree(sk);
    g = branch_diameters(std::move(g), m);
    REQUIRE(g.branches.size() == 1);
    CHECK(g.branches[0].diameter_mm > 5.0);
    CHECK(g.branches[0].diameter_mm < 7.0);
}

TEST_CASE("one-voxel-thick line has diameter at most 2 mm") {
    Volume m = empty_mask({12, 5, 5});
    for (int x = 1; x <= 10; ++x) m.at(x, 2, 2) = 1.0f;
    const Skeleton sk = thin(m);
    CenterlineGraph g = branch_diameters(parse_tree(sk), m);
    REQUIRE(g.branches.size() == 1);
    CHECK(g.branches[0].diameter_mm <= 2.0 + 1e-9);
}

TEST_CASE("skeleton and graph text files round trip") {
    const Volume m = cylinder_mask(10, 10, 16, 5.0, 5.0, 2.0, 1, 14);
    const Skeleton sk = thin(m);
    const auto skel_path = std::filesystem::temp_directory_path() / "gradseg_sk.txt";
    write_skeleton(sk, skel_path);
    const Skeleton sk2 = read_skeleton(skel_path);
    CHECK(sk2.voxels == sk.voxels);
    CHECK(sk2.dims == sk.dims);

    CenterlineGraph g = branch_diameters(parse_tree(sk), m);
    const auto graph_path = std::filesystem::temp_directory_path() / "gradseg_graph.txt";
    write_graph(g, graph_path);
    const CenterlineGraph g2 = read_graph(graph_path);
    REQUIRE(g2.branches.size() == g.branches.size());
    CHECK(g2.branches[0].path == g.branches[0].path);
    CHECK(g2.branches[0].length_mm == g.branches[0].length_mm);
    CHECK(g2.branches[0].diameter_mm == g.branches[0].diameter_mm);
    CHECK(g2.nodes.size() == g.nodes.size());
    std::filesystem::remove(skel_path);
    std::filesystem::remove(graph_path);
}

TEST_CASE("parent and child diameters land in their strata") {
    // two stacked cylinders: radius 4 (diameter 8 -> [8,inf)) and
    // radius 2 (diameter 4 -> [4,6))
    Volume m = empty_mask({24, 24, 40});
    for (int z = 2; z < 20; ++z)
        for (int y = 0; y < 24; ++y)
            for (int x = 0; x < 24; ++x) {
                const double dx = x - 12.0, dy = y - 12.0;
                if (dx * dx + dy * dy <= 16.0) m.at(x, y, z) = 1.0f;
            }
    for (int z = 20; z < 38; ++z)
        for (int y = 0; y < 24; ++y)
            for (int x = 0; x < 24; ++x) {
                const double dx = x - 12.0, dy = y - 12.0;
                if (dx * dx + dy * dy <= 4.0) m.at(x, y, z) = 1.0f;
            }
    // analytic two-branch graph along the axis
    CenterlineGraph g;
    g.dims = m.dims;
    g.spacing = m.spacing;
    g.nodes = {{0, {12, 12, 2}, NodeKind::Endpoint},
               {1, {12, 12, 19}, NodeKind::Bifurcation},
               {2, {12, 12, 37}, NodeKind::Endpoint}};
    // paths keep clear of the flat end caps (a capsule phantom has no such
    // caps, so its analytic paths need no trimming)
    GraphBranch parent, child;
    parent.id = 0;
    parent.node_a = 0;
    parent.node_b = 1;
    for (int z = 6; z <= 15; ++z) parent.path.push_back({12, 12, z});
    parent.length_mm = 9.0;
    child.id = 1;
    child.node_a = 1;
    child.node_b = 2;
    for (int z = 23; z <= 35; ++z) child.path.push_back({12, 12, z});
    child.length_mm = 12.0;
    g.branches = {parent, child};

    g = branch_diameters(std::move(g), m);
    CHECK(g.branches[0].diameter_mm >= 8.0);
    CHECK(g.branches[1].diameter_mm >= 4.0);
    CHECK(g.branches[1].diameter_mm < 6.0);
}
