#include <set>

#include "doctest.h"
#include "gradseg/labeling.hpp"
#include "gradseg/phantom.hpp"

using namespace gradseg;

TEST_CASE("depth 1 is a single capsule with two nodes") {
    PhantomSpec spec;
    spec.depth = 1;
    const PhantomSample ph = generate(spec);
    CHECK(ph.graph.branches.size() == 1);
    CHECK(ph.graph.nodes.size() == 2);
    CHECK(ph.graph.branches[0].diameter_mm == doctest::Approx(2.0 * spec.root_radius_mm));
}

TEST_CASE("depth 3 binary tree has 7 branches, 3 bifurcations, 4 leaf tips") {
    PhantomSpec spec;
    spec.depth = 3;
    spec.seed = 4;
    const PhantomSample ph = generate(spec);
    CHECK(ph.graph.branches.size() == 7);
    int bif = 0, leaf_tips = 0;
    for (const GraphNode& n : ph.graph.nodes) {
        if (n.kind == NodeKind::Bifurcation) ++bif;
        if (n.kind == NodeKind::Endpoint && n.id != 0) ++leaf_tips;
    }
    CHECK(bif == 3);
    CHECK(leaf_tips == 4);
}

TEST_CASE("same seed reproduces identical bytes, different seed differs") {
    PhantomSpec spec;
    spec.depth = 4;
    spec.seed = 77;
    const PhantomSample a = generate(spec);
    const PhantomSample b = generate(spec);
    CHECK(a.image.data == b.image.data);
    CHECK(a.mask.data == b.mask.data);

    spec.seed = 78;
    const PhantomSample c = generate(spec);
    CHECK(a.image.data != c.image.data);
}

TEST_CASE("mask voxels sit inside the capsule union and centerline inside mask") {
    PhantomSpec spec;
    spec.depth = 4;
    spec.seed = 12;
    const PhantomSample ph = generate(spec);
    std::size_t fg = 0;
    for (float v : ph.mask.data) fg += v != 0.0f;
    CHECK(fg > 0);
    for (const GraphBranch& b : ph.graph.branches)
        for (const Voxel& v : b.path) CHECK(ph.mask.at(v.x, v.y, v.z) != 0.0f);

    // mask is one connected component
    CHECK(label_components_26(ph.mask).count == 1);
}

TEST_CASE("intensity model renders lumen, wall and noisy background") {
    PhantomSpec spec;
    spec.depth = 2;
    spec.seed = 3;
    const PhantomSample ph = generate(spec);
    bool saw_wall = false;
    for (std::size_t i = 0; i < ph.mask.size(); ++i) {
        if (ph.mask.data[i] != 0.0f)
            CHECK(ph.image.data[i] == doctest::Approx(spec.intensity.lumen));
        else if (ph.image.data[i] == doctest::Approx(spec.intensity.wall))
            saw_wall = true;
    }
    CHECK(saw_wall);
}

TEST_CASE("imbalance profile: single cylinder is all generation zero") {
    PhantomSpec spec;
    spec.depth = 1;
    const PhantomSample ph = generate(spec);
    const ImbalanceProfile prof = imbalance_profile(ph.mask, ph.graph);
    REQUIRE(prof.generation_share.size() == 1);
    CHECK(prof.generation_share[0] == doctest::Approx(1.0));
    CHECK(prof.foreground_fraction > 0.0);
}

TEST_CASE("imbalance profile: early generations dominate a deep tree") {
    PhantomSpec spec;
    spec.depth = 5;
    spec.seed = 8;
    const PhantomSample ph = generate(spec);
    const ImbalanceProfile prof = imbalance_profile(ph.mask, ph.graph);
    REQUIRE(prof.generation_share.size() == 5);
    CHECK(prof.generation_share[0] > prof.generation_share[4]);
    // inter-class imbalance: foreground is a small minority
    CHECK(prof.foreground_fraction < 0.1);
}

TEST_CASE("a tree that cannot fit raises an error") {
    PhantomSpec spec;
    spec.depth = 3;
    spec.dims = {24, 24, 24};
    spec.segment_length_mm = 30.0;
    CHECK_THROWS_WITH_AS(generate(spec), doctest::Contains("exits volume bounds"),
                         std::invalid_argument);
}

TEST_CASE("unrepresentable leaf radius is rejected") {
    PhantomSpec spec;
    spec.depth = 6;
    spec.root_radius_mm = 2.0;
    spec.radius_decay = 0.5;  // leaf radius 0.0625 < 0.5 * spacing
    CHECK_THROWS_AS(generate(spec), std::invalid_argument);
}

TEST_CASE("thinning the phantom mask re-derives the analytic branch structure") {
    // depth-3 trees are thick enough for exact recovery
    for (std::uint64_t seed : {4ull, 9ull, 31ull}) {
        PhantomSpec spec;
        spec.depth = 3;
        spec.seed = seed;
        const PhantomSample ph = generate(spec);
        const Skeleton sk = thin(ph.mask);
        const CenterlineGraph g = parse_tree(sk);
        CHECK(g.branches.size() == ph.graph.branches.size());
    }

    // at depth 5 the sub-voxel leaves occasionally fuse under thinning;
    // require exact recovery for most of the default set and a small,
    // bounded deviation everywhere (components always preserved)
    int exact = 0;
    for (int i = 0; i < 8; ++i) {
        PhantomSpec spec;
        spec.depth = 5;
        spec.seed = 7000 + i;
        const PhantomSample ph = generate(spec);
        const Skeleton sk = thin(ph.mask);
        const CenterlineGraph g = parse_tree(sk);
        const auto diff = static_cast<long>(g.branches.size()) -
                          static_cast<long>(ph.graph.branches.size());
        CHECK(std::abs(diff) <= 4);
        exact += diff == 0;
        CHECK(label_components_26(sk.as_mask()).count == label_components_26(ph.mask).count);
    }
    CHECK(exact >= 5);
}
