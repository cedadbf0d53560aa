#include <algorithm>
#include <cmath>
#include <functional>

#include "doctest.h"
#include "gradseg/net.hpp"
#include "gradseg/rng.hpp"
#include "gradseg/threading.hpp"
#include "net_reference.hpp"

using namespace gradseg;

namespace {

Tensor4 random_tensor(Rng& rng, int c, int n, double lo = -1.0, double hi = 1.0) {
    Tensor4 t(c, n, n, n);
    for (float& v : t.v) v = static_cast<float>(rng.uniform(lo, hi));
    return t;
}

// Finite-difference check of dL/dx for L = sum(c .* F(x)), with the
// backward pass accumulating into x.g.
double fd_input_check(Tensor4 x, const std::function<void(const Tensor4&, Tensor4&)>& fwd,
                      const std::function<void(Tensor4&, Tensor4&)>& bwd, double h, Rng& rng) {
    Tensor4 y;
    fwd(x, y);
    std::vector<float> c(y.size());
    for (float& v : c) v = static_cast<float>(rng.uniform(-1.0, 1.0));

    x.zero_grad();
    std::copy(c.begin(), c.end(), y.g.begin());
    bwd(x, y);
    std::vector<float> analytic = x.g;
    double scale = 0.0;
    for (float g : analytic) scale = std::max(scale, static_cast<double>(std::abs(g)));
    const double floor = std::max(1e-6, 1e-2 * scale);

    auto loss = [&](Tensor4& xx) {
        Tensor4 yy;
        fwd(xx, yy);
        double L = 0.0;
        for (std::size_t i = 0; i < yy.size(); ++i) L += static_cast<double>(c[i]) * yy.v[i];
        return L;
    };

    double max_rel = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) {
        const float orig = x.v[j];
        const float up = static_cast<float>(orig + h);
        const float dn = static_cast<float>(orig - h);
        x.v[j] = up;
        const double lu = loss(x);
        x.v[j] = dn;
        const double ld = loss(x);
        x.v[j] = orig;
        const double fd = (lu - ld) / (static_cast<double>(up) - dn);
        const double rel =
            std::abs(fd - analytic[j]) /
            std::max({std::abs(fd), static_cast<double>(std::abs(analytic[j])), floor});
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace

TEST_CASE("conv3 passes input and weight gradient checks") {
    Rng rng(101);
    nn::Conv conv;
    conv.init(2, 3, 3, rng);
    Tensor4 x = random_tensor(rng, 2, 5);

    const double rel = fd_input_check(
        x, [&](const Tensor4& a, Tensor4& b) { conv.forward(a, b); },
        [&](Tensor4& a, Tensor4& b) { conv.backward(a, b); }, 0.25, rng);
    CHECK(rel < 1e-4);

    // weight gradients
    Tensor4 y;
    conv.forward(x, y);
    std::vector<float> c(y.size());
    for (float& v : c) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    conv.zero_grad();
    x.zero_grad();
    std::copy(c.begin(), c.end(), y.g.begin());
    conv.backward(x, y);
    auto loss = [&]() {
        Tensor4 yy;
        conv.forward(x, yy);
        double L = 0.0;
        for (std::size_t i = 0; i < yy.size(); ++i) L += static_cast<double>(c[i]) * yy.v[i];
        return L;
    };
    double wscale = 0.0;
    for (float g : conv.wg) wscale = std::max(wscale, static_cast<double>(std::abs(g)));
    const double wfloor = std::max(1e-6, 1e-2 * wscale);
    Rng pick(7);
    for (int t = 0; t < 30; ++t) {
        const std::size_t j =
            static_cast<std::size_t>(pick.uniform_int(0, static_cast<std::int64_t>(conv.w.size()) - 1));
        const float orig = conv.w[j];
        const float up = orig + 0.25f, dn = orig - 0.25f;
        conv.w[j] = up;
        const double lu = loss();
        conv.w[j] = dn;
        const double ld = loss();
        conv.w[j] = orig;
        const double fd = (lu - ld) / (static_cast<double>(up) - dn);
        const double rel2 =
            std::abs(fd - conv.wg[j]) /
            std::max({std::abs(fd), static_cast<double>(std::abs(conv.wg[j])), wfloor});
        CHECK(rel2 < 1e-4);
    }
}

TEST_CASE("conv1 passes gradient checks") {
    Rng rng(103);
    nn::Conv conv;
    conv.init(3, 2, 1, rng);
    Tensor4 x = random_tensor(rng, 3, 6);
    const double rel = fd_input_check(
        x, [&](const Tensor4& a, Tensor4& b) { conv.forward(a, b); },
        [&](Tensor4& a, Tensor4& b) { conv.backward(a, b); }, 0.25, rng);
    CHECK(rel < 1e-4);
}

TEST_CASE("instance norm matches finite differences and zeroes constants") {
    Rng rng(105);
    nn::InstanceNorm norm;
    Tensor4 x = random_tensor(rng, 2, 4);

    // forward agrees with the double reference
    Tensor4 y;
    norm.forward(x, y);
    refnet::DTensor dx(2, 4, 4, 4);
    for (std::size_t i = 0; i < x.size(); ++i) dx.v[i] = x.v[i];
    refnet::DTensor dy = refnet::instance_norm(dx);
    for (std::size_t i = 0; i < y.size(); ++i) CHECK(std::abs(y.v[i] - dy.v[i]) < 1e-5);

    // analytic input gradients against double finite differences; the
    // channel-wide coupling of the statistics makes float differences too
    // noisy to resolve 1e-4, so the reference forward provides the quotient
    std::vector<float> c(y.size());
    for (float& v : c) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    x.zero_grad();
    std::copy(c.begin(), c.end(), y.g.begin());
    norm.backward(x, y);

    auto loss = [&]() {
        const refnet::DTensor out = refnet::instance_norm(dx);
        double L = 0.0;
        for (std::size_t i = 0; i < out.v.size(); ++i)
            L += static_cast<double>(c[i]) * out.v[i];
        return L;
    };
    const double h = 1e-6;
    double max_rel = 0.0;
    for (std::size_t j = 0; j < x.size(); ++j) {
        const double orig = dx.v[j];
        dx.v[j] = orig + h;
        const double lu = loss();
        dx.v[j] = orig - h;
        const double ld = loss();
        dx.v[j] = orig;
        const double fd = (lu - ld) / (2.0 * h);
        const double rel =
            std::abs(fd - x.g[j]) / std::max({std::abs(fd), static_cast<double>(std::abs(x.g[j])), 1e-4});
        max_rel = std::max(max_rel, rel);
    }
    CHECK(max_rel < 1e-4);

    Tensor4 cst(1, 4, 4, 4);
    std::fill(cst.v.begin(), cst.v.end(), 3.25f);
    Tensor4 yc;
    norm.forward(cst, yc);
    for (float v : yc.v) CHECK(v == 0.0f);
}

TEST_CASE("relu and sigmoid match finite differences") {
    Rng rng(107);
    Tensor4 x = random_tensor(rng, 2, 4);
    for (float& v : x.v)
        if (std::abs(v) < 0.05f) v += 0.1f;  // keep away from the relu kink
    const double rel_r = fd_input_check(
        x, [](const Tensor4& a, Tensor4& b) { nn::relu_forward(a, b); },
        [](Tensor4& a, Tensor4& b) { nn::relu_backward(a, b); }, 0.02, rng);
    CHECK(rel_r < 1e-4);

    const double rel_s = fd_input_check(
        x, [](const Tensor4& a, Tensor4& b) { nn::sigmoid_forward(a, b); },
        [](Tensor4& a, Tensor4& b) { nn::sigmoid_backward(a, b); }, 0.02, rng);
    CHECK(rel_s < 1e-4);
}

TEST_CASE("hadamard, pooling and upsampling match finite differences") {
    Rng rng(109);
    Tensor4 b0 = random_tensor(rng, 2, 4);
    const double rel_h = fd_input_check(
        random_tensor(rng, 2, 4),
        [&](const Tensor4& a, Tensor4& y) { nn::hadamard_forward(a, b0, y); },
        [&](Tensor4& a, Tensor4& y) {
            b0.zero_grad();
            nn::hadamard_backward(a, b0, y);
        },
        0.25, rng);
    CHECK(rel_h < 1e-4);

    const double rel_p = fd_input_check(
        random_tensor(rng, 2, 4),
        [](const Tensor4& a, Tensor4& y) { nn::avg_pool2_forward(a, y); },
        [](Tensor4& a, Tensor4& y) { nn::avg_pool2_backward(a, y); }, 0.25, rng);
    CHECK(rel_p < 1e-4);

    const double rel_u = fd_input_check(
        random_tensor(rng, 2, 3),
        [](const Tensor4& a, Tensor4& y) { nn::upsample_nearest_forward(a, 2, y); },
        [](Tensor4& a, Tensor4& y) { nn::upsample_nearest_backward(a, 2, y); }, 0.25, rng);
    CHECK(rel_u < 1e-4);

    const double rel_t = fd_input_check(
        random_tensor(rng, 2, 3),
        [](const Tensor4& a, Tensor4& y) { nn::upsample_trilinear_forward(a, 2, y); },
        [](Tensor4& a, Tensor4& y) { nn::upsample_trilinear_backward(a, 2, y); }, 0.25, rng);
    CHECK(rel_t < 1e-4);
}

TEST_CASE("whole toy net passes a finite-difference spot check") {
    NetSpec spec = NetSpec::toy();
    Net net(spec, 42);
    Rng rng(211);
    Tensor4 input = random_tensor(rng, 1, 8, 0.0, 1.0);
    refnet::DTensor dinput(1, 8, 8, 8);
    for (std::size_t i = 0; i < input.size(); ++i) dinput.v[i] = input.v[i];

    // L = sum over groups of c_g . P_g
    net.forward(input);
    std::vector<std::vector<float>> c(net.group_count());
    for (int g = 0; g < net.group_count(); ++g) {
        c[g].resize(net.group_prediction(g).size());
        for (float& v : c[g]) v = static_cast<float>(rng.uniform(-1.0, 1.0));
    }

    // the float forward agrees with the double reference
    auto params = refnet::snapshot_params(net);
    const auto ref0 = refnet::forward(net.spec(), params, dinput);
    for (int g = 0; g < net.group_count(); ++g) {
        const Tensor4& p = net.group_prediction(g);
        for (std::size_t i = 0; i < p.size(); ++i)
            CHECK(std::abs(p.v[i] - ref0[g].v[i]) < 1e-4);
    }

    net.zero_grad();
    for (int g = 0; g < net.group_count(); ++g) {
        Tensor4& p = net.group_prediction(g);
        std::copy(c[g].begin(), c[g].end(), p.g.begin());
    }
    net.backward();

    auto loss = [&]() {
        const auto probs = refnet::forward(net.spec(), params, dinput);
        double L = 0.0;
        for (std::size_t g = 0; g < probs.size(); ++g)
            for (std::size_t i = 0; i < probs[g].v.size(); ++i)
                L += static_cast<double>(c[g][i]) * probs[g].v[i];
        return L;
    };

    auto net_params = net.parameters();
    double grad_scale = 0.0;
    for (const auto& p : net_params)
        for (float gv : *p.grad)
            grad_scale = std::max(grad_scale, static_cast<double>(std::abs(gv)));
    REQUIRE(grad_scale > 0.0);

    Rng pick(31);
    double max_rel = 0.0;
    const double h = 1e-6;
    for (int t = 0; t < 30; ++t) {
        const std::size_t pi = static_cast<std::size_t>(
            pick.uniform_int(0, static_cast<std::int64_t>(net_params.size()) - 1));
        auto& vals = params[net_params[pi].name];
        const std::size_t j = static_cast<std::size_t>(
            pick.uniform_int(0, static_cast<std::int64_t>(vals.size()) - 1));
        const double orig = vals[j];
        vals[j] = orig + h;
        const double lu = loss();
        vals[j] = orig - h;
        const double ld = loss();
        vals[j] = orig;
        const double fd = (lu - ld) / (2.0 * h);
        const double an = (*net_params[pi].grad)[j];
        const double rel =
            std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-3 * grad_scale});
        max_rel = std::max(max_rel, rel);
    }
    CHECK(max_rel < 1e-3);
}

TEST_CASE("saturated attention reduces the block to relu(norm(conv))") {
    NetSpec spec;
    BlockSpec b;
    b.in_channels = 1;
    b.out_channels = 1;
    b.attention_stages = 2;
    spec.blocks = {b};
    Net net(spec, 1);

    auto params = net.parameters();
    for (auto& p : params) {
        auto& v = *p.value;
        if (p.name == "block0.conv.w") {
            std::fill(v.begin(), v.end(), 0.0f);
            v[13] = 1.0f;  // center tap
        } else if (p.name == "block0.conv.b") {
            v[0] = 0.0f;
        } else if (p.name.find("attn") != std::string::npos) {
            if (p.name.back() == 'w') std::fill(v.begin(), v.end(), 0.0f);
            else std::fill(v.begin(), v.end(), 25.0f);  // saturate the sigmoid
        }
    }

    Rng rng(5);
    Tensor4 input = random_tensor(rng, 1, 6);
    net.forward(input);
    const Tensor4& fb = net.block_output(0);

    // reference: relu of the instance-normalized input
    nn::InstanceNorm norm;
    Tensor4 normed, ref;
    norm.forward(input, normed);
    nn::relu_forward(normed, ref);
    for (std::size_t i = 0; i < ref.size(); ++i)
        CHECK(std::abs(fb.v[i] - ref.v[i]) < 1e-6f * std::max(1.0f, std::abs(ref.v[i])));
}

TEST_CASE("zero input produces a zero block output") {
    NetSpec spec;
    BlockSpec b;
    b.in_channels = 1;
    b.out_channels = 2;
    spec.blocks = {b};
    Net net(spec, 3);
    Tensor4 input(1, 6, 6, 6);
    net.forward(input);
    for (float v : net.block_output(0).v) CHECK(v == 0.0f);
}

TEST_CASE("zeroed head outputs probability one half everywhere") {
    NetSpec spec = NetSpec::toy();
    Net net(spec, 9);
    for (auto& p : net.parameters())
        if (p.name.find("head") != std::string::npos)
            std::fill(p.value->begin(), p.value->end(), 0.0f);
    Rng rng(6);
    Tensor4 input = random_tensor(rng, 1, 8, 0.0, 1.0);
    net.forward(input);
    for (float v : net.prediction().v) CHECK(v == 0.5f);
}

TEST_CASE("dropout: p=0 is a no-op and keep rate tracks 1-p") {
    NetSpec spec = NetSpec::toy();
    Net net(spec, 11);
    Rng rng(8);
    Tensor4 input = random_tensor(rng, 1, 8, 0.0, 1.0);

    net.forward(input, nullptr);
    const std::vector<float> inference = net.prediction().v;
    DropoutPlan plan;  // p = 0
    plan.p = 0.0;
    net.forward(input, &plan);
    CHECK(net.prediction().v == inference);

    NetSpec sd = NetSpec::toy();
    sd.dropout_p = 0.3;
    Net net2(sd, 11);
    Rng drng(77);
    std::size_t kept = 0, total = 0;
    for (int t = 0; t < 10000; ++t) {
        const DropoutPlan p = net2.draw_dropout(drng);
        for (const auto& group : p.keep)
            for (std::uint8_t k : group) {
                kept += k;
                ++total;
            }
    }
    const double rate = static_cast<double>(kept) / static_cast<double>(total);
    CHECK(std::abs(rate - 0.7) < 0.01 * 0.7 + 0.01);
}

TEST_CASE("checkpoints round trip bit-exactly") {
    NetSpec spec = NetSpec::toy();
    Net net(spec, 21);
    const auto path = std::filesystem::temp_directory_path() / "gradseg_net.gsnet";
    net.save(path);
    Net back = Net::load(path);

    Rng rng(4);
    Tensor4 input = random_tensor(rng, 1, 8, 0.0, 1.0);
    net.forward(input);
    back.forward(input);
    CHECK(net.prediction().v == back.prediction().v);
    std::filesystem::remove(path);
}

TEST_CASE("inference ignores non-final group heads bit-exactly") {
    NetSpec spec = NetSpec::toy();
    Net net(spec, 33);
    Rng rng(4);
    Tensor4 input = random_tensor(rng, 1, 8, 0.0, 1.0);
    net.forward(input);
    const std::vector<float> full = net.prediction().v;

    Net pruned = net;
    for (auto& p : pruned.parameters())
        if (p.name.find("group0.head") != std::string::npos ||
            (p.name.find("pyr") != std::string::npos && p.name.find("block0") != std::string::npos))
            std::fill(p.value->begin(), p.value->end(), 777.0f);  // garbage in unused heads
    pruned.forward(input, nullptr, true);
    CHECK(pruned.prediction().v == full);
}

TEST_CASE("same seed gives identical nets, different seeds differ") {
    NetSpec spec = NetSpec::toy();
    Net a(spec, 5), b(spec, 5), c(spec, 6);
    auto pa = a.parameters(), pb = b.parameters(), pc = c.parameters();
    bool all_equal = true, any_diff = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        all_equal &= *pa[i].value == *pb[i].value;
        any_diff |= *pa[i].value != *pc[i].value;
    }
    CHECK(all_equal);
    CHECK(any_diff);
}

TEST_CASE("supervision schemes partition the desk net as documented") {
    NetSpec spec = NetSpec::desk_default();
    CHECK(spec.group_count() == 2);  // groups(2) is the default
    CHECK(spec.decoder_start() == 6);
    for (int i = 0; i < 6; ++i) CHECK(spec.blocks[i].group == 0);
    for (int i = 6; i < 10; ++i) CHECK(spec.blocks[i].group == 1);
    CHECK(!spec.group_is_decoder_side(0));
    CHECK(spec.group_is_decoder_side(1));

    apply_scheme(spec, SupervisionScheme::parse("final", 0.1, 0.1));
    CHECK(spec.group_count() == 1);
    CHECK(spec.pyramid_members()[0] == std::vector<int>{9});

    apply_scheme(spec, SupervisionScheme::parse("per-block", 0.1, 0.1));
    CHECK(spec.group_count() == 10);

    apply_scheme(spec, SupervisionScheme::parse("groups-4-cross", 0.1, 0.1));
    CHECK(spec.group_count() == 4);
    CHECK(spec.blocks[0].group == 0);
    CHECK(spec.blocks[1].group == 1);
    CHECK(spec.blocks[2].group == 0);
    CHECK(spec.blocks[6].group == 2);
    CHECK(spec.blocks[7].group == 3);
    spec.validate();
}

TEST_CASE("attention maps are max-normalized with zero maps for zero layers") {
    NetSpec spec = NetSpec::toy();
    Net net(spec, 13);
    Rng rng(3);
    Tensor4 input = random_tensor(rng, 1, 8, 0.0, 1.0);
    net.forward(input);  // no backward: gradient maps must be all-zero

    const AttentionMaps maps = attention_probe(net, {1, 1, 1});
    REQUIRE(maps.output.size() == 4);
    for (const Volume& o : maps.output) {
        float mx = 0.0f;
        for (float v : o.data) mx = std::max(mx, v);
        CHECK(mx == 1.0f);
    }
    for (const Volume& g : maps.gradient)
        for (float v : g.data) CHECK(v == 0.0f);
}

TEST_CASE("erosion probe: trace starts at the seed ratio and erodes") {
    Volume tmpl({17, 17, 17}, {1, 1, 1}, ElementKind::Binary);
    tmpl.at(8, 8, 8) = 1.0f;
    const ProbeTrace tr = erosion_dilation_probe(tmpl, 1.0, 3);
    REQUIRE(tr.fg_bg_ratio.size() == 4);
    CHECK(tr.fg_bg_ratio[0] == doctest::Approx(1.0));
    CHECK(tr.fg_bg_ratio[1] < tr.fg_bg_ratio[0]);  // erosion begins immediately

    // hand-convolved oracle for the first layer: the centre voxel of a
    // (-1 in a sea of +1) field becomes 25/27; the 26 adjacent background
    // voxels drop to 25/27 as well, the rest stay 1
    const double n_bg = 17.0 * 17.0 * 17.0 - 1.0;
    const double bg_mean = (26.0 * 25.0 / 27.0 + (n_bg - 26.0)) / n_bg;
    CHECK(tr.fg_bg_ratio[1] == doctest::Approx((25.0 / 27.0) / bg_mean).epsilon(1e-9));
}

TEST_CASE("dilation probe: strong foreground seed floods its neighborhood") {
    Volume tmpl({17, 17, 17}, {1, 1, 1}, ElementKind::Binary);
    for (int dz = -1; dz <= 1; ++dz)
        for (int dy = -1; dy <= 1; ++dy)
            for (int dx = -1; dx <= 1; ++dx) tmpl.at(8 + dx, 8 + dy, 8 + dz) = 1.0f;
    const ProbeTrace tr = erosion_dilation_probe(tmpl, 50.0, 2);
    CHECK(tr.near_bg_influx[0] == doctest::Approx(0.0));
    CHECK(tr.near_bg_influx[1] > 1.0);  // foreground gradient reaches the neighbors
}

TEST_CASE("results are identical across thread counts") {
    NetSpec spec = NetSpec::toy();
    Net net(spec, 55);
    Rng rng(8);
    Tensor4 input = random_tensor(rng, 1, 8, 0.0, 1.0);

    gradseg::set_max_threads(1);
    net.forward(input);
    const std::vector<float> single = net.prediction().v;
    net.zero_grad();
    for (int g = 0; g < net.group_count(); ++g) {
        Tensor4& p = net.group_prediction(g);
        for (std::size_t i = 0; i < p.size(); ++i) p.g[i] = 0.01f * static_cast<float>(i % 7);
    }
    net.backward();
    std::vector<std::vector<float>> grads1;
    for (auto& p : net.parameters()) grads1.push_back(*p.grad);

    gradseg::set_max_threads(2);
    net.zero_grad();
    net.forward(input);
    CHECK(net.prediction().v == single);
    for (int g = 0; g < net.group_count(); ++g) {
        Tensor4& p = net.group_prediction(g);
        for (std::size_t i = 0; i < p.size(); ++i) p.g[i] = 0.01f * static_cast<float>(i % 7);
    }
    net.backward();
    auto params = net.parameters();
    for (std::size_t i = 0; i < params.size(); ++i) CHECK(*params[i].grad == grads1[i]);
    gradseg::set_max_threads(0);
}
