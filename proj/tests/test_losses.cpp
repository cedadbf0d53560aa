#include <algorithm>
#include <cmath>

#include "doctest.h"
#include "gradseg/losses.hpp"
#include "gradseg/rng.hpp"

using namespace gradseg;

namespace {

Volume prob(std::vector<float> vals) {
    Volume v({static_cast<int>(vals.size()), 1, 1}, {1, 1, 1}, ElementKind::Probability);
    v.data = std::move(vals);
    return v;
}

Volume binary(std::vector<float> vals) {
    Volume v({static_cast<int>(vals.size()), 1, 1}, {1, 1, 1}, ElementKind::Binary);
    v.data = std::move(vals);
    return v;
}

struct RandomField {
    Volume pred;
    Volume gt;
};

// Random prediction in [0.05, 0.95] with a random ground truth containing
// both classes. class_uniform makes all foreground predictions share one
// value and all background predictions another.
RandomField random_field(Rng& rng, int n, bool class_uniform = false) {
    Volume pred({n, 1, 1}, {1, 1, 1}, ElementKind::Probability);
    Volume gt({n, 1, 1}, {1, 1, 1}, ElementKind::Binary);
    while (true) {
        int fg = 0;
        for (int i = 0; i < n; ++i) {
            gt.data[i] = rng.bernoulli(0.4) ? 1.0f : 0.0f;
            fg += gt.data[i] != 0.0f;
        }
        if (fg > 0 && fg < n) break;
    }
    if (class_uniform) {
        const float pf = static_cast<float>(rng.uniform(0.05, 0.95));
        const float pb = static_cast<float>(rng.uniform(0.05, 0.95));
        for (int i = 0; i < n; ++i) pred.data[i] = gt.data[i] != 0.0f ? pf : pb;
    } else {
        for (int i = 0; i < n; ++i) pred.data[i] = static_cast<float>(rng.uniform(0.05, 0.95));
    }
    return {std::move(pred), std::move(gt)};
}

WeightMap unit_weights(const Volume& v) { return WeightMap::uniform(v.dims, 1.0); }

}  // namespace

TEST_CASE("dice matches the hand-evaluated example") {
    const auto pred = prob({1, 1, 0, 0});
    const auto gt = binary({1, 0, 0, 0});
    const LossResult r = dice_loss(pred, gt);
    CHECK(r.value == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
    CHECK(r.gradient[0] == doctest::Approx(-4.0 / 9.0).epsilon(1e-12));
    CHECK(r.gradient[1] == doctest::Approx(2.0 / 9.0).epsilon(1e-12));
    CHECK(r.gradient[2] == doctest::Approx(2.0 / 9.0).epsilon(1e-12));

    const auto rep = gradient_ratio(LossKind::Dice, pred, gt, nullptr, {});
    CHECK(rep.empirical_ratio == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(rep.closed_form_ratio == doctest::Approx(2.0).epsilon(1e-12));
    CHECK(rep.lower_bound == doctest::Approx(1.0));
}

TEST_CASE("perfect binary prediction gives zero loss for every union loss") {
    const auto gt = binary({1, 0, 1, 0, 0});
    const auto pred = prob({1, 0, 1, 0, 0});
    const WeightMap w = unit_weights(gt);
    const LossConfig cfg = LossConfig::for_alpha(0.3);
    CHECK(dice_loss(pred, gt).value == doctest::Approx(0.0));
    CHECK(weighted_dice_loss(pred, gt, w).value == doctest::Approx(0.0));
    CHECK(tversky_loss(pred, gt, cfg).value == doctest::Approx(0.0));
    CHECK(root_tversky_loss(pred, gt, cfg).value == doctest::Approx(0.0));
    CHECK(general_union_loss(pred, gt, w, cfg).value == doctest::Approx(0.0));
    CHECK(dice_wbce_loss(pred, gt, cfg).value == doctest::Approx(0.0).epsilon(1e-9));
}

TEST_CASE("degenerate inputs are rejected") {
    CHECK_THROWS_AS(dice_loss(prob({1, 0}), binary({0, 0})), std::invalid_argument);
    Volume small({1, 1, 1}, {1, 1, 1}, ElementKind::Probability);
    small.data = {0.5f};
    CHECK_THROWS_AS(dice_loss(small, binary({1, 0})), std::invalid_argument);
}

TEST_CASE("weighted dice matches the hand-evaluated example and reduces to dice") {
    const auto pred = prob({1, 1, 0, 0});
    const auto gt = binary({1, 0, 0, 0});
    WeightMap w = unit_weights(gt);
    w.w = {2, 1, 1, 1};
    CHECK(weighted_dice_loss(pred, gt, w).value == doctest::Approx(0.2).epsilon(1e-12));

    Rng rng(11);
    for (int t = 0; t < 20; ++t) {
        const auto f = random_field(rng, 24);
        const LossResult a = dice_loss(f.pred, f.gt);
        const LossResult b = weighted_dice_loss(f.pred, f.gt, unit_weights(f.gt));
        CHECK(a.value == b.value);
        for (std::size_t i = 0; i < a.gradient.size(); ++i)
            CHECK(a.gradient[i] == b.gradient[i]);
    }
}

TEST_CASE("weighted dice class-constant ratio attains the w_f/w_b bound at p=g") {
    const auto gt = binary({1, 1, 0, 0, 0});
    const auto pred = prob({1, 1, 0, 0, 0});
    WeightMap w = unit_weights(gt);
    w.w = {3, 3, 1, 1, 1};
    const auto rep = gradient_ratio(LossKind::WeightedDice, pred, gt, &w, {});
    CHECK(rep.lower_bound == doctest::Approx(3.0));
    CHECK(rep.empirical_ratio == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(rep.empirical_ratio >= rep.lower_bound - 1e-9);
}

TEST_CASE("tversky matches the hand-evaluated example") {
    const auto pred = prob({1, 1, 0, 0});
    const auto gt = binary({1, 0, 0, 0});
    const LossConfig cfg = LossConfig::for_alpha(0.1);
    const LossResult r = tversky_loss(pred, gt, cfg);
    CHECK(r.value == doctest::Approx(1.0 - 1.0 / 1.1).epsilon(1e-12));
}

TEST_CASE("tversky ratio equals beta/alpha at a perfect prediction") {
    const auto gt = binary({1, 0, 1, 0});
    const auto pred = prob({1, 0, 1, 0});
    const LossConfig cfg = LossConfig::for_alpha(0.1);
    CHECK(tversky_loss(pred, gt, cfg).value == doctest::Approx(0.0));
    const auto rep = gradient_ratio(LossKind::Tversky, pred, gt, nullptr, cfg);
    CHECK(rep.empirical_ratio == doctest::Approx(9.0).epsilon(1e-12));
    CHECK(rep.lower_bound == doctest::Approx(9.0));
}

TEST_CASE("tversky at alpha 0.5 reproduces the dice ratio formula") {
    Rng rng(5);
    for (int t = 0; t < 20; ++t) {
        const auto f = random_field(rng, 30);
        const LossConfig cfg = LossConfig::for_alpha(0.5);
        const double tv = tversky_loss(f.pred, f.gt, cfg).value;
        const auto rep = gradient_ratio(LossKind::Tversky, f.pred, f.gt, nullptr, cfg);
        CHECK(rep.closed_form_ratio ==
              doctest::Approx(2.0 / (1.0 - tv) - 1.0).epsilon(1e-12));
    }
}

TEST_CASE("root tversky matches the hand-evaluated example") {
    const auto pred = prob({0.25f, 0.0f});
    const auto gt = binary({1, 0});
    LossConfig cfg = LossConfig::for_alpha(0.2);
    cfg.root = 0.5;
    const LossResult r = root_tversky_loss(pred, gt, cfg);
    CHECK(r.value == doctest::Approx(1.0 - 0.5 / 0.85).epsilon(1e-12));
}

TEST_CASE("root tversky bound and focality") {
    LossConfig cfg = LossConfig::for_alpha(0.1);
    cfg.root = 0.7;
    const auto gt = binary({1, 1, 0, 0});
    const auto pred = prob({0.1f, 0.9f, 0.3f, 0.3f});
    const auto rep = gradient_ratio(LossKind::RootTversky, pred, gt, nullptr, cfg);
    CHECK(rep.lower_bound == doctest::Approx(6.0));
    CHECK(rep.empirical_ratio >= rep.lower_bound - 1e-9);

    const LossResult r = root_tversky_loss(pred, gt, cfg);
    CHECK(std::abs(r.gradient[0]) > std::abs(r.gradient[1]));  // harder voxel, larger pull
}

TEST_CASE("monotone focality: foreground gradient magnitude decreases in p") {
    LossConfig cfg = LossConfig::for_alpha(0.2);
    cfg.root = 0.6;
    const auto gt = binary({1, 1, 1, 1, 0, 0});
    const auto pred = prob({0.1f, 0.3f, 0.6f, 0.9f, 0.4f, 0.4f});
    const LossResult r = root_tversky_loss(pred, gt, cfg);
    for (int i = 0; i < 3; ++i) CHECK(std::abs(r.gradient[i]) > std::abs(r.gradient[i + 1]));
}

TEST_CASE("general union matches the hand-evaluated example") {
    const auto pred = prob({0.5f, 0.5f});
    const auto gt = binary({1, 0});
    WeightMap w = unit_weights(gt);
    LossConfig cfg = LossConfig::for_alpha(0.1);
    cfg.root = 0.5;
    cfg.m = 0.0;
    const LossResult r = general_union_loss(pred, gt, w, cfg);
    CHECK(r.value == doctest::Approx(1.0 - std::sqrt(0.5)).epsilon(1e-12));
}

TEST_CASE("general union with m=0 reduces to root tversky exactly") {
    Rng rng(21);
    for (int t = 0; t < 20; ++t) {
        const auto f = random_field(rng, 27);
        LossConfig cfg = LossConfig::for_alpha(0.15);
        cfg.root = 0.7;
        cfg.m = 0.0;
        const LossResult a = root_tversky_loss(f.pred, f.gt, cfg);
        const LossResult b = general_union_loss(f.pred, f.gt, unit_weights(f.gt), cfg);
        CHECK(a.value == b.value);
        for (std::size_t i = 0; i < a.gradient.size(); ++i)
            CHECK(std::abs(a.gradient[i] - b.gradient[i]) < 1e-12);
    }
}

TEST_CASE("root tversky at r=1 reduces to tversky exactly") {
    Rng rng(31);
    for (int t = 0; t < 20; ++t) {
        const auto f = random_field(rng, 27);
        LossConfig cfg = LossConfig::for_alpha(0.2);
        cfg.root = 1.0;
        const LossResult a = tversky_loss(f.pred, f.gt, cfg);
        const LossResult b = root_tversky_loss(f.pred, f.gt, cfg);
        CHECK(a.value == doctest::Approx(b.value).epsilon(1e-14));
        for (std::size_t i = 0; i < a.gradient.size(); ++i)
            CHECK(std::abs(a.gradient[i] - b.gradient[i]) < 1e-12);
    }
}

TEST_CASE("general union lower bound from the m rule") {
    LossConfig cfg = LossConfig::for_alpha(0.1);
    cfg.root = 0.7;
    CHECK(cfg.m == doctest::Approx(8.0 / 9.0).epsilon(1e-12));
    const auto gt = binary({1, 0, 0});
    const auto pred = prob({0.5f, 0.5f, 0.5f});
    const WeightMap w = unit_weights(gt);
    const auto rep = gradient_ratio(LossKind::GeneralUnion, pred, gt, &w, cfg);
    CHECK(rep.lower_bound == doctest::Approx((1.0 / 9.0) * 6.0).epsilon(1e-12));
    CHECK(rep.empirical_ratio >= rep.lower_bound - 1e-9);
}

TEST_CASE("general union validates foreground and background weights") {
    const auto pred = prob({0.5f, 0.5f});
    const auto gt = binary({1, 0});
    LossConfig cfg = LossConfig::for_alpha(0.1);
    WeightMap w = unit_weights(gt);
    w.w[0] = 0.05;  // below 1 - m = 1/9
    CHECK_THROWS_AS(general_union_loss(pred, gt, w, cfg), std::invalid_argument);
    w.w = {1.0, 0.7};  // background must stay 1
    CHECK_THROWS_AS(general_union_loss(pred, gt, w, cfg), std::invalid_argument);
}

TEST_CASE("alternate decay-magnitude rule is exposed but range-checked") {
    CHECK(decay_magnitude_alternate(0.5) == doctest::Approx(1.0));
    LossConfig cfg = LossConfig::for_alpha(0.1);
    cfg.m = decay_magnitude_alternate(0.1);  // 9, outside [0,1)
    CHECK_THROWS_AS(cfg.validate(LossKind::GeneralUnion), std::invalid_argument);
}

TEST_CASE("gradient uniformity within classes for dice and weighted dice") {
    Rng rng(13);
    for (int t = 0; t < 10; ++t) {
        const auto f = random_field(rng, 64);
        WeightMap w = unit_weights(f.gt);
        for (std::size_t i = 0; i < w.w.size(); ++i) w.w[i] = f.gt.data[i] != 0.0f ? 2.5 : 1.0;
        for (const LossResult& r :
             {dice_loss(f.pred, f.gt), weighted_dice_loss(f.pred, f.gt, w)}) {
            double fg_min = 1e300, fg_max = -1e300, bg_min = 1e300, bg_max = -1e300;
            for (std::size_t i = 0; i < r.gradient.size(); ++i) {
                if (f.gt.data[i] != 0.0f) {
                    fg_min = std::min(fg_min, r.gradient[i]);
                    fg_max = std::max(fg_max, r.gradient[i]);
                } else {
                    bg_min = std::min(bg_min, r.gradient[i]);
                    bg_max = std::max(bg_max, r.gradient[i]);
                }
            }
            CHECK(fg_max - fg_min < 1e-12);
            CHECK(bg_max - bg_min < 1e-12);
        }
    }
}

TEST_CASE("closed-form ratios agree with empirical gradients on class-uniform fields") {
    Rng rng(17);
    LossConfig cfg = LossConfig::for_alpha(0.1);
    cfg.root = 0.7;
    for (int t = 0; t < 200; ++t) {
        const auto f = random_field(rng, 40, true);
        WeightMap w = unit_weights(f.gt);

        for (LossKind kind : {LossKind::Dice, LossKind::WeightedDice, LossKind::Tversky,
                              LossKind::RootTversky, LossKind::GeneralUnion}) {
            const WeightMap* wp =
                (kind == LossKind::WeightedDice || kind == LossKind::GeneralUnion) ? &w : nullptr;
            const auto rep = gradient_ratio(kind, f.pred, f.gt, wp, cfg);
            CHECK(std::abs(rep.empirical_ratio - rep.closed_form_ratio) <
                  1e-9 * std::max(1.0, std::abs(rep.closed_form_ratio)));
            CHECK(rep.empirical_ratio >= rep.lower_bound - 1e-9);
        }
    }
}

TEST_CASE("analytic gradients pass finite-difference checks") {
    Rng rng(19);
    Volume pred({4, 4, 4}, {1, 1, 1}, ElementKind::Probability);
    Volume gt({4, 4, 4}, {1, 1, 1}, ElementKind::Binary);
    for (float& x : pred.data) x = static_cast<float>(rng.uniform(0.05, 0.95));
    int fg = 0;
    for (float& g : gt.data) {
        g = rng.bernoulli(0.3) ? 1.0f : 0.0f;
        fg += g != 0.0f;
    }
    REQUIRE(fg > 0);

    LossConfig cfg = LossConfig::for_alpha(0.2);
    cfg.root = 0.7;
    cfg.epsilon = 1e-12;  // keep the stabilized gradient consistent with the value
    WeightMap w = unit_weights(gt);
    for (std::size_t i = 0; i < w.w.size(); ++i)
        if (gt.data[i] != 0.0f) w.w[i] = 0.6 + 0.4 * rng.uniform();
    cfg.m = 0.5;

    const double h = 1e-5;
    CHECK(finite_difference_check(LossKind::Dice, pred, gt, nullptr, cfg, h) < 1e-6);
    CHECK(finite_difference_check(LossKind::WeightedDice, pred, gt, &w, cfg, h) < 1e-6);
    CHECK(finite_difference_check(LossKind::Tversky, pred, gt, nullptr, cfg, h) < 1e-6);
    CHECK(finite_difference_check(LossKind::RootTversky, pred, gt, nullptr, cfg, h) < 1e-6);
    CHECK(finite_difference_check(LossKind::GeneralUnion, pred, gt, &w, cfg, h) < 1e-6);
    CHECK(finite_difference_check(LossKind::DiceWbce, pred, gt, nullptr, cfg, h) < 1e-6);
}

TEST_CASE("finite differences hold at a constant prediction") {
    Volume pred({3, 3, 3}, {1, 1, 1}, ElementKind::Probability);
    Volume gt({3, 3, 3}, {1, 1, 1}, ElementKind::Binary);
    for (float& x : pred.data) x = 0.5f;
    gt.data[4] = 1.0f;
    gt.data[13] = 1.0f;
    LossConfig cfg = LossConfig::for_alpha(0.1);
    cfg.epsilon = 1e-12;
    for (LossKind kind : {LossKind::Dice, LossKind::Tversky, LossKind::RootTversky,
                          LossKind::DiceWbce})
        CHECK(finite_difference_check(kind, pred, gt, nullptr, cfg, 1e-5) < 1e-6);
}

TEST_CASE("dice-wbce adds the weighted cross entropy term") {
    const auto pred = prob({0.5f, 0.5f});
    const auto gt = binary({1, 0});
    LossConfig cfg;
    cfg.bce_lambda = 1.0;
    cfg.bce_fg_weight = 5.0;
    const LossResult r = dice_wbce_loss(pred, gt, cfg);
    // dice part: 1 - 2*0.5/2 = 0.5; bce part: (5*ln2 + ln2)/2 = 3*ln2
    CHECK(r.value == doctest::Approx(0.5 + 3.0 * std::log(2.0)).epsilon(1e-12));
}

TEST_CASE("gradient ratio rejects dice-wbce") {
    const auto pred = prob({0.5f, 0.5f});
    const auto gt = binary({1, 0});
    CHECK_THROWS_AS(gradient_ratio(LossKind::DiceWbce, pred, gt, nullptr, {}),
                    std::invalid_argument);
}
