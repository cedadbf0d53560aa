#pragma once

#include <optional>
#include <string>
#include <vector>

#include "gradseg/volume.hpp"
#include "gradseg/weights.hpp"

namespace gradseg {

enum class LossKind { Dice, WeightedDice, Tversky, RootTversky, GeneralUnion, DiceWbce };

const char* to_string(LossKind kind);
LossKind loss_kind_from_string(const std::string& s);

/// Weight-decay magnitude m derived from alpha, main-text rule.
inline double decay_magnitude(double alpha) { return (1.0 - 2.0 * alpha) / (1.0 - alpha); }

/// Alternate rule from the supplementary material. Note this exceeds the
/// valid range m < 1 whenever alpha < 0.5; callers must validate.
inline double decay_magnitude_alternate(double alpha) { return (1.0 - alpha) / alpha; }

struct LossConfig {
    double alpha = 0.1;           // false-positive weight; beta = 1 - alpha
    double root = 0.7;            // focal root r_l in (0, 1]; 1 recovers non-focal losses
    double distance_root = 0.5;   // decay exponent r_d for distance weights
    double epsilon = 1e-4;        // stabilizer for the focal gradient term
    double m = decay_magnitude(0.1);
    double bce_lambda = 1.0;      // Dice+wBCE mixing weight
    double bce_fg_weight = 5.0;   // per-voxel BCE weight on foreground

    double beta() const { return 1.0 - alpha; }

    static LossConfig for_alpha(double alpha) {
        LossConfig cfg;
        cfg.alpha = alpha;
        cfg.m = decay_magnitude(alpha);
        return cfg;
    }

    /// Throws std::invalid_argument when a parameter needed by `kind` is
    /// out of its documented range.
    void validate(LossKind kind) const;
};

struct LossResult {
    double value = 0.0;
    Dims dims;
    std::vector<double> gradient;  // d(loss)/d(pred), one entry per voxel
};

struct GradientRatioReport {
    double empirical_ratio = 0.0;    // from the computed gradients
    double closed_form_ratio = 0.0;  // from the loss value via the ratio formula
    double lower_bound = 0.0;
};

LossResult dice_loss(const Volume& pred, const Volume& gt);
LossResult weighted_dice_loss(const Volume& pred, const Volume& gt, const WeightMap& weights);
LossResult tversky_loss(const Volume& pred, const Volume& gt, const LossConfig& cfg);
LossResult root_tversky_loss(const Volume& pred, const Volume& gt, const LossConfig& cfg);
LossResult general_union_loss(const Volume& pred, const Volume& gt, const WeightMap& weights,
                              const LossConfig& cfg);
LossResult dice_wbce_loss(const Volume& pred, const Volume& gt, const LossConfig& cfg);

/// Uniform dispatch. `weights` is required for WeightedDice and GeneralUnion
/// and ignored otherwise.
LossResult evaluate_loss(LossKind kind, const Volume& pred, const Volume& gt,
                         const WeightMap* weights, const LossConfig& cfg);

/// Foreground/background gradient-ratio diagnostics. For losses whose
/// foreground gradients vary per voxel (weighted Dice, Root Tversky,
/// General Union) the reported ratio is the minimum over foreground voxels,
/// so the lower bound is directly assertable. Not defined for DiceWbce.
GradientRatioReport gradient_ratio(LossKind kind, const Volume& pred, const Volume& gt,
                                   const WeightMap* weights, const LossConfig& cfg);

/// Central-difference verification of the analytic gradient. Every pred
/// value must lie strictly inside (step, 1-step). Returns the max over
/// voxels of |fd - analytic| / max(|fd|, |analytic|, 1e-12).
double finite_difference_check(LossKind kind, const Volume& pred, const Volume& gt,
                               const WeightMap* weights, const LossConfig& cfg, double step);

}  // namespace gradseg
