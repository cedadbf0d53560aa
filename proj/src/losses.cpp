#include "gradseg/losses.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace gradseg {

const char* to_string(LossKind kind) {
    switch (kind) {
        case LossKind::Dice: return "dice";
        case LossKind::WeightedDice: return "weighted-dice";
        case LossKind::Tversky: return "tversky";
        case LossKind::RootTversky: return "root-tversky";
        case LossKind::GeneralUnion: return "general-union";
        case LossKind::DiceWbce: return "dice-wbce";
    }
    return "dice";
}

LossKind loss_kind_from_string(const std::string& s) {
    if (s == "dice") return LossKind::Dice;
    if (s == "weighted-dice") return LossKind::WeightedDice;
    if (s == "tversky") return LossKind::Tversky;
    if (s == "root-tversky") return LossKind::RootTversky;
    if (s == "general-union") return LossKind::GeneralUnion;
    if (s == "dice-wbce") return LossKind::DiceWbce;
    throw std::invalid_argument("unknown loss kind '" + s + "'");
}

void LossConfig::validate(LossKind kind) const {
    const bool needs_alpha = kind == LossKind::Tversky || kind == LossKind::RootTversky ||
                             kind == LossKind::GeneralUnion;
    if (needs_alpha && !(alpha > 0.0 && alpha < 1.0))
        throw std::invalid_argument("alpha must be in (0,1)");
    if ((kind == LossKind::RootTversky || kind == LossKind::GeneralUnion)) {
        if (!(root > 0.0 && root <= 1.0))
            throw std::invalid_argument("root must be in (0,1]");
        if (!(epsilon > 0.0)) throw std::invalid_argument("epsilon must be positive");
    }
    if (kind == LossKind::GeneralUnion) {
        if (!(m >= 0.0 && m < 1.0)) throw std::invalid_argument("m must be in [0,1)");
        if (!(distance_root > 0.0))
            throw std::invalid_argument("distance_root must be positive");
    }
    if (kind == LossKind::DiceWbce) {
        if (!(bce_lambda >= 0.0)) throw std::invalid_argument("bce_lambda must be >= 0");
        if (!(bce_fg_weight > 0.0)) throw std::invalid_argument("bce_fg_weight must be positive");
    }
}

namespace {

std::size_t check_pair(const Volume& pred, const Volume& gt) {
    if (pred.dims != gt.dims)
        throw std::invalid_argument("pred/gt dim mismatch");
    if (gt.kind != ElementKind::Binary)
        throw std::invalid_argument("ground truth must be a binary volume");
    if (pred.kind == ElementKind::Intensity)
        throw std::invalid_argument("prediction must be a probability or binary volume");
    bool any_fg = false;
    for (float g : gt.data)
        if (g != 0.0f) { any_fg = true; break; }
    if (!any_fg)
        throw std::invalid_argument("ground truth has no foreground voxels");
    return gt.size();
}

void check_weights(const WeightMap& w, const Volume& gt, bool union_bounds, double m) {
    if (w.dims != gt.dims) throw std::invalid_argument("weight map dim mismatch");
    for (std::size_t i = 0; i < w.w.size(); ++i) {
        if (!(w.w[i] > 0.0)) throw std::invalid_argument("weights must be strictly positive");
        if (union_bounds) {
            if (gt.data[i] != 0.0f) {
                if (w.w[i] < 1.0 - m - 1e-12 || w.w[i] > 1.0 + 1e-12)
                    throw std::invalid_argument(
                        "general-union foreground weights must lie in [1-m, 1]");
            } else if (w.w[i] != 1.0) {
                throw std::invalid_argument("general-union background weights must equal 1");
            }
        }
    }
}

// Shared accumulator for the union-family losses. All reductions run in
// double with a fixed sequential order.
struct UnionSums {
    double numer = 0.0;  // Σ w p^r g  (w=1, r=1 where not applicable)
    double denom = 0.0;  // loss-specific denominator
};

double stabilized_pow(double p, double r, double eps) {
    return std::pow(p + eps, r - 1.0);
}

}  // namespace

LossResult dice_loss(const Volume& pred, const Volume& gt) {
    const std::size_t n = check_pair(pred, gt);
    double a = 0.0, b = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double p = pred.data[i], g = gt.data[i];
        a += p * g;
        b += p + g;
    }
    LossResult r;
    r.value = 1.0 - 2.0 * a / b;
    r.dims = pred.dims;
    r.gradient.resize(n);
    const double inv_b2 = 1.0 / (b * b);
    for (std::size_t i = 0; i < n; ++i) {
        const double g = gt.data[i];
        r.gradient[i] = -2.0 * (g * b - a) * inv_b2;
    }
    return r;
}

LossResult weighted_dice_loss(const Volume& pred, const Volume& gt, const WeightMap& weights) {
    const std::size_t n = check_pair(pred, gt);
    check_weights(weights, gt, false, 0.0);
    double a = 0.0, b = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double p = pred.data[i], g = gt.data[i], w = weights.w[i];
        a += w * p * g;
        b += w * (p + g);
    }
    LossResult r;
    r.value = 1.0 - 2.0 * a / b;
    r.dims = pred.dims;
    r.gradient.resize(n);
    const double inv_b2 = 1.0 / (b * b);
    for (std::size_t i = 0; i < n; ++i) {
        const double g = gt.data[i], w = weights.w[i];
        r.gradient[i] = -2.0 * w * (g * b - a) * inv_b2;
    }
    return r;
}

LossResult tversky_loss(const Volume& pred, const Volume& gt, const LossConfig& cfg) {
    cfg.validate(LossKind::Tversky);
    const std::size_t n = check_pair(pred, gt);
    const double alpha = cfg.alpha, beta = cfg.beta();
    double a = 0.0, b = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double p = pred.data[i], g = gt.data[i];
        a += p * g;
        b += alpha * p + beta * g;
    }
    LossResult r;
    r.value = 1.0 - a / b;
    r.dims = pred.dims;
    r.gradient.resize(n);
    const double inv_b2 = 1.0 / (b * b);
    for (std::size_t i = 0; i < n; ++i) {
        const double g = gt.data[i];
        r.gradient[i] = -(g * b - alpha * a) * inv_b2;
    }
    return r;
}

LossResult root_tversky_loss(const Volume& pred, const Volume& gt, const LossConfig& cfg) {
    cfg.validate(LossKind::RootTversky);
    const std::size_t n = check_pair(pred, gt);
    const double alpha = cfg.alpha, beta = cfg.beta(), root = cfg.root, eps = cfg.epsilon;
    double a = 0.0, b = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double p = pred.data[i], g = gt.data[i];
        if (g != 0.0) a += std::pow(p, root) * g;
        b += alpha * p + beta * g;
    }
    LossResult r;
    r.value = 1.0 - a / b;
    r.dims = pred.dims;
    r.gradient.resize(n);
    const double inv_b2 = 1.0 / (b * b);
    for (std::size_t i = 0; i < n; ++i) {
        const double p = pred.data[i], g = gt.data[i];
        const double focal = g != 0.0 ? root * stabilized_pow(p, root, eps) * g : 0.0;
        r.gradient[i] = -(focal * b - alpha * a) * inv_b2;
    }
    return r;
}

LossResult general_union_loss(const Volume& pred, const Volume& gt, const WeightMap& weights,
                              const LossConfig& cfg) {
    cfg.validate(LossKind::GeneralUnion);
    const std::size_t n = check_pair(pred, gt);
    check_weights(weights, gt, true, cfg.m);
    const double alpha = cfg.alpha, beta = cfg.beta(), root = cfg.root, eps = cfg.epsilon;
    double a = 0.0, b = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double p = pred.data[i], g = gt.data[i], w = weights.w[i];
        if (g != 0.0) a += w * std::pow(p, root) * g;
        b += w * (alpha * p + beta * g);
    }
    LossResult r;
    r.value = 1.0 - a / b;
    r.dims = pred.dims;
    r.gradient.resize(n);
    const double inv_b2 = 1.0 / (b * b);
    for (std::size_t i = 0; i < n; ++i) {
        const double p = pred.data[i], g = gt.data[i], w = weights.w[i];
        const double focal = g != 0.0 ? root * stabilized_pow(p, root, eps) * g : 0.0;
        r.gradient[i] = -w * (focal * b - alpha * a) * inv_b2;
    }
    return r;
}

LossResult dice_wbce_loss(const Volume& pred, const Volume& gt, const LossConfig& cfg) {
    cfg.validate(LossKind::DiceWbce);
    LossResult r = dice_loss(pred, gt);
    const std::size_t n = gt.size();
    const double lambda = cfg.bce_lambda, wf = cfg.bce_fg_weight;
    constexpr double pmin = 1e-12;  // log clamp only; gradients use the same clamp
    double bce = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double p = std::clamp(static_cast<double>(pred.data[i]), pmin, 1.0 - pmin);
        const double g = gt.data[i];
        const double c = g != 0.0 ? wf : 1.0;
        bce += -c * (g * std::log(p) + (1.0 - g) * std::log(1.0 - p));
        r.gradient[i] += lambda * (c / static_cast<double>(n)) * (-g / p + (1.0 - g) / (1.0 - p));
    }
    r.value += lambda * bce / static_cast<double>(n);
    return r;
}

LossResult evaluate_loss(LossKind kind, const Volume& pred, const Volume& gt,
                         const WeightMap* weights, const LossConfig& cfg) {
    switch (kind) {
        case LossKind::Dice: return dice_loss(pred, gt);
        case LossKind::WeightedDice:
            if (!weights) throw std::invalid_argument("weighted-dice requires a weight map");
            return weighted_dice_loss(pred, gt, *weights);
        case LossKind::Tversky: return tversky_loss(pred, gt, cfg);
        case LossKind::RootTversky: return root_tversky_loss(pred, gt, cfg);
        case LossKind::GeneralUnion:
            if (!weights) throw std::invalid_argument("general-union requires a weight map");
            return general_union_loss(pred, gt, *weights, cfg);
        case LossKind::DiceWbce: return dice_wbce_loss(pred, gt, cfg);
    }
    throw std::invalid_argument("unknown loss kind");
}

GradientRatioReport gradient_ratio(LossKind kind, const Volume& pred, const Volume& gt,
                                   const WeightMap* weights, const LossConfig& cfg) {
    if (kind == LossKind::DiceWbce)
        throw std::invalid_argument("gradient ratio is not defined for dice-wbce");
    const LossResult res = evaluate_loss(kind, pred, gt, weights, cfg);

    const std::size_t n = gt.size();
    std::size_t n_fg = 0, n_bg = 0;
    double fg_sum = 0.0, bg_sum = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        if (gt.data[i] != 0.0f) {
            fg_sum += std::abs(res.gradient[i]);
            ++n_fg;
        } else {
            bg_sum += std::abs(res.gradient[i]);
            ++n_bg;
        }
    }
    if (n_fg == 0 || n_bg == 0)
        throw std::invalid_argument("gradient ratio needs both classes present");
    const double fg_mean = fg_sum / static_cast<double>(n_fg);
    const double bg_mean = bg_sum / static_cast<double>(n_bg);

    const double adaptive = 1.0 / (1.0 - res.value);  // 1/(1-L) term shared by all formulas

    GradientRatioReport rep;
    switch (kind) {
        case LossKind::Dice:
            rep.empirical_ratio = fg_mean / bg_mean;
            rep.closed_form_ratio = 2.0 * adaptive - 1.0;
            rep.lower_bound = 1.0;
            break;
        case LossKind::Tversky:
            rep.empirical_ratio = fg_mean / bg_mean;
            rep.closed_form_ratio = adaptive / cfg.alpha - 1.0;
            rep.lower_bound = cfg.beta() / cfg.alpha;
            break;
        case LossKind::WeightedDice: {
            double min_fg_w = std::numeric_limits<double>::infinity();
            double max_bg_w = 0.0, bg_w_sum = 0.0;
            double min_fg_grad = std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < n; ++i) {
                const double w = weights->w[i];
                if (gt.data[i] != 0.0f) {
                    min_fg_w = std::min(min_fg_w, w);
                    min_fg_grad = std::min(min_fg_grad, std::abs(res.gradient[i]));
                } else {
                    max_bg_w = std::max(max_bg_w, w);
                    bg_w_sum += w;
                }
            }
            const double bg_w_mean = bg_w_sum / static_cast<double>(n_bg);
            rep.empirical_ratio = min_fg_grad / bg_mean;
            rep.closed_form_ratio = (min_fg_w / bg_w_mean) * (2.0 * adaptive - 1.0);
            rep.lower_bound = min_fg_w / max_bg_w;
            break;
        }
        case LossKind::RootTversky:
        case LossKind::GeneralUnion: {
            double min_closed = std::numeric_limits<double>::infinity();
            double min_fg_grad = std::numeric_limits<double>::infinity();
            for (std::size_t i = 0; i < n; ++i) {
                if (gt.data[i] == 0.0f) continue;
                const double p = pred.data[i];
                const double w = kind == LossKind::GeneralUnion ? weights->w[i] : 1.0;
                const double amp = cfg.root * stabilized_pow(p, cfg.root, cfg.epsilon) / cfg.alpha;
                min_closed = std::min(min_closed, w * (amp * adaptive - 1.0));
                min_fg_grad = std::min(min_fg_grad, std::abs(res.gradient[i]));
            }
            rep.empirical_ratio = min_fg_grad / bg_mean;
            rep.closed_form_ratio = min_closed;
            rep.lower_bound = cfg.root / cfg.alpha - 1.0;
            if (kind == LossKind::GeneralUnion) rep.lower_bound *= 1.0 - cfg.m;
            break;
        }
        case LossKind::DiceWbce: break;  // unreachable
    }
    return rep;
}

double finite_difference_check(LossKind kind, const Volume& pred, const Volume& gt,
                               const WeightMap* weights, const LossConfig& cfg, double step) {
    if (!(step > 0.0)) throw std::invalid_argument("step must be positive");
    for (float p : pred.data)
        if (!(p > step && p < 1.0 - step))
            throw std::invalid_argument("pred values must lie strictly inside (step, 1-step)");

    const LossResult res = evaluate_loss(kind, pred, gt, weights, cfg);
    Volume probe = pred;
    double max_rel = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const float orig = probe.data[i];
        const float up_val = static_cast<float>(orig + step);
        const float down_val = static_cast<float>(orig - step);
        probe.data[i] = up_val;
        const double up = evaluate_loss(kind, probe, gt, weights, cfg).value;
        probe.data[i] = down_val;
        const double down = evaluate_loss(kind, probe, gt, weights, cfg).value;
        probe.data[i] = orig;
        // Divide by the step as actually applied in float, not the nominal
        // one, so the quantization of up_val/down_val does not bias the
        // difference quotient.
        const double fd = (up - down) / (static_cast<double>(up_val) - down_val);
        const double an = res.gradient[i];
        const double rel = std::abs(fd - an) / std::max({std::abs(fd), std::abs(an), 1e-12});
        max_rel = std::max(max_rel, rel);
    }
    return max_rel;
}

}  // namespace gradseg
