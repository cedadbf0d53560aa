#include "gradseg/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <stdexcept>

#include "gradseg/labeling.hpp"

#include "json.hpp"

namespace gradseg {

namespace {

void check_binary_pair(const Volume& pred, const Volume& gt) {
    if (pred.dims != gt.dims) throw std::invalid_argument("pred/gt dim mismatch");
    if (pred.kind != ElementKind::Binary || gt.kind != ElementKind::Binary)
        throw std::invalid_argument("voxel metrics expect binary volumes");
}

// Length share carried by each centerline voxel: half of each adjacent
// path segment. Shares over a branch sum to its polyline length.
std::vector<double> voxel_length_shares(const GraphBranch& b, const Spacing& sp) {
    std::vector<double> share(b.path.size(), 0.0);
    for (std::size_t i = 1; i < b.path.size(); ++i) {
        const double dx = (b.path[i].x - b.path[i - 1].x) * sp.sx;
        const double dy = (b.path[i].y - b.path[i - 1].y) * sp.sy;
        const double dz = (b.path[i].z - b.path[i - 1].z) * sp.sz;
        const double seg = std::sqrt(dx * dx + dy * dy + dz * dz);
        share[i - 1] += 0.5 * seg;
        share[i] += 0.5 * seg;
    }
    return share;
}

}  // namespace

Volume largest_component(const Volume& mask) {
    if (mask.kind != ElementKind::Binary)
        throw std::invalid_argument("largest_component expects a binary volume");
    const ComponentLabels cc = label_components_26(mask);
    if (cc.count <= 1) return mask;
    std::int32_t best = 1;
    for (int k = 1; k < cc.count; ++k)
        if (cc.sizes[k] > cc.sizes[best - 1]) best = k + 1;
    Volume out(mask.dims, mask.spacing, ElementKind::Binary);
    for (std::size_t i = 0; i < mask.size(); ++i)
        out.data[i] = cc.labels[i] == best ? 1.0f : 0.0f;
    return out;
}

VoxelMetrics voxel_metrics(const Volume& pred, const Volume& gt) {
    check_binary_pair(pred, gt);
    std::size_t inter = 0, np = 0, ng = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred.data[i] != 0.0f, g = gt.data[i] != 0.0f;
        inter += p && g;
        np += p;
        ng += g;
    }
    VoxelMetrics m;
    m.dsc = (np + ng) == 0 ? 1.0
                           : 2.0 * static_cast<double>(inter) / static_cast<double>(np + ng);
    if (np > 0) m.precision = static_cast<double>(inter) / static_cast<double>(np);
    return m;
}

double tversky_index(const Volume& pred, const Volume& gt, double alpha) {
    check_binary_pair(pred, gt);
    if (!(alpha > 0.0 && alpha < 1.0)) throw std::invalid_argument("alpha must be in (0,1)");
    std::size_t inter = 0, fp = 0, fn = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool p = pred.data[i] != 0.0f, g = gt.data[i] != 0.0f;
        inter += p && g;
        fp += p && !g;
        fn += !p && g;
    }
    const double denom = static_cast<double>(inter) + alpha * static_cast<double>(fp) +
                         (1.0 - alpha) * static_cast<double>(fn);
    return denom == 0.0 ? 1.0 : static_cast<double>(inter) / denom;
}

TreeMetrics tree_metrics(const Volume& pred, const CenterlineGraph& graph, double tau_b,
                         double tolerance_mm) {
    if (pred.kind != ElementKind::Binary)
        throw std::invalid_argument("tree_metrics expects a binary prediction");
    if (pred.dims != graph.dims) throw std::invalid_argument("pred/graph dim mismatch");
    if (graph.branches.empty()) throw std::invalid_argument("tree_metrics: empty graph");
    if (!(tau_b > 0.0 && tau_b <= 1.0)) throw std::invalid_argument("tau_b must be in (0,1]");

    std::vector<double> pred_d2;
    if (tolerance_mm > 0.0) {
        std::vector<std::uint8_t> seeds(pred.size());
        for (std::size_t i = 0; i < pred.size(); ++i) seeds[i] = pred.data[i] != 0.0f;
        pred_d2 = squared_distance_field(pred.dims, pred.spacing, seeds);
    }
    const double tol2 = tolerance_mm * tolerance_mm;

    auto covered = [&](const Voxel& v) {
        const std::size_t i = pred.index(v.x, v.y, v.z);
        if (tolerance_mm > 0.0) return pred_d2[i] <= tol2;
        return pred.data[i] != 0.0f;
    };

    double total = 0.0, detected = 0.0;
    std::size_t branches_hit = 0;
    for (const GraphBranch& b : graph.branches) {
        const auto share = voxel_length_shares(b, graph.spacing);
        double blen = 0.0, bcov = 0.0;
        for (std::size_t i = 0; i < b.path.size(); ++i) {
            blen += share[i];
            if (covered(b.path[i])) bcov += share[i];
        }
        total += blen;
        detected += bcov;
        if (blen > 0.0 && bcov / blen >= tau_b) ++branches_hit;
    }
    TreeMetrics t;
    t.length_detected = total > 0.0 ? detected / total : 0.0;
    t.branch_detected =
        static_cast<double>(branches_hit) / static_cast<double>(graph.branches.size());
    return t;
}

std::vector<double> default_diameter_bins() {
    return {0.0, 2.0, 4.0, 6.0, 8.0, std::numeric_limits<double>::infinity()};
}

MetricsReport stratified_metrics(const Volume& pred, const Volume& gt,
                                 const CenterlineGraph& graph,
                                 const std::vector<double>& bin_edges, double tau_b,
                                 double tversky_alpha, double tolerance_mm) {
    check_binary_pair(pred, gt);
    if (gt.dims != graph.dims) throw std::invalid_argument("gt/graph dim mismatch");
    if (graph.branches.empty()) throw std::invalid_argument("stratified_metrics: empty graph");
    if (bin_edges.size() < 2 || !std::is_sorted(bin_edges.begin(), bin_edges.end()))
        throw std::invalid_argument("bin edges must be sorted with at least two entries");
    for (const GraphBranch& b : graph.branches)
        if (!(b.diameter_mm > 0.0))
            throw std::invalid_argument("branch diameters not populated");

    const std::size_t nbins = bin_edges.size() - 1;
    auto bin_of = [&](double diameter) -> int {
        for (std::size_t k = 0; k < nbins; ++k)
            if (diameter >= bin_edges[k] && diameter < bin_edges[k + 1]) return static_cast<int>(k);
        return diameter >= bin_edges.back() ? static_cast<int>(nbins) - 1 : 0;
    };

    // Nearest ground-truth branch per voxel, used to carve the volume into
    // per-stratum regions for the voxel overlap metrics.
    std::vector<std::int32_t> seed_ids(gt.size(), -1);
    for (const GraphBranch& b : graph.branches)
        for (const Voxel& v : b.path) {
            auto& slot = seed_ids[gt.index(v.x, v.y, v.z)];
            if (slot < 0) slot = b.id;  // smaller branch id wins shared voxels
        }
    const FeatureField nearest = nearest_seed_field(gt.dims, gt.spacing, seed_ids);

    MetricsReport rep;
    rep.tau_b = tau_b;
    rep.tversky_alpha = tversky_alpha;

    const VoxelMetrics vm = voxel_metrics(pred, gt);
    rep.dsc = vm.dsc;
    rep.precision = vm.precision;
    rep.tversky = tversky_index(pred, gt, tversky_alpha);
    const TreeMetrics tm = tree_metrics(pred, graph, tau_b, tolerance_mm);
    rep.length_detected = tm.length_detected;
    rep.branch_detected = tm.branch_detected;

    // Per-branch coverage, reused across strata.
    std::vector<double> pred_d2;
    if (tolerance_mm > 0.0) {
        std::vector<std::uint8_t> seeds(pred.size());
        for (std::size_t i = 0; i < pred.size(); ++i) seeds[i] = pred.data[i] != 0.0f;
        pred_d2 = squared_distance_field(pred.dims, pred.spacing, seeds);
    }
    const double tol2 = tolerance_mm * tolerance_mm;
    auto covered = [&](const Voxel& v) {
        const std::size_t i = pred.index(v.x, v.y, v.z);
        if (tolerance_mm > 0.0) return pred_d2[i] <= tol2;
        return pred.data[i] != 0.0f;
    };

    struct Accum {
        std::size_t branches = 0, hit = 0;
        double length = 0.0, detected = 0.0;
        std::size_t inter = 0, fp = 0, fn = 0;
    };
    std::vector<Accum> acc(nbins);
    std::vector<int> branch_bin(graph.branches.size(), 0);

    for (const GraphBranch& b : graph.branches) {
        const int k = bin_of(b.diameter_mm);
        branch_bin[b.id] = k;
        const auto share = voxel_length_shares(b, graph.spacing);
        double blen = 0.0, bcov = 0.0;
        for (std::size_t i = 0; i < b.path.size(); ++i) {
            blen += share[i];
            if (covered(b.path[i])) bcov += share[i];
        }
        acc[k].branches += 1;
        acc[k].length += blen;
        acc[k].detected += bcov;
        if (blen > 0.0 && bcov / blen >= tau_b) acc[k].hit += 1;
    }

    for (std::size_t i = 0; i < gt.size(); ++i) {
        const bool p = pred.data[i] != 0.0f, g = gt.data[i] != 0.0f;
        if (!p && !g) continue;
        const int k = branch_bin[nearest.id[i]];
        if (p && g) acc[k].inter += 1;
        else if (p) acc[k].fp += 1;
        else acc[k].fn += 1;
    }

    for (std::size_t k = 0; k < nbins; ++k) {
        StratumMetrics s;
        s.lo_mm = bin_edges[k];
        s.hi_mm = bin_edges[k + 1];
        s.populated = acc[k].branches > 0;
        s.branch_count = acc[k].branches;
        s.centerline_mm = acc[k].length;
        if (s.populated) {
            s.length_detected = acc[k].length > 0.0 ? acc[k].detected / acc[k].length : 0.0;
            s.branch_detected =
                static_cast<double>(acc[k].hit) / static_cast<double>(acc[k].branches);
            const double denom_d =
                2.0 * static_cast<double>(acc[k].inter) + acc[k].fp + acc[k].fn;
            s.dsc = denom_d == 0.0 ? 1.0 : 2.0 * static_cast<double>(acc[k].inter) / denom_d;
            const double denom_t = static_cast<double>(acc[k].inter) +
                                   tversky_alpha * static_cast<double>(acc[k].fp) +
                                   (1.0 - tversky_alpha) * static_cast<double>(acc[k].fn);
            s.tversky = denom_t == 0.0 ? 1.0 : static_cast<double>(acc[k].inter) / denom_t;
        } else {
            s.dsc = s.tversky = s.length_detected = s.branch_detected =
                std::numeric_limits<double>::quiet_NaN();
        }
        rep.per_stratum.push_back(s);
    }
    return rep;
}

namespace {

std::string tversky_field_name(double alpha) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "tversky_a%g", alpha);
    return buf;
}

std::string fmt_or_empty(double v) {
    if (std::isnan(v)) return "";
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

}  // namespace

void write_metrics_csv(const MetricsReport& r, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out << "stratum_lo_mm,stratum_hi_mm,branch_count,centerline_mm,dsc,precision,"
           "length_detected,branch_detected,"
        << tversky_field_name(r.tversky_alpha) << '\n';
    for (const StratumMetrics& s : r.per_stratum) {
        out << fmt_or_empty(s.lo_mm) << ',' << fmt_or_empty(s.hi_mm) << ',' << s.branch_count
            << ',' << fmt_or_empty(s.centerline_mm) << ',' << fmt_or_empty(s.dsc) << ",,"
            << fmt_or_empty(s.length_detected) << ',' << fmt_or_empty(s.branch_detected) << ','
            << fmt_or_empty(s.tversky) << '\n';
    }
    out << "overall,,"
        << ',' << ',' << fmt_or_empty(r.dsc) << ','
        << (r.precision ? fmt_or_empty(*r.precision) : "") << ','
        << fmt_or_empty(r.length_detected) << ',' << fmt_or_empty(r.branch_detected) << ','
        << fmt_or_empty(r.tversky) << '\n';
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

void write_metrics_json(const MetricsReport& r, const std::filesystem::path& path) {
    nlohmann::json j;
    j["dsc"] = r.dsc;
    if (r.precision) j["precision"] = *r.precision;
    else j["precision"] = nullptr;
    j["length_detected"] = r.length_detected;
    j["branch_detected"] = r.branch_detected;
    j[tversky_field_name(r.tversky_alpha)] = r.tversky;
    j["tau_b"] = r.tau_b;
    j["per_stratum"] = nlohmann::json::array();
    for (const StratumMetrics& s : r.per_stratum) {
        nlohmann::json js;
        js["lo_mm"] = s.lo_mm;
        js["hi_mm"] = std::isinf(s.hi_mm) ? nlohmann::json() : nlohmann::json(s.hi_mm);
        js["branch_count"] = s.branch_count;
        js["centerline_mm"] = s.centerline_mm;
        if (s.populated) {
            js["dsc"] = s.dsc;
            js["length_detected"] = s.length_detected;
            js["branch_detected"] = s.branch_detected;
            js[tversky_field_name(r.tversky_alpha)] = s.tversky;
        } else {
            js["dsc"] = nullptr;
            js["length_detected"] = nullptr;
            js["branch_detected"] = nullptr;
            js[tversky_field_name(r.tversky_alpha)] = nullptr;
        }
        j["per_stratum"].push_back(js);
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());
    out << j.dump(2) << '\n';
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace gradseg
