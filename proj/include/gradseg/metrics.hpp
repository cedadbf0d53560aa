#pragma once

#include <filesystem>
#include <optional>
#include <vector>

#include "gradseg/skeleton.hpp"
#include "gradseg/volume.hpp"

namespace gradseg {

struct VoxelMetrics {
    double dsc = 0.0;
    std::optional<double> precision;  // empty when the prediction has no foreground
};

struct TreeMetrics {
    double length_detected = 0.0;
    double branch_detected = 0.0;
};

struct StratumMetrics {
    double lo_mm = 0.0, hi_mm = 0.0;
    bool populated = false;
    std::size_t branch_count = 0;
    double centerline_mm = 0.0;
    double dsc = 0.0;
    double tversky = 0.0;
    double length_detected = 0.0;
    double branch_detected = 0.0;
};

struct MetricsReport {
    double dsc = 0.0;
    std::optional<double> precision;
    double length_detected = 0.0;
    double branch_detected = 0.0;
    double tversky = 0.0;
    double tversky_alpha = 0.5;
    double tau_b = 0.8;
    std::vector<StratumMetrics> per_stratum;
};

/// Keeps only the largest 26-connected foreground component; the empty mask
/// passes through unchanged.
Volume largest_component(const Volume& mask);

/// DSC and precision. Precision of an empty prediction is reported as an
/// absent value rather than 0.
VoxelMetrics voxel_metrics(const Volume& pred, const Volume& gt);

/// Tversky index: |P∩G| / (|P∩G| + a|P\G| + (1-a)|G\P|). At a=0.5 this
/// equals the DSC.
double tversky_index(const Volume& pred, const Volume& gt, double alpha);

/// Centerline coverage rates against a ground-truth graph. A centerline
/// voxel counts as detected when the prediction is foreground at that voxel
/// (or within `tolerance_mm` when nonzero). A branch counts as detected
/// when its covered centerline fraction reaches tau_b.
TreeMetrics tree_metrics(const Volume& pred, const CenterlineGraph& graph, double tau_b,
                         double tolerance_mm = 0.0);

/// Default diameter strata in mm: [0,2) [2,4) [4,6) [6,8) [8,inf).
std::vector<double> default_diameter_bins();

/// Full report with per-diameter-stratum breakdown. Voxel metrics per
/// stratum are computed over voxels assigned to their nearest ground-truth
/// branch. Branch diameters must be populated in the graph.
MetricsReport stratified_metrics(const Volume& pred, const Volume& gt,
                                 const CenterlineGraph& graph,
                                 const std::vector<double>& bin_edges = default_diameter_bins(),
                                 double tau_b = 0.8, double tversky_alpha = 0.5,
                                 double tolerance_mm = 0.0);

void write_metrics_csv(const MetricsReport& r, const std::filesystem::path& path);
void write_metrics_json(const MetricsReport& r, const std::filesystem::path& path);

}  // namespace gradseg
