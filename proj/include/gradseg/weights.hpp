#pragma once

#include <vector>

#include "gradseg/volume.hpp"

namespace gradseg {

/// Per-voxel loss weights, aligned with a volume of the same dims.
/// distance_weights() fills the decay parameters; hand-built maps (tests,
/// weighted Dice experiments) may leave them at their defaults.
struct WeightMap {
    Dims dims;
    std::vector<double> w;

    double m = 0.0;
    double distance_root = 1.0;
    double d_max_mm = 0.0;

    WeightMap() = default;
    WeightMap(Dims d, double fill) : dims(d), w(d.voxels(), fill) {}

    static WeightMap uniform(Dims d, double value = 1.0) { return WeightMap(d, value); }
};

}  // namespace gradseg
