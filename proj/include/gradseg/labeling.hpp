#pragma once

#include <cstdint>
#include <vector>

#include "gradseg/volume.hpp"

namespace gradseg {

/// 26-connected component labeling of a binary volume. Labels start at 1
/// and are assigned in raster order of first encounter, so the labeling is
/// deterministic. Returns the label field and the component count.
struct ComponentLabels {
    std::vector<std::int32_t> labels;
    int count = 0;
    std::vector<std::size_t> sizes;  // sizes[k] = voxels with label k+1
};

ComponentLabels label_components_26(const Volume& mask);

}  // namespace gradseg
