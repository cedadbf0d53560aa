#include "gradseg/labeling.hpp"

#include <stdexcept>

namespace gradseg {

ComponentLabels label_components_26(const Volume& mask) {
    if (mask.kind != ElementKind::Binary)
        throw std::invalid_argument("component labeling expects a binary volume");
    const int nx = mask.dims.nx, ny = mask.dims.ny, nz = mask.dims.nz;

    ComponentLabels out;
    out.labels.assign(mask.size(), 0);

    std::vector<std::size_t> stack;
    for (int z = 0; z < nz; ++z)
        for (int y = 0; y < ny; ++y)
            for (int x = 0; x < nx; ++x) {
                const std::size_t i = mask.index(x, y, z);
                if (mask.data[i] == 0.0f || out.labels[i] != 0) continue;
                const std::int32_t label = ++out.count;
                std::size_t size = 0;
                stack.clear();
                stack.push_back(i);
                out.labels[i] = label;
                while (!stack.empty()) {
                    const std::size_t cur = stack.back();
                    stack.pop_back();
                    ++size;
                    const int cz = static_cast<int>(cur / (static_cast<std::size_t>(nx) * ny));
                    const int cy = static_cast<int>((cur / nx) % ny);
                    const int cx = static_cast<int>(cur % nx);
                    for (int dz = -1; dz <= 1; ++dz)
                        for (int dy = -1; dy <= 1; ++dy)
                            for (int dx = -1; dx <= 1; ++dx) {
                                if (dx == 0 && dy == 0 && dz == 0) continue;
                                const int px = cx + dx, py = cy + dy, pz = cz + dz;
                                if (!mask.in_bounds(px, py, pz)) continue;
                                const std::size_t j = mask.index(px, py, pz);
                                if (mask.data[j] != 0.0f && out.labels[j] == 0) {
                                    out.labels[j] = label;
                                    stack.push_back(j);
                                }
                            }
                }
                out.sizes.push_back(size);
            }
    return out;
}

}  // namespace gradseg
