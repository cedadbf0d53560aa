#pragma once

#include <array>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

namespace gradseg {

/// What the scalar stored per voxel means. Probability volumes are
/// range-checked to [0,1] and binary volumes to {0,1} on construction
/// and on load.
enum class ElementKind { Intensity, Probability, Binary };

const char* to_string(ElementKind kind);
ElementKind element_kind_from_string(const std::string& s);

struct Dims {
    int nx = 0, ny = 0, nz = 0;

    std::size_t voxels() const {
        return static_cast<std::size_t>(nx) * static_cast<std::size_t>(ny) *
               static_cast<std::size_t>(nz);
    }
    bool operator==(const Dims&) const = default;
};

struct Spacing {
    double sx = 1.0, sy = 1.0, sz = 1.0;
    bool operator==(const Spacing&) const = default;
};

/// A dense 3D scalar field with physical voxel spacing. Data is stored
/// x-fastest (x, then y, then z). Values are immutable by convention once
/// a volume has been handed to another module; all library operations
/// return fresh volumes.
struct Volume {
    Dims dims;
    Spacing spacing;
    ElementKind kind = ElementKind::Intensity;
    std::vector<float> data;

    Volume() = default;
    Volume(Dims d, Spacing s, ElementKind k)
        : dims(d), spacing(s), kind(k), data(d.voxels(), 0.0f) {}

    std::size_t size() const { return data.size(); }

    std::size_t index(int x, int y, int z) const {
        return (static_cast<std::size_t>(z) * dims.ny + y) * dims.nx + x;
    }
    bool in_bounds(int x, int y, int z) const {
        return x >= 0 && x < dims.nx && y >= 0 && y < dims.ny && z >= 0 && z < dims.nz;
    }
    float at(int x, int y, int z) const { return data[index(x, y, z)]; }
    float& at(int x, int y, int z) { return data[index(x, y, z)]; }

    /// Throws std::invalid_argument if dims/spacing/data-length/value-range
    /// invariants do not hold for this volume's element kind.
    void validate() const;

    bool operator==(const Volume&) const = default;
};

/// Reads an AVOL file. Header errors, dims/data-length mismatches and
/// out-of-range probability or binary values throw std::invalid_argument.
Volume read_volume(const std::filesystem::path& path);

/// Writes the AVOL format: a short ASCII header followed by the raw
/// little-endian payload (f32 for intensity/probability, u8 for binary).
/// The volume is validated first; an unwritable path throws
/// std::runtime_error.
void write_volume(const Volume& v, const std::filesystem::path& path);

/// CT preparation: clamp to [-1000, 600] HU, then rescale affinely to
/// [0, 255]. Output stays floating point; no quantization is applied.
Volume preprocess_ct(const Volume& v);

}  // namespace gradseg
