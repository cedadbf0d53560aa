#include "gradseg/volume.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace gradseg {

static_assert(std::endian::native == std::endian::little,
              "AVOL I/O assumes a little-endian host");

const char* to_string(ElementKind kind) {
    switch (kind) {
        case ElementKind::Intensity: return "intensity";
        case ElementKind::Probability: return "probability";
        case ElementKind::Binary: return "binary";
    }
    return "intensity";
}

ElementKind element_kind_from_string(const std::string& s) {
    if (s == "intensity") return ElementKind::Intensity;
    if (s == "probability") return ElementKind::Probability;
    if (s == "binary") return ElementKind::Binary;
    throw std::invalid_argument("unknown element kind '" + s + "'");
}

void Volume::validate() const {
    if (dims.nx < 1 || dims.ny < 1 || dims.nz < 1)
        throw std::invalid_argument("volume dims must all be >= 1");
    if (!(spacing.sx > 0.0) || !(spacing.sy > 0.0) || !(spacing.sz > 0.0))
        throw std::invalid_argument("volume spacing must be positive");
    if (data.size() != dims.voxels())
        throw std::invalid_argument("volume data length mismatch: expected " +
                                    std::to_string(dims.voxels()) + ", got " +
                                    std::to_string(data.size()));
    if (kind == ElementKind::Probability) {
        for (float v : data)
            if (!(v >= 0.0f && v <= 1.0f))
                throw std::invalid_argument("probability value outside [0,1]");
    } else if (kind == ElementKind::Binary) {
        for (float v : data)
            if (v != 0.0f && v != 1.0f)
                throw std::invalid_argument("binary value outside {0,1}");
    } else {
        for (float v : data)
            if (!std::isfinite(v))
                throw std::invalid_argument("non-finite intensity value");
    }
}

namespace {

std::string read_header_line(std::istream& in) {
    std::string line;
    if (!std::getline(in, line))
        throw std::invalid_argument("malformed header: unexpected end of file");
    if (!line.empty() && line.back() == '\r') line.pop_back();
    return line;
}

}  // namespace

Volume read_volume(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::invalid_argument("cannot open volume file: " + path.string());

    if (read_header_line(in) != "AVOL 1")
        throw std::invalid_argument("malformed header: missing AVOL 1 magic");

    Volume v;
    {
        std::istringstream ls(read_header_line(in));
        std::string tag;
        if (!(ls >> tag >> v.dims.nx >> v.dims.ny >> v.dims.nz) || tag != "dims")
            throw std::invalid_argument("malformed header: bad dims line");
    }
    {
        std::istringstream ls(read_header_line(in));
        std::string tag;
        if (!(ls >> tag >> v.spacing.sx >> v.spacing.sy >> v.spacing.sz) || tag != "spacing")
            throw std::invalid_argument("malformed header: bad spacing line");
    }
    {
        std::istringstream ls(read_header_line(in));
        std::string tag, kind;
        if (!(ls >> tag >> kind) || tag != "kind")
            throw std::invalid_argument("malformed header: bad kind line");
        v.kind = element_kind_from_string(kind);
    }
    std::string payload;
    {
        std::istringstream ls(read_header_line(in));
        std::string tag, enc;
        if (!(ls >> tag >> enc >> payload) || tag != "data" || enc != "raw-le")
            throw std::invalid_argument("malformed header: bad data line");
    }
    if (!read_header_line(in).empty())
        throw std::invalid_argument("malformed header: missing blank separator line");

    const char* expected = v.kind == ElementKind::Binary ? "u8" : "f32";
    if (payload != expected)
        throw std::invalid_argument("malformed header: kind '" +
                                    std::string(to_string(v.kind)) + "' requires payload " +
                                    expected + ", got " + payload);

    if (v.dims.nx < 1 || v.dims.ny < 1 || v.dims.nz < 1)
        throw std::invalid_argument("volume dims must all be >= 1");
    const std::size_t n = v.dims.voxels();

    if (payload == "f32") {
        v.data.resize(n);
        in.read(reinterpret_cast<char*>(v.data.data()),
                static_cast<std::streamsize>(n * sizeof(float)));
        if (static_cast<std::size_t>(in.gcount()) != n * sizeof(float))
            throw std::invalid_argument("length mismatch: payload shorter than dims imply");
    } else {
        std::vector<std::uint8_t> raw(n);
        in.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(n));
        if (static_cast<std::size_t>(in.gcount()) != n)
            throw std::invalid_argument("length mismatch: payload shorter than dims imply");
        v.data.resize(n);
        for (std::size_t i = 0; i < n; ++i) v.data[i] = static_cast<float>(raw[i]);
    }
    if (in.peek() != std::ifstream::traits_type::eof())
        throw std::invalid_argument("length mismatch: trailing bytes after payload");

    v.validate();
    return v;
}

void write_volume(const Volume& v, const std::filesystem::path& path) {
    v.validate();

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot open for writing: " + path.string());

    char spacing_buf[128];
    std::snprintf(spacing_buf, sizeof spacing_buf, "spacing %.17g %.17g %.17g",
                  v.spacing.sx, v.spacing.sy, v.spacing.sz);

    out << "AVOL 1\n"
        << "dims " << v.dims.nx << ' ' << v.dims.ny << ' ' << v.dims.nz << '\n'
        << spacing_buf << '\n'
        << "kind " << to_string(v.kind) << '\n'
        << "data raw-le " << (v.kind == ElementKind::Binary ? "u8" : "f32") << "\n\n";

    if (v.kind == ElementKind::Binary) {
        std::vector<std::uint8_t> raw(v.data.size());
        for (std::size_t i = 0; i < v.data.size(); ++i)
            raw[i] = static_cast<std::uint8_t>(v.data[i]);
        out.write(reinterpret_cast<const char*>(raw.data()),
                  static_cast<std::streamsize>(raw.size()));
    } else {
        out.write(reinterpret_cast<const char*>(v.data.data()),
                  static_cast<std::streamsize>(v.data.size() * sizeof(float)));
    }
    if (!out) throw std::runtime_error("write failed: " + path.string());
}

Volume preprocess_ct(const Volume& v) {
    Volume out = v;
    for (float& x : out.data) {
        float c = std::clamp(x, -1000.0f, 600.0f);
        x = (c + 1000.0f) * (255.0f / 1600.0f);
    }
    return out;
}

}  // namespace gradseg
