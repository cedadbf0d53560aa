#include <cstdio>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "gradseg/rng.hpp"
#include "gradseg/volume.hpp"

using namespace gradseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_file(const char* name) {
    return fs::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("binary round trip preserves every voxel") {
    Volume v({2, 2, 2}, {1.0, 1.0, 1.0}, ElementKind::Binary);
    for (float& x : v.data) x = 1.0f;
    const auto path = temp_file("gradseg_ones.avol");
    write_volume(v, path);
    const Volume back = read_volume(path);
    CHECK(back.size() == 8);
    CHECK(back == v);
    fs::remove(path);
}

TEST_CASE("float round trip is bit exact") {
    Rng rng(42);
    Volume v({3, 4, 5}, {0.5, 0.7, 1.25}, ElementKind::Probability);
    for (float& x : v.data) x = static_cast<float>(rng.uniform());
    const auto path = temp_file("gradseg_prob.avol");
    write_volume(v, path);
    const Volume back = read_volume(path);
    CHECK(back.dims == v.dims);
    CHECK(back.spacing == v.spacing);
    CHECK(back.kind == v.kind);
    for (std::size_t i = 0; i < v.size(); ++i) CHECK(back.data[i] == v.data[i]);
    fs::remove(path);
}

TEST_CASE("declared dims with short payload is a length mismatch") {
    const auto path = temp_file("gradseg_short.avol");
    {
        std::ofstream out(path, std::ios::binary);
        out << "AVOL 1\ndims 2 2 2\nspacing 1 1 1\nkind binary\ndata raw-le u8\n\n";
        const char payload[7] = {1, 1, 1, 1, 1, 1, 1};
        out.write(payload, 7);
    }
    CHECK_THROWS_WITH_AS(read_volume(path), doctest::Contains("length mismatch"),
                         std::invalid_argument);
    fs::remove(path);
}

TEST_CASE("invalid values are rejected before write") {
    Volume v({2, 1, 1}, {1, 1, 1}, ElementKind::Binary);
    v.data = {1.0f, 2.0f};
    const auto path = temp_file("gradseg_bad.avol");
    CHECK_THROWS_AS(write_volume(v, path), std::invalid_argument);
    CHECK(!fs::exists(path));

    Volume p({2, 1, 1}, {1, 1, 1}, ElementKind::Probability);
    p.data = {0.5f, 1.5f};
    CHECK_THROWS_AS(write_volume(p, path), std::invalid_argument);
}

TEST_CASE("single-voxel volume round trips") {
    Volume v({1, 1, 1}, {2.0, 2.0, 2.0}, ElementKind::Intensity);
    v.data = {-512.25f};
    const auto path = temp_file("gradseg_one.avol");
    write_volume(v, path);
    CHECK(read_volume(path) == v);
    fs::remove(path);
}

TEST_CASE("probability outside [0,1] fails on load") {
    const auto path = temp_file("gradseg_badprob.avol");
    {
        std::ofstream out(path, std::ios::binary);
        out << "AVOL 1\ndims 1 1 1\nspacing 1 1 1\nkind probability\ndata raw-le f32\n\n";
        const float bad = 1.5f;
        out.write(reinterpret_cast<const char*>(&bad), sizeof bad);
    }
    CHECK_THROWS_AS(read_volume(path), std::invalid_argument);
    fs::remove(path);
}

TEST_CASE("preprocess maps the HU window to [0,255]") {
    Volume v({4, 1, 1}, {1, 1, 1}, ElementKind::Intensity);
    v.data = {-1000.0f, 600.0f, -2000.0f, -200.0f};
    const Volume out = preprocess_ct(v);
    CHECK(out.data[0] == doctest::Approx(0.0));
    CHECK(out.data[1] == doctest::Approx(255.0));
    CHECK(out.data[2] == doctest::Approx(0.0));  // clamped
    CHECK(out.data[3] == doctest::Approx(127.5));
}

TEST_CASE("preprocess is monotone and stays in range") {
    Rng rng(7);
    Volume v({16, 4, 4}, {1, 1, 1}, ElementKind::Intensity);
    for (float& x : v.data) x = static_cast<float>(rng.uniform(-3000.0, 3000.0));
    const Volume out = preprocess_ct(v);
    for (std::size_t i = 0; i < v.size(); ++i) {
        CHECK(out.data[i] >= 0.0f);
        CHECK(out.data[i] <= 255.0f);
        for (std::size_t j = 0; j < v.size(); ++j)
            if (v.data[i] <= v.data[j]) CHECK(out.data[i] <= out.data[j]);
    }
}
