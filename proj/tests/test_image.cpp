#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "emma/image.hpp"
#include "emma/tensor_io.hpp"

using namespace emma;

namespace {

std::filesystem::path temp_dir() {
    auto dir = std::filesystem::temp_directory_path() / "emma_image_tests";
    std::filesystem::create_directories(dir);
    return dir;
}

std::vector<char> slurp(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    return std::vector<char>((std::istreambuf_iterator<char>(in)),
                             std::istreambuf_iterator<char>());
}

}  // namespace

TEST_CASE("scene pair generation is deterministic") {
    const ScenePair a = generate_scene_pair(0, 64, 64);
    const ScenePair b = generate_scene_pair(0, 64, 64);
    CHECK(a.truth.data == b.truth.data);
    CHECK(a.modality_a.data == b.modality_a.data);
    CHECK(a.modality_b.data == b.modality_b.data);
    const ScenePair c = generate_scene_pair(1, 64, 64);
    CHECK(a.truth.data != c.truth.data);
}

TEST_CASE("scene pair rejects tiny dimensions") {
    CHECK_THROWS_AS(generate_scene_pair(0, 16, 64), InputError);
}

TEST_CASE("constant truth produces constant modalities") {
    Image truth(40, 40, 1, 0.5);
    Image a, b;
    derive_modalities(truth, 123, a, b);
    for (double v : a.data) CHECK(v == doctest::Approx(a.data[0]).epsilon(1e-12));
    for (double v : b.data) CHECK(v == doctest::Approx(b.data[0]).epsilon(1e-12));
}

TEST_CASE("both modalities correlate with truth, strictly below 1") {
    const ScenePair p = generate_scene_pair(7, 64, 64);
    const double ca = pearson_correlation(p.modality_a, p.truth);
    const double cb = pearson_correlation(p.modality_b, p.truth);
    CHECK(ca > 0.0);
    CHECK(ca < 1.0);
    CHECK(cb > 0.0);
    CHECK(cb < 1.0);
}

TEST_CASE("generated images satisfy the [0,1] range invariant") {
    for (long long seed : {0LL, 5LL, 11LL}) {
        const ScenePair p = generate_scene_pair(seed, 48, 48);
        for (const Image* img : {&p.truth, &p.modality_a, &p.modality_b}) {
            for (double v : img->data) {
                REQUIRE(v >= 0.0);
                REQUIRE(v <= 1.0);
            }
        }
    }
}

TEST_CASE("pgm round-trip: quantized bytes survive exactly") {
    const auto dir = temp_dir();
    Image img(2, 2);
    img.data = {0.0, 128.0 / 255.0, 1.0, 64.0 / 255.0};
    const std::string path = (dir / "small.pgm").string();
    save_image(img, path);
    const Image back = load_image(path);
    CHECK(back.height == 2);
    CHECK(back.width == 2);
    CHECK(back.data == img.data);

    // save(load(p)) reproduces the file payload byte-identically
    const std::string path2 = (dir / "small2.pgm").string();
    save_image(back, path2);
    CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("2x2 grayscale bytes normalize as documented") {
    const auto dir = temp_dir();
    const std::string path = (dir / "bytes.pgm").string();
    {
        std::ofstream out(path, std::ios::binary);
        out << "P5\n2 2\n255\n";
        const unsigned char bytes[4] = {0, 128, 255, 64};
        out.write(reinterpret_cast<const char*>(bytes), 4);
    }
    const Image img = load_image(path);
    CHECK(img.data[0] == 0.0);
    CHECK(img.data[1] == doctest::Approx(128.0 / 255.0));
    CHECK(img.data[2] == 1.0);
    CHECK(img.data[3] == doctest::Approx(64.0 / 255.0));
}

TEST_CASE("pgm loader rejects malformed inputs with named fields") {
    const auto dir = temp_dir();
    const std::string trunc = (dir / "trunc.pgm").string();
    {
        std::ofstream out(trunc, std::ios::binary);
        out << "P5\n4 4\n255\n";
        const char bytes[15] = {};
        out.write(bytes, 15);
    }
    CHECK_THROWS_WITH_AS(load_image(trunc), "image payload: truncated", FormatError);

    const std::string badmax = (dir / "badmax.pgm").string();
    {
        std::ofstream out(badmax, std::ios::binary);
        out << "P5\n2 2\n65535\n";
        const char bytes[8] = {};
        out.write(bytes, 8);
    }
    CHECK_THROWS_WITH_AS(load_image(badmax), "image header: maxval must be 255",
                         FormatError);

    const std::string badmagic = (dir / "badmagic.pgm").string();
    {
        std::ofstream out(badmagic, std::ios::binary);
        out << "P7\n2 2\n255\n";
    }
    CHECK_THROWS_AS(load_image(badmagic), FormatError);

    CHECK_THROWS_AS(load_image((dir / "missing.pgm").string()), IoError);
}

TEST_CASE("ppm handles 3-channel images") {
    const auto dir = temp_dir();
    Image img(2, 3, 3);
    for (std::size_t k = 0; k < img.data.size(); ++k) {
        img.data[k] = static_cast<double>((k * 13) % 256) / 255.0;
    }
    const std::string path = (dir / "rgb.ppm").string();
    save_image(img, path);
    const Image back = load_image(path);
    CHECK(back.channels == 3);
    CHECK(back.data == img.data);
}

TEST_CASE("tensor file format: size arithmetic and round-trip") {
    const auto dir = temp_dir();
    const std::string path = (dir / "one.emt").string();
    TensorBlob one;
    one.dims = {1};
    one.values = {1.0f};
    save_tensor(one, path);
    CHECK(std::filesystem::file_size(path) == 16);  // magic+rank+dim+payload

    TensorBlob t;
    t.dims = {3, 5};
    Rng rng(5);
    for (int k = 0; k < 15; ++k) t.values.push_back(static_cast<float>(rng.normal()));
    const std::string path2 = (dir / "rand.emt").string();
    save_tensor(t, path2);
    const TensorBlob back = load_tensor(path2);
    CHECK(back.dims == t.dims);
    CHECK(back.values == t.values);
}

TEST_CASE("tensor loader rejects bad magic and dim mismatches") {
    const auto dir = temp_dir();
    const std::string path = (dir / "bad.emt").string();
    {
        std::ofstream out(path, std::ios::binary);
        out << "EMT2";
        const char rest[12] = {};
        out.write(rest, 12);
    }
    CHECK_THROWS_WITH_AS(load_tensor(path), "tensor file: bad magic", FormatError);

    TensorBlob t;
    t.dims = {2, 2};
    t.values = {1, 2, 3};
    CHECK_THROWS_AS(save_tensor(t, (dir / "mismatch.emt").string()), ShapeError);

    // Truncate a valid file's payload
    t.values = {1, 2, 3, 4};
    const std::string full = (dir / "full.emt").string();
    save_tensor(t, full);
    auto bytes = slurp(full);
    bytes.resize(bytes.size() - 4);
    const std::string cut = (dir / "cut.emt").string();
    std::ofstream(cut, std::ios::binary).write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    CHECK_THROWS_AS(load_tensor(cut), FormatError);
}

TEST_CASE("random crop stays in bounds and is deterministic") {
    const ScenePair p = generate_scene_pair(3, 64, 64);

    Rng a(10), b(10);
    const ScenePair c1 = crop_random_patch(p, 32, a);
    const ScenePair c2 = crop_random_patch(p, 32, b);
    CHECK(c1.truth.data == c2.truth.data);
    CHECK(c1.modality_a.data == c2.modality_a.data);

    // patch == image size returns the pair unchanged
    Rng r(0);
    const ScenePair full = crop_random_patch(p, 64, r);
    CHECK(full.truth.data == p.truth.data);

    CHECK_THROWS_AS(crop_random_patch(p, 65, r), InputError);
}

TEST_CASE("crop windows lie fully inside bounds over many draws") {
    // Brute-force bounds audit: crop a marker image and confirm no marker
    // values (outside-of-bounds would read garbage / throw instead).
    const ScenePair p = generate_scene_pair(1, 64, 64);
    Rng rng(99);
    for (int k = 0; k < 10000; ++k) {
        const ScenePair c = crop_random_patch(p, 32, rng);
        REQUIRE(c.truth.height == 32);
        REQUIRE(c.truth.width == 32);
        for (double v : c.truth.data) {
            REQUIRE(v >= 0.0);
            REQUIRE(v <= 1.0);
        }
    }
}

TEST_CASE("the same spatial window is cut from all three images") {
    const ScenePair p = generate_scene_pair(21, 64, 64);
    Rng rng(5);
    const ScenePair c = crop_random_patch(p, 16, rng);
    // Locate the window by scanning for the truth patch, then confirm the
    // other two modalities match the same offset.
    bool found = false;
    for (int y0 = 0; y0 <= 48 && !found; ++y0) {
        for (int x0 = 0; x0 <= 48 && !found; ++x0) {
            bool match = true;
            for (int y = 0; y < 16 && match; ++y) {
                for (int x = 0; x < 16 && match; ++x) {
                    match = p.truth.at(y0 + y, x0 + x) == c.truth.at(y, x);
                }
            }
            if (!match) continue;
            found = true;
            for (int y = 0; y < 16; ++y) {
                for (int x = 0; x < 16; ++x) {
                    REQUIRE(p.modality_a.at(y0 + y, x0 + x) == c.modality_a.at(y, x));
                    REQUIRE(p.modality_b.at(y0 + y, x0 + x) == c.modality_b.at(y, x));
                }
            }
        }
    }
    CHECK(found);
}

TEST_CASE("dataset manifest round-trip regenerates identical pairs") {
    const auto dir = temp_dir();
    Dataset ds;
    ds.patch_size = 32;
    ds.pairs.push_back(generate_scene_pair(4, 64, 64));
    ds.pairs.push_back(generate_scene_pair(9, 64, 64));
    const std::string path = (dir / "manifest.json").string();
    save_dataset_manifest(ds, path);
    const Dataset back = load_dataset_manifest(path);
    REQUIRE(back.pairs.size() == 2);
    CHECK(back.patch_size == 32);
    CHECK(back.pairs[0].truth.data == ds.pairs[0].truth.data);
    CHECK(back.pairs[1].modality_b.data == ds.pairs[1].modality_b.data);
}
