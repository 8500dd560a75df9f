#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <random>
#include <set>
#include <string>

#include "support.hpp"
#include "vaeunet/data.hpp"
#include "vaeunet/image_io.hpp"

namespace fs = std::filesystem;
using namespace vaeunet;
using testing::scratch_dir;

namespace {

std::set<int> label_set(const LabelMap& m) { return {m.labels.begin(), m.labels.end()}; }

// Lattice points within `radius` of (c, c), counted directly.
long lattice_count(int size, double c, double radius) {
    long n = 0;
    for (int r = 0; r < size; ++r) {
        for (int k = 0; k < size; ++k) {
            n += (r - c) * (r - c) + (k - c) * (k - c) <= radius * radius;
        }
    }
    return n;
}

// Straight 2D convolution with edge-duplicating reflection, for comparison with the separable blur.
Tensor blur_oracle(const Tensor& img, double sigma) {
    const int rad = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * rad + 1);
    double s = 0.0;
    for (int i = -rad; i <= rad; ++i) {
        k[i + rad] = std::exp(-0.5 * i * i / (sigma * sigma));
        s += k[i + rad];
    }
    for (double& v : k) v /= s;
    auto mirror = [](int i, int n) {
        while (i < 0 || i >= n) {
            i = i < 0 ? -i - 1 : 2 * n - i - 1;
        }
        return i;
    };
    const Shape sh = img.shape();
    Tensor out(sh);
    for (int c = 0; c < sh.c; ++c) {
        for (int r = 0; r < sh.h; ++r) {
            for (int q = 0; q < sh.w; ++q) {
                double acc = 0.0;
                for (int i = -rad; i <= rad; ++i) {
                    for (int j = -rad; j <= rad; ++j) {
                        acc += k[i + rad] * k[j + rad] * img.at(0, c, mirror(r + i, sh.h), mirror(q + j, sh.w));
                    }
                }
                out.at(0, c, r, q) = acc;
            }
        }
    }
    return out;
}

}  // namespace

TEST_CASE("an empty dataset directory yields no cases") {
    const auto dir = scratch_dir("empty");
    CHECK(load_cases(dir.string(), Layout::multi_annotator).empty());
    CHECK_THROWS(load_cases((dir / "absent").string(), Layout::multi_annotator));
}

TEST_CASE("a case with four annotation files loads four annotations") {
    ToySpec spec;
    spec.seed = 3;
    spec.case_count = 1;
    spec.ambiguity_rate = 1.0;
    const auto dir = scratch_dir("four");
    write_case(dir.string(), make_toy_dataset(spec).front());
    CHECK(fs::exists(dir / "toy_000" / "annotation_3.png"));
    const auto cases = load_cases(dir.string(), Layout::multi_annotator);
    REQUIRE(cases.size() == 1);
    CHECK(cases[0].annotations.size() == 4);
    CHECK(cases[0].reference.has_value());
}

TEST_CASE("toy datasets survive a write and reload bit-exactly") {
    ToySpec spec;
    spec.seed = 4;
    spec.case_count = 6;
    auto cases = make_toy_dataset(spec);
    cases[2].spacing = PixelSpacing{0.75, 1.25};
    const auto dir = scratch_dir("roundtrip");
    for (const auto& c : cases) {
        write_case(dir.string(), c);
    }
    const auto back = load_cases(dir.string(), Layout::multi_annotator);
    REQUIRE(back.size() == cases.size());
    for (std::size_t i = 0; i < cases.size(); ++i) {
        CHECK(back[i].case_id == cases[i].case_id);
        CHECK(back[i].image == cases[i].image);
        CHECK(back[i].annotations == cases[i].annotations);
        CHECK(back[i].reference == cases[i].reference);
        CHECK(back[i].spacing.has_value() == cases[i].spacing.has_value());
    }
    CHECK(back[2].spacing->row == 0.75);
    CHECK(back[2].spacing->col == 1.25);
}

TEST_CASE("non-integer images and multi-class layouts round trip") {
    SegmentationCase c;
    c.case_id = "ct_7";
    std::mt19937_64 rng(5);
    c.image = testing::random_tensor(rng, Shape{1, 1, 6, 5}, -1000, 1000);
    c.annotations.push_back(testing::random_labels(rng, 6, 5, 9));
    const auto dir = scratch_dir("multiclass");
    write_case(dir.string(), c);
    fs::rename(dir / "ct_7" / "annotation_0.png", dir / "ct_7" / "annotation_labels.png");
    const auto back = load_case(dir.string(), "ct_7", Layout::multi_class);
    CHECK(back.image == c.image);
    CHECK(back.annotations == c.annotations);
    CHECK(parse_layout("multi_class") == Layout::multi_class);
    CHECK_THROWS(parse_layout("volumes"));
}

TEST_CASE("missing files are reported with the expected paths") {
    const auto dir = scratch_dir("missing");
    fs::create_directories(dir / "a");
    try {
        (void)load_case(dir.string(), "a", Layout::multi_annotator);
        FAIL("expected CaseError");
    } catch (const CaseError& e) {
        CHECK(e.case_id() == "a");
        CHECK(std::string(e.what()).find((dir / "a" / "image.png").string()) != std::string::npos);
    }
    ToySpec spec;
    spec.case_count = 1;
    write_case(dir.string(), make_toy_dataset(spec).front());
    for (int k = 0; k < 4; ++k) {
        fs::remove(dir / "toy_000" / ("annotation_" + std::to_string(k) + ".png"));
    }
    try {
        (void)load_case(dir.string(), "toy_000", Layout::multi_annotator);
        FAIL("expected CaseError");
    } catch (const CaseError& e) {
        CHECK(std::string(e.what()).find("annotation_0.png") != std::string::npos);
    }
}

TEST_CASE("annotation shape mismatches are tagged with the case id") {
    ToySpec spec;
    spec.case_count = 1;
    auto c = make_toy_dataset(spec).front();
    c.case_id = "bad_case";
    c.annotations[1] = LabelMap(31, 32);
    CHECK_THROWS_AS(validate_case(c, 2), CaseError);
    const auto dir = scratch_dir("mismatch");
    write_case(dir.string(), c);
    try {
        (void)load_cases(dir.string(), Layout::multi_annotator);
        FAIL("expected CaseError");
    } catch (const CaseError& e) {
        CHECK(e.case_id() == "bad_case");
        CHECK(std::string(e.what()).rfind("case 'bad_case'", 0) == 0);
    }
    auto labels = make_toy_dataset(spec).front();
    labels.annotations[0].labels[0] = 5;
    CHECK_THROWS_AS(validate_case(labels, 2), CaseError);
}

TEST_CASE("toy generator determinism and ambiguity") {
    ToySpec spec;
    spec.seed = 9;
    spec.case_count = 20;
    const auto a = make_toy_dataset(spec), b = make_toy_dataset(spec);
    int ambiguous = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].image == b[i].image);
        CHECK(a[i].annotations == b[i].annotations);
        const std::set<std::vector<int>> distinct = [&] {
            std::set<std::vector<int>> s;
            for (const auto& m : a[i].annotations) s.insert(m.labels);
            return s;
        }();
        CHECK(a[i].annotations.size() == 4);
        ambiguous += distinct.size() >= 2;
        CHECK((distinct.size() == 1 || distinct.size() == 4));
        for (double v : a[i].image.values()) {
            REQUIRE(v >= 0.0);
            REQUIRE(v <= 255.0);
        }
    }
    CHECK(ambiguous == 10);
    spec.seed = 10;
    CHECK(make_toy_dataset(spec)[0].image != a[0].image);
}

TEST_CASE("ambiguity rate zero gives identical annotations and no annotator diversity") {
    ToySpec spec;
    spec.case_count = 12;
    spec.ambiguity_rate = 0.0;
    for (const auto& c : make_toy_dataset(spec)) {
        for (const auto& m : c.annotations) {
            REQUIRE(m == c.annotations.front());
        }
        const SampleSet t{c.annotations};
        CHECK(ged_squared(t, t, 1) == 0.0);
        double diversity = 0.0;
        for (const auto& x : c.annotations)
            for (const auto& y : c.annotations) diversity += iou_distance(x, y, 1);
        CHECK(diversity == 0.0);
    }
}

TEST_CASE("radius offsets on a radius 8 disk give the rasterised pairwise distance") {
    ToySpec spec;
    spec.seed = 12;
    spec.case_count = 3;
    spec.ambiguity_rate = 1.0;
    spec.radius_min = spec.radius_max = 8.0;
    spec.center_jitter = 0.0;
    const double centre = 15.5;
    // Nested disks: IoU of radii a < b is |disk a| / |disk b|.
    const std::vector<int> radii{6, 7, 9, 10};
    double oracle = 0.0;
    int pairs = 0;
    for (std::size_t i = 0; i < radii.size(); ++i) {
        for (std::size_t j = 0; j < radii.size(); ++j) {
            if (i == j) continue;
            const long a = lattice_count(32, centre, std::min(radii[i], radii[j]));
            const long b = lattice_count(32, centre, std::max(radii[i], radii[j]));
            oracle += 1.0 - static_cast<double>(a) / b;
            ++pairs;
        }
    }
    oracle /= pairs;
    for (const auto& c : make_toy_dataset(spec)) {
        double mean = 0.0;
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t j = 0; j < 4; ++j)
                if (i != j) mean += iou_distance(c.annotations[i], c.annotations[j], 1);
        CHECK(mean / 12.0 == doctest::Approx(oracle).epsilon(1e-12));
    }
}

TEST_CASE("toy spec validation and size scaling") {
    ToySpec spec;
    CHECK_NOTHROW(spec.validate());
    spec.image_size = 12;
    CHECK_THROWS(spec.validate());
    spec = ToySpec{};
    spec.ambiguity_rate = 1.5;
    CHECK_THROWS(spec.validate());
    for (int size : {16, 24, 32, 64, 128}) {
        CHECK_NOTHROW(ToySpec::for_size(size).validate());
    }
    const ToySpec at32 = ToySpec::for_size(32);
    CHECK(at32.radius_max == ToySpec{}.radius_max);
    CHECK(at32.radius_min == ToySpec{}.radius_min);
    CHECK(at32.center_jitter == ToySpec{}.center_jitter);
}

TEST_CASE("preprocess at native size only standardises") {
    ToySpec spec;
    spec.case_count = 1;
    const auto c = make_toy_dataset(spec).front();
    const ModelPair p = preprocess(c, {32, 32}, {32, 32});
    CHECK(p.image == standardize(c.image));
    CHECK(p.labels == c.annotations);
    CHECK(p.reference == c.reference);
    double mean = 0.0, var = 0.0;
    for (double v : p.image.values()) mean += v;
    mean /= p.image.size();
    for (double v : p.image.values()) var += (v - mean) * (v - mean);
    var /= p.image.size();
    CHECK(std::abs(mean) <= 1e-12);
    CHECK(var == doctest::Approx(1.0).epsilon(1e-12));
    const Tensor flat = standardize(Tensor(Shape{1, 1, 3, 3}, 4.0));
    for (double v : flat.values()) {
        CHECK(v == 0.0);
    }
}

TEST_CASE("nearest-neighbour label resizing") {
    LabelMap board(8, 8);
    for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c) board.at(r, c) = (r + 2 * c) % 3;
    const LabelMap half = resize_nearest(board, {4, 4});
    const LabelMap expected = testing::from_rows({{0, 1, 2, 0}, {2, 0, 1, 2}, {1, 2, 0, 1}, {0, 1, 2, 0}});
    CHECK(half == expected);
    const LabelMap twice = resize_nearest(expected, {8, 8});
    for (int r = 0; r < 8; ++r)
        for (int c = 0; c < 8; ++c) CHECK(twice.at(r, c) == expected.at(r / 2, c / 2));

    std::mt19937_64 rng(13);
    for (int t = 0; t < 200; ++t) {
        const LabelMap m = testing::random_labels(rng, 5 + t % 7, 4 + t % 5, 5, 0.7);
        const Extent e{1 + static_cast<int>(rng() % 20), 1 + static_cast<int>(rng() % 20)};
        const auto out = label_set(resize_nearest(m, e));
        const auto in = label_set(m);
        REQUIRE(std::includes(in.begin(), in.end(), out.begin(), out.end()));
    }
}

TEST_CASE("preprocess resizes images and labels independently") {
    ToySpec spec;
    spec.case_count = 1;
    spec.ambiguity_rate = 1.0;
    const auto c = make_toy_dataset(spec).front();
    const ModelPair p = preprocess(c, {16, 16}, {64, 64});
    CHECK(p.image.shape() == Shape{1, 1, 16, 16});
    REQUIRE(p.labels.size() == 4);
    for (std::size_t k = 0; k < 4; ++k) {
        CHECK(p.labels[k] == resize_nearest(c.annotations[k], {64, 64}));
    }
}

TEST_CASE("gaussian blur") {
    std::mt19937_64 rng(14);
    const Tensor img = testing::random_tensor(rng, Shape{1, 2, 9, 7}, 0, 10);
    CHECK(gaussian_blur(img, 0.0) == img);
    const Tensor smooth = gaussian_blur(Tensor(Shape{1, 1, 8, 8}, 3.5), 2.0);
    for (double v : smooth.values()) {
        CHECK(v == doctest::Approx(3.5).epsilon(1e-14));
    }
    for (double sigma : {0.5, 1.0, 2.0}) {
        const Tensor a = gaussian_blur(img, sigma), b = blur_oracle(img, sigma);
        for (std::size_t i = 0; i < a.size(); ++i) {
            REQUIRE(std::abs(a[i] - b[i]) <= 1e-12);
        }
    }
    CHECK(gaussian_kernel(1.0).size() == 7);
    CHECK(gaussian_kernel(0.4).size() == 5);
    CHECK(gaussian_kernel(0.0) == std::vector<double>{1.0});

    Tensor impulse(Shape{1, 1, 15, 15}, 0.0);
    impulse.at(0, 0, 7, 7) = 1.0;
    CHECK(std::abs(gaussian_blur(impulse, 1.0).at(0, 0, 7, 7) - 1.0 / (2.0 * M_PI)) <= 1e-3);
    CHECK_THROWS(gaussian_blur(img, -1.0));
}

TEST_CASE("random patch geometry") {
    CHECK(patch_side(224, 224, 0.1) == 71);
    CHECK(patch_side(32, 32, 0.1) == 10);
    std::mt19937_64 rng(15);
    const Tensor img = testing::random_tensor(rng, Shape{1, 1, 224, 224}, 0, 255);
    std::mt19937_64 a(77), b(77);
    const auto [pa, ma] = random_patch(img, 0.1, a);
    const auto [pb, mb] = random_patch(img, 0.1, b);
    CHECK(ma.count() == 71u * 71u);
    CHECK(ma.values == mb.values);
    CHECK(pa == pb);

    double mean = 0.0, hi = -1e300;
    for (double v : img.values()) {
        mean += v;
        hi = std::max(hi, v);
    }
    mean /= img.size();
    double var = 0.0;
    for (double v : img.values()) var += (v - mean) * (v - mean);
    const double fill = hi + 3.0 * std::sqrt(var / img.size());
    for (int r = 0; r < 224; ++r) {
        for (int c = 0; c < 224; ++c) {
            const double expected = ma.at(r, c) ? fill : img.at(0, 0, r, c);
            REQUIRE(pa.at(0, 0, r, c) == doctest::Approx(expected).epsilon(1e-12));
        }
    }
    CHECK_THROWS(random_patch(img, 0.0, a));
    CHECK_THROWS(random_patch(img, 1.0, a));
}

TEST_CASE("random patches stay square and inside the image") {
    const Tensor img(Shape{1, 1, 20, 27}, 1.0);
    const int side = patch_side(20, 27, 0.1);
    for (std::uint64_t seed = 0; seed < 10000; ++seed) {
        std::mt19937_64 rng(seed);
        const Mask m = random_patch(img, 0.1, rng).second;
        REQUIRE(m.count() == static_cast<std::size_t>(side * side));
        int r0 = 1 << 30, r1 = -1, c0 = 1 << 30, c1 = -1;
        for (int r = 0; r < m.height; ++r)
            for (int c = 0; c < m.width; ++c)
                if (m.at(r, c)) {
                    r0 = std::min(r0, r);
                    r1 = std::max(r1, r);
                    c0 = std::min(c0, c);
                    c1 = std::max(c1, c);
                }
        REQUIRE(r1 - r0 + 1 == side);
        REQUIRE(c1 - c0 + 1 == side);
    }
}

TEST_CASE("png round trips at 8 and 16 bits") {
    const auto dir = scratch_dir("png");
    for (int depth : {8, 16}) {
        for (int channels : {1, 3}) {
            io::Raster r{5, 7, channels, depth, {}};
            std::mt19937_64 rng(depth + channels);
            for (int i = 0; i < 5 * 7 * channels; ++i) {
                r.pixels.push_back(static_cast<std::uint16_t>(rng() % (depth == 8 ? 256 : 65536)));
            }
            const auto path = (dir / ("r" + std::to_string(depth) + "_" + std::to_string(channels) + ".png")).string();
            io::write_png(path, r);
            const io::Raster back = io::read_png(path);
            CHECK(back.height == 5);
            CHECK(back.width == 7);
            CHECK(back.channels == channels);
            CHECK(back.bit_depth == depth);
            CHECK(back.pixels == r.pixels);
            const Tensor t = io::png_to_tensor(back);
            CHECK(t.shape() == Shape{1, channels, 5, 7});
            CHECK(t.at(0, channels - 1, 4, 6) == r.pixels.back());
        }
    }
    CHECK_THROWS(io::read_png((dir / "nope.png").string()));
}

TEST_CASE("nifti round trips, compressed and plain") {
    const auto dir = scratch_dir("nifti");
    std::mt19937_64 rng(16);
    const Tensor img = testing::random_tensor(rng, Shape{1, 2, 4, 3}, -5, 5);
    for (const char* name : {"a.nii.gz", "a.nii"}) {
        const auto path = (dir / name).string();
        io::write_nifti(path, img, io::NiftiType::float64);
        CHECK(io::read_nifti(path) == img);
    }
    Tensor ints(Shape{1, 1, 3, 3});
    for (std::size_t i = 0; i < ints.size(); ++i) ints[i] = static_cast<double>(i * 20);
    for (auto type : {io::NiftiType::uint8, io::NiftiType::int16, io::NiftiType::int32, io::NiftiType::uint16,
                      io::NiftiType::float32}) {
        const auto path = (dir / "i.nii.gz").string();
        io::write_nifti(path, ints, type);
        CHECK(io::read_nifti(path) == ints);
    }
    std::ofstream(dir / "junk.nii") << "not a nifti file";
    CHECK_THROWS(io::read_nifti((dir / "junk.nii").string()));
}

TEST_CASE("npy round trip and header") {
    const auto dir = scratch_dir("npy");
    const std::vector<double> v{1.5, -2.0, 3.25, 0.0, 1e-300, 7.0};
    const auto path = (dir / "a.npy").string();
    io::write_npy(path, v, {2, 3});
    const io::NpyArray back = io::read_npy(path);
    CHECK(back.dims == std::vector<std::size_t>{2, 3});
    CHECK(back.values == v);
    std::ifstream in(path, std::ios::binary);
    std::string head(10, '\0');
    in.read(head.data(), 10);
    CHECK(head.substr(1, 5) == "NUMPY");
    const auto header_len = static_cast<unsigned char>(head[8]) | (static_cast<unsigned char>(head[9]) << 8);
    CHECK((10 + header_len) % 64 == 0);
    CHECK(fs::file_size(path) == 10 + header_len + v.size() * sizeof(double));
}

TEST_CASE("magma colormap endpoints") {
    const auto lo = io::magma(0.0), hi = io::magma(1.0);
    CHECK(static_cast<int>(lo[0]) < 10);
    CHECK(static_cast<int>(hi[0]) > 240);
    CHECK(io::magma(-1.0) == lo);
    CHECK(io::magma(2.0) == hi);
}
