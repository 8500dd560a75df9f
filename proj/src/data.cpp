#include "vaeunet/data.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <stdexcept>

#include "vaeunet/autograd.hpp"
#include "vaeunet/image_io.hpp"
#include "vaeunet/key_value.hpp"

namespace fs = std::filesystem;

namespace vaeunet {

namespace {

constexpr double kToyForeground = 170.0;
constexpr double kToyBackground = 70.0;
constexpr double kToyRampHalfWidth = 2.5;

std::optional<fs::path> find_image_file(const fs::path& dir, const std::string& stem) {
    for (const char* ext : {".png", ".nii.gz", ".nii"}) {
        fs::path p = dir / (stem + ext);
        if (fs::is_regular_file(p)) {
            return p;
        }
    }
    return std::nullopt;
}

std::string expected_paths(const fs::path& dir, const std::string& stem) {
    return (dir / (stem + ".png")).string() + " or " + (dir / (stem + ".nii.gz")).string();
}

Tensor read_image_file(const fs::path& p) {
    if (p.extension() == ".png") {
        return io::png_to_tensor(io::read_png(p.string()));
    }
    return io::read_nifti(p.string());
}

LabelMap read_label_file(const std::string& case_id, const fs::path& p) {
    const Tensor t = read_image_file(p);
    if (t.shape().c != 1) {
        throw CaseError(case_id, p.filename().string() + " has " + std::to_string(t.shape().c) +
                                     " channels, label maps must have 1");
    }
    LabelMap m(t.shape().h, t.shape().w);
    for (std::size_t i = 0; i < m.size(); ++i) {
        const double v = t[i];
        if (v != std::round(v)) {
            throw CaseError(case_id, p.filename().string() + " holds non-integer label " + kv::format_double(v));
        }
        m.labels[i] = static_cast<int>(v);
    }
    return m;
}

bool fits_png(const Tensor& t) {
    if (t.shape().c != 1 && t.shape().c != 3) {
        return false;
    }
    return std::all_of(t.values().begin(), t.values().end(),
                       [](double v) { return v >= 0.0 && v <= 255.0 && v == std::round(v); });
}

void write_image_file(const fs::path& stem, const Tensor& t) {
    if (fits_png(t)) {
        const Shape s = t.shape();
        io::Raster r{s.h, s.w, s.c, 8, std::vector<std::uint16_t>(t.size())};
        for (int y = 0; y < s.h; ++y) {
            for (int x = 0; x < s.w; ++x) {
                for (int c = 0; c < s.c; ++c) {
                    r.pixels[(static_cast<std::size_t>(y) * s.w + x) * s.c + c] =
                        static_cast<std::uint16_t>(t.at(0, c, y, x));
                }
            }
        }
        io::write_png(stem.string() + ".png", r);
    } else {
        io::write_nifti(stem.string() + ".nii.gz", t, io::NiftiType::float64);
    }
}

void write_label_file(const fs::path& stem, const LabelMap& m) {
    const int hi = m.labels.empty() ? 0 : *std::max_element(m.labels.begin(), m.labels.end());
    const int lo = m.labels.empty() ? 0 : *std::min_element(m.labels.begin(), m.labels.end());
    if (lo >= 0 && hi <= 65535) {
        io::Raster r{m.height, m.width, 1, hi > 255 ? 16 : 8, {}};
        r.pixels.assign(m.labels.begin(), m.labels.end());
        io::write_png(stem.string() + ".png", r);
        return;
    }
    Tensor t(Shape{1, 1, m.height, m.width});
    std::copy(m.labels.begin(), m.labels.end(), t.values().begin());
    io::write_nifti(stem.string() + ".nii.gz", t, io::NiftiType::int32);
}

void check_grid(const std::string& case_id, const std::string& what, const LabelMap& m, const Tensor& image) {
    if (m.height != image.shape().h || m.width != image.shape().w) {
        throw CaseError(case_id, what + " is " + std::to_string(m.height) + "x" + std::to_string(m.width) +
                                     " but the image is " + std::to_string(image.shape().h) + "x" +
                                     std::to_string(image.shape().w));
    }
}

// Mirror index into [0, n) with the edge sample repeated: d c b a | a b c d | d c b a.
int reflect_index(int i, int n) {
    const int period = 2 * n;
    i %= period;
    if (i < 0) {
        i += period;
    }
    return i < n ? i : period - 1 - i;
}

}  // namespace

CaseError::CaseError(const std::string& case_id, const std::string& message)
    : std::runtime_error("case '" + case_id + "': " + message), case_id_(case_id) {}

Layout parse_layout(const std::string& name) {
    if (name == "multi_annotator") {
        return Layout::multi_annotator;
    }
    if (name == "multi_class") {
        return Layout::multi_class;
    }
    throw std::invalid_argument("unknown layout '" + name + "' (multi_annotator | multi_class)");
}

std::vector<std::string> list_case_ids(const std::string& root) {
    if (!fs::is_directory(root)) {
        throw std::runtime_error("dataset root " + root + " is not a directory");
    }
    std::vector<std::string> ids;
    for (const auto& entry : fs::directory_iterator(root)) {
        if (entry.is_directory()) {
            ids.push_back(entry.path().filename().string());
        }
    }
    std::sort(ids.begin(), ids.end());
    return ids;
}

SegmentationCase load_case(const std::string& root, const std::string& case_id, Layout layout) {
    const fs::path dir = fs::path(root) / case_id;
    SegmentationCase c;
    c.case_id = case_id;
    const auto image_path = find_image_file(dir, "image");
    if (!image_path) {
        throw CaseError(case_id, "missing image, expected " + expected_paths(dir, "image"));
    }
    c.image = read_image_file(*image_path);

    if (layout == Layout::multi_class) {
        const auto p = find_image_file(dir, "annotation_labels");
        if (!p) {
            throw CaseError(case_id, "missing annotation, expected " + expected_paths(dir, "annotation_labels"));
        }
        c.annotations.push_back(read_label_file(case_id, *p));
    } else {
        for (int k = 0;; ++k) {
            const auto p = find_image_file(dir, "annotation_" + std::to_string(k));
            if (!p) {
                break;
            }
            c.annotations.push_back(read_label_file(case_id, *p));
        }
        if (c.annotations.empty()) {
            throw CaseError(case_id, "missing annotations, expected " + expected_paths(dir, "annotation_0") +
                                         " (then annotation_1, ...)");
        }
    }
    for (std::size_t k = 0; k < c.annotations.size(); ++k) {
        check_grid(case_id, "annotation " + std::to_string(k), c.annotations[k], c.image);
    }
    if (const auto p = find_image_file(dir, "reference")) {
        c.reference = read_label_file(case_id, *p);
        check_grid(case_id, "reference", *c.reference, c.image);
    }
    if (fs::is_regular_file(dir / "meta")) {
        const auto meta = kv::read_file((dir / "meta").string());
        if (const auto it = meta.find("spacing"); it != meta.end()) {
            const auto v = kv::to_double_list("spacing", it->second);
            if (v.size() != 2 || !(v[0] > 0.0) || !(v[1] > 0.0)) {
                throw CaseError(case_id, "meta spacing must be two positive numbers, got '" + it->second + "'");
            }
            c.spacing = PixelSpacing{v[0], v[1]};
        }
    }
    return c;
}

std::vector<SegmentationCase> load_cases(const std::string& root, Layout layout) {
    std::vector<SegmentationCase> out;
    for (const auto& id : list_case_ids(root)) {
        out.push_back(load_case(root, id, layout));
    }
    return out;
}

void write_case(const std::string& root, const SegmentationCase& c) {
    if (c.annotations.empty()) {
        throw CaseError(c.case_id, "nothing to write: no annotations");
    }
    const fs::path dir = fs::path(root) / c.case_id;
    fs::create_directories(dir);
    write_image_file(dir / "image", c.image);
    for (std::size_t k = 0; k < c.annotations.size(); ++k) {
        write_label_file(dir / ("annotation_" + std::to_string(k)), c.annotations[k]);
    }
    if (c.reference) {
        write_label_file(dir / "reference", *c.reference);
    }
    if (c.spacing) {
        std::ofstream meta(dir / "meta");
        meta << "spacing = " << kv::format_double(c.spacing->row) << ", " << kv::format_double(c.spacing->col)
             << "\n";
    }
}

void validate_case(const SegmentationCase& c, int class_count) {
    if (c.annotations.empty()) {
        throw CaseError(c.case_id, "no annotations");
    }
    auto check_labels = [&](const LabelMap& m, const std::string& what) {
        check_grid(c.case_id, what, m, c.image);
        for (int v : m.labels) {
            if (v < 0 || v >= class_count) {
                throw CaseError(c.case_id, what + " holds label " + std::to_string(v) + ", expected [0, " +
                                               std::to_string(class_count) + ")");
            }
        }
    };
    for (std::size_t k = 0; k < c.annotations.size(); ++k) {
        check_labels(c.annotations[k], "annotation " + std::to_string(k));
    }
    if (c.reference) {
        check_labels(*c.reference, "reference");
    }
}

void ToySpec::validate() const {
    if (image_size < 16) {
        throw std::invalid_argument("toy image_size must be >= 16, got " + std::to_string(image_size));
    }
    if (!(ambiguity_rate >= 0.0 && ambiguity_rate <= 1.0)) {
        throw std::invalid_argument("ambiguity_rate must lie in [0, 1]");
    }
    if (case_count < 0) {
        throw std::invalid_argument("case_count must be >= 0");
    }
    if (annotator_count < 1) {
        throw std::invalid_argument("annotator_count must be >= 1");
    }
    if (radius_offsets.size() < 2) {
        throw std::invalid_argument("radius_offsets needs at least two entries");
    }
    const int lo = *std::min_element(radius_offsets.begin(), radius_offsets.end());
    if (!(radius_min + lo >= 1.0) || !(radius_max >= radius_min)) {
        throw std::invalid_argument("toy radii too small for the annotator offsets");
    }
    if (!(center_jitter >= 0.0) || !(noise_sigma >= 0.0)) {
        throw std::invalid_argument("center_jitter and noise_sigma must be >= 0");
    }
    const double reach = radius_max + *std::max_element(radius_offsets.begin(), radius_offsets.end()) +
                         center_jitter;
    if (reach > (image_size - 1) / 2.0) {
        throw std::invalid_argument("toy disks do not fit inside a " + std::to_string(image_size) + " px image");
    }
}

ToySpec ToySpec::for_size(int size) {
    ToySpec s;
    s.image_size = size;
    s.center_jitter = size * 3.0 / 32.0;
    const int hi = *std::max_element(s.radius_offsets.begin(), s.radius_offsets.end());
    s.radius_max = (size - 1) / 2.0 - hi - s.center_jitter - 1.0;
    s.radius_min = std::max(3.0, s.radius_max - size / 8.0);
    return s;
}

LabelMap rasterize_disk(int size, double center_row, double center_col, double radius) {
    LabelMap m(size, size);
    const double r2 = radius * radius;
    for (int r = 0; r < size; ++r) {
        for (int c = 0; c < size; ++c) {
            const double dy = r - center_row;
            const double dx = c - center_col;
            m.at(r, c) = dy * dy + dx * dx <= r2 ? 1 : 0;
        }
    }
    return m;
}

std::vector<SegmentationCase> make_toy_dataset(const ToySpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> unit(0.0, 1.0);
    std::normal_distribution<double> noise(0.0, 1.0);

    const auto ambiguous_count =
        static_cast<std::size_t>(std::lround(spec.ambiguity_rate * static_cast<double>(spec.case_count)));
    std::vector<int> order(spec.case_count);
    std::iota(order.begin(), order.end(), 0);
    std::shuffle(order.begin(), order.end(), rng);
    std::vector<bool> ambiguous(spec.case_count, false);
    for (std::size_t i = 0; i < ambiguous_count; ++i) {
        ambiguous[order[i]] = true;
    }

    const int n = spec.image_size;
    const int digits = std::max(3, static_cast<int>(std::to_string(std::max(spec.case_count - 1, 0)).size()));
    std::vector<SegmentationCase> cases;
    cases.reserve(spec.case_count);
    for (int i = 0; i < spec.case_count; ++i) {
        const double radius = spec.radius_min + (spec.radius_max - spec.radius_min) * unit(rng);
        const double cy = (n - 1) / 2.0 + spec.center_jitter * (2.0 * unit(rng) - 1.0);
        const double cx = (n - 1) / 2.0 + spec.center_jitter * (2.0 * unit(rng) - 1.0);

        SegmentationCase c;
        std::string id = std::to_string(i);
        c.case_id = "toy_" + std::string(digits - id.size(), '0') + id;
        c.image = Tensor(Shape{1, 1, n, n});
        for (int r = 0; r < n; ++r) {
            for (int col = 0; col < n; ++col) {
                const double d = std::hypot(r - cy, col - cx);
                double t = 0.0;
                if (ambiguous[i]) {
                    t = std::clamp((radius + kToyRampHalfWidth - d) / (2.0 * kToyRampHalfWidth), 0.0, 1.0);
                } else {
                    t = d <= radius ? 1.0 : 0.0;
                }
                const double v = kToyBackground + t * (kToyForeground - kToyBackground) + spec.noise_sigma * noise(rng);
                c.image.at(0, 0, r, col) = std::clamp(std::round(v), 0.0, 255.0);
            }
        }
        c.reference = rasterize_disk(n, cy, cx, radius);
        if (ambiguous[i]) {
            std::vector<int> offsets = spec.radius_offsets;
            std::shuffle(offsets.begin(), offsets.end(), rng);
            for (int k = 0; k < spec.annotator_count; ++k) {
                const int off = offsets[static_cast<std::size_t>(k) % offsets.size()];
                c.annotations.push_back(rasterize_disk(n, cy, cx, radius + off));
            }
        } else {
            c.annotations.assign(spec.annotator_count, *c.reference);
        }
        cases.push_back(std::move(c));
    }
    return cases;
}

LabelMap resize_nearest(const LabelMap& map, Extent size) {
    if (size.h < 1 || size.w < 1) {
        throw std::invalid_argument("resize_nearest: target size must be positive");
    }
    LabelMap out(size.h, size.w);
    for (int r = 0; r < size.h; ++r) {
        const int sr = std::min(map.height - 1, static_cast<int>(std::floor((r + 0.5) * map.height / size.h)));
        for (int c = 0; c < size.w; ++c) {
            const int sc = std::min(map.width - 1, static_cast<int>(std::floor((c + 0.5) * map.width / size.w)));
            out.at(r, c) = map.at(sr, sc);
        }
    }
    return out;
}

Tensor standardize(const Tensor& image) {
    const double n = static_cast<double>(image.size());
    double mean = 0.0;
    for (double v : image.values()) {
        mean += v;
    }
    mean /= n;
    double var = 0.0;
    for (double v : image.values()) {
        var += (v - mean) * (v - mean);
    }
    const double sd = std::sqrt(var / n);
    Tensor out(image.shape());
    for (std::size_t i = 0; i < image.size(); ++i) {
        out[i] = sd > 0.0 ? (image[i] - mean) / sd : 0.0;
    }
    return out;
}

ModelPair preprocess(const SegmentationCase& c, Extent input_size, Extent output_size) {
    ModelPair p;
    const Tensor resized = (c.height() == input_size.h && c.width() == input_size.w)
                               ? c.image
                               : ag::bilinear_resize(c.image, input_size.h, input_size.w);
    p.image = standardize(resized);
    p.labels.reserve(c.annotations.size());
    for (const auto& a : c.annotations) {
        p.labels.push_back(resize_nearest(a, output_size));
    }
    if (c.reference) {
        p.reference = resize_nearest(*c.reference, output_size);
    }
    return p;
}

std::vector<double> gaussian_kernel(double sigma) {
    if (!(sigma >= 0.0)) {
        throw std::invalid_argument("gaussian_kernel: sigma must be >= 0");
    }
    if (sigma == 0.0) {
        return {1.0};
    }
    const int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> k(2 * radius + 1);
    double total = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
        total += k[i + radius];
    }
    for (double& v : k) {
        v /= total;
    }
    return k;
}

Tensor gaussian_blur(const Tensor& image, double sigma) {
    const auto k = gaussian_kernel(sigma);
    if (k.size() == 1) {
        return image;
    }
    const int radius = static_cast<int>(k.size() / 2);
    const Shape s = image.shape();
    Tensor tmp(s);
    Tensor out(s);
    for (int n = 0; n < s.n; ++n) {
        for (int c = 0; c < s.c; ++c) {
            for (int y = 0; y < s.h; ++y) {
                for (int x = 0; x < s.w; ++x) {
                    double acc = 0.0;
                    for (int i = -radius; i <= radius; ++i) {
                        acc += k[i + radius] * image.at(n, c, y, reflect_index(x + i, s.w));
                    }
                    tmp.at(n, c, y, x) = acc;
                }
            }
            for (int y = 0; y < s.h; ++y) {
                for (int x = 0; x < s.w; ++x) {
                    double acc = 0.0;
                    for (int i = -radius; i <= radius; ++i) {
                        acc += k[i + radius] * tmp.at(n, c, reflect_index(y + i, s.h), x);
                    }
                    out.at(n, c, y, x) = acc;
                }
            }
        }
    }
    return out;
}

int patch_side(int height, int width, double ratio) {
    if (!(ratio > 0.0 && ratio < 1.0)) {
        throw std::invalid_argument("patch ratio must lie in (0, 1)");
    }
    const int side = static_cast<int>(std::lround(std::sqrt(ratio * height * width)));
    if (side < 1 || side > std::min(height, width)) {
        throw std::invalid_argument("patch of side " + std::to_string(side) + " does not fit a " +
                                    std::to_string(height) + "x" + std::to_string(width) + " image");
    }
    return side;
}

std::pair<Tensor, Mask> random_patch(const Tensor& image, double ratio, std::mt19937_64& rng) {
    const Shape s = image.shape();
    if (s.n != 1) {
        throw ShapeError("random_patch: expected a single image, got " + s.str());
    }
    const int side = patch_side(s.h, s.w, ratio);
    double mean = 0.0;
    double hi = -std::numeric_limits<double>::infinity();
    for (double v : image.values()) {
        mean += v;
        hi = std::max(hi, v);
    }
    mean /= static_cast<double>(image.size());
    double var = 0.0;
    for (double v : image.values()) {
        var += (v - mean) * (v - mean);
    }
    const double fill = hi + 3.0 * std::sqrt(var / static_cast<double>(image.size()));

    const int r0 = std::uniform_int_distribution<int>(0, s.h - side)(rng);
    const int c0 = std::uniform_int_distribution<int>(0, s.w - side)(rng);
    Tensor out = image;
    Mask mask(s.h, s.w);
    for (int r = r0; r < r0 + side; ++r) {
        for (int c = c0; c < c0 + side; ++c) {
            mask.set(r, c);
            for (int ch = 0; ch < s.c; ++ch) {
                out.at(0, ch, r, c) = fill;
            }
        }
    }
    return {out, mask};
}

}  // namespace vaeunet
