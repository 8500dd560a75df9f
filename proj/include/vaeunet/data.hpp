#pragma once

// Case loading, the synthetic disk benchmark, preprocessing and OOD perturbations.
//
// On-disk layout, one directory per case:
//   <root>/<case_id>/image.png | image.nii.gz
//   <root>/<case_id>/annotation_<k>.png | .nii.gz   (k = 0, 1, ...; multi-annotator)
//   <root>/<case_id>/annotation_labels.png | .nii.gz (multi-class)
//   <root>/<case_id>/reference.png | .nii.gz         (optional nominal ground truth)
//   <root>/<case_id>/meta                            (optional, `spacing = row, col`)

#include <cstdint>
#include <optional>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "vaeunet/label_map.hpp"
#include "vaeunet/metrics.hpp"
#include "vaeunet/network.hpp"

namespace vaeunet {

struct SegmentationCase {
    std::string case_id;
    Tensor image;  // [1 x C x H x W]
    std::vector<LabelMap> annotations;
    std::optional<PixelSpacing> spacing;
    std::optional<LabelMap> reference;

    [[nodiscard]] int height() const { return image.shape().h; }
    [[nodiscard]] int width() const { return image.shape().w; }

    /// Label map scored by deterministic metrics: the reference when present, else annotation 0.
    [[nodiscard]] const LabelMap& primary_label() const { return reference ? *reference : annotations.front(); }
};

enum class Layout { multi_annotator, multi_class };

Layout parse_layout(const std::string& name);

/// Error raised for a specific case; the message starts with the case id.
class CaseError : public std::runtime_error {
public:
    CaseError(const std::string& case_id, const std::string& message);
    [[nodiscard]] const std::string& case_id() const { return case_id_; }

private:
    std::string case_id_;
};

/// Sorted case ids (subdirectory names) under `root`.
std::vector<std::string> list_case_ids(const std::string& root);

SegmentationCase load_case(const std::string& root, const std::string& case_id, Layout layout);

/// All cases in sorted id order. An empty directory yields an empty vector.
std::vector<SegmentationCase> load_cases(const std::string& root, Layout layout);

/// Writes `c` under `<root>/<case_id>/` in the documented layout.
void write_case(const std::string& root, const SegmentationCase& c);

/// Throws CaseError if annotations disagree with the image grid or carry labels outside [0, class_count).
void validate_case(const SegmentationCase& c, int class_count);

struct ToySpec {
    std::uint64_t seed = 0;
    int case_count = 64;
    int image_size = 32;
    double ambiguity_rate = 0.5;
    double radius_min = 5.5;
    double radius_max = 9.5;
    double center_jitter = 3.0;
    std::vector<int> radius_offsets{-2, -1, 1, 2};
    double noise_sigma = 8.0;
    int annotator_count = 4;

    void validate() const;

    /// Disk geometry scaled to `size`: jitter 3/32 of the side, largest annotated disk one pixel
    /// inside the centred half-width minus the jitter, radii spanning size/8. size = 32 gives the defaults.
    static ToySpec for_size(int size);
};

/// Bright disks on a dark noisy background. Ambiguous cases get one annotation per offset in
/// `radius_offsets` (shuffled per case) and a soft boundary ramp; the rest get identical annotations.
std::vector<SegmentationCase> make_toy_dataset(const ToySpec& spec);

/// Disk rasterisation used by the toy generator: pixel centres within `radius` of the centre.
LabelMap rasterize_disk(int size, double center_row, double center_col, double radius);

struct ModelPair {
    Tensor image;                   // [1 x C x input_h x input_w], zero mean, unit variance
    std::vector<LabelMap> labels;   // annotations at output size
    std::optional<LabelMap> reference;
};

/// Bilinear image resize, nearest-neighbour label resize, per-image z-scoring.
ModelPair preprocess(const SegmentationCase& c, Extent input_size, Extent output_size);

/// Nearest-neighbour label resize with source index floor((dst + 0.5) * in / out).
LabelMap resize_nearest(const LabelMap& map, Extent size);

/// Per-image standardisation over all channels and pixels; constant images map to 0.
Tensor standardize(const Tensor& image);

/// Separable Gaussian blur, kernel radius ceil(3 sigma), edge-reflecting padding. sigma = 0 is the identity.
Tensor gaussian_blur(const Tensor& image, double sigma);

/// Normalised 1D taps of length 2*ceil(3 sigma)+1.
std::vector<double> gaussian_kernel(double sigma);

/// Square patch of side round(sqrt(ratio*H*W)) at a uniformly drawn position fully inside the image,
/// filled with max + 3 std of the image intensities.
std::pair<Tensor, Mask> random_patch(const Tensor& image, double ratio, std::mt19937_64& rng);

int patch_side(int height, int width, double ratio);

}  // namespace vaeunet
