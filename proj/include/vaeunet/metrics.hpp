#pragma once

// Segmentation metrics: overlap (Dice, IoU distance), boundary (Hausdorff),
// distribution (generalised energy distance, S_NCC) and sample-variance
// uncertainty maps.

#include <optional>
#include <utility>
#include <vector>

#include "vaeunet/label_map.hpp"

namespace vaeunet {

inline constexpr double kNccEpsilon = 1e-8;
inline constexpr double kCrossEntropyEpsilon = 1e-8;

/// Normalised pixel-wise sample variance in [0, 1].
struct UncertaintyMap {
    int height = 0;
    int width = 0;
    std::vector<double> values;

    [[nodiscard]] double at(int r, int c) const { return values[static_cast<std::size_t>(r) * width + c]; }
};

/// Boolean region on an H x W grid.
struct Mask {
    int height = 0;
    int width = 0;
    std::vector<unsigned char> values;

    Mask() = default;
    Mask(int h, int w) : height(h), width(w), values(static_cast<std::size_t>(h) * w, 0) {}

    [[nodiscard]] bool at(int r, int c) const { return values[static_cast<std::size_t>(r) * width + c] != 0; }
    void set(int r, int c, bool v = true) { values[static_cast<std::size_t>(r) * width + c] = v ? 1 : 0; }
    [[nodiscard]] std::size_t count() const;
};

Mask class_mask(const LabelMap& map, int class_id);

/// 1 - IoU on the class mask; two empty masks have distance 0.
double iou_distance(const LabelMap& s, const LabelMap& t, int class_id);

/// 2E[d(s,t)] - E[d(s,s')] - E[d(t,t')] over all ordered pairs, same-index pairs included.
double ged_squared(const SampleSet& pred, const SampleSet& truth, int class_id);

/// Mean over truths of NCC(E_s[CE(s_mean, s)], E_s[CE(t, s)]) on the binary class-vs-rest encoding.
double ncc_score(const SampleSet& pred, const SampleSet& truth, int class_id);

/// Normalised cross correlation of two maps with kNccEpsilon on the standard deviations.
double normalized_cross_correlation(const std::vector<double>& a, const std::vector<double>& b);

/// 2|s n t| / (|s| + |t|); two empty masks score 1.
double dice_coefficient(const LabelMap& pred, const LabelMap& truth, int class_id);

struct PixelSpacing {
    double row = 1.0;
    double col = 1.0;
};

/// Boundary pixels: mask pixels with a 4-neighbour outside the mask or the image.
std::vector<std::pair<int, int>> boundary_pixels(const Mask& m);

/// Percentile (100 = maximum) of the pooled directed boundary-to-boundary distances.
/// std::nullopt when either class mask is empty.
std::optional<double> hausdorff_distance(const LabelMap& pred, const LabelMap& truth, int class_id,
                                         double percentile = 100.0, PixelSpacing spacing = {});

/// Pixel-wise variance of one-hot samples, summed over classes, divided by its maximum. Needs N >= 2.
UncertaintyMap variance_map(const SampleSet& pred, int class_count);

struct RegionMeans {
    double inside = 0.0;
    double outside = 0.0;
};

/// Mean of the map inside and outside `region`. The region must be neither empty nor full.
RegionMeans region_disagreement(const UncertaintyMap& map, const Mask& region);

}  // namespace vaeunet
