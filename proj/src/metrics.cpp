#include "vaeunet/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace vaeunet {

namespace {

void require_same_grid(const LabelMap& a, const LabelMap& b, const char* what) {
    if (a.height != b.height || a.width != b.width) {
        throw ShapeError(std::string(what) + ": label maps " + std::to_string(a.height) + "x" +
                         std::to_string(a.width) + " vs " + std::to_string(b.height) + "x" + std::to_string(b.width));
    }
}

double iou_distance_masks(const std::vector<unsigned char>& s, const std::vector<unsigned char>& t) {
    std::size_t inter = 0;
    std::size_t uni = 0;
    for (std::size_t i = 0; i < s.size(); ++i) {
        inter += static_cast<std::size_t>(s[i] & t[i]);
        uni += static_cast<std::size_t>(s[i] | t[i]);
    }
    if (uni == 0) {
        return 0.0;
    }
    return 1.0 - static_cast<double>(inter) / static_cast<double>(uni);
}

double mean_pairwise(const std::vector<Mask>& a, const std::vector<Mask>& b) {
    double total = 0.0;
    for (const auto& x : a) {
        for (const auto& y : b) {
            total += iou_distance_masks(x.values, y.values);
        }
    }
    return total / (static_cast<double>(a.size()) * static_cast<double>(b.size()));
}

std::vector<Mask> class_masks(const SampleSet& set, int class_id) {
    std::vector<Mask> out;
    out.reserve(set.size());
    for (const auto& s : set.samples) {
        out.push_back(class_mask(s, class_id));
    }
    return out;
}

// Linear interpolation between closest ranks, matching numpy's default percentile.
double percentile_of(std::vector<double> v, double p) {
    std::sort(v.begin(), v.end());
    const double rank = p / 100.0 * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(rank));
    const auto hi = std::min(lo + 1, v.size() - 1);
    const double frac = rank - static_cast<double>(lo);
    return v[lo] + frac * (v[hi] - v[lo]);
}

void directed_distances(const std::vector<std::pair<int, int>>& from, const std::vector<std::pair<int, int>>& to,
                        PixelSpacing sp, std::vector<double>& out) {
    for (const auto& [r, c] : from) {
        double best = std::numeric_limits<double>::infinity();
        for (const auto& [r2, c2] : to) {
            const double dy = (r - r2) * sp.row;
            const double dx = (c - c2) * sp.col;
            best = std::min(best, dy * dy + dx * dx);
        }
        out.push_back(std::sqrt(best));
    }
}

}  // namespace

std::size_t Mask::count() const {
    return static_cast<std::size_t>(std::count(values.begin(), values.end(), static_cast<unsigned char>(1)));
}

Mask class_mask(const LabelMap& map, int class_id) {
    Mask m(map.height, map.width);
    for (std::size_t i = 0; i < map.size(); ++i) {
        m.values[i] = map.labels[i] == class_id ? 1 : 0;
    }
    return m;
}

double iou_distance(const LabelMap& s, const LabelMap& t, int class_id) {
    require_same_grid(s, t, "iou_distance");
    return iou_distance_masks(class_mask(s, class_id).values, class_mask(t, class_id).values);
}

double ged_squared(const SampleSet& pred, const SampleSet& truth, int class_id) {
    validate_sample_set(pred, "ged_squared pred");
    validate_sample_set(truth, "ged_squared truth");
    require_same_grid(pred.samples.front(), truth.samples.front(), "ged_squared");
    const auto ps = class_masks(pred, class_id);
    const auto ts = class_masks(truth, class_id);
    return 2.0 * mean_pairwise(ps, ts) - mean_pairwise(ps, ps) - mean_pairwise(ts, ts);
}

double normalized_cross_correlation(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty()) {
        throw ShapeError("normalized_cross_correlation: maps of size " + std::to_string(a.size()) + " and " +
                         std::to_string(b.size()));
    }
    const double n = static_cast<double>(a.size());
    double ma = 0.0;
    double mb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ma += a[i];
        mb += b[i];
    }
    ma /= n;
    mb /= n;
    double va = 0.0;
    double vb = 0.0;
    double cov = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        va += (a[i] - ma) * (a[i] - ma);
        vb += (b[i] - mb) * (b[i] - mb);
        cov += (a[i] - ma) * (b[i] - mb);
    }
    const double sa = std::sqrt(va / n);
    const double sb = std::sqrt(vb / n);
    if (sa == 0.0 && sb == 0.0) {
        return a == b ? 1.0 : 0.0;
    }
    return std::clamp(cov / n / ((sa + kNccEpsilon) * (sb + kNccEpsilon)), -1.0, 1.0);
}

double ncc_score(const SampleSet& pred, const SampleSet& truth, int class_id) {
    validate_sample_set(pred, "ncc_score pred");
    validate_sample_set(truth, "ncc_score truth");
    require_same_grid(pred.samples.front(), truth.samples.front(), "ncc_score");
    const auto ps = class_masks(pred, class_id);
    const auto ts = class_masks(truth, class_id);
    const std::size_t pixels = ps.front().values.size();
    const double n = static_cast<double>(ps.size());
    const double log_hit = std::log(1.0 + kCrossEntropyEpsilon);
    const double log_miss = std::log(kCrossEntropyEpsilon);

    // Binary encoding: channel 1 = class, channel 0 = rest.
    std::vector<double> fg_fraction(pixels, 0.0);
    for (const auto& s : ps) {
        for (std::size_t k = 0; k < pixels; ++k) {
            fg_fraction[k] += s.values[k];
        }
    }
    for (double& v : fg_fraction) {
        v /= n;
    }

    // E_s[CE(s_mean, s)]: -sum_c s_mean_c log(s_c + eps), averaged over samples.
    std::vector<double> e_ss(pixels, 0.0);
    for (const auto& s : ps) {
        for (std::size_t k = 0; k < pixels; ++k) {
            const double p1 = fg_fraction[k];
            const bool fg = s.values[k] != 0;
            e_ss[k] -= p1 * (fg ? log_hit : log_miss) + (1.0 - p1) * (fg ? log_miss : log_hit);
        }
    }
    for (double& v : e_ss) {
        v /= n;
    }

    double total = 0.0;
    for (const auto& t : ts) {
        std::vector<double> e_sy(pixels, 0.0);
        for (const auto& s : ps) {
            for (std::size_t k = 0; k < pixels; ++k) {
                // One-hot target selects exactly one channel.
                e_sy[k] -= (t.values[k] == s.values[k]) ? log_hit : log_miss;
            }
        }
        for (double& v : e_sy) {
            v /= n;
        }
        total += normalized_cross_correlation(e_ss, e_sy);
    }
    return total / static_cast<double>(ts.size());
}

double dice_coefficient(const LabelMap& pred, const LabelMap& truth, int class_id) {
    require_same_grid(pred, truth, "dice_coefficient");
    std::size_t a = 0;
    std::size_t b = 0;
    std::size_t inter = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const bool s = pred.labels[i] == class_id;
        const bool t = truth.labels[i] == class_id;
        a += s;
        b += t;
        inter += s && t;
    }
    if (a + b == 0) {
        return 1.0;
    }
    return 2.0 * static_cast<double>(inter) / static_cast<double>(a + b);
}

std::vector<std::pair<int, int>> boundary_pixels(const Mask& m) {
    std::vector<std::pair<int, int>> out;
    for (int r = 0; r < m.height; ++r) {
        for (int c = 0; c < m.width; ++c) {
            if (!m.at(r, c)) {
                continue;
            }
            const bool edge = r == 0 || c == 0 || r == m.height - 1 || c == m.width - 1 || !m.at(r - 1, c) ||
                              !m.at(r + 1, c) || !m.at(r, c - 1) || !m.at(r, c + 1);
            if (edge) {
                out.emplace_back(r, c);
            }
        }
    }
    return out;
}

std::optional<double> hausdorff_distance(const LabelMap& pred, const LabelMap& truth, int class_id,
                                         double percentile, PixelSpacing spacing) {
    require_same_grid(pred, truth, "hausdorff_distance");
    if (!(percentile > 0.0 && percentile <= 100.0)) {
        throw std::invalid_argument("hausdorff_distance: percentile must lie in (0, 100]");
    }
    const auto a = boundary_pixels(class_mask(pred, class_id));
    const auto b = boundary_pixels(class_mask(truth, class_id));
    if (a.empty() || b.empty()) {
        return std::nullopt;
    }
    std::vector<double> d;
    d.reserve(a.size() + b.size());
    directed_distances(a, b, spacing, d);
    directed_distances(b, a, spacing, d);
    if (percentile == 100.0) {
        return *std::max_element(d.begin(), d.end());
    }
    return percentile_of(std::move(d), percentile);
}

UncertaintyMap variance_map(const SampleSet& pred, int class_count) {
    validate_sample_set(pred, "variance_map");
    if (pred.size() < 2) {
        throw std::invalid_argument("variance_map needs at least 2 samples, got " + std::to_string(pred.size()));
    }
    const auto& first = pred.samples.front();
    const std::size_t pixels = first.size();
    std::vector<double> counts(pixels * class_count, 0.0);
    for (const auto& s : pred.samples) {
        for (std::size_t k = 0; k < pixels; ++k) {
            const int label = s.labels[k];
            if (label < 0 || label >= class_count) {
                throw std::invalid_argument("variance_map: label " + std::to_string(label) + " out of range");
            }
            counts[k * class_count + label] += 1.0;
        }
    }
    const double n = static_cast<double>(pred.size());
    UncertaintyMap map{first.height, first.width, std::vector<double>(pixels, 0.0)};
    double peak = 0.0;
    for (std::size_t k = 0; k < pixels; ++k) {
        double v = 0.0;
        for (int c = 0; c < class_count; ++c) {
            const double p = counts[k * class_count + c] / n;
            v += p * (1.0 - p);
        }
        map.values[k] = v;
        peak = std::max(peak, v);
    }
    if (peak > 0.0) {
        for (double& v : map.values) {
            v /= peak;
        }
    }
    return map;
}

RegionMeans region_disagreement(const UncertaintyMap& map, const Mask& region) {
    if (region.height != map.height || region.width != map.width) {
        throw ShapeError("region_disagreement: mask and map differ in shape");
    }
    const std::size_t inside_count = region.count();
    if (inside_count == 0 || inside_count == region.values.size()) {
        throw std::invalid_argument("region_disagreement: region must be neither empty nor the full image");
    }
    double inside = 0.0;
    double outside = 0.0;
    for (std::size_t k = 0; k < map.values.size(); ++k) {
        (region.values[k] ? inside : outside) += map.values[k];
    }
    return {inside / static_cast<double>(inside_count),
            outside / static_cast<double>(region.values.size() - inside_count)};
}

}  // namespace vaeunet
