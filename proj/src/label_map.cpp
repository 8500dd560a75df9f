#include "vaeunet/label_map.hpp"

#include <stdexcept>
#include <string>

namespace vaeunet {

void validate_sample_set(const SampleSet& set, const char* what) {
    if (set.empty()) {
        throw std::invalid_argument(std::string(what) + ": empty sample set");
    }
    const auto& first = set.samples.front();
    for (const auto& s : set.samples) {
        if (s.height != first.height || s.width != first.width) {
            throw ShapeError(std::string(what) + ": sample maps differ in shape");
        }
    }
}

Tensor one_hot(const LabelMap& map, int classes) {
    Tensor t(Shape{1, classes, map.height, map.width});
    const std::size_t plane = map.size();
    for (std::size_t i = 0; i < plane; ++i) {
        const int label = map.labels[i];
        if (label < 0 || label >= classes) {
            throw std::invalid_argument("one_hot: label " + std::to_string(label) + " outside [0, " +
                                        std::to_string(classes) + ")");
        }
        t[static_cast<std::size_t>(label) * plane + i] = 1.0;
    }
    return t;
}

Tensor one_hot_batch(const std::vector<LabelMap>& maps, int classes) {
    std::vector<Tensor> items;
    items.reserve(maps.size());
    for (const auto& m : maps) {
        items.push_back(one_hot(m, classes));
    }
    return stack_batch(items);
}

bool is_one_hot(const Tensor& t) {
    const Shape s = t.shape();
    const std::size_t plane = s.plane();
    for (int n = 0; n < s.n; ++n) {
        for (std::size_t k = 0; k < plane; ++k) {
            int ones = 0;
            for (int c = 0; c < s.c; ++c) {
                const double v = t[(static_cast<std::size_t>(n) * s.c + c) * plane + k];
                if (v == 1.0) {
                    ++ones;
                } else if (v != 0.0) {
                    return false;
                }
            }
            if (ones != 1) {
                return false;
            }
        }
    }
    return true;
}

LabelMap argmax_labels(const Tensor& logits, int n) {
    const Shape s = logits.shape();
    LabelMap out(s.h, s.w);
    for (int r = 0; r < s.h; ++r) {
        for (int c = 0; c < s.w; ++c) {
            int best = 0;
            double best_v = logits.at(n, 0, r, c);
            for (int k = 1; k < s.c; ++k) {
                const double v = logits.at(n, k, r, c);
                if (v > best_v) {
                    best_v = v;
                    best = k;
                }
            }
            out.at(r, c) = best;
        }
    }
    return out;
}

}  // namespace vaeunet
