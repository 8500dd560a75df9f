#pragma once

#include <vector>

#include "vaeunet/tensor.hpp"

namespace vaeunet {

/// Integer class ids on an H x W grid, row-major.
struct LabelMap {
    int height = 0;
    int width = 0;
    std::vector<int> labels;

    LabelMap() = default;
    LabelMap(int h, int w, int fill = 0) : height(h), width(w), labels(static_cast<std::size_t>(h) * w, fill) {}

    [[nodiscard]] int& at(int r, int c) { return labels[static_cast<std::size_t>(r) * width + c]; }
    [[nodiscard]] int at(int r, int c) const { return labels[static_cast<std::size_t>(r) * width + c]; }
    [[nodiscard]] std::size_t size() const { return labels.size(); }

    friend bool operator==(const LabelMap&, const LabelMap&) = default;
};

/// N predicted label maps for one image.
struct SampleSet {
    std::vector<LabelMap> samples;

    [[nodiscard]] std::size_t size() const { return samples.size(); }
    [[nodiscard]] bool empty() const { return samples.empty(); }
};

/// Throws when the set is empty or its maps disagree in shape.
void validate_sample_set(const SampleSet& set, const char* what);

/// [1 x classes x H x W] one-hot encoding. Throws on labels outside [0, classes).
Tensor one_hot(const LabelMap& map, int classes);

/// Stacks one-hot encodings into [N x classes x H x W].
Tensor one_hot_batch(const std::vector<LabelMap>& maps, int classes);

/// True when every pixel holds exactly one 1 and zeros elsewhere.
bool is_one_hot(const Tensor& t);

/// Channel argmax of item `n` of an NCHW tensor; ties resolve to the lowest class.
LabelMap argmax_labels(const Tensor& logits, int n = 0);

}  // namespace vaeunet
