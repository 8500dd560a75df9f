#pragma once

// Shared helpers for the unit suites.

#include <cmath>
#include <filesystem>
#include <functional>
#include <random>
#include <string>

#include "vaeunet/label_map.hpp"
#include "vaeunet/network.hpp"
#include "vaeunet/tensor.hpp"

namespace testing {

using vaeunet::LabelMap;
using vaeunet::Shape;
using vaeunet::Tensor;

inline Tensor random_tensor(std::mt19937_64& rng, Shape s, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    Tensor t(s);
    for (std::size_t i = 0; i < t.size(); ++i) {
        t[i] = u(rng);
    }
    return t;
}

inline LabelMap random_labels(std::mt19937_64& rng, int h, int w, int classes, double p_fg = 0.5) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    std::uniform_int_distribution<int> fg(1, std::max(1, classes - 1));
    LabelMap m(h, w);
    for (int& v : m.labels) {
        v = u(rng) < p_fg ? fg(rng) : 0;
    }
    return m;
}

inline LabelMap disk(int size, double r0, double c0, double radius) {
    LabelMap m(size, size);
    for (int r = 0; r < size; ++r) {
        for (int c = 0; c < size; ++c) {
            if ((r - r0) * (r - r0) + (c - c0) * (c - c0) <= radius * radius) {
                m.at(r, c) = 1;
            }
        }
    }
    return m;
}

inline LabelMap from_rows(std::initializer_list<std::initializer_list<int>> rows) {
    const int h = static_cast<int>(rows.size());
    const int w = static_cast<int>(rows.begin()->size());
    LabelMap m(h, w);
    int r = 0;
    for (const auto& row : rows) {
        int c = 0;
        for (int v : row) {
            m.at(r, c++) = v;
        }
        ++r;
    }
    return m;
}

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
    const auto p = std::filesystem::temp_directory_path() / ("vaeunet_test_" + name);
    std::filesystem::remove_all(p);
    std::filesystem::create_directories(p);
    return p;
}

// Central difference of f along coordinate i of t.
inline double central_difference(Tensor& t, std::size_t i, double h, const std::function<double()>& f) {
    const double saved = t[i];
    t[i] = saved + h;
    const double up = f();
    t[i] = saved - h;
    const double down = f();
    t[i] = saved;
    return (up - down) / (2.0 * h);
}

inline vaeunet::ModelConfig tiny_config(int levels = 2, int size = 16) {
    vaeunet::ModelConfig cfg;
    cfg.level_count = levels;
    cfg.encoder_channels.clear();
    for (int i = 0; i < levels; ++i) {
        cfg.encoder_channels.push_back(4 + 2 * i);
    }
    cfg.latent_channels = 2;
    cfg.class_count = 2;
    cfg.input_channels = 1;
    cfg.input_size = {size, size};
    cfg.output_size = {size, size};
    return cfg;
}

inline double normal_log_pdf(double x, double mu, double var) {
    return -0.5 * std::log(2.0 * M_PI * var) - 0.5 * (x - mu) * (x - mu) / var;
}

}  // namespace testing
