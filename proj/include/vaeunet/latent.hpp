#pragma once

// Per-level diagonal Gaussian latents: closed-form KL, reparameterised
// sampling, and the level-wise KL decomposition of a coarse-to-fine
// dependent hierarchy.

#include <vector>

#include "vaeunet/autograd.hpp"

namespace vaeunet {

/// Default clamp range for log-variance heads.
inline constexpr double kLogVarMin = -10.0;
inline constexpr double kLogVarMax = 10.0;

/// Pixel-wise Gaussian: mean and natural-log variance maps of identical shape.
struct DiagonalGaussianField {
    ag::Var mean;
    ag::Var log_var;

    DiagonalGaussianField() = default;
    DiagonalGaussianField(ag::Var mean_, ag::Var log_var_);

    /// Constant (non-differentiable) field from plain tensors.
    static DiagonalGaussianField constant(Tensor mean, Tensor log_var);

    [[nodiscard]] const Shape& shape() const { return mean.shape(); }
};

/// Sampled latents z_0..z_L, finest level first.
struct LatentStack {
    std::vector<ag::Var> levels;

    [[nodiscard]] std::size_t size() const { return levels.size(); }
    const ag::Var& operator[](std::size_t i) const { return levels[i]; }
};

enum class KlReduction { mean, sum };

struct KlReport {
    std::vector<double> per_level;  // nats
    double reduced = 0.0;           // nats
    ag::Var reduced_term;           // differentiable version of `reduced`
};

/// KL[q || p] in nats: channel sum, mean over spatial positions (and batch).
ag::Var gaussian_kl(const DiagonalGaussianField& q, const DiagonalGaussianField& p);

/// z = mean + exp(log_var / 2) * noise, differentiable in mean and log_var.
ag::Var sample_latent(const DiagonalGaussianField& g, const Tensor& noise);

/// The mode of the field. Equal to sample_latent with zero noise.
ag::Var mean_latent(const DiagonalGaussianField& g);

/// Per-level KL for fields already conditioned on the same sampled ancestors.
KlReport hierarchical_kl(const std::vector<DiagonalGaussianField>& q_levels,
                         const std::vector<DiagonalGaussianField>& p_levels,
                         KlReduction reduction = KlReduction::mean);

}  // namespace vaeunet
