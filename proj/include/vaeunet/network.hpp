#pragma once

// U-net with Gaussian latents on every skip connection.
//
// Two encoders share the same topology: one reads the image X, the other the
// one-hot segmentation Y. At level i a pair of 1x1 heads turns the skip
// features (concatenated with the average-pooled sample z_{i-1}) into a
// DiagonalGaussianField. The decoder concatenates z_i at native resolution
// with the skip features of level i. Both branches condition on the samples
// drawn from the image branch; only the image branch feeds the decoder.

#include <cstdint>
#include <map>
#include <optional>
#include <random>
#include <string>
#include <vector>

#include "vaeunet/label_map.hpp"
#include "vaeunet/latent.hpp"

namespace vaeunet {

struct Extent {
    int h = 0;
    int w = 0;
    friend bool operator==(const Extent&, const Extent&) = default;
};

struct ModelConfig {
    int level_count = 3;
    std::vector<int> encoder_channels{64, 128, 256};
    int latent_channels = 2;
    int class_count = 2;
    int input_channels = 1;
    Extent input_size{224, 224};
    Extent output_size{512, 512};
    double log_var_min = kLogVarMin;
    double log_var_max = kLogVarMax;

    /// Throws std::invalid_argument describing the first violated invariant.
    void validate() const;

    /// Flat `key = value` lines; parse_model_config() reads them back.
    [[nodiscard]] std::string to_text() const;

    friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

/// Reads keys understood by ModelConfig from `key = value` pairs, leaving others untouched.
void apply_model_keys(ModelConfig& cfg, const std::map<std::string, std::string>& kv);
ModelConfig parse_model_config(const std::string& text);

/// Standard-normal tensors on demand.
class NoiseSource {
public:
    virtual ~NoiseSource() = default;
    virtual Tensor standard_normal(const Shape& shape) = 0;
};

class GaussianNoise final : public NoiseSource {
public:
    explicit GaussianNoise(std::uint64_t seed) : rng_(seed) {}
    Tensor standard_normal(const Shape& shape) override;

private:
    std::mt19937_64 rng_;
    std::normal_distribution<double> normal_{0.0, 1.0};
};

/// Always zero: turns sampling into the prior mode.
class ZeroNoise final : public NoiseSource {
public:
    Tensor standard_normal(const Shape& shape) override { return Tensor(shape, 0.0); }
};

struct NamedParameter {
    std::string name;
    ag::Var var;
};

/// Trainable tensors in registration order.
class ParameterStore {
public:
    ag::Var& add(std::string name, Tensor init);
    [[nodiscard]] const ag::Var& get(const std::string& name) const;
    [[nodiscard]] ag::Var& get(const std::string& name);
    [[nodiscard]] bool contains(const std::string& name) const { return index_.contains(name); }
    [[nodiscard]] const std::vector<NamedParameter>& entries() const { return entries_; }
    [[nodiscard]] std::vector<NamedParameter>& entries() { return entries_; }
    [[nodiscard]] std::size_t scalar_count() const;
    void zero_grad();

private:
    std::vector<NamedParameter> entries_;
    std::map<std::string, std::size_t> index_;
};

struct SkipFeatures {
    std::vector<ag::Var> levels;  // level i at input / 2^i

    [[nodiscard]] std::size_t size() const { return levels.size(); }
};

struct ForwardTrace {
    ag::Var logits;
    std::vector<DiagonalGaussianField> q_levels;
    std::vector<DiagonalGaussianField> p_levels;  // empty for inference traces
    LatentStack latents;
    KlReport kl;  // unset for inference traces
};

enum class Branch { image, segmentation };

class VaeUnet {
public:
    /// Builds the parameter manifest and draws He-normal weights from `init_seed`.
    explicit VaeUnet(ModelConfig cfg, std::uint64_t init_seed = 0);

    // Copies would share parameter nodes.
    VaeUnet(const VaeUnet&) = delete;
    VaeUnet& operator=(const VaeUnet&) = delete;
    VaeUnet(VaeUnet&&) = default;
    VaeUnet& operator=(VaeUnet&&) = default;

    [[nodiscard]] const ModelConfig& config() const { return cfg_; }
    [[nodiscard]] ParameterStore& parameters() { return params_; }
    [[nodiscard]] const ParameterStore& parameters() const { return params_; }

    [[nodiscard]] SkipFeatures encode_image(const Tensor& x) const;
    [[nodiscard]] DiagonalGaussianField latent_head(Branch branch, int level, const ag::Var& features,
                                                    const std::optional<ag::Var>& prev_latent) const;
    [[nodiscard]] std::vector<DiagonalGaussianField> encode_segmentation(const Tensor& y_onehot,
                                                                         const LatentStack& q_latents) const;
    [[nodiscard]] ag::Var decode(const SkipFeatures& skips, const LatentStack& latents) const;

    /// One training pass: q-branch samples feed the decoder, the Y-branch supplies KL targets.
    [[nodiscard]] ForwardTrace forward_train(const Tensor& x, const Tensor& y_onehot, NoiseSource& noise) const;

    /// Image branch only; `noise` drives the latent chain (ZeroNoise gives the prior mode).
    [[nodiscard]] ForwardTrace forward_inference(const Tensor& x, NoiseSource& noise) const;
    /// Mean latents at every level.
    [[nodiscard]] ForwardTrace forward_prior(const Tensor& x) const;

    [[nodiscard]] LabelMap predict_prior(const Tensor& x) const;
    [[nodiscard]] SampleSet predict_samples(const Tensor& x, int n, std::uint64_t seed) const;
    [[nodiscard]] SampleSet predict_samples(const Tensor& x, int n, NoiseSource& noise) const;

private:
    [[nodiscard]] SkipFeatures encode(const std::string& prefix, const ag::Var& input) const;
    [[nodiscard]] ag::Var conv(const std::string& name, const ag::Var& x) const;
    [[nodiscard]] ag::Var block(const std::string& prefix, const ag::Var& x) const;
    [[nodiscard]] std::pair<std::vector<DiagonalGaussianField>, LatentStack> latent_chain(const SkipFeatures& skips,
                                                                                           NoiseSource& noise) const;
    void check_input(const Tensor& x) const;

    ModelConfig cfg_;
    ParameterStore params_;
};

}  // namespace vaeunet
