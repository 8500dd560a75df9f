#pragma once

// Training, evaluation, parameter accounting and artifact export.

#include <cstdint>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "vaeunet/checkpoint.hpp"
#include "vaeunet/data.hpp"
#include "vaeunet/losses.hpp"
#include "vaeunet/metrics.hpp"
#include "vaeunet/network.hpp"

namespace vaeunet {

enum class LrSchedule { poly, inverse_time, constant };

struct TrainConfig {
    int batch_size = 24;
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int epochs = 150;
    double lr_decay = 1e-4;
    double lr_power = 0.9;
    LrSchedule schedule = LrSchedule::poly;
    LossConfig loss;
    ModelConfig model;
    std::uint64_t seed = 0;
    Layout layout = Layout::multi_annotator;
    int fixed_annotator = -1;  // -1 samples one annotation per case per step
    double validation_fraction = 0.2;

    void validate() const;
    [[nodiscard]] std::string to_text() const;
};

/// Flat `key = value` config; model keys (level_count, input_size, ...) and loss keys
/// (beta, ce_weight, dice_weight) share the same namespace.
TrainConfig parse_train_config(const std::string& text);
TrainConfig read_train_config(const std::string& path);

/// Learning rate at `step` of `total_steps`.
/// poly: lr * max((1 - step/total)^lr_power, lr_decay); inverse_time: lr / (1 + lr_decay * step).
double learning_rate(const TrainConfig& cfg, long step, long total_steps);

/// Independent stream seed from a base seed, via splitmix64.
std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream);

/// Deterministic 80/20 split on the given (sorted) case order: the last share goes to validation.
struct Split {
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
};
Split split_cases(std::size_t count, double validation_fraction);

struct EpochStats {
    int epoch = 0;
    double lr = 0.0;
    double loss = 0.0;
    double cross_entropy = 0.0;
    double dice = 0.0;
    double kl = 0.0;
    double validation_dice = 0.0;
};

struct TrainResult {
    std::vector<EpochStats> curve;
    Checkpoint final_state;
    Checkpoint best_state;
    int best_epoch = 0;
    double best_validation_dice = 0.0;
    long steps = 0;
};

class TrainingDiverged : public std::runtime_error {
public:
    TrainingDiverged(long step, double loss);
    [[nodiscard]] long step() const { return step_; }

private:
    long step_;
};

using EpochCallback = std::function<void(const EpochStats&)>;

/// SGD with momentum and weight decay on the ELBO. Throws TrainingDiverged on a non-finite loss.
TrainResult train(const TrainConfig& cfg, const std::vector<SegmentationCase>& cases,
                  const EpochCallback& on_epoch = {});

/// Runs train() and writes final.ckpt, best.ckpt and loss_curve.csv into `out_dir`.
TrainResult train_to_directory(const TrainConfig& cfg, const std::vector<SegmentationCase>& cases,
                               const std::string& out_dir, const EpochCallback& on_epoch = {});

/// Mean prior-mode Dice over the foreground classes and the given cases.
double mean_prior_dice(const VaeUnet& net, const std::vector<SegmentationCase>& cases);

enum class EvalMode { prior, sample };

/// Overlap and boundary metrics of one prediction. sample_index is -1 in prior mode.
struct MetricRecord {
    std::string case_id;
    int class_id = 0;
    int sample_index = -1;
    double dice = 0.0;
    std::optional<double> hd;
    std::optional<double> hd95;
};

/// Set-level metrics of one case against all of its annotations.
struct DistributionRecord {
    std::string case_id;
    int class_id = 0;
    double ged_squared = 0.0;
    double sample_diversity = 0.0;  // E[d(s, s')]
    std::optional<double> ncc;      // needs at least 2 predictions
};

struct ClassAggregate {
    int class_id = 0;
    double dice_mean = 0.0;
    double dice_variance = 0.0;
    double hd_mean = 0.0;
    double hd_variance = 0.0;
    double hd95_mean = 0.0;
    std::size_t hd_defined = 0;
    std::size_t hd_undefined = 0;
    double ged_squared_mean = 0.0;
    double sample_diversity_mean = 0.0;
    std::optional<double> ncc_mean;
};

struct EvalReport {
    EvalMode mode = EvalMode::prior;
    int n_samples = 1;
    std::uint64_t seed = 0;
    std::vector<MetricRecord> records;
    std::vector<DistributionRecord> distribution;
    std::vector<ClassAggregate> aggregates;

    [[nodiscard]] std::string to_json() const;
};

/// Aggregates over the per-case records. Variances are population variances.
std::vector<ClassAggregate> aggregate(const std::vector<MetricRecord>& records,
                                      const std::vector<DistributionRecord>& distribution, int class_count);

/// Prior mode: one deterministic prediction per case. Sample mode: n_samples predictions per case.
/// Rejects datasets whose labels or channels do not fit the model before any inference.
EvalReport evaluate(const VaeUnet& net, const std::vector<SegmentationCase>& cases, EvalMode mode, int n_samples,
                    std::uint64_t seed);

/// Normalised sample variance map of `n_samples` predictions on an already preprocessed image.
UncertaintyMap uncertainty_map(const VaeUnet& net, const Tensor& image, int n_samples, std::uint64_t seed);

/// Writes `<out_stem>.npy` (raw map, H x W) and `<out_stem>.png` (magma) and returns the map.
UncertaintyMap export_uncertainty(const VaeUnet& net, const SegmentationCase& c, int n_samples, std::uint64_t seed,
                                  const std::string& out_stem);

void write_heatmap_png(const std::string& path, const UncertaintyMap& map);

/// Boundary pixels of every annotation (class `class_id`), dilated by `radius` in the 8-neighbourhood.
Mask boundary_band(const std::vector<LabelMap>& annotations, int class_id, int radius = 1);

struct OodParams {
    std::vector<std::string> kinds{"blur", "patch"};
    std::vector<double> sigmas{0.0, 1.0, 2.0, 4.0};
    double ratio = 0.1;
    std::string external_path;
    int n_samples = 10;
    std::uint64_t seed = 0;
};

struct OodEntry {
    std::string kind;
    double parameter = 0.0;  // sigma for blur, ratio for patch
    std::string region;      // "patch", "boundary_band" or "none"
    std::optional<RegionMeans> means;
    double mean_uncertainty = 0.0;
    std::string output_stem;  // relative to the output directory
};

struct OodReport {
    std::string case_id;
    std::vector<OodEntry> entries;

    [[nodiscard]] std::string to_json() const;
};

/// Perturbs the case, exports each uncertainty map under `out_dir` (skipped when empty) and scores
/// region_disagreement on the patch mask (patch) or the annotation boundary band (blur).
OodReport ood_battery(const VaeUnet& net, const SegmentationCase& c, const OodParams& params,
                      const std::string& out_dir);

struct ParameterRow {
    std::string module;
    std::size_t count = 0;
};

struct ParameterTable {
    std::vector<ParameterRow> rows;
    std::size_t total = 0;

    [[nodiscard]] std::string to_text() const;
};

/// k*k*c_in*c_out (+ c_out with bias).
std::size_t conv_parameter_count(int kernel, int c_in, int c_out, bool bias = true);

/// Trainable scalars per module (parameter name without the .weight/.bias suffix).
ParameterTable count_parameters(const ParameterStore& params);
ParameterTable count_parameters(const ModelConfig& cfg);

/// Per level: mean.png and log_var.png (channel averaged, min-max scaled) plus the full fields as .npy.
/// Returns the written image paths.
std::vector<std::string> export_latent_stats(const VaeUnet& net, const SegmentationCase& c, const std::string& out_dir);

}  // namespace vaeunet
