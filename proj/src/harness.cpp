#include "vaeunet/harness.hpp"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <numeric>
#include <set>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "vaeunet/autograd.hpp"
#include "vaeunet/image_io.hpp"
#include "vaeunet/key_value.hpp"

namespace fs = std::filesystem;

namespace vaeunet {

namespace {

const char* schedule_name(LrSchedule s) {
    switch (s) {
        case LrSchedule::poly: return "poly";
        case LrSchedule::inverse_time: return "inverse_time";
        case LrSchedule::constant: return "constant";
    }
    return "poly";
}

LrSchedule parse_schedule(const std::string& v) {
    if (v == "poly") return LrSchedule::poly;
    if (v == "inverse_time") return LrSchedule::inverse_time;
    if (v == "constant") return LrSchedule::constant;
    throw std::invalid_argument("schedule: unknown value '" + v + "' (poly | inverse_time | constant)");
}

std::vector<int> foreground_classes(int class_count) {
    std::vector<int> out(class_count - 1);
    std::iota(out.begin(), out.end(), 1);
    return out;
}

void check_compatible(const VaeUnet& net, const std::vector<SegmentationCase>& cases) {
    const auto& cfg = net.config();
    for (const auto& c : cases) {
        validate_case(c, cfg.class_count);
        if (c.image.shape().c != cfg.input_channels) {
            throw CaseError(c.case_id, "image has " + std::to_string(c.image.shape().c) + " channels, model expects " +
                                           std::to_string(cfg.input_channels));
        }
    }
}

PixelSpacing output_spacing(const SegmentationCase& c, Extent out) {
    const PixelSpacing base = c.spacing.value_or(PixelSpacing{});
    return {base.row * c.height() / out.h, base.col * c.width() / out.w};
}

std::pair<double, double> mean_and_variance(const std::vector<double>& v) {
    if (v.empty()) {
        return {0.0, 0.0};
    }
    double mean = 0.0;
    for (double x : v) {
        mean += x;
    }
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) {
        var += (x - mean) * (x - mean);
    }
    return {mean, var / static_cast<double>(v.size())};
}

double mean_pairwise_iou_distance(const SampleSet& set, int class_id) {
    double total = 0.0;
    for (const auto& a : set.samples) {
        for (const auto& b : set.samples) {
            total += iou_distance(a, b, class_id);
        }
    }
    return total / static_cast<double>(set.size() * set.size());
}

nlohmann::json optional_json(const std::optional<double>& v) {
    return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

io::Raster gray_raster(const std::vector<double>& values, int h, int w) {
    const auto [lo_it, hi_it] = std::minmax_element(values.begin(), values.end());
    const double lo = *lo_it;
    const double span = *hi_it - lo;
    io::Raster r{h, w, 1, 8, std::vector<std::uint16_t>(values.size())};
    for (std::size_t i = 0; i < values.size(); ++i) {
        const double t = span > 0.0 ? (values[i] - lo) / span : 0.0;
        r.pixels[i] = static_cast<std::uint16_t>(std::lround(255.0 * t));
    }
    return r;
}

}  // namespace

void TrainConfig::validate() const {
    if (batch_size < 1 || epochs < 1) {
        throw std::invalid_argument("batch_size and epochs must be >= 1");
    }
    if (!(lr > 0.0) || !(momentum >= 0.0 && momentum < 1.0) || !(weight_decay >= 0.0)) {
        throw std::invalid_argument("lr must be > 0, momentum in [0, 1), weight_decay >= 0");
    }
    if (!(lr_decay > 0.0) || !(lr_power > 0.0)) {
        throw std::invalid_argument("lr_decay and lr_power must be > 0");
    }
    if (!(validation_fraction >= 0.0 && validation_fraction < 1.0)) {
        throw std::invalid_argument("validation_fraction must lie in [0, 1)");
    }
    loss.validate();
    model.validate();
}

std::string TrainConfig::to_text() const {
    std::ostringstream os;
    os << "batch_size = " << batch_size << '\n'
       << "lr = " << kv::format_double(lr) << '\n'
       << "momentum = " << kv::format_double(momentum) << '\n'
       << "weight_decay = " << kv::format_double(weight_decay) << '\n'
       << "epochs = " << epochs << '\n'
       << "lr_decay = " << kv::format_double(lr_decay) << '\n'
       << "lr_power = " << kv::format_double(lr_power) << '\n'
       << "schedule = " << schedule_name(schedule) << '\n'
       << "beta = " << kv::format_double(loss.beta) << '\n'
       << "ce_weight = " << kv::format_double(loss.ce_weight) << '\n'
       << "dice_weight = " << kv::format_double(loss.dice_weight) << '\n'
       << "seed = " << seed << '\n'
       << "layout = " << (layout == Layout::multi_class ? "multi_class" : "multi_annotator") << '\n'
       << "fixed_annotator = " << fixed_annotator << '\n'
       << "validation_fraction = " << kv::format_double(validation_fraction) << '\n'
       << model.to_text();
    return os.str();
}

TrainConfig parse_train_config(const std::string& text) {
    static const std::set<std::string> model_keys{"level_count", "encoder_channels", "latent_channels",
                                                  "class_count", "input_channels",   "input_size",
                                                  "output_size", "log_var_min",      "log_var_max"};
    TrainConfig cfg;
    const auto pairs = kv::parse(text);
    for (const auto& [k, v] : pairs) {
        if (k == "batch_size") cfg.batch_size = kv::to_int(k, v);
        else if (k == "lr") cfg.lr = kv::to_double(k, v);
        else if (k == "momentum") cfg.momentum = kv::to_double(k, v);
        else if (k == "weight_decay") cfg.weight_decay = kv::to_double(k, v);
        else if (k == "epochs") cfg.epochs = kv::to_int(k, v);
        else if (k == "lr_decay") cfg.lr_decay = kv::to_double(k, v);
        else if (k == "lr_power") cfg.lr_power = kv::to_double(k, v);
        else if (k == "schedule") cfg.schedule = parse_schedule(v);
        else if (k == "beta") cfg.loss.beta = kv::to_double(k, v);
        else if (k == "ce_weight") cfg.loss.ce_weight = kv::to_double(k, v);
        else if (k == "dice_weight") cfg.loss.dice_weight = kv::to_double(k, v);
        else if (k == "seed") cfg.seed = static_cast<std::uint64_t>(kv::to_int(k, v));
        else if (k == "layout") cfg.layout = parse_layout(v);
        else if (k == "fixed_annotator") cfg.fixed_annotator = kv::to_int(k, v);
        else if (k == "validation_fraction") cfg.validation_fraction = kv::to_double(k, v);
        else if (!model_keys.contains(k)) throw std::invalid_argument("unknown config key '" + k + "'");
    }
    apply_model_keys(cfg.model, pairs);
    cfg.validate();
    return cfg;
}

TrainConfig read_train_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open config " + path);
    }
    std::stringstream ss;
    ss << in.rdbuf();
    return parse_train_config(ss.str());
}

double learning_rate(const TrainConfig& cfg, long step, long total_steps) {
    switch (cfg.schedule) {
        case LrSchedule::constant: return cfg.lr;
        case LrSchedule::inverse_time: return cfg.lr / (1.0 + cfg.lr_decay * static_cast<double>(step));
        case LrSchedule::poly: {
            const double progress = total_steps > 0 ? static_cast<double>(step) / static_cast<double>(total_steps) : 0.0;
            const double factor = std::pow(std::max(0.0, 1.0 - progress), cfg.lr_power);
            return cfg.lr * std::max(factor, cfg.lr_decay);
        }
    }
    return cfg.lr;
}

std::uint64_t derive_seed(std::uint64_t base, std::uint64_t stream) {
    std::uint64_t z = base + 0x9e3779b97f4a7c15ULL * (stream + 1);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

Split split_cases(std::size_t count, double validation_fraction) {
    Split s;
    std::size_t n_val = static_cast<std::size_t>(std::lround(validation_fraction * static_cast<double>(count)));
    if (validation_fraction > 0.0 && count >= 2) {
        n_val = std::clamp<std::size_t>(n_val, 1, count - 1);
    } else {
        n_val = 0;
    }
    for (std::size_t i = 0; i < count; ++i) {
        (i < count - n_val ? s.train : s.validation).push_back(i);
    }
    return s;
}

TrainingDiverged::TrainingDiverged(long step, double loss)
    : std::runtime_error("training diverged at step " + std::to_string(step) + ": loss = " + std::to_string(loss)),
      step_(step) {}

double mean_prior_dice(const VaeUnet& net, const std::vector<SegmentationCase>& cases) {
    const auto& cfg = net.config();
    double total = 0.0;
    std::size_t count = 0;
    for (const auto& c : cases) {
        const ModelPair p = preprocess(c, cfg.input_size, cfg.output_size);
        const LabelMap pred = net.predict_prior(p.image);
        const LabelMap& truth = p.reference ? *p.reference : p.labels.front();
        for (int k : foreground_classes(cfg.class_count)) {
            total += dice_coefficient(pred, truth, k);
            ++count;
        }
    }
    return count ? total / static_cast<double>(count) : 0.0;
}

TrainResult train(const TrainConfig& cfg, const std::vector<SegmentationCase>& cases, const EpochCallback& on_epoch) {
    cfg.validate();
    if (cases.empty()) {
        throw std::invalid_argument("train: dataset is empty");
    }
    VaeUnet net(cfg.model, derive_seed(cfg.seed, 0));
    check_compatible(net, cases);

    const Split split = split_cases(cases.size(), cfg.validation_fraction);
    std::vector<SegmentationCase> validation;
    for (std::size_t i : split.validation) {
        validation.push_back(cases[i]);
    }
    if (validation.empty()) {
        validation = cases;
    }
    std::vector<ModelPair> pairs;
    for (std::size_t i : split.train) {
        pairs.push_back(preprocess(cases[i], cfg.model.input_size, cfg.model.output_size));
    }

    std::mt19937_64 rng(derive_seed(cfg.seed, 1));
    GaussianNoise noise(derive_seed(cfg.seed, 2));
    auto& entries = net.parameters().entries();
    std::vector<Tensor> velocity;
    for (const auto& e : entries) {
        velocity.emplace_back(e.var.shape(), 0.0);
    }

    const long steps_per_epoch = static_cast<long>((pairs.size() + cfg.batch_size - 1) / cfg.batch_size);
    const long total_steps = steps_per_epoch * cfg.epochs;
    TrainResult result;
    result.best_validation_dice = -1.0;
    std::vector<std::size_t> order(pairs.size());
    std::iota(order.begin(), order.end(), 0);
    long step = 0;

    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::shuffle(order.begin(), order.end(), rng);
        EpochStats stats;
        stats.epoch = epoch;
        stats.lr = learning_rate(cfg, step, total_steps);
        double weight = 0.0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(cfg.batch_size));
            std::vector<Tensor> images;
            std::vector<LabelMap> labels;
            for (std::size_t b = start; b < end; ++b) {
                const ModelPair& p = pairs[order[b]];
                images.push_back(p.image);
                std::size_t k = 0;
                if (cfg.fixed_annotator >= 0) {
                    k = std::min<std::size_t>(cfg.fixed_annotator, p.labels.size() - 1);
                } else if (p.labels.size() > 1) {
                    k = std::uniform_int_distribution<std::size_t>(0, p.labels.size() - 1)(rng);
                }
                labels.push_back(p.labels[k]);
            }
            const Tensor x = stack_batch(images);
            const Tensor y = one_hot_batch(labels, cfg.model.class_count);
            const double lr = learning_rate(cfg, step, total_steps);

            LossBreakdown loss;
            {
                const ForwardTrace trace = net.forward_train(x, y, noise);
                if (!trace.logits.value().all_finite()) {
                    throw TrainingDiverged(step, std::numeric_limits<double>::quiet_NaN());
                }
                loss = elbo_loss(trace, y, cfg.loss);
                if (!std::isfinite(loss.total)) {
                    throw TrainingDiverged(step, loss.total);
                }
                net.parameters().zero_grad();
                ag::backward(loss.total_term);
            }
            for (std::size_t i = 0; i < entries.size(); ++i) {
                Tensor& w = entries[i].var.mutable_value();
                const Tensor& g = entries[i].var.node()->grad;
                Tensor& v = velocity[i];
                for (std::size_t j = 0; j < w.size(); ++j) {
                    const double grad = (g.empty() ? 0.0 : g[j]) + cfg.weight_decay * w[j];
                    v[j] = cfg.momentum * v[j] + grad;
                    w[j] -= lr * v[j];
                }
            }
            net.parameters().zero_grad();
            loss.total_term = ag::Var();

            const double nb = static_cast<double>(end - start);
            stats.loss += nb * loss.total;
            stats.cross_entropy += nb * loss.cross_entropy;
            stats.dice += nb * loss.dice;
            stats.kl += nb * loss.kl;
            weight += nb;
            ++step;
        }
        stats.loss /= weight;
        stats.cross_entropy /= weight;
        stats.dice /= weight;
        stats.kl /= weight;
        stats.validation_dice = mean_prior_dice(net, validation);
        if (stats.validation_dice > result.best_validation_dice) {
            result.best_validation_dice = stats.validation_dice;
            result.best_epoch = epoch;
            result.best_state = snapshot(net, {{"epoch", std::to_string(epoch)},
                                               {"validation_dice", kv::format_double(stats.validation_dice)}});
        }
        result.curve.push_back(stats);
        if (on_epoch) {
            on_epoch(stats);
        }
    }
    result.steps = step;
    result.final_state = snapshot(net, {{"epoch", std::to_string(cfg.epochs)},
                                        {"validation_dice", kv::format_double(result.curve.back().validation_dice)}});
    return result;
}

TrainResult train_to_directory(const TrainConfig& cfg, const std::vector<SegmentationCase>& cases,
                               const std::string& out_dir, const EpochCallback& on_epoch) {
    fs::create_directories(out_dir);
    TrainResult r = train(cfg, cases, on_epoch);
    save_checkpoint((fs::path(out_dir) / "final.ckpt").string(), r.final_state);
    save_checkpoint((fs::path(out_dir) / "best.ckpt").string(), r.best_state);
    std::ofstream curve(fs::path(out_dir) / "loss_curve.csv");
    curve << "epoch,lr,loss,cross_entropy,dice,kl,validation_dice\n";
    for (const auto& s : r.curve) {
        curve << s.epoch << ',' << kv::format_double(s.lr) << ',' << kv::format_double(s.loss) << ','
              << kv::format_double(s.cross_entropy) << ',' << kv::format_double(s.dice) << ','
              << kv::format_double(s.kl) << ',' << kv::format_double(s.validation_dice) << '\n';
    }
    std::ofstream(fs::path(out_dir) / "train.cfg") << cfg.to_text();
    return r;
}

std::vector<ClassAggregate> aggregate(const std::vector<MetricRecord>& records,
                                      const std::vector<DistributionRecord>& distribution, int class_count) {
    std::vector<ClassAggregate> out;
    for (int k : foreground_classes(class_count)) {
        ClassAggregate a;
        a.class_id = k;
        std::vector<double> dice;
        std::vector<double> hd;
        std::vector<double> hd95;
        for (const auto& r : records) {
            if (r.class_id != k) {
                continue;
            }
            dice.push_back(r.dice);
            if (r.hd) {
                hd.push_back(*r.hd);
                hd95.push_back(*r.hd95);
            } else {
                ++a.hd_undefined;
            }
        }
        a.hd_defined = hd.size();
        std::tie(a.dice_mean, a.dice_variance) = mean_and_variance(dice);
        std::tie(a.hd_mean, a.hd_variance) = mean_and_variance(hd);
        a.hd95_mean = mean_and_variance(hd95).first;
        std::vector<double> ged;
        std::vector<double> diversity;
        std::vector<double> ncc;
        for (const auto& d : distribution) {
            if (d.class_id != k) {
                continue;
            }
            ged.push_back(d.ged_squared);
            diversity.push_back(d.sample_diversity);
            if (d.ncc) {
                ncc.push_back(*d.ncc);
            }
        }
        a.ged_squared_mean = mean_and_variance(ged).first;
        a.sample_diversity_mean = mean_and_variance(diversity).first;
        if (!ncc.empty()) {
            a.ncc_mean = mean_and_variance(ncc).first;
        }
        out.push_back(a);
    }
    return out;
}

EvalReport evaluate(const VaeUnet& net, const std::vector<SegmentationCase>& cases, EvalMode mode, int n_samples,
                    std::uint64_t seed) {
    check_compatible(net, cases);
    if (mode == EvalMode::sample && n_samples < 1) {
        throw std::invalid_argument("evaluate: sample mode needs n_samples >= 1");
    }
    const auto& cfg = net.config();
    EvalReport report;
    report.mode = mode;
    report.n_samples = mode == EvalMode::prior ? 1 : n_samples;
    report.seed = seed;
    for (std::size_t ci = 0; ci < cases.size(); ++ci) {
        const auto& c = cases[ci];
        const ModelPair p = preprocess(c, cfg.input_size, cfg.output_size);
        SampleSet preds;
        if (mode == EvalMode::prior) {
            preds.samples.push_back(net.predict_prior(p.image));
        } else {
            preds = net.predict_samples(p.image, n_samples, derive_seed(seed, ci));
        }
        const LabelMap& truth = p.reference ? *p.reference : p.labels.front();
        const PixelSpacing spacing = output_spacing(c, cfg.output_size);
        const SampleSet annotations{p.labels};
        for (int k : foreground_classes(cfg.class_count)) {
            for (std::size_t s = 0; s < preds.size(); ++s) {
                MetricRecord r;
                r.case_id = c.case_id;
                r.class_id = k;
                r.sample_index = mode == EvalMode::prior ? -1 : static_cast<int>(s);
                r.dice = dice_coefficient(preds.samples[s], truth, k);
                r.hd = hausdorff_distance(preds.samples[s], truth, k, 100.0, spacing);
                r.hd95 = hausdorff_distance(preds.samples[s], truth, k, 95.0, spacing);
                report.records.push_back(std::move(r));
            }
            DistributionRecord d;
            d.case_id = c.case_id;
            d.class_id = k;
            d.ged_squared = ged_squared(preds, annotations, k);
            d.sample_diversity = mean_pairwise_iou_distance(preds, k);
            if (preds.size() >= 2) {
                d.ncc = ncc_score(preds, annotations, k);
            }
            report.distribution.push_back(std::move(d));
        }
    }
    report.aggregates = aggregate(report.records, report.distribution, cfg.class_count);
    return report;
}

std::string EvalReport::to_json() const {
    nlohmann::json j;
    j["mode"] = mode == EvalMode::prior ? "prior" : "sample";
    j["n_samples"] = n_samples;
    j["seed"] = seed;
    j["records"] = nlohmann::json::array();
    for (const auto& r : records) {
        j["records"].push_back({{"case_id", r.case_id},
                                {"class_id", r.class_id},
                                {"sample_index", r.sample_index},
                                {"dice", r.dice},
                                {"hd", optional_json(r.hd)},
                                {"hd95", optional_json(r.hd95)}});
    }
    j["distribution"] = nlohmann::json::array();
    for (const auto& d : distribution) {
        j["distribution"].push_back({{"case_id", d.case_id},
                                     {"class_id", d.class_id},
                                     {"ged_squared", d.ged_squared},
                                     {"sample_diversity", d.sample_diversity},
                                     {"ncc", optional_json(d.ncc)}});
    }
    j["aggregates"] = nlohmann::json::array();
    for (const auto& a : aggregates) {
        j["aggregates"].push_back({{"class_id", a.class_id},
                                   {"dice_mean", a.dice_mean},
                                   {"dice_variance", a.dice_variance},
                                   {"hd_mean", a.hd_mean},
                                   {"hd_variance", a.hd_variance},
                                   {"hd95_mean", a.hd95_mean},
                                   {"hd_defined", a.hd_defined},
                                   {"hd_undefined", a.hd_undefined},
                                   {"ged_squared_mean", a.ged_squared_mean},
                                   {"sample_diversity_mean", a.sample_diversity_mean},
                                   {"ncc_mean", optional_json(a.ncc_mean)}});
    }
    return j.dump(2);
}

UncertaintyMap uncertainty_map(const VaeUnet& net, const Tensor& image, int n_samples, std::uint64_t seed) {
    if (n_samples < 2) {
        throw std::invalid_argument("uncertainty maps need n_samples >= 2, got " + std::to_string(n_samples));
    }
    return variance_map(net.predict_samples(image, n_samples, seed), net.config().class_count);
}

void write_heatmap_png(const std::string& path, const UncertaintyMap& map) {
    io::Raster r{map.height, map.width, 3, 8, std::vector<std::uint16_t>(map.values.size() * 3)};
    for (std::size_t i = 0; i < map.values.size(); ++i) {
        const auto rgb = io::magma(map.values[i]);
        for (int k = 0; k < 3; ++k) {
            r.pixels[3 * i + k] = rgb[k];
        }
    }
    io::write_png(path, r);
}

UncertaintyMap export_uncertainty(const VaeUnet& net, const SegmentationCase& c, int n_samples, std::uint64_t seed,
                                  const std::string& out_stem) {
    const auto& cfg = net.config();
    const ModelPair p = preprocess(c, cfg.input_size, cfg.output_size);
    UncertaintyMap map = uncertainty_map(net, p.image, n_samples, seed);
    const fs::path parent = fs::path(out_stem).parent_path();
    if (!parent.empty()) {
        fs::create_directories(parent);
    }
    io::write_npy(out_stem + ".npy", map.values,
                  {static_cast<std::size_t>(map.height), static_cast<std::size_t>(map.width)});
    write_heatmap_png(out_stem + ".png", map);
    return map;
}

Mask boundary_band(const std::vector<LabelMap>& annotations, int class_id, int radius) {
    if (annotations.empty()) {
        throw std::invalid_argument("boundary_band: no annotations");
    }
    const int h = annotations.front().height;
    const int w = annotations.front().width;
    Mask band(h, w);
    for (const auto& a : annotations) {
        for (const auto& [r, c] : boundary_pixels(class_mask(a, class_id))) {
            for (int dr = -radius; dr <= radius; ++dr) {
                for (int dc = -radius; dc <= radius; ++dc) {
                    const int rr = r + dr;
                    const int cc = c + dc;
                    if (rr >= 0 && rr < h && cc >= 0 && cc < w) {
                        band.set(rr, cc);
                    }
                }
            }
        }
    }
    return band;
}

OodReport ood_battery(const VaeUnet& net, const SegmentationCase& c, const OodParams& params,
                      const std::string& out_dir) {
    const auto& cfg = net.config();
    OodReport report;
    report.case_id = c.case_id;
    if (!out_dir.empty()) {
        fs::create_directories(out_dir);
    }
    auto score = [&](const std::string& kind, double parameter, const Tensor& image, const std::optional<Mask>& region,
                     const std::string& region_name, const std::string& stem) {
        OodEntry e;
        e.kind = kind;
        e.parameter = parameter;
        e.region = region_name;
        const UncertaintyMap map = uncertainty_map(net, image, params.n_samples, params.seed);
        e.mean_uncertainty = std::accumulate(map.values.begin(), map.values.end(), 0.0) /
                             static_cast<double>(map.values.size());
        if (region && region->count() > 0 && region->count() < region->values.size()) {
            e.means = region_disagreement(map, *region);
        }
        if (!out_dir.empty()) {
            e.output_stem = stem;
            const std::string path = (fs::path(out_dir) / stem).string();
            io::write_npy(path + ".npy", map.values,
                          {static_cast<std::size_t>(map.height), static_cast<std::size_t>(map.width)});
            write_heatmap_png(path + ".png", map);
        }
        report.entries.push_back(std::move(e));
    };

    const ModelPair clean = preprocess(c, cfg.input_size, cfg.output_size);
    for (const auto& kind : params.kinds) {
        if (kind == "blur") {
            const Mask band = boundary_band(clean.labels, 1);
            for (double sigma : params.sigmas) {
                SegmentationCase blurred = c;
                blurred.image = gaussian_blur(c.image, sigma);
                const ModelPair p = preprocess(blurred, cfg.input_size, cfg.output_size);
                score("blur", sigma, p.image, band, "boundary_band", "blur_sigma_" + kv::format_double(sigma));
            }
        } else if (kind == "patch") {
            std::mt19937_64 rng(params.seed);
            auto [image, mask] = random_patch(c.image, params.ratio, rng);
            SegmentationCase patched = c;
            patched.image = std::move(image);
            const ModelPair p = preprocess(patched, cfg.input_size, cfg.output_size);
            Mask region = mask;
            if (mask.height != cfg.output_size.h || mask.width != cfg.output_size.w) {
                LabelMap as_labels(mask.height, mask.width);
                std::copy(mask.values.begin(), mask.values.end(), as_labels.labels.begin());
                region = class_mask(resize_nearest(as_labels, cfg.output_size), 1);
            }
            score("patch", params.ratio, p.image, region, "patch", "patch_ratio_" + kv::format_double(params.ratio));
        } else if (kind == "external") {
            if (params.external_path.empty()) {
                throw std::invalid_argument("ood external kind needs an image path");
            }
            SegmentationCase ext;
            ext.case_id = "external";
            const fs::path path(params.external_path);
            ext.image = path.extension() == ".png" ? io::png_to_tensor(io::read_png(path.string()))
                                                   : io::read_nifti(path.string());
            if (ext.image.shape().c != cfg.input_channels) {
                throw std::invalid_argument("external image has " + std::to_string(ext.image.shape().c) +
                                            " channels, model expects " + std::to_string(cfg.input_channels));
            }
            ext.annotations.emplace_back(ext.height(), ext.width());
            const ModelPair p = preprocess(ext, cfg.input_size, cfg.output_size);
            score("external", 0.0, p.image, std::nullopt, "none", "external");
        } else {
            throw std::invalid_argument("unknown OOD kind '" + kind + "' (blur | patch | external)");
        }
    }
    return report;
}

std::string OodReport::to_json() const {
    nlohmann::json j;
    j["case_id"] = case_id;
    j["entries"] = nlohmann::json::array();
    for (const auto& e : entries) {
        nlohmann::json row{{"kind", e.kind},
                           {"parameter", e.parameter},
                           {"region", e.region},
                           {"mean_uncertainty", e.mean_uncertainty},
                           {"output_stem", e.output_stem}};
        row["inside_mean"] = e.means ? nlohmann::json(e.means->inside) : nlohmann::json(nullptr);
        row["outside_mean"] = e.means ? nlohmann::json(e.means->outside) : nlohmann::json(nullptr);
        j["entries"].push_back(row);
    }
    return j.dump(2);
}

std::size_t conv_parameter_count(int kernel, int c_in, int c_out, bool bias) {
    const std::size_t weights = static_cast<std::size_t>(kernel) * kernel * c_in * c_out;
    return weights + (bias ? static_cast<std::size_t>(c_out) : 0);
}

ParameterTable count_parameters(const ParameterStore& params) {
    ParameterTable t;
    for (const auto& e : params.entries()) {
        std::string module = e.name;
        for (const char* suffix : {".weight", ".bias"}) {
            const std::string s(suffix);
            if (module.size() > s.size() && module.compare(module.size() - s.size(), s.size(), s) == 0) {
                module.resize(module.size() - s.size());
                break;
            }
        }
        const std::size_t n = e.var.value().size();
        if (t.rows.empty() || t.rows.back().module != module) {
            t.rows.push_back({module, 0});
        }
        t.rows.back().count += n;
        t.total += n;
    }
    return t;
}

ParameterTable count_parameters(const ModelConfig& cfg) {
    return count_parameters(VaeUnet(cfg).parameters());
}

std::string ParameterTable::to_text() const {
    std::size_t width = 5;
    for (const auto& r : rows) {
        width = std::max(width, r.module.size());
    }
    std::ostringstream os;
    for (const auto& r : rows) {
        os << std::left << std::setw(static_cast<int>(width)) << r.module << "  " << std::right << std::setw(12)
           << r.count << '\n';
    }
    os << std::left << std::setw(static_cast<int>(width)) << "total" << "  " << std::right << std::setw(12) << total
       << '\n';
    return os.str();
}

std::vector<std::string> export_latent_stats(const VaeUnet& net, const SegmentationCase& c, const std::string& out_dir) {
    const auto& cfg = net.config();
    const ModelPair p = preprocess(c, cfg.input_size, cfg.output_size);
    ForwardTrace trace;
    {
        ag::NoGradGuard no_grad;
        trace = net.forward_prior(p.image);
    }
    fs::create_directories(out_dir);
    std::vector<std::string> images;
    for (std::size_t i = 0; i < trace.q_levels.size(); ++i) {
        const auto& field = trace.q_levels[i];
        for (const auto& [name, var] : {std::pair{"mean", field.mean}, std::pair{"log_var", field.log_var}}) {
            const Tensor& t = var.value();
            const Shape s = t.shape();
            const std::string stem = (fs::path(out_dir) / ("level_" + std::to_string(i) + "_" + name)).string();
            io::write_npy(stem + ".npy", t.vec(),
                          {static_cast<std::size_t>(s.c), static_cast<std::size_t>(s.h), static_cast<std::size_t>(s.w)});
            std::vector<double> avg(s.plane(), 0.0);
            for (int ch = 0; ch < s.c; ++ch) {
                for (std::size_t k = 0; k < s.plane(); ++k) {
                    avg[k] += t[ch * s.plane() + k] / s.c;
                }
            }
            io::write_png(stem + ".png", gray_raster(avg, s.h, s.w));
            images.push_back(stem + ".png");
        }
    }
    return images;
}

}  // namespace vaeunet
