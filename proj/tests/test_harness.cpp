#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <set>
#include <string>

#include "support.hpp"
#include "vaeunet/checkpoint.hpp"
#include "vaeunet/harness.hpp"
#include "vaeunet/image_io.hpp"

namespace fs = std::filesystem;
using namespace vaeunet;
using testing::scratch_dir;

namespace {

std::vector<SegmentationCase> toy_cases(int count, std::uint64_t seed, double ambiguity = 0.5) {
    ToySpec spec = ToySpec::for_size(16);
    spec.seed = seed;
    spec.case_count = count;
    spec.ambiguity_rate = ambiguity;
    return make_toy_dataset(spec);
}

TrainConfig tiny_train_config(int epochs) {
    TrainConfig cfg;
    cfg.model = testing::tiny_config(2, 16);
    cfg.batch_size = 2;
    cfg.epochs = epochs;
    cfg.seed = 3;
    return cfg;
}

// Pins every log-variance head to a deep floor so that sampling is the prior up to ~1e-26.
VaeUnet floored_model() {
    ModelConfig cfg = testing::tiny_config(2, 16);
    cfg.log_var_min = -60.0;
    VaeUnet net(cfg, 5);
    for (auto& p : net.parameters().entries()) {
        if (p.name.find("log_var") != std::string::npos) {
            p.var.mutable_value().fill(p.name.ends_with(".bias") ? -1000.0 : 0.0);
        }
    }
    return net;
}

std::string read_text(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST_CASE("train config defaults follow the reference recipe") {
    const TrainConfig cfg;
    CHECK(cfg.batch_size == 24);
    CHECK(cfg.lr == 0.01);
    CHECK(cfg.momentum == 0.9);
    CHECK(cfg.weight_decay == 1e-4);
    CHECK(cfg.epochs == 150);
    CHECK(cfg.lr_decay == 1e-4);
    CHECK(cfg.loss.beta == 0.1);
    CHECK(cfg.model.input_size == Extent{224, 224});
    CHECK(cfg.model.output_size == Extent{512, 512});
}

TEST_CASE("train config text round trip and rejection of unknown keys") {
    TrainConfig cfg = tiny_train_config(7);
    cfg.loss.beta = 0.25;
    cfg.schedule = LrSchedule::inverse_time;
    const TrainConfig back = parse_train_config(cfg.to_text());
    CHECK(back.to_text() == cfg.to_text());
    CHECK(back.model == cfg.model);
    CHECK(back.loss.beta == 0.25);
    CHECK(back.epochs == 7);
    CHECK_THROWS_AS(parse_train_config("epochs = 3\nlearning_rat = 0.1\n"), std::invalid_argument);
    CHECK_THROWS(parse_train_config("epochs = -1\n"));
    CHECK_THROWS(parse_train_config("batch_size = 0\n"));
    CHECK_THROWS(parse_train_config("beta = -1\n"));
    const TrainConfig toy = read_train_config(std::string(VAEUNET_SOURCE_DIR) + "/configs/toy.cfg");
    CHECK(toy.epochs == 50);
    CHECK(toy.model.level_count == 3);
    CHECK(toy.model.input_size == Extent{32, 32});
}

TEST_CASE("learning rate schedules") {
    TrainConfig cfg;
    CHECK(learning_rate(cfg, 0, 100) == cfg.lr);
    double prev = cfg.lr;
    for (long s = 1; s <= 100; ++s) {
        const double lr = learning_rate(cfg, s, 100);
        REQUIRE(lr <= prev);
        REQUIRE(lr >= cfg.lr * cfg.lr_decay);
        prev = lr;
    }
    CHECK(learning_rate(cfg, 100, 100) == cfg.lr * cfg.lr_decay);
    CHECK(learning_rate(cfg, 50, 100) == doctest::Approx(cfg.lr * std::pow(0.5, 0.9)));
    cfg.schedule = LrSchedule::inverse_time;
    CHECK(learning_rate(cfg, 1000, 2000) == doctest::Approx(cfg.lr / (1.0 + cfg.lr_decay * 1000)));
    cfg.schedule = LrSchedule::constant;
    CHECK(learning_rate(cfg, 1000, 2000) == cfg.lr);
}

TEST_CASE("seed derivation and the validation split") {
    std::set<std::uint64_t> seen;
    for (std::uint64_t base : {0ull, 1ull, 7ull}) {
        for (std::uint64_t stream = 0; stream < 50; ++stream) {
            CHECK(seen.insert(derive_seed(base, stream)).second);
            CHECK(derive_seed(base, stream) == derive_seed(base, stream));
        }
    }
    const Split s = split_cases(64, 0.2);
    CHECK(s.train.size() == 51);
    CHECK(s.validation.size() == 13);
    CHECK(s.validation.front() == 51);
    CHECK(split_cases(4, 0.2).validation.size() == 1);
    CHECK(split_cases(2, 0.9).train.size() == 1);
    CHECK(split_cases(1, 0.2).validation.empty());
    CHECK(split_cases(10, 0.0).validation.empty());
}

TEST_CASE("one epoch on four cases writes a loadable checkpoint") {
    const auto dir = scratch_dir("smoke");
    const auto cases = toy_cases(4, 1);
    const TrainResult r = train_to_directory(tiny_train_config(1), cases, dir.string());
    CHECK(r.curve.size() == 1);
    CHECK(r.steps == 2);  // three training cases, batch 2
    for (const char* f : {"final.ckpt", "best.ckpt", "loss_curve.csv", "train.cfg"}) {
        CHECK_MESSAGE(fs::exists(dir / f), f);
    }
    const Checkpoint ck = load_checkpoint((dir / "final.ckpt").string());
    const VaeUnet net = restore(ck);
    CHECK(net.config() == tiny_train_config(1).model);
    const auto& a = net.parameters().entries();
    const auto& b = r.final_state.tensors;
    REQUIRE(a.size() == b.size());
    for (std::size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].name == b[i].first);
        CHECK(a[i].var.value() == b[i].second);
    }
    const std::string csv = read_text(dir / "loss_curve.csv");
    CHECK(std::count(csv.begin(), csv.end(), '\n') == 2);
}

TEST_CASE("training is reproducible under a seed") {
    const auto cases = toy_cases(4, 2);
    const TrainResult a = train(tiny_train_config(2), cases);
    const TrainResult b = train(tiny_train_config(2), cases);
    REQUIRE(a.curve.size() == b.curve.size());
    for (std::size_t i = 0; i < a.curve.size(); ++i) {
        CHECK(a.curve[i].loss == b.curve[i].loss);
    }
    for (std::size_t i = 0; i < a.final_state.tensors.size(); ++i) {
        CHECK(a.final_state.tensors[i].second == b.final_state.tensors[i].second);
    }
}

TEST_CASE("dropping the KL weight lowers the reconstruction loss") {
    const auto cases = toy_cases(10, 3, 1.0);
    TrainConfig with = tiny_train_config(15);
    with.loss.beta = 1.0;
    TrainConfig without = with;
    without.loss.beta = 0.0;
    auto recon = [](const TrainResult& r) {
        const EpochStats& s = r.curve.back();
        return 0.4 * s.cross_entropy + 0.6 * s.dice;
    };
    const TrainResult a = train(without, cases);
    const TrainResult b = train(with, cases);
    CHECK(recon(a) < recon(b));
    CHECK(b.curve.back().kl < a.curve.back().kl);
}

TEST_CASE("a non-finite loss aborts training with the step") {
    TrainConfig cfg = tiny_train_config(20);
    cfg.lr = 1e12;
    cfg.schedule = LrSchedule::constant;
    try {
        (void)train(cfg, toy_cases(4, 4));
        FAIL("expected divergence");
    } catch (const TrainingDiverged& e) {
        CHECK(e.step() >= 0);
        CHECK(std::string(e.what()).find("step") != std::string::npos);
    }
    CHECK_THROWS(train(tiny_train_config(1), {}));
}

TEST_CASE("prior evaluation is bit-reproducible and aggregates recompute") {
    const VaeUnet net(testing::tiny_config(2, 16), 6);
    const auto cases = toy_cases(5, 5);
    const EvalReport a = evaluate(net, cases, EvalMode::prior, 1, 0);
    const EvalReport b = evaluate(net, cases, EvalMode::prior, 1, 0);
    CHECK(a.to_json() == b.to_json());
    CHECK(a.records.size() == 5);
    for (const auto& r : a.records) {
        CHECK(r.sample_index == -1);
    }

    const EvalReport s = evaluate(net, cases, EvalMode::sample, 4, 9);
    CHECK(s.records.size() == 20);
    CHECK(s.distribution.size() == 5);
    REQUIRE(s.aggregates.size() == 1);
    const ClassAggregate& g = s.aggregates.front();
    double dice = 0.0;
    for (const auto& r : s.records) dice += r.dice;
    dice /= s.records.size();
    double dice_var = 0.0;
    for (const auto& r : s.records) dice_var += (r.dice - dice) * (r.dice - dice);
    dice_var /= s.records.size();
    std::vector<double> hd;
    for (const auto& r : s.records)
        if (r.hd) hd.push_back(*r.hd);
    const double hd_mean = hd.empty() ? 0.0 : std::accumulate(hd.begin(), hd.end(), 0.0) / hd.size();
    double ged = 0.0, ncc = 0.0;
    for (const auto& d : s.distribution) {
        ged += d.ged_squared;
        ncc += *d.ncc;
    }
    CHECK(std::abs(g.dice_mean - dice) <= 1e-12);
    CHECK(std::abs(g.dice_variance - dice_var) <= 1e-12);
    CHECK(g.hd_defined == hd.size());
    CHECK(g.hd_defined + g.hd_undefined == s.records.size());
    CHECK(std::abs(g.hd_mean - hd_mean) <= 1e-12);
    CHECK(std::abs(g.ged_squared_mean - ged / 5) <= 1e-12);
    CHECK(std::abs(*g.ncc_mean - ncc / 5) <= 1e-12);
    CHECK(evaluate(net, cases, EvalMode::sample, 4, 9).to_json() == s.to_json());
}

TEST_CASE("evaluation rejects labels the model cannot predict") {
    const VaeUnet net(testing::tiny_config(2, 16), 6);
    auto cases = toy_cases(3, 6);
    cases[2].annotations[0].labels[5] = 2;
    CHECK_THROWS(evaluate(net, cases, EvalMode::prior, 1, 0));
    CHECK_THROWS(evaluate(net, toy_cases(2, 6), EvalMode::sample, 0, 0));
}

TEST_CASE("a checkpoint round trip leaves evaluation unchanged") {
    const auto dir = scratch_dir("ckpt");
    const VaeUnet net(testing::tiny_config(2, 16), 7);
    const auto cases = toy_cases(3, 7);
    const std::string before = evaluate(net, cases, EvalMode::sample, 3, 11).to_json();
    save_checkpoint((dir / "m.ckpt").string(), snapshot(net, {{"note", "x"}}));
    const Checkpoint ck = load_checkpoint((dir / "m.ckpt").string());
    CHECK(ck.meta.at("note") == "x");
    CHECK(evaluate(restore(ck), cases, EvalMode::sample, 3, 11).to_json() == before);

    VaeUnet other(testing::tiny_config(3, 16), 1);
    CHECK_THROWS(load_weights(other, ck));
    std::ofstream(dir / "bad.ckpt") << "vaeunet-checkpoint 9\n";
    CHECK_THROWS(load_checkpoint((dir / "bad.ckpt").string()));
}

TEST_CASE("a floored-variance model samples its prior") {
    const VaeUnet net = floored_model();
    const auto cases = toy_cases(4, 8);
    const EvalReport prior = evaluate(net, cases, EvalMode::prior, 1, 0);
    const EvalReport sample = evaluate(net, cases, EvalMode::sample, 1, 3);
    REQUIRE(prior.records.size() == sample.records.size());
    for (std::size_t i = 0; i < prior.records.size(); ++i) {
        CHECK(prior.records[i].dice == sample.records[i].dice);
        CHECK(prior.records[i].hd == sample.records[i].hd);
        CHECK(prior.records[i].hd95 == sample.records[i].hd95);
    }
    CHECK(prior.aggregates.front().dice_mean == sample.aggregates.front().dice_mean);
}

TEST_CASE("uncertainty export of a floored model is all zero and reloads exactly") {
    const auto dir = scratch_dir("uncertainty");
    const VaeUnet net = floored_model();
    const auto c = toy_cases(1, 9).front();
    const UncertaintyMap m = export_uncertainty(net, c, 10, 4, (dir / "u").string());
    for (double v : m.values) {
        CHECK(v == 0.0);
    }
    CHECK(fs::exists(dir / "u.png"));
    const io::NpyArray back = io::read_npy((dir / "u.npy").string());
    CHECK(back.dims == std::vector<std::size_t>{16, 16});
    CHECK(back.values == m.values);

    const VaeUnet live(testing::tiny_config(2, 16), 10);
    const UncertaintyMap a = export_uncertainty(live, c, 20, 4, (dir / "a").string());
    CHECK(io::read_npy((dir / "a.npy").string()).values == a.values);
    CHECK(export_uncertainty(live, c, 20, 4, (dir / "b").string()).values == a.values);
    CHECK(read_text(dir / "a.png") == read_text(dir / "b.png"));
    CHECK_THROWS(export_uncertainty(live, c, 1, 4, (dir / "c").string()));
}

TEST_CASE("ood battery: zero blur matches the clean image") {
    const VaeUnet net(testing::tiny_config(2, 16), 12);
    const auto c = toy_cases(1, 10, 1.0).front();
    OodParams params;
    params.kinds = {"blur", "patch"};
    params.sigmas = {0.0, 1.0};
    params.seed = 5;
    const auto dir = scratch_dir("ood");
    const OodReport r = ood_battery(net, c, params, dir.string());
    REQUIRE(r.entries.size() == 3);
    const ModelPair clean = preprocess(c, {16, 16}, {16, 16});
    const UncertaintyMap m = uncertainty_map(net, clean.image, params.n_samples, params.seed);
    const RegionMeans means = region_disagreement(m, boundary_band(clean.labels, 1));
    const OodEntry& zero = r.entries[0];
    CHECK(zero.kind == "blur");
    CHECK(zero.parameter == 0.0);
    CHECK(zero.region == "boundary_band");
    CHECK(zero.means->inside == means.inside);
    CHECK(zero.means->outside == means.outside);
    CHECK(zero.mean_uncertainty == std::accumulate(m.values.begin(), m.values.end(), 0.0) / m.values.size());
    CHECK(io::read_npy((dir / (zero.output_stem + ".npy")).string()).values == m.values);
    CHECK(r.entries[2].kind == "patch");
    CHECK(r.entries[2].region == "patch");
    CHECK(r.to_json() == ood_battery(net, c, params, dir.string()).to_json());

    params.kinds = {"warp"};
    CHECK_THROWS(ood_battery(net, c, params, ""));
    params.kinds = {"external"};
    CHECK_THROWS(ood_battery(net, c, params, ""));
}

TEST_CASE("external OOD images go through the standard loader") {
    const auto dir = scratch_dir("external");
    const VaeUnet net(testing::tiny_config(2, 16), 13);
    const auto c = toy_cases(1, 11).front();
    io::Raster r{24, 24, 1, 8, std::vector<std::uint16_t>(24 * 24)};
    for (std::size_t i = 0; i < r.pixels.size(); ++i) r.pixels[i] = static_cast<std::uint16_t>((i * 37) % 256);
    io::write_png((dir / "ext.png").string(), r);
    OodParams params;
    params.kinds = {"external"};
    params.external_path = (dir / "ext.png").string();
    const OodReport rep = ood_battery(net, c, params, (dir / "out").string());
    REQUIRE(rep.entries.size() == 1);
    CHECK(rep.entries[0].region == "none");
    CHECK_FALSE(rep.entries[0].means.has_value());
    CHECK(fs::exists(dir / "out" / "external.png"));
}

TEST_CASE("boundary band") {
    LabelMap m(7, 7);
    for (int r = 2; r <= 4; ++r)
        for (int c = 2; c <= 4; ++c) m.at(r, c) = 1;
    const Mask thin = boundary_band({m}, 1, 0);
    CHECK(thin.count() == 8);
    CHECK_FALSE(thin.at(3, 3));
    const Mask band = boundary_band({m}, 1, 1);
    CHECK(band.count() == 25);
    CHECK_FALSE(band.at(0, 0));
}

TEST_CASE("parameter accounting") {
    CHECK(conv_parameter_count(3, 1, 8) == 3 * 3 * 1 * 8 + 8);
    CHECK(conv_parameter_count(1, 16, 2, false) == 32);
    const ModelConfig cfg = testing::tiny_config(3, 32);
    const VaeUnet net(cfg, 1);
    const ParameterTable t = count_parameters(net.parameters());
    CHECK(t.total == net.parameters().scalar_count());
    std::size_t sum = 0;
    for (const auto& row : t.rows) sum += row.count;
    CHECK(sum == t.total);
    CHECK(count_parameters(cfg).total == t.total);
    CHECK(count_parameters(cfg).to_text() == t.to_text());
    const auto it = std::find_if(t.rows.begin(), t.rows.end(), [](const ParameterRow& r) { return r.module == "output"; });
    REQUIRE(it != t.rows.end());
    CHECK(it->count == conv_parameter_count(1, cfg.encoder_channels[0], 2));
}

TEST_CASE("latent statistics export") {
    const auto dir = scratch_dir("latents");
    ModelConfig cfg = testing::tiny_config(3, 16);
    VaeUnet net(cfg, 14);
    const auto c = toy_cases(1, 12).front();
    const auto images = export_latent_stats(net, c, dir.string());
    CHECK(images.size() == 6);
    for (const auto& p : images) {
        CHECK(fs::exists(p));
        CHECK(fs::path(p).extension() == ".png");
    }
    const ModelPair pair = preprocess(c, cfg.input_size, cfg.output_size);
    const ForwardTrace t = net.forward_prior(pair.image);
    for (int i = 0; i < 3; ++i) {
        const auto mean = io::read_npy((dir / ("level_" + std::to_string(i) + "_mean.npy")).string());
        const auto lv = io::read_npy((dir / ("level_" + std::to_string(i) + "_log_var.npy")).string());
        CHECK(mean.values == t.q_levels[i].mean.value().vec());
        CHECK(lv.values == t.q_levels[i].log_var.value().vec());
        CHECK(mean.dims == std::vector<std::size_t>{2, static_cast<std::size_t>(16 >> i),
                                                    static_cast<std::size_t>(16 >> i)});
    }

    for (auto& p : net.parameters().entries()) {
        if (p.name.starts_with("q_head.")) p.var.mutable_value().fill(0.0);
    }
    const auto zdir = scratch_dir("latents_zero");
    (void)export_latent_stats(net, c, zdir.string());
    for (int i = 0; i < 3; ++i) {
        for (double v : io::read_npy((zdir / ("level_" + std::to_string(i) + "_mean.npy")).string()).values) {
            REQUIRE(v == 0.0);
        }
    }
}
