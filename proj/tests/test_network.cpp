#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <random>
#include <set>
#include <string>

#include "support.hpp"
#include "vaeunet/losses.hpp"
#include "vaeunet/network.hpp"

using namespace vaeunet;
using testing::random_tensor;
using testing::tiny_config;

namespace {

Tensor random_image(std::mt19937_64& rng, const ModelConfig& cfg, int batch = 1) {
    return random_tensor(rng, Shape{batch, cfg.input_channels, cfg.input_size.h, cfg.input_size.w});
}

Tensor random_onehot(std::mt19937_64& rng, const ModelConfig& cfg, int batch = 1) {
    std::vector<LabelMap> maps;
    for (int b = 0; b < batch; ++b) {
        maps.push_back(testing::random_labels(rng, cfg.output_size.h, cfg.output_size.w, cfg.class_count));
    }
    return one_hot_batch(maps, cfg.class_count);
}

void zero_heads(VaeUnet& net) {
    for (auto& p : net.parameters().entries()) {
        if (p.name.starts_with("q_head.") || p.name.starts_with("p_head.")) {
            p.var.mutable_value().fill(0.0);
        }
    }
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
    double d = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        d = std::max(d, std::abs(a[i] - b[i]));
    }
    return d;
}

}  // namespace

TEST_CASE("ModelConfig invariants") {
    ModelConfig cfg = tiny_config(3, 32);
    CHECK_NOTHROW(cfg.validate());
    ModelConfig bad = cfg;
    bad.level_count = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.encoder_channels.pop_back();
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.latent_channels = 0;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.class_count = 1;
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.input_size = {30, 32};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    bad = cfg;
    bad.output_size = {32, 34};
    CHECK_THROWS_AS(bad.validate(), std::invalid_argument);
    CHECK(parse_model_config(cfg.to_text()) == cfg);
}

TEST_CASE("encode_image halves the resolution per level") {
    ModelConfig cfg = tiny_config(3, 32);
    VaeUnet net(cfg, 1);
    std::mt19937_64 rng(2);
    const Tensor x = random_image(rng, cfg);
    const SkipFeatures f = net.encode_image(x);
    REQUIRE(f.size() == 3);
    for (int i = 0; i < 3; ++i) {
        CHECK(f.levels[i].shape() == Shape{1, cfg.encoder_channels[i], 32 >> i, 32 >> i});
    }
    const SkipFeatures again = net.encode_image(x);
    for (int i = 0; i < 3; ++i) {
        CHECK(again.levels[i].value() == f.levels[i].value());
    }
}

TEST_CASE("encode_image rejects the wrong input size") {
    ModelConfig cfg = tiny_config(2, 16);
    VaeUnet net(cfg, 1);
    try {
        (void)net.encode_image(Tensor(Shape{1, 1, 16, 8}));
        FAIL("expected a ShapeError");
    } catch (const ShapeError& e) {
        const std::string msg = e.what();
        CHECK(msg.find("16") != std::string::npos);
        CHECK(msg.find("8") != std::string::npos);
    }
    CHECK_THROWS_AS((void)net.encode_image(Tensor(Shape{1, 2, 16, 16})), ShapeError);
}

TEST_CASE("latent_head shape contract and ancestor rules") {
    ModelConfig cfg = tiny_config(3, 32);
    VaeUnet net(cfg, 1);
    std::mt19937_64 rng(3);
    const SkipFeatures f = net.encode_image(random_image(rng, cfg));
    const auto g0 = net.latent_head(Branch::image, 0, f.levels[0], std::nullopt);
    CHECK(g0.shape() == Shape{1, 2, 32, 32});
    const auto g1 = net.latent_head(Branch::image, 1, f.levels[1], g0.mean);
    CHECK(g1.shape() == Shape{1, 2, 16, 16});
    CHECK_THROWS((void)net.latent_head(Branch::image, 1, f.levels[1], std::nullopt));
    CHECK_THROWS((void)net.latent_head(Branch::image, 0, f.levels[0], g0.mean));
    for (double v : g1.log_var.value().values()) {
        CHECK(v >= kLogVarMin);
        CHECK(v <= kLogVarMax);
    }
}

TEST_CASE("zeroed heads produce a standard normal field") {
    ModelConfig cfg = tiny_config(3, 32);
    VaeUnet net(cfg, 4);
    zero_heads(net);
    std::mt19937_64 rng(4);
    const SkipFeatures f = net.encode_image(random_image(rng, cfg));
    std::optional<ag::Var> prev;
    for (int i = 0; i < 3; ++i) {
        const auto g = net.latent_head(Branch::image, i, f.levels[i], prev);
        for (double v : g.mean.value().values()) {
            REQUIRE(v == 0.0);
        }
        for (double v : g.log_var.value().values()) {
            REQUIRE(v == 0.0);
        }
        prev = g.mean;
    }
}

TEST_CASE("forward_train shape pipeline over a config grid") {
    std::mt19937_64 rng(5);
    for (int levels = 1; levels <= 4; ++levels) {
        for (int size : {16, 32, 64}) {
            ModelConfig cfg = tiny_config(levels, size);
            VaeUnet net(cfg, 6);
            GaussianNoise noise(7);
            const ForwardTrace t = net.forward_train(random_image(rng, cfg), random_onehot(rng, cfg), noise);
            CHECK(t.logits.shape() == Shape{1, 2, size, size});
            REQUIRE(t.q_levels.size() == static_cast<std::size_t>(levels));
            REQUIRE(t.p_levels.size() == static_cast<std::size_t>(levels));
            CHECK(t.latents.size() == static_cast<std::size_t>(levels));
            CHECK(t.kl.per_level.size() == static_cast<std::size_t>(levels));
            for (int i = 0; i < levels; ++i) {
                CHECK(t.p_levels[i].shape() == t.q_levels[i].shape());
                CHECK(t.latents[i].shape() == t.q_levels[i].shape());
            }
            CHECK(t.logits.value().all_finite());
        }
    }
}

TEST_CASE("logits are resized to a larger output size") {
    ModelConfig cfg = tiny_config(2, 16);
    cfg.output_size = {24, 24};
    VaeUnet net(cfg, 1);
    std::mt19937_64 rng(8);
    GaussianNoise noise(1);
    const ForwardTrace t = net.forward_train(random_image(rng, cfg), random_onehot(rng, cfg), noise);
    CHECK(t.logits.shape() == Shape{1, 2, 24, 24});
}

TEST_CASE("encode_segmentation rejects non one-hot targets") {
    ModelConfig cfg = tiny_config(2, 16);
    VaeUnet net(cfg, 1);
    std::mt19937_64 rng(9);
    GaussianNoise noise(1);
    const ForwardTrace t = net.forward_inference(random_image(rng, cfg), noise);
    Tensor y = random_onehot(rng, cfg);
    y[0] = 0.5;
    CHECK_THROWS_AS((void)net.encode_segmentation(y, t.latents), std::invalid_argument);
}

TEST_CASE("random weights give positive KL") {
    ModelConfig cfg = tiny_config(2, 16);
    std::mt19937_64 rng(10);
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        VaeUnet net(cfg, seed);
        GaussianNoise noise(seed + 1000);
        const ForwardTrace t = net.forward_train(random_image(rng, cfg), random_onehot(rng, cfg), noise);
        REQUIRE(t.kl.reduced > 0.0);
    }
}

TEST_CASE("mirrored branches fed identical inputs give zero KL") {
    ModelConfig cfg = tiny_config(2, 16);
    cfg.input_channels = cfg.class_count;
    VaeUnet net(cfg, 11);
    auto& params = net.parameters();
    for (auto& p : params.entries()) {
        for (const auto& [from, to] : {std::pair{"x_encoder.", "y_encoder."}, std::pair{"q_head.", "p_head."}}) {
            if (p.name.starts_with(from)) {
                params.get(std::string(to) + p.name.substr(std::string(from).size())).mutable_value() =
                    p.var.value();
            }
        }
    }
    std::mt19937_64 rng(12);
    const Tensor y = random_onehot(rng, cfg);
    GaussianNoise noise(3);
    const ForwardTrace t = net.forward_train(y, y, noise);
    CHECK(std::abs(t.kl.reduced) <= 1e-12);
}

TEST_CASE("decoder responds to the coarsest latent") {
    ModelConfig cfg = tiny_config(3, 16);
    std::mt19937_64 rng(13);
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        VaeUnet net(cfg, seed);
        const Tensor x = random_image(rng, cfg);
        GaussianNoise noise(seed);
        const ForwardTrace t = net.forward_inference(x, noise);
        const SkipFeatures skips = net.encode_image(x);
        const Tensor base = net.decode(skips, t.latents).value();
        CHECK(net.decode(skips, t.latents).value() == base);
        LatentStack moved = t.latents;
        Tensor z = moved.levels.back().value();
        for (std::size_t i = 0; i < z.size(); ++i) {
            z[i] += 1.0;
        }
        moved.levels.back() = ag::Var::constant(z);
        REQUIRE(max_abs_diff(net.decode(skips, moved).value(), base) > 0.0);
    }
}

TEST_CASE("decode rejects misaligned latents") {
    ModelConfig cfg = tiny_config(2, 16);
    VaeUnet net(cfg, 1);
    std::mt19937_64 rng(14);
    GaussianNoise noise(1);
    const Tensor x = random_image(rng, cfg);
    const ForwardTrace t = net.forward_inference(x, noise);
    LatentStack bad = t.latents;
    bad.levels[1] = ag::Var::constant(Tensor(Shape{1, 2, 4, 4}));
    CHECK_THROWS_AS((void)net.decode(net.encode_image(x), bad), ShapeError);
}

TEST_CASE("seeded forward_train is bit-identical") {
    ModelConfig cfg = tiny_config(2, 16);
    std::mt19937_64 rng(15);
    const Tensor x = random_image(rng, cfg);
    const Tensor y = random_onehot(rng, cfg);
    VaeUnet a(cfg, 21), b(cfg, 21);
    GaussianNoise na(5), nb(5);
    const ForwardTrace ta = a.forward_train(x, y, na);
    const ForwardTrace tb = b.forward_train(x, y, nb);
    CHECK(ta.logits.value() == tb.logits.value());
    CHECK(ta.kl.reduced == tb.kl.reduced);
    for (std::size_t i = 0; i < ta.latents.size(); ++i) {
        CHECK(ta.latents[i].value() == tb.latents[i].value());
    }
}

TEST_CASE("every latent-head parameter receives a nonzero finite gradient") {
    ModelConfig cfg = tiny_config(3, 16);
    VaeUnet net(cfg, 16);
    std::mt19937_64 rng(17);
    const Tensor y = random_onehot(rng, cfg, 2);
    GaussianNoise noise(2);
    const ForwardTrace t = net.forward_train(random_image(rng, cfg, 2), y, noise);
    const LossBreakdown loss = elbo_loss(t, y, LossConfig{});
    ag::backward(loss.total_term);
    for (const auto& p : net.parameters().entries()) {
        const Tensor g = p.var.grad();
        CHECK_MESSAGE(g.all_finite(), p.name);
        if (p.name.find("_head.") != std::string::npos) {
            double norm = 0.0;
            for (double v : g.values()) {
                norm += v * v;
            }
            CHECK_MESSAGE(norm > 0.0, p.name);
        }
    }
}

TEST_CASE("prior prediction is deterministic and equals zero-noise sampling") {
    ModelConfig cfg = tiny_config(3, 16);
    VaeUnet net(cfg, 18);
    std::mt19937_64 rng(19);
    const Tensor x = random_image(rng, cfg);
    const LabelMap prior = net.predict_prior(x);
    CHECK(net.predict_prior(x) == prior);
    ZeroNoise zero;
    const SampleSet s = net.predict_samples(x, 3, zero);
    for (const auto& m : s.samples) {
        CHECK(m == prior);
    }
}

TEST_CASE("predict_samples seeding and count") {
    ModelConfig cfg = tiny_config(2, 16);
    VaeUnet net(cfg, 20);
    std::mt19937_64 rng(21);
    const Tensor x = random_image(rng, cfg);
    CHECK_THROWS_AS((void)net.predict_samples(x, 0, 1), std::invalid_argument);
    const SampleSet a = net.predict_samples(x, 1, 42);
    const SampleSet b = net.predict_samples(x, 1, 42);
    REQUIRE(a.size() == 1);
    CHECK(a.samples[0] == b.samples[0]);
    CHECK(net.predict_samples(x, 5, 42).size() == 5);
}

TEST_CASE("a variance pinned at a deep floor reproduces the prior in every sample") {
    ModelConfig cfg = tiny_config(2, 16);
    cfg.log_var_min = -60.0;
    VaeUnet net(cfg, 22);
    for (auto& p : net.parameters().entries()) {
        if (p.name.find("log_var") != std::string::npos) {
            p.var.mutable_value().fill(p.name.ends_with(".bias") ? -1000.0 : 0.0);
        }
    }
    std::mt19937_64 rng(23);
    const Tensor x = random_image(rng, cfg);
    const LabelMap prior = net.predict_prior(x);
    for (const auto& m : net.predict_samples(x, 10, 99).samples) {
        CHECK(m == prior);
    }
}

TEST_CASE("parameter manifest names and shapes") {
    ModelConfig cfg = tiny_config(2, 16);
    VaeUnet net(cfg, 1);
    const auto& params = net.parameters();
    CHECK(params.get("x_encoder.0.conv1.weight").shape() == Shape{4, 1, 3, 3});
    CHECK(params.get("y_encoder.0.conv1.weight").shape() == Shape{4, 2, 3, 3});
    CHECK(params.get("q_head.0.mean.weight").shape().n == 2);
    CHECK(params.get("output.bias").shape() == Shape{1, 2, 1, 1});
    CHECK_THROWS_AS((void)params.get("missing.weight"), std::out_of_range);
    std::set<std::string> names;
    for (const auto& p : params.entries()) {
        CHECK(names.insert(p.name).second);
    }
}
