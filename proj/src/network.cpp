#include "vaeunet/network.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "vaeunet/key_value.hpp"

namespace vaeunet {

namespace {

std::string join(const std::vector<int>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) {
        s += (i ? "," : "") + std::to_string(v[i]);
    }
    return s;
}

Extent to_extent(const std::string& key, const std::string& value) {
    const auto v = kv::to_int_list(key, value);
    if (v.size() != 2) {
        throw std::invalid_argument(key + ": expected 'H, W', got '" + value + "'");
    }
    return {v[0], v[1]};
}

Tensor he_normal(Shape s, int fan_in, double gain, std::mt19937_64& rng) {
    std::normal_distribution<double> normal(0.0, gain * std::sqrt(2.0 / fan_in));
    Tensor t(s);
    for (double& v : t.values()) {
        v = normal(rng);
    }
    return t;
}

}  // namespace

void ModelConfig::validate() const {
    if (level_count < 1) {
        throw std::invalid_argument("level_count must be >= 1, got " + std::to_string(level_count));
    }
    if (static_cast<int>(encoder_channels.size()) != level_count) {
        throw std::invalid_argument("encoder_channels has " + std::to_string(encoder_channels.size()) +
                                    " entries, level_count is " + std::to_string(level_count));
    }
    for (int c : encoder_channels) {
        if (c < 1) {
            throw std::invalid_argument("encoder_channels entries must be >= 1");
        }
    }
    if (latent_channels < 1) {
        throw std::invalid_argument("latent_channels must be >= 1");
    }
    if (class_count < 2) {
        throw std::invalid_argument("class_count must be >= 2");
    }
    if (input_channels < 1) {
        throw std::invalid_argument("input_channels must be >= 1");
    }
    const int factor = 1 << (level_count - 1);
    for (const auto& [name, e] : {std::pair{"input_size", input_size}, std::pair{"output_size", output_size}}) {
        if (e.h < 1 || e.w < 1 || e.h % factor != 0 || e.w % factor != 0) {
            throw std::invalid_argument(std::string(name) + " " + std::to_string(e.h) + "x" + std::to_string(e.w) +
                                        " must be positive and divisible by " + std::to_string(factor));
        }
    }
    if (!(log_var_min < log_var_max) || !std::isfinite(log_var_min) || !std::isfinite(log_var_max)) {
        throw std::invalid_argument("log-variance clamp range must be finite and non-empty");
    }
}

std::string ModelConfig::to_text() const {
    std::ostringstream os;
    os << "level_count = " << level_count << '\n'
       << "encoder_channels = " << join(encoder_channels) << '\n'
       << "latent_channels = " << latent_channels << '\n'
       << "class_count = " << class_count << '\n'
       << "input_channels = " << input_channels << '\n'
       << "input_size = " << input_size.h << ", " << input_size.w << '\n'
       << "output_size = " << output_size.h << ", " << output_size.w << '\n'
       << "log_var_min = " << kv::format_double(log_var_min) << '\n'
       << "log_var_max = " << kv::format_double(log_var_max) << '\n';
    return os.str();
}

void apply_model_keys(ModelConfig& cfg, const std::map<std::string, std::string>& kv) {
    for (const auto& [k, v] : kv) {
        if (k == "level_count") cfg.level_count = kv::to_int(k, v);
        else if (k == "encoder_channels") cfg.encoder_channels = kv::to_int_list(k, v);
        else if (k == "latent_channels") cfg.latent_channels = kv::to_int(k, v);
        else if (k == "class_count") cfg.class_count = kv::to_int(k, v);
        else if (k == "input_channels") cfg.input_channels = kv::to_int(k, v);
        else if (k == "input_size") cfg.input_size = to_extent(k, v);
        else if (k == "output_size") cfg.output_size = to_extent(k, v);
        else if (k == "log_var_min") cfg.log_var_min = kv::to_double(k, v);
        else if (k == "log_var_max") cfg.log_var_max = kv::to_double(k, v);
    }
}

ModelConfig parse_model_config(const std::string& text) {
    ModelConfig cfg;
    apply_model_keys(cfg, kv::parse(text));
    cfg.validate();
    return cfg;
}

Tensor GaussianNoise::standard_normal(const Shape& shape) {
    Tensor t(shape);
    for (double& v : t.values()) {
        v = normal_(rng_);
    }
    return t;
}

ag::Var& ParameterStore::add(std::string name, Tensor init) {
    if (index_.contains(name)) {
        throw std::logic_error("duplicate parameter " + name);
    }
    index_[name] = entries_.size();
    entries_.push_back({std::move(name), ag::Var::leaf(std::move(init))});
    return entries_.back().var;
}

const ag::Var& ParameterStore::get(const std::string& name) const {
    const auto it = index_.find(name);
    if (it == index_.end()) {
        throw std::out_of_range("unknown parameter " + name);
    }
    return entries_[it->second].var;
}

ag::Var& ParameterStore::get(const std::string& name) {
    return const_cast<ag::Var&>(static_cast<const ParameterStore&>(*this).get(name));
}

std::size_t ParameterStore::scalar_count() const {
    std::size_t total = 0;
    for (const auto& e : entries_) {
        total += e.var.value().size();
    }
    return total;
}

void ParameterStore::zero_grad() {
    for (auto& e : entries_) {
        e.var.zero_grad();
    }
}

VaeUnet::VaeUnet(ModelConfig cfg, std::uint64_t init_seed) : cfg_(std::move(cfg)) {
    cfg_.validate();
    std::mt19937_64 rng(init_seed);
    const int levels = cfg_.level_count;
    const int lat = cfg_.latent_channels;
    const auto& ch = cfg_.encoder_channels;

    auto add_conv = [&](const std::string& name, int cin, int cout, int k, double gain) {
        params_.add(name + ".weight", he_normal(Shape{cout, cin, k, k}, cin * k * k, gain, rng));
        params_.add(name + ".bias", Tensor(Shape{1, cout, 1, 1}, 0.0));
    };

    for (const std::string branch : {"x_encoder", "y_encoder"}) {
        int cin = branch == "x_encoder" ? cfg_.input_channels : cfg_.class_count;
        for (int i = 0; i < levels; ++i) {
            const std::string p = branch + "." + std::to_string(i);
            add_conv(p + ".conv1", cin, ch[i], 3, 1.0);
            add_conv(p + ".conv2", ch[i], ch[i], 3, 1.0);
            cin = ch[i];
        }
    }
    for (const std::string head : {"q_head", "p_head"}) {
        for (int i = 0; i < levels; ++i) {
            const int cin = ch[i] + (i > 0 ? lat : 0);
            const std::string p = head + "." + std::to_string(i);
            add_conv(p + ".mean", cin, lat, 1, 0.1);
            add_conv(p + ".log_var", cin, lat, 1, 0.1);
        }
    }
    for (int i = levels - 1; i >= 0; --i) {
        const std::string p = "decoder." + std::to_string(i);
        int cin = ch[i] + lat;
        if (i < levels - 1) {
            params_.add(p + ".up.weight", he_normal(Shape{ch[i + 1], ch[i], 2, 2}, ch[i + 1], 1.0, rng));
            params_.add(p + ".up.bias", Tensor(Shape{1, ch[i], 1, 1}, 0.0));
            cin += ch[i];
        }
        add_conv(p + ".conv1", cin, ch[i], 3, 1.0);
        add_conv(p + ".conv2", ch[i], ch[i], 3, 1.0);
    }
    add_conv("output", ch[0], cfg_.class_count, 1, std::sqrt(0.5));
}

ag::Var VaeUnet::conv(const std::string& name, const ag::Var& x) const {
    return ag::conv2d(x, params_.get(name + ".weight"), params_.get(name + ".bias"));
}

ag::Var VaeUnet::block(const std::string& prefix, const ag::Var& x) const {
    return ag::relu(conv(prefix + ".conv2", ag::relu(conv(prefix + ".conv1", x))));
}

void VaeUnet::check_input(const Tensor& x) const {
    const Shape s = x.shape();
    if (s.c != cfg_.input_channels || s.h != cfg_.input_size.h || s.w != cfg_.input_size.w) {
        std::ostringstream os;
        os << "image shape " << s.str() << " does not match the configured input: expected [N x "
           << cfg_.input_channels << " x " << cfg_.input_size.h << " x " << cfg_.input_size.w << "]";
        throw ShapeError(os.str());
    }
}

SkipFeatures VaeUnet::encode(const std::string& prefix, const ag::Var& input) const {
    SkipFeatures skips;
    ag::Var h = input;
    for (int i = 0; i < cfg_.level_count; ++i) {
        if (i > 0) {
            h = ag::max_pool2(h);
        }
        h = block(prefix + "." + std::to_string(i), h);
        skips.levels.push_back(h);
    }
    return skips;
}

SkipFeatures VaeUnet::encode_image(const Tensor& x) const {
    check_input(x);
    return encode("x_encoder", ag::Var::constant(x));
}

DiagonalGaussianField VaeUnet::latent_head(Branch branch, int level, const ag::Var& features,
                                           const std::optional<ag::Var>& prev_latent) const {
    if (level < 0 || level >= cfg_.level_count) {
        throw std::out_of_range("latent_head: level " + std::to_string(level));
    }
    ag::Var input = features;
    if (level > 0) {
        if (!prev_latent) {
            throw std::invalid_argument("latent_head: level " + std::to_string(level) + " needs z_{i-1}");
        }
        ag::Var aligned = *prev_latent;
        while (aligned.shape().h > features.shape().h) {
            aligned = ag::avg_pool2(aligned);
        }
        const std::vector<ag::Var> parts{features, aligned};
        input = ag::concat_channels(parts);
    } else if (prev_latent) {
        throw std::invalid_argument("latent_head: level 0 has no ancestor latent");
    }
    const std::string p = std::string(branch == Branch::image ? "q_head." : "p_head.") + std::to_string(level);
    ag::Var mean = conv(p + ".mean", input);
    ag::Var log_var = ag::clamp(conv(p + ".log_var", input), cfg_.log_var_min, cfg_.log_var_max);
    return {std::move(mean), std::move(log_var)};
}

std::pair<std::vector<DiagonalGaussianField>, LatentStack> VaeUnet::latent_chain(const SkipFeatures& skips,
                                                                                  NoiseSource& noise) const {
    std::vector<DiagonalGaussianField> fields;
    LatentStack stack;
    std::optional<ag::Var> prev;
    for (int i = 0; i < cfg_.level_count; ++i) {
        fields.push_back(latent_head(Branch::image, i, skips.levels[i], prev));
        stack.levels.push_back(sample_latent(fields.back(), noise.standard_normal(fields.back().shape())));
        prev = stack.levels.back();
    }
    return {std::move(fields), std::move(stack)};
}

std::vector<DiagonalGaussianField> VaeUnet::encode_segmentation(const Tensor& y_onehot,
                                                                const LatentStack& q_latents) const {
    const Shape s = y_onehot.shape();
    if (s.c != cfg_.class_count || s.h != cfg_.output_size.h || s.w != cfg_.output_size.w) {
        throw ShapeError("segmentation shape " + s.str() + " does not match class_count x output_size");
    }
    if (!is_one_hot(y_onehot)) {
        throw std::invalid_argument("encode_segmentation: y is not one-hot");
    }
    if (static_cast<int>(q_latents.size()) != cfg_.level_count) {
        throw std::invalid_argument("encode_segmentation: expected " + std::to_string(cfg_.level_count) +
                                    " latents, got " + std::to_string(q_latents.size()));
    }
    const Tensor y_in = ag::bilinear_resize(y_onehot, cfg_.input_size.h, cfg_.input_size.w);
    const SkipFeatures yskips = encode("y_encoder", ag::Var::constant(y_in));
    std::vector<DiagonalGaussianField> fields;
    for (int i = 0; i < cfg_.level_count; ++i) {
        std::optional<ag::Var> prev;
        if (i > 0) {
            prev = q_latents[i - 1];
        }
        fields.push_back(latent_head(Branch::segmentation, i, yskips.levels[i], prev));
    }
    return fields;
}

ag::Var VaeUnet::decode(const SkipFeatures& skips, const LatentStack& latents) const {
    const int levels = cfg_.level_count;
    if (static_cast<int>(skips.size()) != levels || static_cast<int>(latents.size()) != levels) {
        throw std::invalid_argument("decode: expected " + std::to_string(levels) + " skips and latents");
    }
    for (int i = 0; i < levels; ++i) {
        const Shape a = skips.levels[i].shape();
        const Shape b = latents[i].shape();
        if (a.n != b.n || a.h != b.h || a.w != b.w || b.c != cfg_.latent_channels) {
            throw ShapeError("decode: level " + std::to_string(i) + " latent " + b.str() + " vs skip " + a.str());
        }
    }
    ag::Var h;
    for (int i = levels - 1; i >= 0; --i) {
        const std::string p = "decoder." + std::to_string(i);
        std::vector<ag::Var> parts;
        if (i < levels - 1) {
            parts.push_back(ag::conv_transpose2x2(h, params_.get(p + ".up.weight"), params_.get(p + ".up.bias")));
        }
        parts.push_back(skips.levels[i]);
        parts.push_back(latents[i]);
        h = block(p, ag::concat_channels(parts));
    }
    h = ag::resize_bilinear(h, cfg_.output_size.h, cfg_.output_size.w);
    return conv("output", h);
}

ForwardTrace VaeUnet::forward_train(const Tensor& x, const Tensor& y_onehot, NoiseSource& noise) const {
    if (x.shape().n != y_onehot.shape().n) {
        throw ShapeError("forward_train: batch " + x.shape().str() + " vs " + y_onehot.shape().str());
    }
    const SkipFeatures skips = encode_image(x);
    ForwardTrace trace;
    std::tie(trace.q_levels, trace.latents) = latent_chain(skips, noise);
    trace.p_levels = encode_segmentation(y_onehot, trace.latents);
    trace.kl = hierarchical_kl(trace.q_levels, trace.p_levels);
    trace.logits = decode(skips, trace.latents);
    return trace;
}

ForwardTrace VaeUnet::forward_inference(const Tensor& x, NoiseSource& noise) const {
    const SkipFeatures skips = encode_image(x);
    ForwardTrace trace;
    std::tie(trace.q_levels, trace.latents) = latent_chain(skips, noise);
    trace.logits = decode(skips, trace.latents);
    return trace;
}

ForwardTrace VaeUnet::forward_prior(const Tensor& x) const {
    const SkipFeatures skips = encode_image(x);
    ForwardTrace trace;
    std::optional<ag::Var> prev;
    for (int i = 0; i < cfg_.level_count; ++i) {
        trace.q_levels.push_back(latent_head(Branch::image, i, skips.levels[i], prev));
        trace.latents.levels.push_back(mean_latent(trace.q_levels.back()));
        prev = trace.latents.levels.back();
    }
    trace.logits = decode(skips, trace.latents);
    return trace;
}

LabelMap VaeUnet::predict_prior(const Tensor& x) const {
    if (x.shape().n != 1) {
        throw ShapeError("predict_prior expects a single image, got " + x.shape().str());
    }
    ag::NoGradGuard no_grad;
    return argmax_labels(forward_prior(x).logits.value());
}

SampleSet VaeUnet::predict_samples(const Tensor& x, int n, std::uint64_t seed) const {
    GaussianNoise noise(seed);
    return predict_samples(x, n, noise);
}

SampleSet VaeUnet::predict_samples(const Tensor& x, int n, NoiseSource& noise) const {
    if (n < 1) {
        throw std::invalid_argument("predict_samples: n must be >= 1, got " + std::to_string(n));
    }
    if (x.shape().n != 1) {
        throw ShapeError("predict_samples expects a single image, got " + x.shape().str());
    }
    ag::NoGradGuard no_grad;
    const SkipFeatures skips = encode_image(x);
    SampleSet out;
    for (int s = 0; s < n; ++s) {
        auto [fields, latents] = latent_chain(skips, noise);
        out.samples.push_back(argmax_labels(decode(skips, latents).value()));
    }
    return out;
}

}  // namespace vaeunet
