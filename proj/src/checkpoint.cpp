#include "vaeunet/checkpoint.hpp"

#include <fstream>
#include <sstream>
#include <stdexcept>

#include "vaeunet/key_value.hpp"

namespace vaeunet {

namespace {

constexpr const char* kFormatTag = "vaeunet-checkpoint 1";

std::string read_line(std::istream& in, const std::string& path) {
    std::string line;
    if (!std::getline(in, line)) {
        throw std::runtime_error(path + ": unexpected end of checkpoint");
    }
    return line;
}

std::string read_block(std::istream& in, const std::string& path, const std::string& label) {
    std::istringstream head(read_line(in, path));
    std::string name;
    std::size_t bytes = 0;
    if (!(head >> name >> bytes) || name != label) {
        throw std::runtime_error(path + ": expected '" + label + " <bytes>' header");
    }
    std::string text(bytes, '\0');
    in.read(text.data(), static_cast<std::streamsize>(bytes));
    if (!in) {
        throw std::runtime_error(path + ": truncated " + label + " block");
    }
    return text;
}

}  // namespace

Checkpoint snapshot(const VaeUnet& net, std::map<std::string, std::string> meta) {
    Checkpoint c;
    c.model = net.config();
    c.meta = std::move(meta);
    for (const auto& e : net.parameters().entries()) {
        c.tensors.emplace_back(e.name, e.var.value());
    }
    return c;
}

void load_weights(VaeUnet& net, const Checkpoint& ckpt) {
    if (!(net.config() == ckpt.model)) {
        throw std::invalid_argument("checkpoint model config does not match the network");
    }
    auto& entries = net.parameters().entries();
    if (entries.size() != ckpt.tensors.size()) {
        throw std::invalid_argument("checkpoint holds " + std::to_string(ckpt.tensors.size()) +
                                    " tensors, network expects " + std::to_string(entries.size()));
    }
    for (std::size_t i = 0; i < entries.size(); ++i) {
        const auto& [name, t] = ckpt.tensors[i];
        if (name != entries[i].name) {
            throw std::invalid_argument("checkpoint tensor " + std::to_string(i) + " is '" + name + "', expected '" +
                                        entries[i].name + "'");
        }
        require_same_shape(entries[i].var.shape(), t.shape(), "checkpoint tensor " + name);
        entries[i].var.mutable_value() = t;
    }
}

VaeUnet restore(const Checkpoint& ckpt) {
    VaeUnet net(ckpt.model);
    load_weights(net, ckpt);
    return net;
}

void save_checkpoint(const std::string& path, const Checkpoint& ckpt) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw std::runtime_error("cannot open " + path + " for writing");
    }
    const std::string config = ckpt.model.to_text();
    std::string meta;
    for (const auto& [k, v] : ckpt.meta) {
        meta += k + " = " + v + "\n";
    }
    out << kFormatTag << '\n';
    out << "config " << config.size() << '\n' << config;
    out << "meta " << meta.size() << '\n' << meta;
    out << "tensors " << ckpt.tensors.size() << '\n';
    for (const auto& [name, t] : ckpt.tensors) {
        const Shape s = t.shape();
        out << name << ' ' << s.n << ' ' << s.c << ' ' << s.h << ' ' << s.w << '\n';
        out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
        out << '\n';
    }
    if (!out) {
        throw std::runtime_error("failed writing checkpoint " + path);
    }
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw std::runtime_error("cannot open checkpoint " + path);
    }
    if (read_line(in, path) != kFormatTag) {
        throw std::runtime_error(path + ": not a vaeunet checkpoint (format tag mismatch)");
    }
    Checkpoint c;
    c.model = parse_model_config(read_block(in, path, "config"));
    c.meta = kv::parse(read_block(in, path, "meta"));

    std::istringstream head(read_line(in, path));
    std::string label;
    std::size_t count = 0;
    if (!(head >> label >> count) || label != "tensors") {
        throw std::runtime_error(path + ": expected 'tensors <count>' header");
    }
    const VaeUnet manifest(c.model);
    const auto& expected = manifest.parameters().entries();
    if (count != expected.size()) {
        throw std::runtime_error(path + ": " + std::to_string(count) + " tensors but the config implies " +
                                 std::to_string(expected.size()));
    }
    for (std::size_t i = 0; i < count; ++i) {
        std::istringstream th(read_line(in, path));
        std::string name;
        Shape s;
        if (!(th >> name >> s.n >> s.c >> s.h >> s.w)) {
            throw std::runtime_error(path + ": malformed tensor header " + std::to_string(i));
        }
        if (name != expected[i].name || !(s == expected[i].var.shape())) {
            throw std::runtime_error(path + ": tensor '" + name + "' " + s.str() + " does not match manifest entry '" +
                                     expected[i].name + "' " + expected[i].var.shape().str());
        }
        Tensor t(s);
        in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(double)));
        if (!in || in.get() != '\n') {
            throw std::runtime_error(path + ": truncated tensor '" + name + "'");
        }
        c.tensors.emplace_back(std::move(name), std::move(t));
    }
    return c;
}

}  // namespace vaeunet
