#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "vaeunet/checkpoint.hpp"
#include "vaeunet/data.hpp"
#include "vaeunet/harness.hpp"
#include "vaeunet/key_value.hpp"

namespace fs = std::filesystem;
using namespace vaeunet;

namespace {

void write_text(const std::string& path, const std::string& text) {
    const fs::path parent = fs::path(path).parent_path();
    if (!parent.empty()) {
        fs::create_directories(parent);
    }
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot open " + path + " for writing");
    }
    out << text;
}

// A case given as its directory `<root>/<id>`.
SegmentationCase load_single_case(const std::string& path, Layout layout) {
    const fs::path p(path);
    if (fs::is_directory(p)) {
        const fs::path clean = fs::weakly_canonical(p);
        return load_case(clean.parent_path().string(), clean.filename().string(), layout);
    }
    throw std::runtime_error("case path " + path + " is not a case directory");
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Hierarchical variational U-net segmentation toolkit"};
    app.require_subcommand(1);

    std::string layout_name = "multi_annotator";

    auto* train_cmd = app.add_subcommand("train", "Train a model and write final/best checkpoints");
    std::string config_path;
    std::string data_dir;
    std::string out_dir;
    std::uint64_t seed = 0;
    bool seed_given = false;
    train_cmd->add_option("--config", config_path, "key = value config file")->required();
    train_cmd->add_option("--data", data_dir, "dataset root")->required();
    train_cmd->add_option("--out", out_dir, "output directory")->required();
    train_cmd->add_option("--seed", seed, "overrides the config seed");
    train_cmd->add_option("--layout", layout_name, "multi_annotator | multi_class");
    bool quiet = false;
    train_cmd->add_flag("--quiet", quiet, "suppress per-epoch output");

    auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a dataset");
    std::string ckpt_path;
    std::string mode_name = "prior";
    int n_samples = 10;
    std::string report_path;
    eval_cmd->add_option("--ckpt", ckpt_path, "checkpoint")->required();
    eval_cmd->add_option("--data", data_dir, "dataset root")->required();
    eval_cmd->add_option("--mode", mode_name, "prior | sample")->check(CLI::IsMember({"prior", "sample"}));
    eval_cmd->add_option("--n", n_samples, "samples per case in sample mode");
    eval_cmd->add_option("--seed", seed, "sampling seed");
    eval_cmd->add_option("--report", report_path, "JSON report path (stdout when omitted)");
    eval_cmd->add_option("--layout", layout_name, "multi_annotator | multi_class");

    auto* unc_cmd = app.add_subcommand("uncertainty", "Export a variance heatmap for one case");
    std::string case_path;
    std::string out_path;
    unc_cmd->add_option("--ckpt", ckpt_path, "checkpoint")->required();
    unc_cmd->add_option("--case", case_path, "case directory")->required();
    unc_cmd->add_option("--n", n_samples, "number of samples");
    unc_cmd->add_option("--seed", seed, "sampling seed");
    unc_cmd->add_option("--out", out_path, "output stem; writes <out>.npy and <out>.png")->required();
    unc_cmd->add_option("--layout", layout_name, "multi_annotator | multi_class");

    auto* ood_cmd = app.add_subcommand("ood", "Uncertainty under blur, patch and external perturbations");
    std::string kinds = "blur,patch";
    std::vector<double> sigmas{0.0, 1.0, 2.0, 4.0};
    double ratio = 0.1;
    std::string external;
    ood_cmd->add_option("--ckpt", ckpt_path, "checkpoint")->required();
    ood_cmd->add_option("--case", case_path, "case directory")->required();
    ood_cmd->add_option("--kinds", kinds, "comma separated subset of blur,patch,external");
    ood_cmd->add_option("--sigma", sigmas, "blur sigmas in pixels")->delimiter(',');
    ood_cmd->add_option("--ratio", ratio, "patch area fraction");
    ood_cmd->add_option("--external", external, "external image for the external kind");
    ood_cmd->add_option("--n", n_samples, "samples per map");
    ood_cmd->add_option("--seed", seed, "seed for sampling and patch placement");
    ood_cmd->add_option("--out", out_dir, "output directory")->required();
    ood_cmd->add_option("--layout", layout_name, "multi_annotator | multi_class");

    auto* params_cmd = app.add_subcommand("params", "Count trainable parameters per module");
    params_cmd->add_option("--config", config_path, "config file");
    params_cmd->add_option("--ckpt", ckpt_path, "checkpoint");

    auto* lat_cmd = app.add_subcommand("latents", "Export per-level latent mean and log-variance maps");
    lat_cmd->add_option("--ckpt", ckpt_path, "checkpoint")->required();
    lat_cmd->add_option("--case", case_path, "case directory")->required();
    lat_cmd->add_option("--out", out_dir, "output directory")->required();
    lat_cmd->add_option("--layout", layout_name, "multi_annotator | multi_class");

    auto* toy_cmd = app.add_subcommand("make-toy", "Write the synthetic disk dataset");
    ToySpec toy;
    toy_cmd->add_option("--seed", toy.seed, "generator seed");
    toy_cmd->add_option("--cases", toy.case_count, "number of cases");
    toy_cmd->add_option("--size", toy.image_size, "image side in pixels");
    toy_cmd->add_option("--ambiguity", toy.ambiguity_rate, "fraction of ambiguous cases");
    toy_cmd->add_option("--out", out_dir, "dataset root")->required();

    CLI11_PARSE(app, argc, argv);

    try {
        const Layout layout = parse_layout(layout_name);
        if (train_cmd->parsed()) {
            TrainConfig cfg = read_train_config(config_path);
            seed_given = train_cmd->count("--seed") > 0;
            if (seed_given) {
                cfg.seed = seed;
            }
            if (train_cmd->count("--layout") > 0) {
                cfg.layout = layout;
            }
            const auto cases = load_cases(data_dir, cfg.layout);
            const auto result = train_to_directory(cfg, cases, out_dir, [&](const EpochStats& s) {
                if (!quiet) {
                    std::cout << "epoch " << s.epoch << " lr " << s.lr << " loss " << s.loss << " ce "
                              << s.cross_entropy << " dice " << s.dice << " kl " << s.kl << " val_dice "
                              << s.validation_dice << std::endl;
                }
            });
            std::cout << "best epoch " << result.best_epoch << " val_dice " << result.best_validation_dice << "\n";
        } else if (eval_cmd->parsed()) {
            const VaeUnet net = restore(load_checkpoint(ckpt_path));
            const auto cases = load_cases(data_dir, layout);
            const EvalMode mode = mode_name == "prior" ? EvalMode::prior : EvalMode::sample;
            const EvalReport report = evaluate(net, cases, mode, n_samples, seed);
            if (report_path.empty()) {
                std::cout << report.to_json() << '\n';
            } else {
                write_text(report_path, report.to_json() + "\n");
            }
        } else if (unc_cmd->parsed()) {
            const VaeUnet net = restore(load_checkpoint(ckpt_path));
            export_uncertainty(net, load_single_case(case_path, layout), n_samples, seed, out_path);
        } else if (ood_cmd->parsed()) {
            const VaeUnet net = restore(load_checkpoint(ckpt_path));
            OodParams params;
            params.kinds.clear();
            std::stringstream ss(kinds);
            for (std::string k; std::getline(ss, k, ',');) {
                params.kinds.push_back(k);
            }
            params.sigmas = sigmas;
            params.ratio = ratio;
            params.external_path = external;
            params.n_samples = n_samples;
            params.seed = seed;
            const OodReport report = ood_battery(net, load_single_case(case_path, layout), params, out_dir);
            write_text((fs::path(out_dir) / "report.json").string(), report.to_json() + "\n");
        } else if (params_cmd->parsed()) {
            if (config_path.empty() == ckpt_path.empty()) {
                throw std::invalid_argument("params needs exactly one of --config or --ckpt");
            }
            const ParameterTable table = ckpt_path.empty()
                                             ? count_parameters(read_train_config(config_path).model)
                                             : count_parameters(restore(load_checkpoint(ckpt_path)).parameters());
            std::cout << table.to_text();
        } else if (lat_cmd->parsed()) {
            const VaeUnet net = restore(load_checkpoint(ckpt_path));
            for (const auto& path : export_latent_stats(net, load_single_case(case_path, layout), out_dir)) {
                std::cout << path << '\n';
            }
        } else if (toy_cmd->parsed()) {
            ToySpec spec = ToySpec::for_size(toy.image_size);
            spec.seed = toy.seed;
            spec.case_count = toy.case_count;
            spec.ambiguity_rate = toy.ambiguity_rate;
            const auto cases = make_toy_dataset(spec);
            fs::create_directories(out_dir);
            for (const auto& c : cases) {
                write_case(out_dir, c);
            }
            std::cout << "wrote " << cases.size() << " cases to " << out_dir << '\n';
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
