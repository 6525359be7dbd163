// usnprune: dataset generation, training with USN-guided pruning, certification campaigns,
// reports and per-neuron USN dumps.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"

#include "usn/checkpoint.hpp"
#include "usn/errors.hpp"
#include "usn/experiment.hpp"

namespace fs = std::filesystem;
using namespace usn;

namespace {

struct Options {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out_dir = ".";
    std::size_t jobs = 1;
    std::string run_dir;
    std::string in_dir;
    std::string data_dir;
    std::string checkpoint;
    std::string rule;
    std::optional<double> rho;
    std::optional<double> lambda_w;
};

ExperimentConfig config_of(const Options& o) {
    ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
    validate(c);
    return c;
}

Dataset data_of(const Options& o, const ExperimentConfig& c) {
    if (!o.data_dir.empty()) return load_dataset(o.data_dir);
    return build_dataset(c);
}

int cmd_generate(const Options& o) {
    ExperimentConfig c = config_of(o);
    if (o.seed) c.dataset.seed = *o.seed;
    const Dataset d = build_dataset(c);
    save_dataset(d, o.out_dir);
    std::printf("wrote %zu/%zu/%zu scenes to %s (checksum %llu)\n", d.train.size(), d.val.size(), d.test.size(),
                o.out_dir.c_str(), static_cast<unsigned long long>(dataset_checksum(d)));
    return 0;
}

int cmd_train(const Options& o) {
    const ExperimentConfig c = config_of(o);
    RunSpec run{c.train.rule, c.train.schedule.rho_final, c.train.weights.lambda_w, c.train.seed};
    if (!o.rule.empty()) run.rule = pruning_rule_from_string(o.rule);
    if (o.rho) run.rho = *o.rho;
    if (o.lambda_w) run.lambda_w = *o.lambda_w;
    if (o.seed) run.seed = *o.seed;
    if (run.rule == PruningRule::None) run.rho = 0.0;
    const Dataset d = data_of(o, c);
    const RunArtifacts a = train_run(c, run, d, o.out_dir);
    std::printf("%s: best epoch %d, val task %.6g%s -> %s\n", run.id().c_str(), a.result.best_epoch,
                a.result.best_val_task, a.result.diverged ? " (diverged)" : "", a.dir.c_str());
    return a.result.diverged ? 2 : 0;
}

int cmd_prune(const Options& o) {
    const ExperimentConfig c = config_of(o);
    if (o.checkpoint.empty() || !o.rho) throw ConfigError("prune needs --checkpoint and --rho");
    const Network net = load_checkpoint(o.checkpoint);
    const std::vector<std::size_t> layers =
        c.train.weights.prune_layers.empty() ? conv_layers(net) : c.train.weights.prune_layers;
    const std::string rule = o.rule.empty() ? "usn" : o.rule;
    for (std::size_t k : layers) {
        if (k >= net.num_linear()) throw ConfigError("prune layer " + std::to_string(k) + " out of range");
        const LinearLayer& lin = net.linear(k);
        if (kept_channel_count(static_cast<std::size_t>(lin.channels()), *o.rho) > lin.active_channels())
            throw ConfigError("layer " + std::to_string(k) + " is already pruned beyond ratio " +
                              std::to_string(*o.rho));
    }
    Network pruned = net;
    if (rule == "usn") {
        const Dataset d = data_of(o, c);
        std::vector<UsnStats> stats = dataset_usn_stats(net, d.train, c.train.specs, c.train.samples, layers,
                                                        o.seed.value_or(0), c.train.eps_usn);
        pruned = prune_step(net, stats, *o.rho, layers, c.train.prune_order).net;
    } else if (rule == "random") {
        std::mt19937_64 rng(o.seed.value_or(0));
        pruned = random_prune_baseline(net, *o.rho, layers, rng).net;
    } else {
        throw ConfigError("prune --rule must be usn or random");
    }
    fs::create_directories(o.out_dir);
    const fs::path out = fs::path(o.out_dir) / "model.json";
    save_checkpoint(pruned, out);
    std::printf("pruned %zu -> %zu parameters (compacted) -> %s\n", compact(net).parameter_count(),
                compact(pruned).parameter_count(), out.c_str());
    return 0;
}

int cmd_certify(const Options& o) {
    const ExperimentConfig c = config_of(o);
    if (o.run_dir.empty()) throw ConfigError("certify needs --run-dir");
    const Dataset d = data_of(o, c);
    const CampaignReport r = certify_run(c, o.run_dir, d, o.jobs);
    for (const CampaignSummary& s : r.summaries)
        std::printf("%-28s %-26s holds %3zu  violated %3zu  unknown %3zu  accuracy %.4f  time %.4gs\n", s.net.c_str(),
                    s.spec.c_str(), s.holds, s.violated, s.unknown, s.accuracy, s.mean_time);
    return 0;
}

int cmd_visualize(const Options& o) {
    const ExperimentConfig c = config_of(o);
    if (o.run_dir.empty()) throw ConfigError("visualize needs --run-dir");
    const Dataset d = data_of(o, c);
    const std::vector<UsnStats> stats = visualize_run(c, o.run_dir, d);
    for (const UsnStats& s : stats)
        std::printf("layer %zu: unbiased %.6g smooth %.6g\n", s.layer, s.unbiased, s.smooth);
    return 0;
}

int cmd_report(const Options& o) {
    const std::string in = o.in_dir.empty() ? o.out_dir : o.in_dir;
    const std::vector<ReportRow> rows = collect_report(in);
    write_report(rows, o.out_dir);
    std::printf("%zu report rows -> %s\n", rows.size(), o.out_dir.c_str());
    return 0;
}

int cmd_sweep(const Options& o) {
    ExperimentConfig c = config_of(o);
    if (o.seed) c.sweep.seeds = {*o.seed};
    const SweepResult r = run_sweep(c, o.out_dir, o.jobs);
    std::printf("%zu runs, %zu report rows -> %s\n", r.runs.size(), r.report.size(), o.out_dir.c_str());
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"USN-guided pruning and certification of keypoint CNNs"};
    app.require_subcommand(1);
    Options o;
    const auto common = [&](CLI::App* sub) {
        sub->add_option("--config", o.config, "experiment config (JSON)")->check(CLI::ExistingFile);
        sub->add_option("--seed", o.seed, "seed override");
        sub->add_option("--out-dir", o.out_dir, "output directory");
        sub->add_option("--jobs", o.jobs, "worker threads")->check(CLI::PositiveNumber);
        sub->add_option("--data", o.data_dir, "dataset directory written by generate");
    };
    CLI::App* generate = app.add_subcommand("generate", "render the synthetic keypoint dataset");
    CLI::App* train = app.add_subcommand("train", "train one run and save the best checkpoint");
    CLI::App* prune = app.add_subcommand("prune", "one-shot prune a checkpoint by USN importance or at random");
    CLI::App* certify = app.add_subcommand("certify", "certification campaign over the test split");
    CLI::App* report = app.add_subcommand("report", "aggregate campaign directories into tables");
    CLI::App* visualize = app.add_subcommand("visualize", "per-neuron USN statistics of a run");
    CLI::App* sweep = app.add_subcommand("sweep", "train, certify, visualize and report a whole grid");
    for (CLI::App* sub : {generate, train, prune, certify, report, visualize, sweep}) common(sub);
    train->add_option("--rule", o.rule, "usn, random or none");
    train->add_option("--rho", o.rho, "final pruning ratio");
    train->add_option("--lambda-w", o.lambda_w, "Wasserstein weight");
    prune->add_option("--checkpoint", o.checkpoint, "model.json to prune")->check(CLI::ExistingFile);
    prune->add_option("--rho", o.rho, "pruning ratio");
    prune->add_option("--rule", o.rule, "usn or random");
    certify->add_option("--run-dir", o.run_dir, "run directory written by train")->check(CLI::ExistingDirectory);
    visualize->add_option("--run-dir", o.run_dir, "run directory written by train")->check(CLI::ExistingDirectory);
    report->add_option("--in-dir", o.in_dir, "directory searched for runs (default: --out-dir)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 1;
    }

    try {
        if (*generate) return cmd_generate(o);
        if (*train) return cmd_train(o);
        if (*prune) return cmd_prune(o);
        if (*certify) return cmd_certify(o);
        if (*report) return cmd_report(o);
        if (*visualize) return cmd_visualize(o);
        if (*sweep) return cmd_sweep(o);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << '\n';
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 2;
    }
    return 1;
}
