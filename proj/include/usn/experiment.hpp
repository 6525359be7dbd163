#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "json.hpp"

#include "usn/certifier.hpp"
#include "usn/dataset.hpp"
#include "usn/pruning.hpp"

namespace usn {

struct DatasetConfig {
    std::size_t n_train = 256;
    std::size_t n_val = 64;
    std::size_t n_test = 32;
    std::uint64_t seed = 0;
    SceneParams scene;
};

struct ModelConfig {
    int width_multiplier = 8;
    double temperature = 1.0;
};

struct CertifyConfig {
    KeypointCriterion criterion;
    GridOptions grid{16, 1024, 1e-6};
    double correct_tolerance = 2.0;
    std::size_t falsify_samples = 256;
    bool probabilistic = false;
    double alpha = 0.01;
    std::size_t probabilistic_samples = 256;
    std::vector<PerturbationSpec> specs = {{PerturbationKind::Brightness, 2.0 / 255.0},
                                           {PerturbationKind::Brightness, 5.0 / 255.0},
                                           {PerturbationKind::Contrast, 0.01},
                                           {PerturbationKind::Contrast, 0.02},
                                           {PerturbationKind::Contrast, 0.05}};
    std::size_t max_images = 0;  // 0 certifies the whole test split
    std::size_t usn_samples = 16;
    std::size_t usn_layer = 3;  // layer highlighted in the per-neuron comparison
};

/// One training arm of a sweep: a rule with the ratios and Wasserstein weights to cross.
struct SweepArm {
    PruningRule rule = PruningRule::Usn;
    std::vector<double> rho = {0.2};
    std::vector<double> lambda_w = {10.0};
};

struct SweepConfig {
    std::vector<std::uint64_t> seeds = {0, 1, 2};
    std::vector<SweepArm> arms = {{PruningRule::None, {0.0}, {10.0}},
                                  {PruningRule::Usn, {0.2}, {10.0}},
                                  {PruningRule::Random, {0.2}, {10.0}}};
};

struct ExperimentConfig {
    DatasetConfig dataset;
    ModelConfig model;
    TrainConfig train;  // schedule.rho_final, lambda_w, rule and seed are set per run
    CertifyConfig certify;
    SweepConfig sweep;
};

/// Unknown keys and ill-typed values raise ConfigError.
ExperimentConfig config_from_json(const nlohmann::json& j);
nlohmann::ordered_json config_to_json(const ExperimentConfig& c);
ExperimentConfig load_config(const std::filesystem::path& path);
void validate(const ExperimentConfig& c);

struct RunSpec {
    PruningRule rule = PruningRule::Usn;
    double rho = 0.0;
    double lambda_w = 10.0;
    std::uint64_t seed = 0;

    std::string id() const;
};

/// Cartesian product of every arm with the seeds. Rule "none" and ratio 0 collapse to one
/// unpruned run per seed, carrying the first Wasserstein weight listed.
std::vector<RunSpec> sweep_runs(const SweepConfig& s);

/// Training configuration of one run: the pruning schedule is rescaled to the run's ratio.
TrainConfig run_train_config(const ExperimentConfig& c, const RunSpec& run);

Dataset build_dataset(const ExperimentConfig& c);
/// Generates the dataset into `dir` unless an identical one is already there.
Dataset ensure_dataset(const ExperimentConfig& c, const std::filesystem::path& dir);

struct RunArtifacts {
    RunSpec run;
    std::filesystem::path dir;
    std::filesystem::path checkpoint;
    TrainResult result;
};

/// Writes model.json (best checkpoint), log.csv and run.json into runs_dir / run.id().
RunArtifacts train_run(const ExperimentConfig& c, const RunSpec& run, const Dataset& data,
                       const std::filesystem::path& runs_dir);

/// Certifies the compacted checkpoint of `run_dir` on the test split and writes
/// verdicts.csv and summary.json next to it.
CampaignReport certify_run(const ExperimentConfig& c, const std::filesystem::path& run_dir, const Dataset& data,
                           std::size_t jobs);

/// Per-neuron USN statistics of every conv layer on the test split, written to usn.csv.
std::vector<UsnStats> visualize_run(const ExperimentConfig& c, const std::filesystem::path& run_dir,
                                    const Dataset& data);

/// Aggregate over every run directory below `in_dir`.
struct ReportRow {
    std::string rule;
    double rho = 0.0;
    double lambda_w = 0.0;
    std::string spec;
    std::size_t runs = 0;
    std::size_t images = 0;
    std::size_t holds = 0;
    std::size_t violated = 0;
    std::size_t unknown = 0;
    double accuracy = 0.0;  // mean over runs
    double accuracy_min = 0.0;
    double accuracy_max = 0.0;
    std::size_t keypoints_total = 0;
    std::size_t keypoints_correct = 0;
    std::size_t keypoints_correct_and_verified = 0;
    double mean_time = 0.0;  // seconds per image
    double parameters = 0.0;
};

std::vector<ReportRow> collect_report(const std::filesystem::path& in_dir);

/// report.csv (long form), table1_pruning.csv, table2_ratio.csv, table3_lambda.csv.
void write_report(const std::vector<ReportRow>& rows, const std::filesystem::path& out_dir);

struct SweepRun {
    RunArtifacts artifacts;
    CampaignReport campaign;
    std::vector<UsnStats> usn;
};

struct SweepResult {
    std::vector<SweepRun> runs;
    std::vector<ReportRow> report;
};

/// dataset/, runs/<id>/, report/ and manifest.json under out_dir. Training runs execute
/// `jobs` at a time; each campaign uses `jobs` workers.
SweepResult run_sweep(const ExperimentConfig& c, const std::filesystem::path& out_dir, std::size_t jobs);

}  // namespace usn
