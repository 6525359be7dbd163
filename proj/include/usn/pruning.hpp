#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <ostream>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "usn/certifier.hpp"
#include "usn/network.hpp"
#include "usn/perturbation.hpp"
#include "usn/usn_metrics.hpp"

namespace usn {

/// Staircase pruning ratio: 0 before t_start, (rho / n_steps) * floor((t - t_start) / t_interval)
/// on [t_start, t_end], rho after t_end, clamped to [0, rho].
struct PruningSchedule {
    double rho_final = 0.0;
    int n_steps = 1;
    int t_start = 1;
    int t_end = 1;
    int t_interval = 1;
};

void validate(const PruningSchedule& s);
double rho_at(int t, const PruningSchedule& s);

struct LossWeights {
    double lambda_u = 1.0;
    double lambda_s = 1.0;
    double lambda_w = 10.0;
    std::vector<std::size_t> prune_layers;  // 0-based linear layer indices
};

void validate(const LossWeights& w, const Network& net);

/// Conv layers of the network: the default pruning set.
std::vector<std::size_t> conv_layers(const Network& net);

struct TrainingBatch {
    std::vector<Image> clean;
    std::vector<Vec> labels;                   // keypoint coordinates, same layout as the output
    std::vector<std::vector<Image>> perturbed;  // m >= 2 samples per clean image
};

struct LayerLoss {
    std::size_t layer = 0;
    double unbiased = 0.0;
    double smooth = 0.0;
    double wasserstein = 0.0;
};

struct ObjectiveResult {
    double task = 0.0;
    double total = 0.0;
    std::vector<LayerLoss> layers;
    std::vector<UsnStats> stats;  // batch statistics per prune layer
};

/// Mean squared coordinate error of the clean predictions.
double task_loss(const Network& net, std::span<const Image> images, std::span<const Vec> labels);

/// task + Σ_layers (λ_u unbiased + λ_s smooth + λ_W wasserstein). The Wasserstein term
/// compares channel importance with the top ceil(rho * C) target and is skipped when
/// wasserstein_rho is 0. Gradients are accumulated into `grads` when it is non-null.
ObjectiveResult total_loss(const Network& net, const TrainingBatch& batch, const LossWeights& weights,
                           double wasserstein_rho, Gradients* grads, double eps_usn = kDefaultEpsUsn);

/// Indices of the channels to keep: the `keep` highest scores among active channels, ties
/// to the lower index.
std::vector<std::uint8_t> top_channel_mask(std::span<const double> scores, std::span<const std::uint8_t> active,
                                           std::size_t keep);

/// Channels kept at ratio rho: ceil((1 - rho) * n).
std::size_t kept_channel_count(std::size_t channels, double rho);

/// Which end of the channel importance ranking survives a prune step.
enum class PruneOrder { KeepHighest, KeepLowest };

const char* to_string(PruneOrder o);
PruneOrder prune_order_from_string(const std::string& name);

struct PruneResult {
    Network net;
    std::vector<std::vector<std::uint8_t>> masks;  // one per prune layer
};

/// Masks every prune layer down to kept_channel_count channels by channel importance and
/// resets the accumulated statistics. Ties keep the lower index under either order.
PruneResult prune_step(const Network& net, std::span<UsnStats> accumulated, double rho,
                       std::span<const std::size_t> layers, PruneOrder order = PruneOrder::KeepHighest);

/// Same counts as prune_step, channels chosen uniformly among the active ones.
PruneResult random_prune_baseline(const Network& net, double rho, std::span<const std::size_t> layers,
                                  std::mt19937_64& rng);

enum class OptimizerKind { Adam, Sgd };

const char* to_string(OptimizerKind k);
OptimizerKind optimizer_kind_from_string(const std::string& name);

class Optimizer {
public:
    Optimizer(OptimizerKind kind, double learning_rate, double beta1 = 0.9, double beta2 = 0.999,
              double eps = 1e-8);
    /// Masked parameters stay at zero.
    void step(Network& net, const Gradients& grads);

private:
    OptimizerKind kind_;
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::optional<Gradients> m_, v_;
};

enum class PruningRule { Usn, Random, None };

const char* to_string(PruningRule r);
PruningRule pruning_rule_from_string(const std::string& name);

struct TrainConfig {
    int epochs = 30;
    std::size_t batch_size = 64;
    double learning_rate = 0.01;
    OptimizerKind optimizer = OptimizerKind::Adam;
    std::size_t samples = 4;  // perturbation samples per image and batch
    std::uint64_t seed = 0;
    PruningSchedule schedule;
    LossWeights weights;  // empty prune_layers means every conv layer
    PruningRule rule = PruningRule::Usn;
    PruneOrder prune_order = PruneOrder::KeepHighest;
    std::vector<PerturbationSpec> specs = {{PerturbationKind::Brightness, 1.0 / 255.0},
                                           {PerturbationKind::Contrast, 0.01}};
    double eps_usn = kDefaultEpsUsn;
};

void validate(const TrainConfig& c);

struct EpochLog {
    int epoch = 0;
    double rho = 0.0;
    double train_task = 0.0;
    double train_unbiased = 0.0;
    double train_smooth = 0.0;
    double train_wasserstein = 0.0;
    double train_total = 0.0;
    double val_task = 0.0;
    double val_task_perturbed = 0.0;
    std::size_t active_channels = 0;
    bool eligible = false;  // candidate for best checkpoint
    Vec layer_unbiased;
    Vec layer_smooth;
};

struct TrainResult {
    Network best;
    Network last;
    int best_epoch = 0;
    double best_val_task = 0.0;
    bool diverged = false;
    std::vector<EpochLog> log;
    double seconds = 0.0;
};

/// Perturbed copies of `image`: m samples, each from a spec drawn uniformly from `specs`.
std::vector<Image> sample_mixed(std::span<const PerturbationSpec> specs, const Image& image, std::size_t m,
                                std::mt19937_64& rng);

TrainResult train(Network net, const TrainConfig& config, std::span<const LabeledImage> train_set,
                  std::span<const LabeledImage> val_set);

void write_log_csv(std::ostream& out, std::span<const EpochLog> log);

/// Per-neuron USN statistics of every listed layer, accumulated over `images`.
std::vector<UsnStats> dataset_usn_stats(const Network& net, std::span<const LabeledImage> images,
                                        std::span<const PerturbationSpec> specs, std::size_t m,
                                        std::span<const std::size_t> layers, std::uint64_t seed,
                                        double eps_usn = kDefaultEpsUsn);

}  // namespace usn
