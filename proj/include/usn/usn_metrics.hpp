#pragma once

#include <cstddef>
#include <ostream>
#include <span>
#include <vector>

#include "usn/network.hpp"
#include "usn/tensor.hpp"

namespace usn {

inline constexpr double kDefaultEpsUsn = 1e-8;

using PreActivationSet = std::vector<std::span<const double>>;

/// Layer-level unbiased (mean ℓ1) and smooth (mean squared ℓ2) deviation of f^i under
/// perturbation samples.
struct LayerMetrics {
    double unbiased = 0.0;
    double smooth = 0.0;
};

LayerMetrics layer_metrics(std::span<const double> clean, const PreActivationSet& perturbed);
LayerMetrics layer_metrics(const Network& net, const Image& x0, std::span<const Image> samples,
                           std::size_t layer);

/// Per-neuron bias |mean_k dev_kj| and smooth contribution var_j + bias_j² (population
/// variance, so the smooth terms sum to the layer metric).
struct NeuronContributions {
    Vec unbiased;
    Vec smooth;
    Vec variance;
    Vec mean_deviation;  // signed
    std::size_t sample_count = 0;
};

NeuronContributions neuron_contributions(std::span<const double> clean,
                                         const PreActivationSet& perturbed);
NeuronContributions neuron_contributions(const Network& net, const Image& x0,
                                         std::span<const Image> samples, std::size_t layer);

/// A_j = smooth_j / ((unbiased_j² + eps_usn) · d_i).
Vec importance(std::span<const double> per_neuron_unbiased, std::span<const double> per_neuron_smooth,
               double eps_usn, std::size_t layer_width);

/// Mean importance of the member neurons of each channel. channel_of[n] is the channel of
/// neuron n and must cover 0..C-1 with no empty channel.
Vec channel_importance(std::span<const double> neuron_importance, std::span<const int> channel_of);

/// Running USN statistics of one layer. Per-neuron quantities are sample-count weighted
/// averages over the clean inputs merged so far; importance is recomputed after each merge.
struct UsnStats {
    std::size_t layer = 0;
    double unbiased = 0.0;
    double smooth = 0.0;
    Vec per_neuron_unbiased;
    Vec per_neuron_smooth;
    Vec per_neuron_variance;
    Vec importance;
    std::size_t sample_count = 0;
    double eps_usn = kDefaultEpsUsn;

    std::size_t width() const { return per_neuron_unbiased.size(); }
};

UsnStats zero_stats(std::size_t layer, std::size_t width, double eps_usn = kDefaultEpsUsn);
UsnStats stats_from_pre_activations(std::size_t layer, std::span<const double> clean,
                                    const PreActivationSet& perturbed, double eps_usn = kDefaultEpsUsn);
UsnStats usn_stats(const Network& net, const Image& x0, std::span<const Image> samples,
                   std::size_t layer, double eps_usn = kDefaultEpsUsn);

UsnStats accumulate(const UsnStats& running, const UsnStats& batch);
void reset(UsnStats& stats);

/// CSV rows: layer,neuron,channel,unbiased,smooth,variance,importance
void write_stats_csv(std::ostream& out, std::span<const UsnStats> stats,
                     std::span<const std::vector<int>> channel_maps, bool header = true);

}  // namespace usn
