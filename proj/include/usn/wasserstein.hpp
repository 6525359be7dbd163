#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "usn/tensor.hpp"

namespace usn {

/// Atoms on the real line: sorted positions with non-negative weights summing to 1.
struct DiscreteDistribution {
    Vec points;
    Vec weights;
};

void validate(const DiscreteDistribution& d);

struct TransportEntry {
    std::size_t source = 0;
    std::size_t target = 0;
    double mass = 0.0;
};

/// Monotone (quantile) coupling of two 1-D distributions; optimal for convex costs.
std::vector<TransportEntry> quantile_coupling(const DiscreteDistribution& mu,
                                              const DiscreteDistribution& nu);

double w2_squared(const DiscreteDistribution& mu, const DiscreteDistribution& nu);
/// 2-Wasserstein distance with squared Euclidean ground cost.
double w2_discrete(const DiscreteDistribution& mu, const DiscreteDistribution& nu);

/// Percentile-thresholded target: uniform mass on the ceil(rho * d) highest-importance
/// neurons (ties go to the lowest index), zero elsewhere.
struct TargetDistribution {
    Vec mass;
    std::vector<std::size_t> support;
};

TargetDistribution target_distribution(std::span<const double> importance, double rho);

/// Neuron j sits at position j / (d - 1) in [0, 1] (0 when d = 1).
Vec index_positions(std::size_t d);

enum class GroundMetric {
    /// Importance normalised to a distribution over neuron index positions; target is the
    /// thresholded distribution over the same positions.
    IndexSpace,
    /// Equal-weight atoms at the normalised importance values against atoms at the target
    /// masses.
    ValueSpace,
};

struct WassersteinLoss {
    double value = 0.0;
    Vec gradient;             // d value / d importance, coupling held fixed
    bool degenerate = false;  // all-zero importance, uniform source used
    TargetDistribution target;
};

WassersteinLoss wasserstein_loss(std::span<const double> importance, double rho,
                                 GroundMetric metric = GroundMetric::IndexSpace);

}  // namespace usn
