#include "usn/wasserstein.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "usn/errors.hpp"

namespace usn {

namespace {

constexpr double kWeightTolerance = 1e-9;

// Target atom j such that B_{j-1} < t <= B_j, with B the target CDF.
std::size_t quantile_index(std::span<const double> cdf, double t) {
    auto it = std::lower_bound(cdf.begin(), cdf.end(), t);
    if (it == cdf.end()) return cdf.size() - 1;
    return static_cast<std::size_t>(it - cdf.begin());
}

Vec cumulative(std::span<const double> w) {
    Vec c(w.size());
    std::partial_sum(w.begin(), w.end(), c.begin());
    return c;
}

// Gradient of W2² with respect to the free source weights a (targets fixed), holding the
// assignment of each source breakpoint to its target quantile fixed.
Vec w2_squared_weight_gradient(const DiscreteDistribution& mu, const DiscreteDistribution& nu) {
    const std::size_t n = mu.points.size();
    const Vec a_cdf = cumulative(mu.weights);
    const Vec b_cdf = cumulative(nu.weights);
    Vec d_breakpoint(n, 0.0);
    for (std::size_t k = 0; k + 1 < n; ++k) {
        const double y = nu.points[quantile_index(b_cdf, a_cdf[k])];
        const double left = mu.points[k] - y;
        const double right = mu.points[k + 1] - y;
        d_breakpoint[k] = left * left - right * right;
    }
    // a_i enters every breakpoint A_k with k >= i.
    Vec g(n, 0.0);
    double acc = 0.0;
    for (std::size_t i = n; i-- > 0;) {
        acc += d_breakpoint[i];
        g[i] = acc;
    }
    return g;
}

}  // namespace

void validate(const DiscreteDistribution& d) {
    USN_REQUIRE(!d.points.empty(), "distribution has no atoms");
    USN_REQUIRE(d.points.size() == d.weights.size(), "points and weights differ in length");
    double sum = 0.0;
    for (std::size_t i = 0; i < d.weights.size(); ++i) {
        USN_REQUIRE(d.weights[i] >= 0.0 && std::isfinite(d.weights[i]), "weights must be finite and non-negative");
        USN_REQUIRE(std::isfinite(d.points[i]), "points must be finite");
        if (i > 0) USN_REQUIRE(d.points[i - 1] <= d.points[i], "points must be sorted ascending");
        sum += d.weights[i];
    }
    USN_REQUIRE(std::abs(sum - 1.0) <= kWeightTolerance, "weights must sum to 1");
}

std::vector<TransportEntry> quantile_coupling(const DiscreteDistribution& mu,
                                              const DiscreteDistribution& nu) {
    validate(mu);
    validate(nu);
    // Walk the merged breakpoints of both CDFs; each segment moves mass i -> j.
    const Vec a = cumulative(mu.weights);
    const Vec b = cumulative(nu.weights);
    const std::size_t n = a.size();
    const std::size_t m = b.size();
    std::vector<TransportEntry> plan;
    double t = 0.0;
    std::size_t i = 0;
    std::size_t j = 0;
    while (i < n && j < m) {
        const double next = std::min(i + 1 == n ? 1.0 : a[i], j + 1 == m ? 1.0 : b[j]);
        if (next > t) {
            plan.push_back({i, j, next - t});
            t = next;
        }
        const bool adv_i = i + 1 < n && a[i] <= t;
        const bool adv_j = j + 1 < m && b[j] <= t;
        if (!adv_i && !adv_j) break;
        if (adv_i) ++i;
        if (adv_j) ++j;
    }
    return plan;
}

double w2_squared(const DiscreteDistribution& mu, const DiscreteDistribution& nu) {
    double cost = 0.0;
    for (const TransportEntry& e : quantile_coupling(mu, nu)) {
        const double diff = mu.points[e.source] - nu.points[e.target];
        cost += e.mass * diff * diff;
    }
    return cost;
}

double w2_discrete(const DiscreteDistribution& mu, const DiscreteDistribution& nu) {
    return std::sqrt(std::max(0.0, w2_squared(mu, nu)));
}

Vec index_positions(std::size_t d) {
    Vec p(d, 0.0);
    if (d > 1)
        for (std::size_t j = 0; j < d; ++j) p[j] = static_cast<double>(j) / static_cast<double>(d - 1);
    return p;
}

TargetDistribution target_distribution(std::span<const double> importance, double rho) {
    USN_REQUIRE(rho > 0.0 && rho <= 1.0, "rho must lie in (0, 1]");
    USN_REQUIRE(!importance.empty(), "importance vector is empty");
    const std::size_t d = importance.size();
    const auto k = static_cast<std::size_t>(std::ceil(rho * static_cast<double>(d) - 1e-9));
    const std::size_t support_size = std::clamp<std::size_t>(k, 1, d);
    std::vector<std::size_t> order(d);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return importance[x] > importance[y]; });
    TargetDistribution t;
    t.support.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(support_size));
    std::sort(t.support.begin(), t.support.end());
    t.mass.assign(d, 0.0);
    for (std::size_t j : t.support) t.mass[j] = 1.0 / static_cast<double>(support_size);
    return t;
}

WassersteinLoss wasserstein_loss(std::span<const double> importance, double rho, GroundMetric metric) {
    USN_REQUIRE(!importance.empty(), "importance vector is empty");
    const std::size_t d = importance.size();
    double total = 0.0;
    for (double v : importance) {
        USN_REQUIRE(v >= 0.0 && std::isfinite(v), "importance must be finite and non-negative");
        total += v;
    }
    WassersteinLoss out;
    out.target = target_distribution(importance, rho);
    out.gradient.assign(d, 0.0);

    Vec source(d);
    if (total > 0.0) {
        for (std::size_t j = 0; j < d; ++j) source[j] = importance[j] / total;
    } else {
        out.degenerate = true;
        std::fill(source.begin(), source.end(), 1.0 / static_cast<double>(d));
    }

    Vec grad_source(d, 0.0);  // d W2² / d source
    double cost = 0.0;
    if (metric == GroundMetric::IndexSpace) {
        const Vec pos = index_positions(d);
        const DiscreteDistribution mu{pos, source};
        const DiscreteDistribution nu{pos, out.target.mass};
        cost = w2_squared(mu, nu);
        grad_source = w2_squared_weight_gradient(mu, nu);
    } else {
        std::vector<std::size_t> src_order(d);
        std::iota(src_order.begin(), src_order.end(), 0);
        std::stable_sort(src_order.begin(), src_order.end(),
                         [&](std::size_t x, std::size_t y) { return source[x] < source[y]; });
        Vec tgt = out.target.mass;
        std::sort(tgt.begin(), tgt.end());
        const double w = 1.0 / static_cast<double>(d);
        for (std::size_t r = 0; r < d; ++r) {
            const double diff = source[src_order[r]] - tgt[r];
            cost += w * diff * diff;
            grad_source[src_order[r]] = 2.0 * w * diff;
        }
    }
    out.value = std::sqrt(std::max(0.0, cost));
    if (out.degenerate || out.value == 0.0) return out;

    // Chain through W2 = sqrt(cost) and source = importance / Σ importance.
    const double outer = 1.0 / (2.0 * out.value);
    double dot = 0.0;
    for (std::size_t j = 0; j < d; ++j) dot += grad_source[j] * source[j];
    for (std::size_t j = 0; j < d; ++j) out.gradient[j] = outer * (grad_source[j] - dot) / total;
    return out;
}

}  // namespace usn
