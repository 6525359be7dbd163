#include "usn/usn_metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "usn/errors.hpp"

namespace usn {

namespace {

void check_set(std::span<const double> clean, const PreActivationSet& perturbed) {
    USN_REQUIRE(!perturbed.empty(), "sample set is empty");
    for (const auto& p : perturbed)
        USN_REQUIRE(p.size() == clean.size(), "perturbed pre-activation has the wrong width");
}

struct TracedSet {
    std::vector<ForwardTrace> traces;
    ForwardTrace clean;
    PreActivationSet view(std::size_t layer) const {
        PreActivationSet v;
        for (const auto& t : traces) v.push_back(t.pre_activation(layer));
        return v;
    }
};

TracedSet trace_all(const Network& net, const Image& x0, std::span<const Image> samples,
                    std::size_t layer) {
    USN_REQUIRE(layer < net.num_linear(), "layer index out of range");
    TracedSet s;
    s.clean = forward(net, x0);
    s.traces.reserve(samples.size());
    for (const Image& x : samples) s.traces.push_back(forward(net, x));
    return s;
}

}  // namespace

LayerMetrics layer_metrics(std::span<const double> clean, const PreActivationSet& perturbed) {
    check_set(clean, perturbed);
    LayerMetrics out;
    for (const auto& p : perturbed) {
        double l1 = 0.0;
        double l2 = 0.0;
        for (std::size_t j = 0; j < clean.size(); ++j) {
            const double d = p[j] - clean[j];
            l1 += std::abs(d);
            l2 += d * d;
        }
        out.unbiased += l1;
        out.smooth += l2;
    }
    const double m = static_cast<double>(perturbed.size());
    out.unbiased /= m;
    out.smooth /= m;
    return out;
}

LayerMetrics layer_metrics(const Network& net, const Image& x0, std::span<const Image> samples,
                           std::size_t layer) {
    USN_REQUIRE(!samples.empty(), "sample set is empty");
    const TracedSet s = trace_all(net, x0, samples, layer);
    return layer_metrics(s.clean.pre_activation(layer), s.view(layer));
}

NeuronContributions neuron_contributions(std::span<const double> clean,
                                         const PreActivationSet& perturbed) {
    check_set(clean, perturbed);
    USN_REQUIRE(perturbed.size() >= 2, "need at least two samples for a variance estimate");
    const std::size_t d = clean.size();
    const double m = static_cast<double>(perturbed.size());
    NeuronContributions out;
    out.sample_count = perturbed.size();
    out.mean_deviation.assign(d, 0.0);
    out.variance.assign(d, 0.0);
    for (const auto& p : perturbed)
        for (std::size_t j = 0; j < d; ++j) out.mean_deviation[j] += p[j] - clean[j];
    for (double& v : out.mean_deviation) v /= m;
    for (const auto& p : perturbed)
        for (std::size_t j = 0; j < d; ++j) {
            const double c = (p[j] - clean[j]) - out.mean_deviation[j];
            out.variance[j] += c * c;
        }
    out.unbiased.resize(d);
    out.smooth.resize(d);
    for (std::size_t j = 0; j < d; ++j) {
        out.variance[j] /= m;
        out.unbiased[j] = std::abs(out.mean_deviation[j]);
        out.smooth[j] = out.variance[j] + out.mean_deviation[j] * out.mean_deviation[j];
    }
    return out;
}

NeuronContributions neuron_contributions(const Network& net, const Image& x0,
                                         std::span<const Image> samples, std::size_t layer) {
    USN_REQUIRE(samples.size() >= 2, "need at least two samples for a variance estimate");
    const TracedSet s = trace_all(net, x0, samples, layer);
    return neuron_contributions(s.clean.pre_activation(layer), s.view(layer));
}

Vec importance(std::span<const double> per_neuron_unbiased, std::span<const double> per_neuron_smooth,
               double eps_usn, std::size_t layer_width) {
    USN_REQUIRE(eps_usn >= 0.0, "eps_usn must be non-negative");
    USN_REQUIRE(layer_width >= 1, "layer width must be positive");
    USN_REQUIRE(per_neuron_unbiased.size() == per_neuron_smooth.size(), "per-neuron arrays differ in length");
    const double d = static_cast<double>(layer_width);
    Vec out(per_neuron_smooth.size());
    for (std::size_t j = 0; j < out.size(); ++j) {
        const double u = per_neuron_unbiased[j];
        const double s = per_neuron_smooth[j];
        out[j] = s == 0.0 ? 0.0 : s / ((u * u + eps_usn) * d);
    }
    return out;
}

Vec channel_importance(std::span<const double> neuron_importance, std::span<const int> channel_of) {
    USN_REQUIRE(neuron_importance.size() == channel_of.size(), "channel map must cover every neuron");
    int n_channels = 0;
    for (int c : channel_of) {
        USN_REQUIRE(c >= 0, "channel map has a negative channel id");
        n_channels = std::max(n_channels, c + 1);
    }
    Vec sum(n_channels, 0.0);
    std::vector<std::size_t> count(n_channels, 0);
    for (std::size_t n = 0; n < channel_of.size(); ++n) {
        sum[channel_of[n]] += neuron_importance[n];
        ++count[channel_of[n]];
    }
    for (int c = 0; c < n_channels; ++c) {
        USN_REQUIRE(count[c] > 0, "channel map is not a partition: channel " + std::to_string(c) + " is empty");
        sum[c] /= static_cast<double>(count[c]);
    }
    return sum;
}

UsnStats zero_stats(std::size_t layer, std::size_t width, double eps_usn) {
    UsnStats s;
    s.layer = layer;
    s.eps_usn = eps_usn;
    s.per_neuron_unbiased.assign(width, 0.0);
    s.per_neuron_smooth.assign(width, 0.0);
    s.per_neuron_variance.assign(width, 0.0);
    s.importance.assign(width, 0.0);
    return s;
}

UsnStats stats_from_pre_activations(std::size_t layer, std::span<const double> clean,
                                    const PreActivationSet& perturbed, double eps_usn) {
    const NeuronContributions nc = neuron_contributions(clean, perturbed);
    const LayerMetrics lm = layer_metrics(clean, perturbed);
    UsnStats s;
    s.layer = layer;
    s.eps_usn = eps_usn;
    s.unbiased = lm.unbiased;
    s.smooth = lm.smooth;
    s.per_neuron_unbiased = nc.unbiased;
    s.per_neuron_smooth = nc.smooth;
    s.per_neuron_variance = nc.variance;
    s.sample_count = nc.sample_count;
    s.importance = importance(s.per_neuron_unbiased, s.per_neuron_smooth, eps_usn, clean.size());
    return s;
}

UsnStats usn_stats(const Network& net, const Image& x0, std::span<const Image> samples,
                   std::size_t layer, double eps_usn) {
    USN_REQUIRE(samples.size() >= 2, "need at least two samples for a variance estimate");
    const TracedSet t = trace_all(net, x0, samples, layer);
    return stats_from_pre_activations(layer, t.clean.pre_activation(layer), t.view(layer), eps_usn);
}

UsnStats accumulate(const UsnStats& running, const UsnStats& batch) {
    USN_REQUIRE(running.layer == batch.layer, "layer mismatch");
    USN_REQUIRE(running.width() == batch.width(), "layer width mismatch");
    if (running.sample_count == 0) return batch;
    if (batch.sample_count == 0) return running;
    const double n = static_cast<double>(running.sample_count + batch.sample_count);
    const double wa = static_cast<double>(running.sample_count) / n;
    const double wb = static_cast<double>(batch.sample_count) / n;
    UsnStats out = zero_stats(running.layer, running.width(), running.eps_usn);
    out.sample_count = running.sample_count + batch.sample_count;
    out.unbiased = wa * running.unbiased + wb * batch.unbiased;
    out.smooth = wa * running.smooth + wb * batch.smooth;
    for (std::size_t j = 0; j < out.width(); ++j) {
        out.per_neuron_unbiased[j] = wa * running.per_neuron_unbiased[j] + wb * batch.per_neuron_unbiased[j];
        out.per_neuron_smooth[j] = wa * running.per_neuron_smooth[j] + wb * batch.per_neuron_smooth[j];
        out.per_neuron_variance[j] = wa * running.per_neuron_variance[j] + wb * batch.per_neuron_variance[j];
    }
    out.importance = importance(out.per_neuron_unbiased, out.per_neuron_smooth, out.eps_usn, out.width());
    return out;
}

void reset(UsnStats& stats) { stats = zero_stats(stats.layer, stats.width(), stats.eps_usn); }

void write_stats_csv(std::ostream& out, std::span<const UsnStats> stats,
                     std::span<const std::vector<int>> channel_maps, bool header) {
    if (header) out << "layer,neuron,channel,unbiased,smooth,variance,importance\n";
    char buf[256];
    for (std::size_t s = 0; s < stats.size(); ++s) {
        const UsnStats& st = stats[s];
        for (std::size_t j = 0; j < st.width(); ++j) {
            const int ch = s < channel_maps.size() && j < channel_maps[s].size() ? channel_maps[s][j]
                                                                                 : static_cast<int>(j);
            std::snprintf(buf, sizeof buf, "%zu,%zu,%d,%.17g,%.17g,%.17g,%.17g\n", st.layer, j, ch,
                          st.per_neuron_unbiased[j], st.per_neuron_smooth[j], st.per_neuron_variance[j],
                          st.importance[j]);
            out << buf;
        }
    }
}

}  // namespace usn
