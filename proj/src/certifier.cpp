#include "usn/certifier.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <thread>

#include "json.hpp"
#include "usn/errors.hpp"
#include "usn/rng.hpp"

namespace usn {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

// Outputs are grouped per keypoint (x, y) behind a soft-argmax head, else one per entry.
std::size_t group_size(const Network& net) { return net.head() ? 2 : 1; }

double group_deviation(std::span<const double> a, std::span<const double> b, std::size_t g, std::size_t size,
                       double q) {
    return output_deviation(a.subspan(g * size, size), b.subspan(g * size, size), q);
}

struct Cell {
    double lower = 0.0;
    double upper = 0.0;
    double bound = 0.0;
    double center_deviation = 0.0;
    Vec group_bounds;
};

class CellEvaluator {
public:
    CellEvaluator(const Network& net, const Image& x0, const PerturbationSpec& spec,
                  const KeypointCriterion& criterion, double c0)
        : net_(net), x0_(x0), spec_(spec), criterion_(criterion), c0_(c0), image_(x0.data.size()) {
        forward(net, x0.data, trace_);
        y0_.assign(trace_.output().begin(), trace_.output().end());
        gsize_ = group_size(net);
    }

    Cell evaluate(double lower, double upper) {
        Cell c;
        c.lower = lower;
        c.upper = upper;
        const double center = 0.5 * (lower + upper);
        apply_unchecked(spec_, x0_.data, center, image_);
        forward(net_, image_, trace_);
        const auto y = trace_.output();
        const double r = c0_ * input_radius_bound(spec_, x0_, 0.5 * (upper - lower));
        c.center_deviation = output_deviation(y, y0_, criterion_.q);
        c.bound = c.center_deviation + r;
        const std::size_t groups = y0_.size() / gsize_;
        c.group_bounds.resize(groups);
        for (std::size_t g = 0; g < groups; ++g)
            c.group_bounds[g] = group_deviation(y, y0_, g, gsize_, criterion_.q) + r;
        return c;
    }

private:
    const Network& net_;
    const Image& x0_;
    const PerturbationSpec& spec_;
    const KeypointCriterion& criterion_;
    double c0_;
    Vec image_;
    Vec y0_;
    ForwardTrace trace_;
    std::size_t gsize_ = 1;
};

}  // namespace

const char* to_string(Verdict v) {
    switch (v) {
        case Verdict::Holds:
            return "Holds";
        case Verdict::Violated:
            return "Violated";
        case Verdict::Unknown:
            break;
    }
    return "Unknown";
}

const char* to_string(CertMethod m) {
    switch (m) {
        case CertMethod::GridLipschitz:
            return "grid-lipschitz";
        case CertMethod::Probabilistic:
            return "probabilistic";
        case CertMethod::SamplingFalsify:
            break;
    }
    return "sampling-falsify";
}

void validate(const KeypointCriterion& c) {
    USN_REQUIRE(c.delta > 0.0, "delta must be positive");
    USN_REQUIRE(c.q == 2.0 || std::isinf(c.q), "only q = 2 and q = infinity are supported");
}

double output_deviation(std::span<const double> a, std::span<const double> b, double q) {
    USN_REQUIRE(a.size() == b.size(), "output sizes differ");
    double acc = 0.0;
    if (std::isinf(q)) {
        for (std::size_t i = 0; i < a.size(); ++i) acc = std::max(acc, std::abs(a[i] - b[i]));
        return acc;
    }
    for (std::size_t i = 0; i < a.size(); ++i) acc += (a[i] - b[i]) * (a[i] - b[i]);
    return std::sqrt(acc);
}

double LipschitzProfile::constant(std::size_t depth) const { return lipschitz_from_norms(norms, head, depth); }

LipschitzProfile lipschitz_profile(const Network& net, const PowerIterationOptions& power) {
    const auto t0 = Clock::now();
    LipschitzProfile p;
    p.norms = layer_spectral_norms(net, power);
    p.head = net.head_lipschitz();
    p.seconds = seconds_since(t0);
    return p;
}

CertificateResult certify_grid(const Network& net, const Image& x0, const PerturbationSpec& spec,
                               const KeypointCriterion& criterion, const GridOptions& options,
                               const LipschitzProfile& profile) {
    const auto t0 = Clock::now();
    validate(spec);
    validate(criterion);
    USN_REQUIRE(options.n_cells >= 1, "n_cells must be at least 1");
    USN_REQUIRE(x0.data.size() == net.input_shape().size(), "image does not match the network input");

    CellEvaluator eval(net, x0, spec, criterion, profile.constant(0) * (1.0 + options.lipschitz_slack));
    const std::size_t start = spec.epsilon == 0.0 ? 1 : options.n_cells;
    const std::size_t budget = std::max(start, options.max_cells);

    auto by_bound = [](const Cell& a, const Cell& b) { return a.bound < b.bound; };
    std::vector<Cell> heap;
    heap.reserve(budget);
    const double width = (spec.upper() - spec.lower()) / static_cast<double>(start);
    bool hopeless = false;
    for (std::size_t c = 0; c < start; ++c) {
        const double lo = spec.lower() + width * static_cast<double>(c);
        const double hi = c + 1 == start ? spec.upper() : spec.lower() + width * static_cast<double>(c + 1);
        heap.push_back(eval.evaluate(lo, hi));
        hopeless = hopeless || heap.back().center_deviation > criterion.delta;
    }
    std::make_heap(heap.begin(), heap.end(), by_bound);

    // Bisect the worst cell while it fails and the budget allows. A centre that already
    // exceeds delta cannot be repaired by refinement.
    while (!hopeless && heap.front().bound > criterion.delta && heap.size() < budget) {
        std::pop_heap(heap.begin(), heap.end(), by_bound);
        const Cell worst = heap.back();
        heap.pop_back();
        const double mid = 0.5 * (worst.lower + worst.upper);
        for (const Cell& child : {eval.evaluate(worst.lower, mid), eval.evaluate(mid, worst.upper)}) {
            heap.push_back(child);
            std::push_heap(heap.begin(), heap.end(), by_bound);
            hopeless = hopeless || child.center_deviation > criterion.delta;
        }
    }

    CertificateResult r;
    r.method = CertMethod::GridLipschitz;
    r.cells = heap.size();
    r.keypoint_bounds.assign(heap.front().group_bounds.size(), 0.0);
    for (const Cell& c : heap) {
        r.bound = std::max(r.bound, c.bound);
        for (std::size_t g = 0; g < c.group_bounds.size(); ++g)
            r.keypoint_bounds[g] = std::max(r.keypoint_bounds[g], c.group_bounds[g]);
    }
    r.margin = criterion.delta - r.bound;
    r.verdict = r.bound <= criterion.delta ? Verdict::Holds : Verdict::Unknown;
    r.wall_time = seconds_since(t0);
    return r;
}

CertificateResult certify_grid(const Network& net, const Image& x0, const PerturbationSpec& spec,
                               const KeypointCriterion& criterion, std::size_t n_cells) {
    return certify_grid(net, x0, spec, criterion, GridOptions{n_cells, n_cells, 1e-6}, lipschitz_profile(net));
}

ProbabilisticBounds probabilistic_bounds(double c, std::size_t d, std::size_t depth, std::size_t num_layers,
                                         double delta, double alpha) {
    USN_REQUIRE(depth >= 1 && depth < num_layers, "depth must lie in [1, L-1]");
    USN_REQUIRE(d >= 1, "layer width must be positive");
    const double dd = static_cast<double>(d);
    const double remaining = static_cast<double>(num_layers - depth);
    ProbabilisticBounds b;
    if (c <= 0.0) {
        b.bias = b.variance = std::numeric_limits<double>::infinity();
        return b;
    }
    b.bias = delta / (2.0 * c * std::sqrt(dd));
    b.variance = alpha * delta * delta / (4.0 * c * c * dd * dd * remaining);
    return b;
}

CertificateResult certify_probabilistic(const Network& net, const Image& x0, std::span<const Image> samples,
                                        const KeypointCriterion& criterion, double alpha,
                                        const LipschitzProfile& profile) {
    const auto t0 = Clock::now();
    validate(criterion);
    USN_REQUIRE(alpha > 0.0 && alpha < 1.0, "alpha must lie in (0, 1)");
    USN_REQUIRE(samples.size() >= 2, "need at least two samples for a variance estimate");
    const std::size_t L = net.num_linear();
    USN_REQUIRE(L >= 2, "probabilistic certificate needs at least two linear layers");

    const ForwardTrace clean = forward(net, x0);
    // Welford running mean and M2 of the deviation per neuron, per layer 1..L-1.
    std::vector<Vec> mean(L - 1), m2(L - 1);
    for (std::size_t k = 0; k + 1 < L; ++k) {
        mean[k].assign(net.linear(k).neurons(), 0.0);
        m2[k].assign(net.linear(k).neurons(), 0.0);
    }
    ForwardTrace t;
    double n = 0.0;
    for (const Image& x : samples) {
        forward(net, x.data, t);
        n += 1.0;
        for (std::size_t k = 0; k + 1 < L; ++k) {
            const auto f = t.pre_activation(k);
            const auto f0 = clean.pre_activation(k);
            for (std::size_t j = 0; j < f.size(); ++j) {
                const double dev = f[j] - f0[j];
                const double delta = dev - mean[k][j];
                mean[k][j] += delta / n;
                m2[k][j] += delta * (dev - mean[k][j]);
            }
        }
    }

    CertificateResult r;
    r.method = CertMethod::Probabilistic;
    r.confidence = 1.0 - alpha;
    r.margin = std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k + 1 < L; ++k) {
        const std::size_t depth = k + 1;
        const ProbabilisticBounds b = probabilistic_bounds(profile.constant(depth), mean[k].size(), depth, L,
                                                           criterion.delta, alpha);
        for (std::size_t j = 0; j < mean[k].size(); ++j) {
            const double bias = std::abs(mean[k][j]);
            const double var = m2[k][j] / (n - 1.0);
            const double slack_bias = std::isinf(b.bias) ? 1.0 : (b.bias - bias) / b.bias;
            const double slack_var = std::isinf(b.variance) ? 1.0 : (b.variance - var) / b.variance;
            const double slack = std::min(slack_bias, slack_var);
            if (slack < r.margin) {
                r.margin = slack;
                r.failing_layer = static_cast<int>(k);
                r.failing_neuron = static_cast<long>(j);
                r.failing_condition = slack_bias <= slack_var ? "bias" : "variance";
            }
        }
    }
    r.verdict = r.margin >= 0.0 ? Verdict::Holds : Verdict::Unknown;
    if (r.verdict == Verdict::Holds) {
        r.failing_layer = -1;
        r.failing_neuron = -1;
        r.failing_condition.clear();
    }
    r.wall_time = seconds_since(t0);
    return r;
}

CertificateResult certify_probabilistic(const Network& net, const Image& x0, const PerturbationSpec& spec,
                                        const KeypointCriterion& criterion, double alpha, std::size_t m,
                                        std::mt19937_64& rng) {
    USN_REQUIRE(m >= 2, "need at least two samples for a variance estimate");
    const auto t0 = Clock::now();
    const PerturbationSamples s = sample(spec, x0, m, rng);
    CertificateResult r = certify_probabilistic(net, x0, s.images, criterion, alpha, lipschitz_profile(net));
    r.wall_time = seconds_since(t0);
    return r;
}

NecessaryBounds usn_necessary_bounds(const LipschitzProfile& profile, std::size_t width, std::size_t depth,
                                     const KeypointCriterion& criterion, double alpha) {
    validate(criterion);
    const std::size_t L = profile.norms.size();
    USN_REQUIRE(depth >= 1 && depth < L, "depth must lie in [1, L-1]");
    USN_REQUIRE(width >= 1, "layer width must be positive");
    const double c = profile.constant(depth);
    const double d = static_cast<double>(width);
    const double delta = criterion.delta;
    NecessaryBounds b;
    b.unbiased = delta * std::sqrt(d) / (2.0 * c);
    b.smooth = delta * delta / (4.0 * c * c) * (alpha / (d * static_cast<double>(L - depth)) + 1.0);
    return b;
}

NecessaryBounds usn_necessary_bounds(const Network& net, std::size_t depth, const KeypointCriterion& criterion,
                                     double alpha) {
    USN_REQUIRE(depth >= 1 && depth < net.num_linear(), "depth must lie in [1, L-1]");
    return usn_necessary_bounds(lipschitz_profile(net), net.linear(depth - 1).neurons(), depth, criterion, alpha);
}

CertificateResult falsify(const Network& net, const Image& x0, const PerturbationSpec& spec,
                          const KeypointCriterion& criterion, std::size_t m, std::mt19937_64& rng) {
    const auto t0 = Clock::now();
    validate(spec);
    USN_REQUIRE(criterion.delta > 0.0, "delta must be positive");
    USN_REQUIRE(m >= 1, "need at least one sample");
    ForwardTrace t;
    forward(net, x0.data, t);
    const Vec y0(t.output().begin(), t.output().end());
    Vec image(x0.data.size());

    CertificateResult r;
    r.method = CertMethod::SamplingFalsify;
    auto probe = [&](double s) {
        apply_unchecked(spec, x0.data, s, image);
        forward(net, image, t);
        const double dev = output_deviation(t.output(), y0, criterion.q);
        if (dev > r.max_deviation || !r.witness) {
            r.max_deviation = dev;
            r.witness = s;
        }
        return dev > criterion.delta;
    };
    bool violated = probe(spec.lower()) || probe(spec.upper());
    std::uniform_real_distribution<double> dist(spec.lower(), spec.upper());
    for (std::size_t k = 0; k < m && !violated; ++k) violated = probe(spec.epsilon > 0.0 ? dist(rng) : spec.center());
    r.verdict = violated ? Verdict::Violated : Verdict::Unknown;
    if (!violated) r.witness.reset();
    r.margin = criterion.delta - r.max_deviation;
    r.wall_time = seconds_since(t0);
    return r;
}

// Campaign --------------------------------------------------------------------------------

namespace {

VerdictRecord certify_one(const Network& net, const LipschitzProfile& profile, const LabeledImage& item,
                          const PerturbationSpec& spec, const CampaignConfig& cfg, std::uint64_t stream) {
    VerdictRecord rec;
    rec.image_id = item.id;
    rec.spec = spec.label();
    const auto t0 = Clock::now();
    const CertificateResult grid = certify_grid(net, item.image, spec, cfg.criterion, cfg.grid, profile);
    rec.verdict = grid.verdict;
    rec.method = grid.method;
    rec.margin = grid.margin;
    rec.cells = grid.cells;
    if (grid.verdict != Verdict::Holds && cfg.falsify_samples > 0) {
        std::mt19937_64 rng = make_rng({cfg.seed, stream, 0xfa15});
        const CertificateResult f = falsify(net, item.image, spec, cfg.criterion, cfg.falsify_samples, rng);
        if (f.verdict == Verdict::Violated) {
            rec.verdict = Verdict::Violated;
            rec.method = CertMethod::SamplingFalsify;
            rec.margin = f.margin;
        }
    }
    rec.time = seconds_since(t0);

    const Vec pred = predict(net, item.image.data);
    if (net.head() && item.keypoints.size() == pred.size()) {
        for (std::size_t k = 0; k < grid.keypoint_bounds.size(); ++k) {
            const double dx = pred[2 * k] - item.keypoints[2 * k];
            const double dy = pred[2 * k + 1] - item.keypoints[2 * k + 1];
            const bool correct = std::hypot(dx, dy) <= cfg.correct_tolerance;
            const bool verified = grid.keypoint_bounds[k] <= cfg.criterion.delta;
            rec.keypoints_correct += correct;
            rec.keypoints_verified += verified;
            rec.keypoints_correct_and_verified += correct && verified;
        }
    }

    if (cfg.run_probabilistic && net.num_linear() >= 2) {
        std::mt19937_64 rng = make_rng({cfg.seed, stream, 0x9b0b});
        const PerturbationSamples s = sample(spec, item.image, cfg.probabilistic_samples, rng);
        rec.probabilistic =
            certify_probabilistic(net, item.image, s.images, cfg.criterion, cfg.alpha, profile).verdict;
    }
    return rec;
}

}  // namespace

CampaignSummary summarize(std::span<const VerdictRecord> records, const std::string& net, const std::string& spec) {
    CampaignSummary s;
    s.net = net;
    s.spec = spec;
    double time = 0.0;
    for (const VerdictRecord& r : records) {
        if (r.net != net || r.spec != spec) continue;
        ++s.images;
        s.holds += r.verdict == Verdict::Holds;
        s.violated += r.verdict == Verdict::Violated;
        s.unknown += r.verdict == Verdict::Unknown;
        s.keypoints_correct += r.keypoints_correct;
        s.keypoints_correct_and_verified += r.keypoints_correct_and_verified;
        s.probabilistic_holds += r.probabilistic == Verdict::Holds;
        time += r.time;
    }
    if (s.images > 0) {
        s.accuracy = static_cast<double>(s.holds) / static_cast<double>(s.images);
        s.mean_time = time / static_cast<double>(s.images);
    }
    return s;
}

CampaignReport campaign(std::span<const CampaignNet> nets, std::span<const LabeledImage> test_set,
                        std::span<const PerturbationSpec> specs, const CampaignConfig& config) {
    USN_REQUIRE(!test_set.empty(), "test set is empty");
    validate(config.criterion);
    CampaignReport report;
    report.criterion = config.criterion;
    report.config = config;
    for (const CampaignNet& cn : nets) {
        USN_REQUIRE(cn.net != nullptr, "campaign net is null");
        const Network& net = *cn.net;
        const LipschitzProfile profile = lipschitz_profile(net);
        std::size_t active_params = 0;
        for (std::size_t k = 0; k < net.num_linear(); ++k)
            for (double w : net.linear(k).weights) active_params += w != 0.0;
        for (std::size_t si = 0; si < specs.size(); ++si) {
            std::vector<VerdictRecord> recs(test_set.size());
            std::atomic<std::size_t> next{0};
            auto worker = [&] {
                for (std::size_t i = next++; i < test_set.size(); i = next++) {
                    recs[i] = certify_one(net, profile, test_set[i], specs[si], config, si * test_set.size() + i);
                    recs[i].net = cn.name;
                }
            };
            const std::size_t jobs = std::clamp<std::size_t>(config.jobs, 1, test_set.size());
            std::vector<std::thread> pool;
            for (std::size_t j = 1; j < jobs; ++j) pool.emplace_back(worker);
            worker();
            for (auto& th : pool) th.join();
            report.records.insert(report.records.end(), recs.begin(), recs.end());
            CampaignSummary s = summarize(report.records, cn.name, specs[si].label());
            s.profile_time = profile.seconds;
            s.parameters = active_params;
            const std::size_t kps = net.head() ? static_cast<std::size_t>(net.head()->keypoints) : 0;
            s.keypoints_total = kps * test_set.size();
            report.summaries.push_back(s);
        }
    }
    return report;
}

void write_verdicts_csv(std::ostream& out, const CampaignReport& report) {
    out << "net,image_id,spec,verdict,method,margin,time,cells,keypoints_correct,keypoints_verified,"
           "keypoints_correct_and_verified,probabilistic\n";
    char buf[512];
    for (const VerdictRecord& r : report.records) {
        std::snprintf(buf, sizeof buf, "%s,%s,%s,%s,%s,%.9g,%.9g,%zu,%zu,%zu,%zu,%s\n", r.net.c_str(),
                      r.image_id.c_str(), r.spec.c_str(), to_string(r.verdict), to_string(r.method), r.margin,
                      r.time, r.cells, r.keypoints_correct, r.keypoints_verified, r.keypoints_correct_and_verified,
                      r.probabilistic ? to_string(*r.probabilistic) : "");
        out << buf;
    }
}

std::string summary_json(const CampaignReport& report) {
    using nlohmann::json;
    const CampaignConfig& c = report.config;
    json j;
    j["criterion"] = {{"delta", c.criterion.delta}, {"q", std::isinf(c.criterion.q) ? json("inf") : json(c.criterion.q)}};
    j["config"] = {{"grid_cells", c.grid.n_cells},
                   {"grid_max_cells", c.grid.max_cells},
                   {"correct_tolerance", c.correct_tolerance},
                   {"falsify_samples", c.falsify_samples},
                   {"probabilistic", c.run_probabilistic},
                   {"alpha", c.alpha},
                   {"probabilistic_samples", c.probabilistic_samples},
                   {"seed", c.seed}};
    json rows = json::array();
    for (const CampaignSummary& s : report.summaries) {
        rows.push_back({{"net", s.net},
                        {"spec", s.spec},
                        {"images", s.images},
                        {"holds", s.holds},
                        {"violated", s.violated},
                        {"unknown", s.unknown},
                        {"accuracy", s.accuracy},
                        {"mean_time", s.mean_time},
                        {"profile_time", s.profile_time},
                        {"keypoints_total", s.keypoints_total},
                        {"keypoints_correct", s.keypoints_correct},
                        {"keypoints_correct_and_verified", s.keypoints_correct_and_verified},
                        {"probabilistic_holds", s.probabilistic_holds},
                        {"parameters", s.parameters}});
    }
    j["summaries"] = std::move(rows);
    return j.dump(2);
}

}  // namespace usn
