#include "doctest.h"

#include <algorithm>
#include <sstream>

#include "json.hpp"

#include "test_util.hpp"
#include "usn/certifier.hpp"
#include "usn/errors.hpp"
#include "usn/usn_metrics.hpp"

using namespace usn;
using namespace usn::testing;

namespace {

Network identity_dense(int n) {
    Network net(Shape{1, 1, n}, {LayerSpec::dense(n, n)});
    LinearLayer& lin = net.linear_mut(0);
    for (int i = 0; i < n; ++i) lin.weights[static_cast<std::size_t>(i) * n + i] = 1.0;
    return net;
}

// Two identity layers with a ReLU in between; inputs stay positive so it is the identity map.
Network identity_two_layer(int n) {
    Network net(Shape{1, 1, n}, {LayerSpec::dense(n, n), LayerSpec::relu(), LayerSpec::dense(n, n)});
    for (std::size_t k = 0; k < 2; ++k) {
        LinearLayer& lin = net.linear_mut(k);
        for (int i = 0; i < n; ++i) lin.weights[static_cast<std::size_t>(i) * n + i] = 1.0;
    }
    return net;
}

// Identity heatmap followed by a soft-argmax head on a side x side map.
Network identity_head(int side) {
    const int n = side * side;
    Network net(Shape{1, side, side}, {LayerSpec::dense(n, n), LayerSpec::soft_argmax(1, side, side)});
    LinearLayer& lin = net.linear_mut(0);
    for (int i = 0; i < n; ++i) lin.weights[static_cast<std::size_t>(i) * n + i] = 1.0;
    return net;
}

Vec closed_form_keypoint(const Vec& h, int side) {
    double z = 0, x = 0, y = 0;
    for (int q = 0; q < side * side; ++q) {
        const double w = std::exp(h[q]);
        z += w;
        x += w * (q % side);
        y += w * (q / side);
    }
    return {x / z, y / z};
}

}  // namespace

TEST_CASE("certify_grid: zero radius holds with margin delta") {
    std::mt19937_64 rng(1);
    Network net = random_conv_head_net(rng);
    const Image x0 = random_image(rng, net.input_shape());
    const KeypointCriterion crit{0.5};
    const CertificateResult r = certify_grid(net, x0, {PerturbationKind::Brightness, 0.0}, crit, 8);
    CHECK(r.verdict == Verdict::Holds);
    CHECK(r.margin == doctest::Approx(0.5));
    CHECK(r.method == CertMethod::GridLipschitz);

    const CertificateResult p =
        certify_probabilistic(net, x0, {PerturbationKind::Contrast, 0.0}, crit, 0.01, 16, rng);
    CHECK(p.verdict == Verdict::Holds);
    CHECK(p.confidence == doctest::Approx(0.99));
    CHECK(falsify(net, x0, {PerturbationKind::Brightness, 0.0}, crit, 10, rng).verdict == Verdict::Unknown);
}

TEST_CASE("certify_grid: identity network holds once delta exceeds the pixel-norm bound") {
    const Network net = identity_dense(16);
    const Image x0(Shape{1, 1, 16}, 0.5);
    const double eps = 0.02;
    // Single cell: centre deviation 0 plus C_0 = 1 times eps * sqrt(16).
    const double bound = eps * 4.0;
    const CertificateResult ok = certify_grid(net, x0, {PerturbationKind::Brightness, eps}, {bound * 1.001}, 1);
    CHECK(ok.verdict == Verdict::Holds);
    CHECK(ok.bound == doctest::Approx(bound).epsilon(1e-5));
    const CertificateResult no = certify_grid(net, x0, {PerturbationKind::Brightness, eps}, {bound * 0.9}, 1);
    CHECK(no.verdict == Verdict::Unknown);
}

TEST_CASE("certify_grid: adaptive refinement tightens the bound") {
    const Network net = identity_dense(16);
    const Image x0(Shape{1, 1, 16}, 0.5);
    const double eps = 0.02;
    // True worst deviation is eps; the single-cell bound is 4 eps.
    const KeypointCriterion crit{eps * 1.5};
    const LipschitzProfile prof = lipschitz_profile(net);
    CHECK(certify_grid(net, x0, {PerturbationKind::Brightness, eps}, crit, GridOptions{1, 1}, prof).verdict ==
          Verdict::Unknown);
    const CertificateResult r =
        certify_grid(net, x0, {PerturbationKind::Brightness, eps}, crit, GridOptions{1, 64}, prof);
    CHECK(r.verdict == Verdict::Holds);
    CHECK(r.cells <= 64);
    CHECK(r.cells > 1);
}

TEST_CASE("certify_grid: never Holds where sampling finds a violation") {
    std::mt19937_64 rng(2);
    int holds = 0, violated = 0;
    for (int n = 0; n < 200; ++n) {
        Network net = random_conv_head_net(rng, 6, 3, 3, 0.3 + 0.1 * (n % 4));
        const Image x0 = random_image(rng, net.input_shape(), 0.0, 1.0);
        const PerturbationSpec spec{n % 2 ? PerturbationKind::Brightness : PerturbationKind::Contrast,
                                    std::uniform_real_distribution<double>(0.001, 0.08)(rng)};
        const KeypointCriterion crit{std::uniform_real_distribution<double>(0.002, 0.2)(rng)};
        const CertificateResult g = certify_grid(net, x0, spec, crit, GridOptions{4, 32},
                                                 lipschitz_profile(net));
        const CertificateResult f = falsify(net, x0, spec, crit, 2000, rng);
        CHECK(g.verdict != Verdict::Violated);
        if (g.verdict == Verdict::Holds) {
            ++holds;
            CHECK(f.verdict != Verdict::Violated);
            CHECK(f.max_deviation <= g.bound);
        }
        violated += f.verdict == Verdict::Violated;
    }
    CHECK(holds > 10);
    CHECK(violated > 10);
}

TEST_CASE("certify_grid: margin grows when the cell count doubles") {
    std::mt19937_64 rng(3);
    for (int n = 0; n < 30; ++n) {
        Network net = random_conv_head_net(rng);
        const Image x0 = random_image(rng, net.input_shape(), 0.0, 1.0);
        const PerturbationSpec spec{PerturbationKind::Contrast, 0.05};
        const LipschitzProfile prof = lipschitz_profile(net);
        double prev = -1e300;
        for (std::size_t cells : {1, 2, 4, 8, 16, 32}) {
            const CertificateResult r = certify_grid(net, x0, spec, {0.1}, GridOptions{cells, cells}, prof);
            CHECK(r.margin >= prev - 1e-12);
            prev = r.margin;
        }
    }
}

TEST_CASE("certify_grid: holding at eps implies holding at a smaller radius") {
    std::mt19937_64 rng(4);
    int checked = 0;
    for (int n = 0; n < 60; ++n) {
        Network net = random_conv_head_net(rng);
        const Image x0 = random_image(rng, net.input_shape(), 0.0, 1.0);
        const double eps = std::uniform_real_distribution<double>(0.005, 0.05)(rng);
        const KeypointCriterion crit{std::uniform_real_distribution<double>(0.01, 0.3)(rng)};
        const LipschitzProfile prof = lipschitz_profile(net);
        const auto big = certify_grid(net, x0, {PerturbationKind::Brightness, eps}, crit, GridOptions{16, 16}, prof);
        const auto small =
            certify_grid(net, x0, {PerturbationKind::Brightness, eps / 2}, crit, GridOptions{8, 8}, prof);
        CHECK(small.bound <= big.bound + 1e-12);
        if (big.verdict == Verdict::Holds) {
            CHECK(small.verdict == Verdict::Holds);
            ++checked;
        }
    }
    CHECK(checked > 0);
}

TEST_CASE("certify_probabilistic: hand-constructed bias violation names the neuron") {
    const int d = 4;
    const Network net = identity_two_layer(d);
    const Image x0(Shape{1, 1, d}, 0.5);
    const KeypointCriterion crit{1.0};
    // C_1 = ‖W²‖ = 1, so the bias threshold is delta / (2 sqrt(d)) = 0.25.
    std::vector<Image> samples(3, x0);
    for (Image& s : samples) s.data[2] += 0.4;
    const CertificateResult r = certify_probabilistic(net, x0, samples, crit, 0.01, lipschitz_profile(net));
    CHECK(r.verdict == Verdict::Unknown);
    CHECK(r.failing_layer == 0);
    CHECK(r.failing_neuron == 2);
    CHECK(r.failing_condition == "bias");
    CHECK(r.margin == doctest::Approx((0.25 - 0.4) / 0.25).epsilon(1e-6));

    std::vector<Image> fine(3, x0);
    for (Image& s : fine) s.data[2] += 0.2;
    CHECK(certify_probabilistic(net, x0, fine, crit, 0.01, lipschitz_profile(net)).verdict == Verdict::Holds);

    CHECK_THROWS_AS(certify_probabilistic(net, x0, std::span<const Image>(fine.data(), 1), crit, 0.01,
                                          lipschitz_profile(net)),
                    ContractError);
    CHECK_THROWS_AS(certify_probabilistic(net, x0, fine, crit, 1.0, lipschitz_profile(net)), ContractError);
}

TEST_CASE("probabilistic_bounds: Chebyshev budget on Gaussian neurons") {
    const double c = 1.3, delta = 1.0, alpha = 0.3;
    const std::size_t d = 2, L = 2, depth = 1;
    const ProbabilisticBounds b = probabilistic_bounds(c, d, depth, L, delta, alpha);
    CHECK(b.bias == doctest::Approx(delta / (2 * c * std::sqrt(2.0))));
    CHECK(b.variance == doctest::Approx(alpha * delta * delta / (4 * c * c * 4 * 1)));

    // Worst case allowed by the variance bound; Chebyshev caps the exceedance rate.
    std::mt19937_64 rng(5);
    std::normal_distribution<double> g(0.0, std::sqrt(b.variance));
    const std::size_t n = 200000;
    std::size_t exceed = 0;
    for (std::size_t i = 0; i < n; ++i) exceed += std::abs(g(rng)) >= b.bias;
    const double budget = alpha / static_cast<double>(d * (L - depth));
    const double freq = static_cast<double>(exceed) / n;
    CHECK(freq <= budget + 3 * std::sqrt(budget * (1 - budget) / n));
}

TEST_CASE("usn_necessary_bounds: plug-in and limit cases") {
    const Network net = identity_two_layer(4);
    const NecessaryBounds b = usn_necessary_bounds(net, 1, {1.0}, 0.01);
    CHECK(b.unbiased == doctest::Approx(1.0).epsilon(1e-6));
    CHECK(b.smooth == doctest::Approx(0.25 * (0.01 / 4 + 1)).epsilon(1e-6));
    const NecessaryBounds tiny = usn_necessary_bounds(net, 1, {1.0}, 1e-12);
    CHECK(tiny.smooth == doctest::Approx(0.25).epsilon(1e-6));
    CHECK_THROWS_AS(usn_necessary_bounds(net, 2, {1.0}, 0.01), ContractError);
}

TEST_CASE("usn_necessary_bounds: exceeding the smooth bound means the certificate fails") {
    std::mt19937_64 rng(6);
    int exceeded = 0;
    for (int n = 0; n < 60; ++n) {
        Network net = random_dense_net(rng, {9, 8, 6, 4});
        const Image x0 = random_image(rng, Shape{1, 1, 9}, 0.2, 0.8);
        const PerturbationSpec spec{PerturbationKind::Brightness,
                                    std::uniform_real_distribution<double>(0.0005, 0.05)(rng)};
        const KeypointCriterion crit{std::uniform_real_distribution<double>(0.01, 1.0)(rng)};
        const double alpha = 0.05;
        const PerturbationSamples s = sample(spec, x0, 64, rng);
        const LipschitzProfile prof = lipschitz_profile(net);
        const CertificateResult r = certify_probabilistic(net, x0, s.images, crit, alpha, prof);
        for (std::size_t depth = 1; depth < net.num_linear(); ++depth) {
            const std::size_t width = net.linear(depth - 1).neurons();
            const NecessaryBounds nb = usn_necessary_bounds(prof, width, depth, crit, alpha);
            const LayerMetrics lm = layer_metrics(net, x0, s.images, depth - 1);
            const double jensen_gap =
                std::sqrt(1.0 + alpha / (static_cast<double>(width) * (net.num_linear() - depth)));
            if (lm.smooth > nb.smooth || lm.unbiased > nb.unbiased * jensen_gap) {
                ++exceeded;
                CHECK(r.verdict == Verdict::Unknown);
            }
        }
    }
    CHECK(exceeded > 0);
}

TEST_CASE("falsify: vacuous criterion, closed-form witness and replay") {
    const int side = 3;
    const Network net = identity_head(side);
    Image x0(Shape{1, side, side}, 0.5);
    x0.data[0] = 1.0;
    const double eps = 0.2;
    const PerturbationSpec spec{PerturbationKind::Brightness, eps};
    std::mt19937_64 rng(7);

    CHECK(falsify(net, x0, spec, {std::numeric_limits<double>::infinity()}, 500, rng).verdict ==
          Verdict::Unknown);

    const Vec k0 = closed_form_keypoint(x0.data, side);
    double worst = 0.0;
    for (double s : {-eps, eps}) {
        Vec h = x0.data;
        for (double& v : h) v = std::clamp(v + s, 0.0, 1.0);
        const Vec k = closed_form_keypoint(h, side);
        worst = std::max({worst, std::abs(k[0] - k0[0]), std::abs(k[1] - k0[1])});
    }
    const KeypointCriterion crit{0.9 * worst};
    const CertificateResult r = falsify(net, x0, spec, crit, 100, rng);
    REQUIRE(r.verdict == Verdict::Violated);
    REQUIRE(r.witness.has_value());
    CHECK(std::abs(*r.witness) == doctest::Approx(eps));

    const Image xw = apply(spec, x0, *r.witness);
    const double replay = output_deviation(predict(net, xw.data), predict(net, x0.data), crit.q);
    CHECK(replay > crit.delta);
    CHECK(replay == doctest::Approx(r.max_deviation));
}

TEST_CASE("campaign: bookkeeping, reports and determinism") {
    std::mt19937_64 rng(8);
    Network a = random_conv_head_net(rng);
    Network b = random_conv_head_net(rng);
    std::vector<LabeledImage> test;
    for (int i = 0; i < 6; ++i)
        test.push_back({"img" + std::to_string(i), random_image(rng, a.input_shape()), Vec{1.0, 1.0}});
    const std::vector<PerturbationSpec> specs = {{PerturbationKind::Brightness, 0.0},
                                                 {PerturbationKind::Contrast, 0.05}};
    const std::vector<CampaignNet> nets = {{"a", &a}, {"b", &b}};
    CampaignConfig cfg;
    cfg.criterion = {0.05};
    cfg.grid = {4, 16};
    cfg.run_probabilistic = true;
    cfg.probabilistic_samples = 16;
    cfg.seed = 3;
    const CampaignReport rep = campaign(nets, test, specs, cfg);
    REQUIRE(rep.records.size() == 2 * 2 * 6);
    REQUIRE(rep.summaries.size() == 4);
    for (const CampaignSummary& s : rep.summaries) {
        const CampaignSummary again = summarize(rep.records, s.net, s.spec);
        CHECK(again.holds == s.holds);
        CHECK(again.accuracy == s.accuracy);
        CHECK(s.accuracy == static_cast<double>(s.holds) / 6.0);
        CHECK(s.keypoints_total == 6);
        if (s.spec == specs[0].label()) CHECK(s.accuracy == 1.0);
    }

    cfg.jobs = 3;
    const CampaignReport rep3 = campaign(nets, test, specs, cfg);
    for (std::size_t i = 0; i < rep.records.size(); ++i) {
        CHECK(rep.records[i].image_id == rep3.records[i].image_id);
        CHECK(rep.records[i].verdict == rep3.records[i].verdict);
        CHECK(rep.records[i].margin == rep3.records[i].margin);
        CHECK(rep.records[i].probabilistic == rep3.records[i].probabilistic);
    }

    std::ostringstream csv;
    write_verdicts_csv(csv, rep);
    const std::string text = csv.str();
    CHECK(static_cast<std::size_t>(std::count(text.begin(), text.end(), '\n')) == rep.records.size() + 1);
    const auto j = nlohmann::json::parse(summary_json(rep));
    CHECK(j["summaries"].size() == 4);
    CHECK(j["config"]["alpha"].get<double>() == 0.01);

    CHECK_THROWS_AS(campaign(nets, std::span<const LabeledImage>(), specs, cfg), ContractError);
}
