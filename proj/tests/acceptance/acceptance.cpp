// Acceptance checks. `acceptance core` runs criteria 1-6, `acceptance benchmark` runs the
// synthetic keypoint sweep and criteria 7-9. One PASS/FAIL line per criterion; the exit
// code is non-zero when any criterion fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"

#include "lp_oracle.hpp"
#include "test_util.hpp"
#include "usn/certifier.hpp"
#include "usn/errors.hpp"
#include "usn/experiment.hpp"
#include "usn/network.hpp"
#include "usn/perturbation.hpp"
#include "usn/pruning.hpp"
#include "usn/usn_metrics.hpp"
#include "usn/wasserstein.hpp"

using namespace usn;
using namespace usn::testing;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Criterion {
    std::string id;
    std::string title;
    std::function<Outcome()> run;
};

std::string format(const char* f, auto... args) {
    char buf[512];
    std::snprintf(buf, sizeof buf, f, args...);
    return buf;
}

int run_all(const std::vector<Criterion>& criteria) {
    int failed = 0;
    for (const Criterion& c : criteria) {
        const auto t0 = std::chrono::steady_clock::now();
        Outcome o;
        try {
            o = c.run();
        } catch (const std::exception& e) {
            o = {false, std::string("exception: ") + e.what()};
        }
        const double s = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        std::printf("criterion %-3s %s  %s: %s (%.1f s)\n", c.id.c_str(), o.pass ? "PASS" : "FAIL", c.title.c_str(),
                    o.detail.c_str(), s);
        std::fflush(stdout);
        failed += !o.pass;
    }
    return failed == 0 ? 0 : 1;
}

Network random_net(std::mt19937_64& rng, int n) {
    switch (n % 4) {
        case 0: return random_dense_net(rng, {6, 8, 8, 4});
        case 1: return random_dense_net(rng, {5, 7, 3});
        case 2: return random_conv_head_net(rng, 6, 3, 3);
        default: return random_conv_head_net(rng, 8, 2, 4, 0.3);
    }
}

Image random_input(std::mt19937_64& rng, const Network& net) { return random_image(rng, net.input_shape(), 0.0, 1.0); }

PerturbationSpec random_spec(std::mt19937_64& rng, double lo, double hi) {
    const double eps = std::exp(std::uniform_real_distribution<double>(std::log(lo), std::log(hi))(rng));
    return {rng() % 2 ? PerturbationKind::Brightness : PerturbationKind::Contrast, eps};
}

// 1 -------------------------------------------------------------------------------------

Outcome decomposition_identity() {
    std::mt19937_64 rng(101);
    double worst = 0.0;
    std::size_t layers = 0, jensen_violations = 0;
    for (int n = 0; n < 50; ++n) {
        const Network net = random_net(rng, n);
        const Image x0 = random_input(rng, net);
        const PerturbationSpec spec = random_spec(rng, 1e-3, 0.2);
        const std::vector<Image> samples = sample(spec, x0, 8 + n % 40, rng).images;
        for (std::size_t k = 0; k < net.num_linear(); ++k) {
            const LayerMetrics lm = layer_metrics(net, x0, samples, k);
            const NeuronContributions nc = neuron_contributions(net, x0, samples, k);
            double sum = 0.0, bias = 0.0;
            for (std::size_t j = 0; j < nc.variance.size(); ++j) {
                sum += nc.variance[j] + nc.unbiased[j] * nc.unbiased[j];
                bias += nc.unbiased[j];
            }
            worst = std::max(worst, std::abs(sum - lm.smooth));
            jensen_violations += bias > lm.unbiased;
            ++layers;
        }
    }
    return {worst <= 1e-9 && jensen_violations == 0,
            format("%zu layers, max |sum(var + bias^2) - smooth| = %.3g, Jensen violations %zu", layers, worst,
                   jensen_violations)};
}

// 2 -------------------------------------------------------------------------------------

Outcome lipschitz_soundness() {
    std::mt19937_64 rng(202);
    std::size_t checks = 0, violations = 0;
    double tightest = 0.0;
    for (int n = 0; n < 200; ++n) {
        const Network net = random_net(rng, n);
        const Vec norms = layer_spectral_norms(net);
        Vec c(net.num_linear());
        for (std::size_t i = 0; i < c.size(); ++i) c[i] = lipschitz_from_norms(norms, net.head_lipschitz(), i);
        const double radius = std::uniform_real_distribution<double>(1e-3, 0.3)(rng);
        std::uniform_real_distribution<double> u(-radius, radius);
        for (int pair = 0; pair < 1000; ++pair) {
            const Image x0 = random_input(rng, net);
            Image x = x0;
            for (double& v : x.data) v += u(rng);
            const ForwardTrace a = forward(net, x0);
            const ForwardTrace b = forward(net, x);
            const Vec dout = difference(b.output(), a.output());
            const double d2 = norm_l2(dout), dinf = norm_inf(dout);
            for (std::size_t i = 0; i < c.size(); ++i) {
                const double din = i == 0 ? norm_l2(difference(x.data, x0.data))
                                          : norm_l2(difference(b.pre_activation(i - 1), a.pre_activation(i - 1)));
                const double bound = c[i] * din;
                // Power iteration converges from below; 1e-9 relative covers its tolerance.
                violations += d2 > bound * (1 + 1e-9) + 1e-15;
                violations += dinf > bound * (1 + 1e-9) + 1e-15;
                if (bound > 0) tightest = std::max(tightest, d2 / bound);
                checks += 2;
            }
        }
    }
    return {violations == 0,
            format("%zu inequality checks, %zu violations, tightest ratio %.3f", checks, violations, tightest)};
}

// 3 -------------------------------------------------------------------------------------

Outcome certification_soundness() {
    std::mt19937_64 rng(303);
    const double alpha = 0.01;
    const int trials = 500;
    std::size_t grid_holds = 0, grid_falsified = 0, prob_holds = 0, prob_falsified = 0;
    for (int n = 0; n < trials; ++n) {
        const Network net = random_conv_head_net(rng, 6, 3, 3, 0.3 + 0.1 * (n % 4));
        const Image x0 = random_input(rng, net);
        const PerturbationSpec spec = random_spec(rng, 1e-7, 0.05);
        const double delta = std::exp(std::uniform_real_distribution<double>(std::log(2e-3), std::log(0.3))(rng));
        const KeypointCriterion crit{delta};
        const CertificateResult g = certify_grid(net, x0, spec, crit, GridOptions{8, 64}, lipschitz_profile(net));
        if (g.verdict == Verdict::Violated) ++grid_falsified;  // the grid method never reports Violated
        if (g.verdict == Verdict::Holds) {
            ++grid_holds;
            const CertificateResult f = falsify(net, x0, spec, crit, 100000, rng);
            grid_falsified += f.verdict == Verdict::Violated;
        }
        const CertificateResult p = certify_probabilistic(net, x0, spec, crit, alpha, 256, rng);
        if (p.verdict == Verdict::Holds) {
            ++prob_holds;
            // The guarantee is about a fresh perturbation drawn from the admissible range.
            const PerturbationSamples fresh = sample(spec, x0, 1, rng);
            const Vec y0 = predict(net, x0.data);
            const Vec y = predict(net, fresh.images[0].data);
            prob_falsified += output_deviation(y, y0, crit.q) > delta;
        }
    }
    const double limit = alpha + 3.0 * std::sqrt(alpha / trials);
    const double rate = prob_holds ? static_cast<double>(prob_falsified) / static_cast<double>(prob_holds) : 0.0;
    const bool nonvacuous = grid_holds >= 50 && prob_holds >= 50;
    return {grid_falsified == 0 && rate <= limit && nonvacuous,
            format("grid Holds %zu/%d, falsified by 1e5-sample search %zu; probabilistic Holds %zu/%d, "
                   "falsified %zu (rate %.4f, limit %.4f)",
                   grid_holds, trials, grid_falsified, prob_holds, trials, prob_falsified, rate, limit)};
}

// 4 -------------------------------------------------------------------------------------

DiscreteDistribution random_distribution(std::mt19937_64& rng, std::size_t n) {
    DiscreteDistribution d;
    d.points = random_vector(rng, n, -2.0, 2.0);
    std::sort(d.points.begin(), d.points.end());
    d.weights = random_vector(rng, n, 0.02, 1.0);
    const double s = std::accumulate(d.weights.begin(), d.weights.end(), 0.0);
    for (double& w : d.weights) w /= s;
    return d;
}

Outcome wasserstein_correctness() {
    std::mt19937_64 rng(404);
    double lp_err = 0.0, identity = 0.0, asym = 0.0, triangle = 0.0;
    for (int t = 0; t < 1000; ++t) {
        const auto a = random_distribution(rng, 1 + rng() % 6);
        const auto b = random_distribution(rng, 1 + rng() % 6);
        const auto c = random_distribution(rng, 1 + rng() % 6);
        const double ab = w2_discrete(a, b);
        const double lp = std::sqrt(std::max(0.0, lp_w2_squared(a.points, a.weights, b.points, b.weights)));
        lp_err = std::max(lp_err, std::abs(ab - lp));
        identity = std::max(identity, w2_discrete(a, a));
        asym = std::max(asym, std::abs(ab - w2_discrete(b, a)));
        triangle = std::max(triangle, ab - (w2_discrete(a, c) + w2_discrete(c, b)));
    }
    return {lp_err <= 1e-6 && identity <= 1e-9 && asym <= 1e-9 && triangle <= 1e-9,
            format("1000 pairs, max |closed form - LP| = %.3g, W(a,a) <= %.3g, asymmetry %.3g, "
                   "triangle excess %.3g",
                   lp_err, identity, asym, std::max(0.0, triangle))};
}

// 5 -------------------------------------------------------------------------------------

Outcome schedule_exactness() {
    std::mt19937_64 rng(505);
    std::size_t checked = 0, mismatches = 0;
    for (int s = 0; s < 100; ++s) {
        PruningSchedule sch;
        sch.rho_final = std::uniform_real_distribution<double>(0.0, 1.0)(rng);
        sch.n_steps = 1 + static_cast<int>(rng() % 10);
        sch.t_start = static_cast<int>(rng() % 200);
        sch.t_end = sch.t_start + static_cast<int>(rng() % 250);
        sch.t_interval = 1 + static_cast<int>(rng() % 40);
        for (int t = 0; t <= 500; ++t) {
            double oracle;
            if (t < sch.t_start)
                oracle = 0.0;
            else if (t > sch.t_end)
                oracle = sch.rho_final;
            else
                oracle = std::min(sch.rho_final,
                                  std::max(0.0, sch.rho_final / sch.n_steps *
                                                    std::floor(static_cast<double>(t - sch.t_start) / sch.t_interval)));
            mismatches += rho_at(t, sch) != oracle;
            ++checked;
        }
    }
    return {mismatches == 0, format("%zu (schedule, t) points, %zu mismatches", checked, mismatches)};
}

// 6 -------------------------------------------------------------------------------------

Outcome gradient_correctness() {
    std::mt19937_64 rng(606);
    const std::vector<PerturbationSpec> specs = {{PerturbationKind::Brightness, 0.05}, {PerturbationKind::Contrast, 0.1}};
    std::size_t checked = 0;
    double worst = 0.0;
    int nets = 0;
    for (int trial = 0; trial < 12; ++trial) {
        Network net = [&] {
            switch (trial % 4) {
                case 0: return random_dense_net(rng, {4, 6, 3});
                case 1: return random_dense_net(rng, {4, 6, 5, 2});
                case 2: return random_dense_net(rng, {5, 6, 5, 4, 2});
                default: {
                    Network c(Shape{1, 5, 5}, {LayerSpec::conv2d(1, 3, 3, 1, 1), LayerSpec::relu(),
                                               LayerSpec::conv2d(3, 4, 3, 2, 1), LayerSpec::relu(),
                                               LayerSpec::dense(4 * 9, 2)});
                    randomize(c, rng);
                    return c;
                }
            }
        }();
        TrainingBatch batch;
        for (int b = 0; b < 2; ++b) {
            batch.clean.push_back(random_image(rng, net.input_shape()));
            batch.labels.push_back(random_vector(rng, net.output_size(), 0.0, 2.0));
            batch.perturbed.push_back(sample_mixed(specs, batch.clean.back(), 3, rng));
        }
        LossWeights w{0.7, 1.3, 2.0, {}};
        for (std::size_t k = 0; k + 1 < net.num_linear(); ++k) w.prune_layers.push_back(k);
        const double rho = 0.5;
        Gradients g = Gradients::zeros_like(net);
        total_loss(net, batch, w, rho, &g);
        const auto f = [&](const Network& n) { return total_loss(n, batch, w, rho, nullptr).total; };
        double num = 0.0, den = 0.0;
        const std::size_t blocks = net.parameters().size();
        for (std::size_t block = 0; block < blocks; ++block) {
            const Vec& gb = block % 2 == 0 ? g.weights[block / 2] : g.bias[block / 2];
            for (std::size_t p = 0; p < net.parameters()[block].size(); ++p) {
                const double h = 1e-6;
                const double fd = central_difference(net, block, p, f, h);
                // Skip parameters sitting on a ReLU or |.| kink: one-sided slopes disagree there.
                double& ref = net.parameters()[block][p];
                const double saved = ref;
                const double f0 = f(net);
                ref = saved + h;
                net.touch();
                const double fu = f(net);
                ref = saved;
                net.touch();
                if (std::abs((fu - f0) / h - fd) > 1e-4 * std::max(1.0, std::abs(fd))) continue;
                num += (gb[p] - fd) * (gb[p] - fd);
                den += fd * fd;
                ++checked;
            }
        }
        worst = std::max(worst, std::sqrt(num) / std::max(std::sqrt(den), 1e-8));
        ++nets;
    }
    return {worst <= 1e-4 && checked > 300,
            format("%d nets with 2-4 layers, %zu parameters, worst relative error %.3g", nets, checked, worst)};
}

// Benchmark -----------------------------------------------------------------------------

double mean(const std::vector<double>& v) {
    return v.empty() ? std::nan("") : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
}

/// Linear-interpolation percentile on sorted values.
double percentile(Vec v, double q) {
    std::sort(v.begin(), v.end());
    const double pos = q / 100.0 * static_cast<double>(v.size() - 1);
    const auto lo = static_cast<std::size_t>(std::floor(pos));
    const std::size_t hi = std::min(lo + 1, v.size() - 1);
    return v[lo] + (pos - static_cast<double>(lo)) * (v[hi] - v[lo]);
}

struct ArmStats {
    std::vector<double> accuracy;  // one entry per spec, mean over seeds
    std::vector<double> time;
};

ArmStats arm_stats(const std::vector<ReportRow>& rows, const std::string& rule, double rho, double lambda_w) {
    ArmStats a;
    for (const ReportRow& r : rows)
        if (r.rule == rule && std::abs(r.rho - rho) < 1e-12 && (rule == "none" || std::abs(r.lambda_w - lambda_w) < 1e-12)) {
            a.accuracy.push_back(r.accuracy);
            a.time.push_back(r.mean_time);
        }
    return a;
}

const UsnStats* layer_stats(const SweepRun& run, std::size_t layer) {
    for (const UsnStats& s : run.usn)
        if (s.layer == layer) return &s;
    return nullptr;
}

int benchmark(const fs::path& config_path, const fs::path& out_dir, std::size_t jobs) {
    const ExperimentConfig c = load_config(config_path);
    const auto t0 = std::chrono::steady_clock::now();
    std::printf("benchmark: %s -> %s\n", config_path.c_str(), out_dir.c_str());
    std::fflush(stdout);
    const SweepResult sweep = run_sweep(c, out_dir, jobs);
    const double minutes = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count() / 60.0;
    std::printf("sweep: %zu runs in %.1f min\n", sweep.runs.size(), minutes);
    for (const ReportRow& r : sweep.report)
        std::printf("  %-6s rho %-4g lw %-3g %-24s holds %3zu/%-3zu accuracy %.4f [%.4f, %.4f] time %.4g s params %.0f\n",
                    r.rule.c_str(), r.rho, r.lambda_w, r.spec.c_str(), r.holds, r.images, r.accuracy,
                    r.accuracy_min, r.accuracy_max, r.mean_time, r.parameters);
    for (const SweepRun& run : sweep.runs)
        std::printf("  %-22s best epoch %2d val task %.4f%s\n", run.artifacts.run.id().c_str(),
                    run.artifacts.result.best_epoch, run.artifacts.result.best_val_task,
                    run.artifacts.result.diverged ? " diverged" : "");
    std::fflush(stdout);

    const double rho = 0.2, lw = 10.0;
    const ArmStats usn = arm_stats(sweep.report, "usn", rho, lw);
    const ArmStats rnd = arm_stats(sweep.report, "random", rho, lw);
    const ArmStats none = arm_stats(sweep.report, "none", 0.0, lw);

    std::vector<Criterion> criteria;
    criteria.push_back({"7a", "USN pruning accuracy >= matched random pruning", [&] {
                            const double u = mean(usn.accuracy), r = mean(rnd.accuracy);
                            return Outcome{!usn.accuracy.empty() && !rnd.accuracy.empty() && u >= r,
                                           format("seed-mean verification accuracy usn %.4f, random %.4f, "
                                                  "unpruned %.4f over %zu specs",
                                                  u, r, mean(none.accuracy), usn.accuracy.size())};
                        }});
    criteria.push_back({"7b", "USN pruning certification time <= unpruned", [&] {
                            const double u = mean(usn.time), n = mean(none.time);
                            return Outcome{!usn.time.empty() && !none.time.empty() && u <= n,
                                           format("mean time per image usn %.4g s, unpruned %.4g s, random %.4g s", u,
                                                  n, mean(rnd.time))};
                        }});
    criteria.push_back({"8", "unstable neurons above the unpruned p90 drop by >= 50%", [&] {
                            const std::size_t layer = c.certify.usn_layer;
                            std::ofstream csv(out_dir / "report" / "fig3_neurons.csv");
                            csv << "seed,run,neuron,smooth,threshold,above\n";
                            std::vector<double> before, after;
                            for (std::uint64_t seed : c.sweep.seeds) {
                                const SweepRun* base = nullptr;
                                const SweepRun* pruned = nullptr;
                                for (const SweepRun& r : sweep.runs) {
                                    const RunSpec& s = r.artifacts.run;
                                    if (s.seed != seed) continue;
                                    if (s.rule == PruningRule::None) base = &r;
                                    if (s.rule == PruningRule::Usn && std::abs(s.rho - rho) < 1e-12 &&
                                        std::abs(s.lambda_w - lw) < 1e-12)
                                        pruned = &r;
                                }
                                if (!base || !pruned) continue;
                                const UsnStats* sb = layer_stats(*base, layer);
                                const UsnStats* sp = layer_stats(*pruned, layer);
                                if (!sb || !sp) continue;
                                const double tau = percentile(sb->per_neuron_smooth, 90.0);
                                std::size_t nb = 0, np = 0;
                                for (const auto& [run, st] : {std::pair{base, sb}, std::pair{pruned, sp}})
                                    for (std::size_t j = 0; j < st->width(); ++j) {
                                        const bool above = st->per_neuron_smooth[j] > tau;
                                        (run == base ? nb : np) += above;
                                        csv << seed << ',' << run->artifacts.run.id() << ',' << j << ','
                                            << format("%.17g", st->per_neuron_smooth[j]) << ','
                                            << format("%.17g", tau) << ',' << above << '\n';
                                    }
                                before.push_back(static_cast<double>(nb));
                                after.push_back(static_cast<double>(np));
                            }
                            const double b = mean(before), a = mean(after);
                            const double drop = b > 0 ? 1.0 - a / b : 0.0;
                            return Outcome{!before.empty() && drop >= 0.5,
                                           format("layer %zu, seed-mean count above threshold %.2f -> %.2f "
                                                  "(drop %.0f%%), per-neuron CSV report/fig3_neurons.csv",
                                                  layer, b, a, 100.0 * drop)};
                        }});
    criteria.push_back({"9", "lambda_W ablation table", [&] {
                            std::ifstream in(out_dir / "report" / "table3_lambda.csv");
                            std::string header, line;
                            std::getline(in, header);
                            std::size_t rows = 0, empty_cells = 0;
                            std::set<std::string> weights;
                            std::string table = header;
                            while (std::getline(in, line)) {
                                if (line.empty()) continue;
                                table += " | " + line;
                                ++rows;
                                std::stringstream ss(line);
                                std::string f;
                                int col = 0;
                                while (std::getline(ss, f, ',')) {
                                    if (col == 2) weights.insert(f);
                                    empty_cells += col >= 3 && f.empty();
                                    ++col;
                                }
                                if (!line.empty() && line.back() == ',') ++empty_cells;
                            }
                            const bool ok = weights.count("0") && weights.count("10") && empty_cells == 0;
                            return Outcome{ok, format("%zu rows, %zu empty cells: %s", rows, empty_cells,
                                                      table.c_str())};
                        }});
    return run_all(criteria);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"acceptance criteria"};
    app.require_subcommand(1);
    CLI::App* core = app.add_subcommand("core", "criteria 1-6");
    CLI::App* bench = app.add_subcommand("benchmark", "synthetic keypoint sweep, criteria 7-9");
    std::string config = "configs/benchmark.json";
    std::string out_dir = "acceptance_benchmark";
    std::size_t jobs = 1;
    bench->add_option("--config", config)->check(CLI::ExistingFile);
    bench->add_option("--out-dir", out_dir);
    bench->add_option("--jobs", jobs)->check(CLI::PositiveNumber);
    CLI11_PARSE(app, argc, argv);

    if (*core) {
        return run_all({
            {"1", "USN decomposition identity and Jensen inequality", decomposition_identity},
            {"2", "layer-to-output Lipschitz soundness", lipschitz_soundness},
            {"3", "certification soundness", certification_soundness},
            {"4", "Wasserstein closed form and metric axioms", wasserstein_correctness},
            {"5", "pruning schedule exactness", schedule_exactness},
            {"6", "total-loss gradient correctness", gradient_correctness},
        });
    }
    try {
        return benchmark(config, out_dir, jobs);
    } catch (const std::exception& e) {
        std::printf("benchmark failed: %s\n", e.what());
        return 1;
    }
}
