#include "usn/pruning.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <limits>
#include <numeric>

#include "usn/errors.hpp"
#include "usn/rng.hpp"
#include "usn/wasserstein.hpp"

namespace usn {

void validate(const PruningSchedule& s) {
    USN_REQUIRE(s.rho_final >= 0.0 && s.rho_final <= 1.0, "rho_final must lie in [0, 1]");
    USN_REQUIRE(s.n_steps >= 1, "n_steps must be positive");
    USN_REQUIRE(s.t_interval >= 1, "t_interval must be positive");
    USN_REQUIRE(s.t_start <= s.t_end, "t_start must not exceed t_end");
}

double rho_at(int t, const PruningSchedule& s) {
    validate(s);
    if (t < s.t_start) return 0.0;
    if (t > s.t_end) return s.rho_final;
    const int k = (t - s.t_start) / s.t_interval;
    const double r = s.rho_final / s.n_steps * k;
    return std::clamp(r, 0.0, s.rho_final);
}

void validate(const LossWeights& w, const Network& net) {
    USN_REQUIRE(w.lambda_u >= 0.0 && w.lambda_s >= 0.0 && w.lambda_w >= 0.0, "loss weights must be non-negative");
    for (std::size_t i = 0; i < w.prune_layers.size(); ++i) {
        USN_REQUIRE(w.prune_layers[i] < net.num_linear(),
                    "prune layer " + std::to_string(w.prune_layers[i]) + " has no statistics");
        for (std::size_t j = 0; j < i; ++j)
            USN_REQUIRE(w.prune_layers[j] != w.prune_layers[i], "prune layers must be distinct");
    }
}

std::vector<std::size_t> conv_layers(const Network& net) {
    std::vector<std::size_t> out;
    for (std::size_t k = 0; k < net.num_linear(); ++k)
        if (net.linear_spec(k).kind == LayerKind::Conv2d) out.push_back(k);
    return out;
}

double task_loss(const Network& net, std::span<const Image> images, std::span<const Vec> labels) {
    USN_REQUIRE(images.size() == labels.size(), "one label per image");
    USN_REQUIRE(!images.empty(), "empty image set");
    const std::size_t n_out = net.output_size();
    double total = 0.0;
    ForwardTrace trace;
    for (std::size_t b = 0; b < images.size(); ++b) {
        USN_REQUIRE(labels[b].size() == n_out, "label size does not match the output");
        forward(net, images[b].data, trace);
        const auto y = trace.output();
        double e = 0.0;
        for (std::size_t o = 0; o < n_out; ++o) e += (y[o] - labels[b][o]) * (y[o] - labels[b][o]);
        total += e / static_cast<double>(n_out);
    }
    return total / static_cast<double>(images.size());
}

namespace {

double sign(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

}  // namespace

ObjectiveResult total_loss(const Network& net, const TrainingBatch& batch, const LossWeights& weights,
                           double wasserstein_rho, Gradients* grads, double eps_usn) {
    validate(weights, net);
    USN_REQUIRE(wasserstein_rho >= 0.0 && wasserstein_rho <= 1.0, "wasserstein_rho must lie in [0, 1]");
    const std::size_t B = batch.clean.size();
    USN_REQUIRE(B > 0, "empty batch");
    USN_REQUIRE(batch.labels.size() == B && batch.perturbed.size() == B, "batch arrays differ in length");
    const std::size_t m = batch.perturbed.front().size();
    USN_REQUIRE(m >= 2, "need at least two perturbation samples per image");
    for (const auto& p : batch.perturbed) USN_REQUIRE(p.size() == m, "every image needs the same sample count");
    const std::size_t n_out = net.output_size();
    for (const Vec& y : batch.labels) USN_REQUIRE(y.size() == n_out, "label size does not match the output");

    std::vector<ForwardTrace> clean(B);
    std::vector<std::vector<ForwardTrace>> pert(B, std::vector<ForwardTrace>(m));
    for (std::size_t b = 0; b < B; ++b) {
        forward(net, batch.clean[b].data, clean[b]);
        for (std::size_t k = 0; k < m; ++k) forward(net, batch.perturbed[b][k].data, pert[b][k]);
    }

    ObjectiveResult res;
    const double Bd = static_cast<double>(B);
    const double md = static_cast<double>(m);
    std::vector<Vec> out_grad(B, Vec(n_out));
    for (std::size_t b = 0; b < B; ++b) {
        const auto y = clean[b].output();
        double e = 0.0;
        for (std::size_t o = 0; o < n_out; ++o) {
            const double d = y[o] - batch.labels[b][o];
            e += d * d;
            out_grad[b][o] = 2.0 * d / (static_cast<double>(n_out) * Bd);
        }
        res.task += e / (static_cast<double>(n_out) * Bd);
    }
    res.total = res.task;

    // Seeds per trace and linear layer; only prune layers are filled.
    const std::size_t L = net.num_linear();
    std::vector<std::vector<Vec>> clean_seed(B, std::vector<Vec>(L));
    std::vector<std::vector<std::vector<Vec>>> pert_seed(B, std::vector<std::vector<Vec>>(m, std::vector<Vec>(L)));

    const double lu = weights.lambda_u;
    const double ls = weights.lambda_s;
    const double lw = weights.lambda_w;
    for (std::size_t layer : weights.prune_layers) {
        const std::size_t d = net.linear(layer).neurons();
        const double dd = static_cast<double>(d);
        LayerLoss ll;
        ll.layer = layer;
        Vec U(d, 0.0), S(d, 0.0), V(d, 0.0);
        std::vector<Vec> mean_dev(B, Vec(d, 0.0));
        for (std::size_t b = 0; b < B; ++b) {
            const auto c = clean[b].pre_activation(layer);
            Vec s_b(d, 0.0);
            for (std::size_t k = 0; k < m; ++k) {
                const auto p = pert[b][k].pre_activation(layer);
                for (std::size_t j = 0; j < d; ++j) {
                    const double dev = p[j] - c[j];
                    ll.unbiased += std::abs(dev);
                    ll.smooth += dev * dev;
                    mean_dev[b][j] += dev;
                    s_b[j] += dev * dev;
                }
            }
            for (std::size_t j = 0; j < d; ++j) {
                mean_dev[b][j] /= md;
                s_b[j] /= md;
                U[j] += std::abs(mean_dev[b][j]) / Bd;
                S[j] += s_b[j] / Bd;
                V[j] += std::max(0.0, s_b[j] - mean_dev[b][j] * mean_dev[b][j]) / Bd;
            }
        }
        ll.unbiased /= md * Bd;
        ll.smooth /= md * Bd;

        UsnStats st = zero_stats(layer, d, eps_usn);
        st.unbiased = ll.unbiased;
        st.smooth = ll.smooth;
        st.per_neuron_unbiased = U;
        st.per_neuron_smooth = S;
        st.per_neuron_variance = V;
        st.sample_count = B * m;
        st.importance = importance(U, S, eps_usn, d);

        Vec gU(d, 0.0), gS(d, 0.0);
        if (wasserstein_rho > 0.0) {
            const std::vector<int> cmap = channel_map(net, layer);
            const Vec a = channel_importance(st.importance, cmap);
            const WassersteinLoss wl = wasserstein_loss(a, wasserstein_rho);
            ll.wasserstein = wl.value;
            std::vector<std::size_t> count(a.size(), 0);
            for (int c : cmap) ++count[c];
            for (std::size_t j = 0; j < d; ++j) {
                if (S[j] == 0.0) continue;
                const double gA = wl.gradient[cmap[j]] / static_cast<double>(count[cmap[j]]);
                const double den = U[j] * U[j] + eps_usn;
                gS[j] = gA / (den * dd);
                gU[j] = -gA * 2.0 * U[j] * S[j] / (den * den * dd);
            }
        }
        res.total += lu * ll.unbiased + ls * ll.smooth + lw * ll.wasserstein;
        res.layers.push_back(ll);
        res.stats.push_back(std::move(st));

        if (grads == nullptr) continue;
        const double scale = 1.0 / (md * Bd);
        for (std::size_t b = 0; b < B; ++b) {
            const auto c = clean[b].pre_activation(layer);
            Vec& cs = clean_seed[b][layer];
            cs.assign(d, 0.0);
            for (std::size_t k = 0; k < m; ++k) {
                const auto p = pert[b][k].pre_activation(layer);
                Vec& ps = pert_seed[b][k][layer];
                ps.resize(d);
                for (std::size_t j = 0; j < d; ++j) {
                    const double dev = p[j] - c[j];
                    const double g = scale * (lu * sign(dev) + ls * 2.0 * dev +
                                              lw * (gU[j] * sign(mean_dev[b][j]) + gS[j] * 2.0 * dev));
                    ps[j] = g;
                    cs[j] -= g;
                }
            }
        }
    }

    if (grads != nullptr) {
        for (std::size_t b = 0; b < B; ++b) {
            backward_accumulate(net, clean[b], out_grad[b], clean_seed[b], *grads);
            for (std::size_t k = 0; k < m; ++k) backward_accumulate(net, pert[b][k], {}, pert_seed[b][k], *grads);
        }
    }
    return res;
}

std::size_t kept_channel_count(std::size_t channels, double rho) {
    USN_REQUIRE(rho >= 0.0 && rho <= 1.0, "rho must lie in [0, 1]");
    // Guard against 0.8 * 10 landing just above 8.
    const double raw = (1.0 - rho) * static_cast<double>(channels);
    const double r = std::round(raw);
    return static_cast<std::size_t>(std::abs(raw - r) < 1e-9 ? r : std::ceil(raw));
}

std::vector<std::uint8_t> top_channel_mask(std::span<const double> scores, std::span<const std::uint8_t> active,
                                           std::size_t keep) {
    USN_REQUIRE(scores.size() == active.size(), "one score per channel");
    USN_REQUIRE(keep >= 1, "pruning would remove every channel");
    std::vector<std::size_t> idx;
    for (std::size_t c = 0; c < scores.size(); ++c) {
        if (!active[c]) continue;
        USN_REQUIRE(std::isfinite(scores[c]), "channel score is not finite");
        idx.push_back(c);
    }
    USN_REQUIRE(keep <= idx.size(), "cannot keep more channels than are active");
    std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return scores[a] > scores[b]; });
    std::vector<std::uint8_t> mask(scores.size(), 0);
    for (std::size_t i = 0; i < keep; ++i) mask[idx[i]] = 1;
    return mask;
}

const char* to_string(PruneOrder o) { return o == PruneOrder::KeepHighest ? "keep_highest" : "keep_lowest"; }

PruneOrder prune_order_from_string(const std::string& name) {
    if (name == "keep_highest") return PruneOrder::KeepHighest;
    if (name == "keep_lowest") return PruneOrder::KeepLowest;
    throw ConfigError("unknown prune order '" + name + "'");
}

PruneResult prune_step(const Network& net, std::span<UsnStats> accumulated, double rho,
                       std::span<const std::size_t> layers, PruneOrder order) {
    USN_REQUIRE(accumulated.size() == layers.size(), "one statistics record per prune layer");
    PruneResult out{net, {}};
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const std::size_t k = layers[i];
        USN_REQUIRE(k < net.num_linear(), "prune layer out of range");
        const LinearLayer& lin = net.linear(k);
        USN_REQUIRE(accumulated[i].layer == k && accumulated[i].width() == lin.neurons(),
                    "statistics do not match prune layer " + std::to_string(k));
        Vec scores = channel_importance(accumulated[i].importance, channel_map(net, k));
        if (order == PruneOrder::KeepLowest)
            for (double& v : scores) v = -v;
        const std::size_t keep = kept_channel_count(static_cast<std::size_t>(lin.channels()), rho);
        auto mask = top_channel_mask(scores, lin.keep, keep);
        prune_channels_in_place(out.net, k, mask);
        out.masks.push_back(std::move(mask));
    }
    for (UsnStats& s : accumulated) reset(s);
    return out;
}

PruneResult random_prune_baseline(const Network& net, double rho, std::span<const std::size_t> layers,
                                  std::mt19937_64& rng) {
    PruneResult out{net, {}};
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (std::size_t k : layers) {
        USN_REQUIRE(k < net.num_linear(), "prune layer out of range");
        const LinearLayer& lin = net.linear(k);
        Vec scores(lin.channels());
        for (double& s : scores) s = u(rng);
        const std::size_t keep = kept_channel_count(static_cast<std::size_t>(lin.channels()), rho);
        auto mask = top_channel_mask(scores, lin.keep, keep);
        prune_channels_in_place(out.net, k, mask);
        out.masks.push_back(std::move(mask));
    }
    return out;
}

const char* to_string(OptimizerKind k) { return k == OptimizerKind::Adam ? "adam" : "sgd"; }

OptimizerKind optimizer_kind_from_string(const std::string& name) {
    if (name == "adam") return OptimizerKind::Adam;
    if (name == "sgd") return OptimizerKind::Sgd;
    throw ConfigError("unknown optimizer '" + name + "'");
}

Optimizer::Optimizer(OptimizerKind kind, double learning_rate, double beta1, double beta2, double eps)
    : kind_(kind), lr_(learning_rate), beta1_(beta1), beta2_(beta2), eps_(eps) {
    USN_REQUIRE(learning_rate > 0.0, "learning rate must be positive");
}

void Optimizer::step(Network& net, const Gradients& g) {
    auto params = net.parameters();
    USN_REQUIRE(params.size() == 2 * g.weights.size(), "gradients do not match the network");
    ++t_;
    if (kind_ == OptimizerKind::Adam && !m_) {
        m_ = Gradients::zeros_like(net);
        v_ = Gradients::zeros_like(net);
    }
    const double c1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (std::size_t k = 0; k < g.weights.size(); ++k) {
        for (int part = 0; part < 2; ++part) {
            std::span<double> p = params[2 * k + part];
            const Vec& gr = part == 0 ? g.weights[k] : g.bias[k];
            USN_REQUIRE(p.size() == gr.size(), "gradient size mismatch");
            if (kind_ == OptimizerKind::Sgd) {
                for (std::size_t i = 0; i < p.size(); ++i) p[i] -= lr_ * gr[i];
                continue;
            }
            Vec& m = part == 0 ? m_->weights[k] : m_->bias[k];
            Vec& v = part == 0 ? v_->weights[k] : v_->bias[k];
            for (std::size_t i = 0; i < p.size(); ++i) {
                m[i] = beta1_ * m[i] + (1.0 - beta1_) * gr[i];
                v[i] = beta2_ * v[i] + (1.0 - beta2_) * gr[i] * gr[i];
                p[i] -= lr_ * (m[i] / c1) / (std::sqrt(v[i] / c2) + eps_);
            }
        }
    }
    net.apply_masks();
}

const char* to_string(PruningRule r) {
    switch (r) {
        case PruningRule::Usn: return "usn";
        case PruningRule::Random: return "random";
        case PruningRule::None: return "none";
    }
    return "?";
}

PruningRule pruning_rule_from_string(const std::string& name) {
    if (name == "usn") return PruningRule::Usn;
    if (name == "random") return PruningRule::Random;
    if (name == "none") return PruningRule::None;
    throw ConfigError("unknown pruning rule '" + name + "'");
}

void validate(const TrainConfig& c) {
    USN_REQUIRE(c.epochs >= 1, "epochs must be positive");
    USN_REQUIRE(c.batch_size >= 1, "batch size must be positive");
    USN_REQUIRE(c.learning_rate > 0.0, "learning rate must be positive");
    USN_REQUIRE(c.samples >= 2, "need at least two perturbation samples per image");
    USN_REQUIRE(!c.specs.empty(), "need at least one training perturbation");
    for (const auto& s : c.specs) validate(s);
    validate(c.schedule);
}

std::vector<Image> sample_mixed(std::span<const PerturbationSpec> specs, const Image& image, std::size_t m,
                                std::mt19937_64& rng) {
    USN_REQUIRE(!specs.empty(), "need at least one perturbation");
    std::uniform_int_distribution<std::size_t> pick(0, specs.size() - 1);
    std::vector<Image> out;
    out.reserve(m);
    for (std::size_t k = 0; k < m; ++k) {
        const PerturbationSpec& s = specs[pick(rng)];
        std::uniform_real_distribution<double> u(s.lower(), s.upper());
        out.push_back(apply(s, image, u(rng)));
    }
    return out;
}

namespace {

std::size_t active_channels(const Network& net, std::span<const std::size_t> layers) {
    std::size_t n = 0;
    for (std::size_t k : layers) n += net.linear(k).active_channels();
    return n;
}

bool finite_network(Network& net) {
    for (std::span<double> p : net.parameters())
        if (!all_finite(p)) return false;
    return true;
}

double perturbed_task_loss(const Network& net, std::span<const LabeledImage> set,
                           std::span<const PerturbationSpec> specs, std::mt19937_64& rng) {
    std::vector<Image> imgs;
    std::vector<Vec> labels;
    imgs.reserve(set.size());
    for (const LabeledImage& li : set) {
        imgs.push_back(sample_mixed(specs, li.image, 1, rng).front());
        labels.push_back(li.keypoints);
    }
    return task_loss(net, imgs, labels);
}

}  // namespace

TrainResult train(Network net, const TrainConfig& config, std::span<const LabeledImage> train_set,
                  std::span<const LabeledImage> val_set) {
    validate(config);
    USN_REQUIRE(!train_set.empty() && !val_set.empty(), "training and validation sets must be non-empty");
    LossWeights weights = config.weights;
    if (weights.prune_layers.empty()) weights.prune_layers = conv_layers(net);
    validate(weights, net);
    USN_REQUIRE(!weights.prune_layers.empty() || config.schedule.rho_final == 0.0,
                "pruning needs at least one prune layer");
    const auto t0 = std::chrono::steady_clock::now();

    std::mt19937_64 rng = make_rng({config.seed, 0x7a41ULL});
    std::mt19937_64 prune_rng = make_rng({config.seed, 0x9a0eULL});
    Optimizer opt(config.optimizer, config.learning_rate);

    std::vector<Image> val_images;
    std::vector<Vec> val_labels;
    for (const LabeledImage& li : val_set) {
        val_images.push_back(li.image);
        val_labels.push_back(li.keypoints);
    }

    std::vector<UsnStats> running;
    for (std::size_t k : weights.prune_layers)
        running.push_back(zero_stats(k, net.linear(k).neurons(), config.eps_usn));

    const double rho_final = config.rule == PruningRule::None ? 0.0 : config.schedule.rho_final;
    double rho_applied = 0.0;

    TrainResult result{net, net, 0, std::numeric_limits<double>::infinity(), false, {}, 0.0};
    Network last_finite = net;
    std::vector<std::size_t> order(train_set.size());
    std::iota(order.begin(), order.end(), 0);

    for (int t = 1; t <= config.epochs; ++t) {
        std::shuffle(order.begin(), order.end(), rng);
        EpochLog log;
        log.epoch = t;
        log.layer_unbiased.assign(weights.prune_layers.size(), 0.0);
        log.layer_smooth.assign(weights.prune_layers.size(), 0.0);
        std::size_t seen = 0;
        bool bad = false;
        for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
            const std::size_t end = std::min(order.size(), start + config.batch_size);
            TrainingBatch batch;
            for (std::size_t i = start; i < end; ++i) {
                const LabeledImage& li = train_set[order[i]];
                batch.clean.push_back(li.image);
                batch.labels.push_back(li.keypoints);
                batch.perturbed.push_back(sample_mixed(config.specs, li.image, config.samples, rng));
            }
            Gradients g = Gradients::zeros_like(net);
            const ObjectiveResult r = total_loss(net, batch, weights, rho_final, &g, config.eps_usn);
            if (!std::isfinite(r.total) || !std::isfinite(g.squared_norm())) {
                bad = true;
                break;
            }
            const double w = static_cast<double>(end - start);
            seen += end - start;
            log.train_task += w * r.task;
            log.train_total += w * r.total;
            for (std::size_t i = 0; i < r.layers.size(); ++i) {
                log.train_unbiased += w * r.layers[i].unbiased;
                log.train_smooth += w * r.layers[i].smooth;
                log.train_wasserstein += w * r.layers[i].wasserstein;
                log.layer_unbiased[i] += w * r.layers[i].unbiased;
                log.layer_smooth[i] += w * r.layers[i].smooth;
                running[i] = accumulate(running[i], r.stats[i]);
            }
            mask_gradients(net, g);
            opt.step(net, g);
            if (!finite_network(net)) {
                bad = true;
                break;
            }
        }
        if (bad) {
            result.diverged = true;
            break;
        }
        const double n = static_cast<double>(seen);
        log.train_task /= n;
        log.train_total /= n;
        log.train_unbiased /= n;
        log.train_smooth /= n;
        log.train_wasserstein /= n;
        for (std::size_t i = 0; i < log.layer_unbiased.size(); ++i) {
            log.layer_unbiased[i] /= n;
            log.layer_smooth[i] /= n;
        }

        const double rho_t = config.rule == PruningRule::None ? 0.0 : rho_at(t, config.schedule);
        if (rho_t > rho_applied) {
            if (config.rule == PruningRule::Usn)
                net = prune_step(net, running, rho_t, weights.prune_layers, config.prune_order).net;
            else
                net = random_prune_baseline(net, rho_t, weights.prune_layers, prune_rng).net;
            for (UsnStats& s : running) reset(s);
            rho_applied = rho_t;
        }
        log.rho = rho_applied;
        log.active_channels = active_channels(net, weights.prune_layers);
        log.val_task = task_loss(net, val_images, val_labels);
        log.val_task_perturbed = perturbed_task_loss(net, val_set, config.specs, rng);
        if (!std::isfinite(log.val_task)) {
            result.diverged = true;
            break;
        }
        last_finite = net;
        log.eligible = rho_applied >= rho_final;
        if (log.eligible && log.val_task < result.best_val_task) {
            result.best_val_task = log.val_task;
            result.best_epoch = t;
            result.best = net;
        }
        result.log.push_back(std::move(log));
    }
    result.last = last_finite;
    if (result.best_epoch == 0) {
        // No eligible epoch: fall back to the last finite state.
        result.best = last_finite;
        result.best_epoch = result.log.empty() ? 0 : result.log.back().epoch;
        result.best_val_task = result.log.empty() ? std::numeric_limits<double>::quiet_NaN() : result.log.back().val_task;
    }
    result.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    return result;
}

void write_log_csv(std::ostream& out, std::span<const EpochLog> log) {
    out << "epoch,rho,train_task,train_unbiased,train_smooth,train_wasserstein,train_total,val_task,"
           "val_task_perturbed,active_channels,eligible";
    const std::size_t layers = log.empty() ? 0 : log.front().layer_smooth.size();
    for (std::size_t i = 0; i < layers; ++i) out << ",unbiased_" << i << ",smooth_" << i;
    out << '\n';
    char buf[64];
    auto num = [&](double v) {
        std::snprintf(buf, sizeof buf, "%.17g", v);
        return std::string(buf);
    };
    for (const EpochLog& e : log) {
        out << e.epoch << ',' << num(e.rho) << ',' << num(e.train_task) << ',' << num(e.train_unbiased) << ','
            << num(e.train_smooth) << ',' << num(e.train_wasserstein) << ',' << num(e.train_total) << ','
            << num(e.val_task) << ',' << num(e.val_task_perturbed) << ',' << e.active_channels << ','
            << (e.eligible ? 1 : 0);
        for (std::size_t i = 0; i < e.layer_smooth.size(); ++i)
            out << ',' << num(e.layer_unbiased[i]) << ',' << num(e.layer_smooth[i]);
        out << '\n';
    }
}

std::vector<UsnStats> dataset_usn_stats(const Network& net, std::span<const LabeledImage> images,
                                        std::span<const PerturbationSpec> specs, std::size_t m,
                                        std::span<const std::size_t> layers, std::uint64_t seed, double eps_usn) {
    USN_REQUIRE(m >= 2, "need at least two perturbation samples per image");
    for (std::size_t k : layers) USN_REQUIRE(k < net.num_linear(), "layer out of range");
    std::vector<UsnStats> out;
    for (std::size_t k : layers) out.push_back(zero_stats(k, net.linear(k).neurons(), eps_usn));
    std::mt19937_64 rng = make_rng({seed, 0x5a7ULL});
    ForwardTrace clean;
    std::vector<ForwardTrace> pert(m);
    for (const LabeledImage& li : images) {
        const std::vector<Image> samples = sample_mixed(specs, li.image, m, rng);
        forward(net, li.image.data, clean);
        for (std::size_t k = 0; k < m; ++k) forward(net, samples[k].data, pert[k]);
        for (std::size_t i = 0; i < layers.size(); ++i) {
            PreActivationSet view;
            for (const ForwardTrace& t : pert) view.push_back(t.pre_activation(layers[i]));
            out[i] = accumulate(out[i], stats_from_pre_activations(layers[i], clean.pre_activation(layers[i]), view,
                                                                   eps_usn));
        }
    }
    return out;
}

}  // namespace usn
