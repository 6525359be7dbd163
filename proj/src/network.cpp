#include "usn/network.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <memory>
#include <numeric>
#include <string>

#include "usn/errors.hpp"

namespace usn {

namespace {

std::atomic<std::uint64_t> g_next_network_id{1};

int conv_out_extent(int in, int kernel, int stride, int padding) {
    const int span = in + 2 * padding - kernel;
    if (span < 0) return 0;
    return span / stride + 1;
}

void conv_forward(const LinearLayer& layer, const LayerSpec& spec, std::span<const double> in,
                  std::span<double> out, bool with_bias) {
    const Shape& is = layer.in_shape;
    const Shape& os = layer.out_shape;
    const int k = spec.kernel_size;
    const int s = spec.stride;
    const int p = spec.padding;
    const std::size_t ksq = static_cast<std::size_t>(k) * k;
    for (int oc = 0; oc < os.channels; ++oc) {
        double* out_plane = out.data() + oc * os.plane();
        const double b = with_bias ? layer.bias[oc] : 0.0;
        std::fill(out_plane, out_plane + os.plane(), b);
        if (!layer.keep[oc]) continue;
        for (int ic = 0; ic < is.channels; ++ic) {
            const double* w = layer.weights.data() + (static_cast<std::size_t>(oc) * is.channels + ic) * ksq;
            const double* in_plane = in.data() + ic * is.plane();
            for (int oy = 0; oy < os.height; ++oy) {
                const int y0 = oy * s - p;
                const int ky_lo = std::max(0, -y0);
                const int ky_hi = std::min(k, is.height - y0);
                for (int ox = 0; ox < os.width; ++ox) {
                    const int x0 = ox * s - p;
                    const int kx_lo = std::max(0, -x0);
                    const int kx_hi = std::min(k, is.width - x0);
                    double acc = 0.0;
                    for (int ky = ky_lo; ky < ky_hi; ++ky) {
                        const double* row = in_plane + (y0 + ky) * is.width + x0;
                        const double* wrow = w + ky * k;
                        for (int kx = kx_lo; kx < kx_hi; ++kx) acc += wrow[kx] * row[kx];
                    }
                    out_plane[oy * os.width + ox] += acc;
                }
            }
        }
    }
}

// Adjoint of conv_forward (without bias) applied to g; optionally accumulates dW, db.
void conv_backward(const LinearLayer& layer, const LayerSpec& spec, std::span<const double> in,
                   std::span<const double> g, std::span<double> g_in, double* dw, double* db) {
    const Shape& is = layer.in_shape;
    const Shape& os = layer.out_shape;
    const int k = spec.kernel_size;
    const int s = spec.stride;
    const int p = spec.padding;
    const std::size_t ksq = static_cast<std::size_t>(k) * k;
    if (!g_in.empty()) std::fill(g_in.begin(), g_in.end(), 0.0);
    for (int oc = 0; oc < os.channels; ++oc) {
        if (!layer.keep[oc]) continue;
        const double* g_plane = g.data() + oc * os.plane();
        if (db) {
            double acc = 0.0;
            for (std::size_t q = 0; q < os.plane(); ++q) acc += g_plane[q];
            db[oc] += acc;
        }
        for (int ic = 0; ic < is.channels; ++ic) {
            const std::size_t woff = (static_cast<std::size_t>(oc) * is.channels + ic) * ksq;
            const double* w = layer.weights.data() + woff;
            const double* in_plane = in.empty() ? nullptr : in.data() + ic * is.plane();
            double* gin_plane = g_in.empty() ? nullptr : g_in.data() + ic * is.plane();
            for (int oy = 0; oy < os.height; ++oy) {
                const int y0 = oy * s - p;
                const int ky_lo = std::max(0, -y0);
                const int ky_hi = std::min(k, is.height - y0);
                for (int ox = 0; ox < os.width; ++ox) {
                    const double gv = g_plane[oy * os.width + ox];
                    if (gv == 0.0) continue;
                    const int x0 = ox * s - p;
                    const int kx_lo = std::max(0, -x0);
                    const int kx_hi = std::min(k, is.width - x0);
                    for (int ky = ky_lo; ky < ky_hi; ++ky) {
                        const std::size_t row_off = (y0 + ky) * is.width + x0;
                        for (int kx = kx_lo; kx < kx_hi; ++kx) {
                            if (dw) dw[woff + ky * k + kx] += gv * in_plane[row_off + kx];
                            if (gin_plane) gin_plane[row_off + kx] += gv * w[ky * k + kx];
                        }
                    }
                }
            }
        }
    }
}

void dense_forward(const LinearLayer& layer, std::span<const double> in, std::span<double> out,
                   bool with_bias) {
    const std::size_t n_in = layer.in_shape.size();
    const std::size_t n_out = layer.out_shape.size();
    for (std::size_t o = 0; o < n_out; ++o) {
        if (!layer.keep[o]) {
            out[o] = with_bias ? layer.bias[o] : 0.0;
            continue;
        }
        const double* w = layer.weights.data() + o * n_in;
        double acc = 0.0;
        for (std::size_t i = 0; i < n_in; ++i) acc += w[i] * in[i];
        out[o] = acc + (with_bias ? layer.bias[o] : 0.0);
    }
}

void dense_backward(const LinearLayer& layer, std::span<const double> in,
                    std::span<const double> g, std::span<double> g_in, double* dw, double* db) {
    const std::size_t n_in = layer.in_shape.size();
    const std::size_t n_out = layer.out_shape.size();
    if (!g_in.empty()) std::fill(g_in.begin(), g_in.end(), 0.0);
    for (std::size_t o = 0; o < n_out; ++o) {
        const double gv = g[o];
        if (gv == 0.0 || !layer.keep[o]) continue;
        if (db) db[o] += gv;
        const double* w = layer.weights.data() + o * n_in;
        if (dw) {
            double* dwo = dw + o * n_in;
            for (std::size_t i = 0; i < n_in; ++i) dwo[i] += gv * in[i];
        }
        if (!g_in.empty())
            for (std::size_t i = 0; i < n_in; ++i) g_in[i] += gv * w[i];
    }
}

void soft_argmax_into(std::span<const double> heat, const LayerSpec& spec, std::span<double> out) {
    const int hw = spec.heatmap_height * spec.heatmap_width;
    Vec probs(hw);
    for (int kp = 0; kp < spec.keypoints; ++kp) {
        const double* h = heat.data() + static_cast<std::size_t>(kp) * hw;
        double mx = -std::numeric_limits<double>::infinity();
        for (int q = 0; q < hw; ++q) {
            if (!std::isfinite(h[q])) throw NumericError("soft_argmax: non-finite heatmap value");
            mx = std::max(mx, h[q]);
        }
        double z = 0.0;
        for (int q = 0; q < hw; ++q) {
            probs[q] = std::exp((h[q] - mx) / spec.temperature);
            z += probs[q];
        }
        double ex = 0.0;
        double ey = 0.0;
        for (int q = 0; q < hw; ++q) {
            const double pq = probs[q] / z;
            ex += pq * (q % spec.heatmap_width);
            ey += pq * (q / spec.heatmap_width);
        }
        out[2 * kp] = spec.coord_scale * ex + spec.coord_offset;
        out[2 * kp + 1] = spec.coord_scale * ey + spec.coord_offset;
    }
}

void soft_argmax_backward(std::span<const double> heat, const LayerSpec& spec,
                          std::span<const double> g, std::span<double> g_in) {
    const int hw = spec.heatmap_height * spec.heatmap_width;
    Vec probs(hw);
    for (int kp = 0; kp < spec.keypoints; ++kp) {
        const double* h = heat.data() + static_cast<std::size_t>(kp) * hw;
        double* gi = g_in.data() + static_cast<std::size_t>(kp) * hw;
        double mx = -std::numeric_limits<double>::infinity();
        for (int q = 0; q < hw; ++q) mx = std::max(mx, h[q]);
        double z = 0.0;
        for (int q = 0; q < hw; ++q) {
            probs[q] = std::exp((h[q] - mx) / spec.temperature);
            z += probs[q];
        }
        double ex = 0.0;
        double ey = 0.0;
        for (int q = 0; q < hw; ++q) {
            probs[q] /= z;
            ex += probs[q] * (q % spec.heatmap_width);
            ey += probs[q] * (q / spec.heatmap_width);
        }
        const double gx = g[2 * kp] * spec.coord_scale;
        const double gy = g[2 * kp + 1] * spec.coord_scale;
        for (int q = 0; q < hw; ++q) {
            const double dx = (q % spec.heatmap_width) - ex;
            const double dy = (q / spec.heatmap_width) - ey;
            gi[q] = probs[q] * (gx * dx + gy * dy) / spec.temperature;
        }
    }
}

void check_trace(const Network& net, const ForwardTrace& trace) {
    if (trace.network_id != net.id() || trace.network_revision != net.revision())
        throw ContractError("backward: trace was not produced by this network state");
}

}  // namespace

const char* to_string(LayerKind kind) {
    switch (kind) {
        case LayerKind::Dense: return "dense";
        case LayerKind::Conv2d: return "conv2d";
        case LayerKind::Relu: return "relu";
        case LayerKind::SoftArgmax: return "soft-argmax";
    }
    return "?";
}

LayerKind layer_kind_from_string(const std::string& name) {
    if (name == "dense") return LayerKind::Dense;
    if (name == "conv2d") return LayerKind::Conv2d;
    if (name == "relu" || name == "activation-relu") return LayerKind::Relu;
    if (name == "soft-argmax") return LayerKind::SoftArgmax;
    throw ConfigError("unknown layer kind '" + name + "'");
}

LayerSpec LayerSpec::dense(int in, int out) {
    LayerSpec s;
    s.kind = LayerKind::Dense;
    s.in_dim = in;
    s.out_dim = out;
    return s;
}

LayerSpec LayerSpec::conv2d(int in_channels, int out_channels, int kernel_size, int stride,
                            int padding) {
    LayerSpec s;
    s.kind = LayerKind::Conv2d;
    s.in_channels = in_channels;
    s.out_channels = out_channels;
    s.kernel_size = kernel_size;
    s.stride = stride;
    s.padding = padding;
    return s;
}

LayerSpec LayerSpec::relu() { return LayerSpec{}; }

LayerSpec LayerSpec::soft_argmax(int keypoints, int height, int width, double temperature,
                                 double scale) {
    LayerSpec s;
    s.kind = LayerKind::SoftArgmax;
    s.keypoints = keypoints;
    s.heatmap_height = height;
    s.heatmap_width = width;
    s.temperature = temperature;
    s.coord_scale = scale;
    s.coord_offset = (scale - 1.0) / 2.0;
    return s;
}

std::size_t LinearLayer::active_channels() const {
    return static_cast<std::size_t>(std::count(keep.begin(), keep.end(), std::uint8_t{1}));
}

Network::Identity::Identity() : id(g_next_network_id.fetch_add(1)) {}
Network::Identity::Identity(const Identity&) : id(g_next_network_id.fetch_add(1)) {}
Network::Identity& Network::Identity::operator=(const Identity&) {
    id = g_next_network_id.fetch_add(1);
    return *this;
}

Network::Network(const Network& other) = default;
Network& Network::operator=(const Network& other) = default;

Network::Network(Shape input, std::vector<LayerSpec> layers)
    : input_(input), layers_(std::move(layers)) {
    if (input_.channels <= 0 || input_.height <= 0 || input_.width <= 0)
        throw ConfigError("network input shape must be positive");
    if (layers_.empty()) throw ConfigError("network needs at least one layer");
    if (!layers_.front().is_linear()) throw ConfigError("first layer must be dense or conv2d");

    Shape cur = input_;
    for (std::size_t l = 0; l < layers_.size(); ++l) {
        const LayerSpec& s = layers_[l];
        const std::string where = "layer " + std::to_string(l) + " (" + to_string(s.kind) + "): ";
        switch (s.kind) {
            case LayerKind::Dense: {
                if (s.in_dim <= 0 || s.out_dim <= 0) throw ConfigError(where + "dims must be positive");
                if (static_cast<std::size_t>(s.in_dim) != cur.size())
                    throw ConfigError(where + "expects " + std::to_string(s.in_dim) + " inputs, got " +
                                      std::to_string(cur.size()));
                LinearLayer lin;
                lin.position = l;
                lin.in_shape = cur;
                lin.out_shape = Shape{s.out_dim, 1, 1};  // every neuron is its own channel
                lin.weights.assign(static_cast<std::size_t>(s.in_dim) * s.out_dim, 0.0);
                lin.bias.assign(s.out_dim, 0.0);
                lin.keep.assign(s.out_dim, 1);
                cur = lin.out_shape;
                linear_.push_back(std::move(lin));
                break;
            }
            case LayerKind::Conv2d: {
                if (s.in_channels <= 0 || s.out_channels <= 0 || s.kernel_size <= 0 || s.stride <= 0 ||
                    s.padding < 0)
                    throw ConfigError(where + "invalid conv geometry");
                if (s.in_channels != cur.channels)
                    throw ConfigError(where + "expects " + std::to_string(s.in_channels) +
                                      " input channels, got " + std::to_string(cur.channels));
                const int oh = conv_out_extent(cur.height, s.kernel_size, s.stride, s.padding);
                const int ow = conv_out_extent(cur.width, s.kernel_size, s.stride, s.padding);
                if (oh <= 0 || ow <= 0) throw ConfigError(where + "kernel larger than padded input");
                LinearLayer lin;
                lin.position = l;
                lin.in_shape = cur;
                lin.out_shape = Shape{s.out_channels, oh, ow};
                lin.weights.assign(static_cast<std::size_t>(s.out_channels) * s.in_channels *
                                       s.kernel_size * s.kernel_size,
                                   0.0);
                lin.bias.assign(s.out_channels, 0.0);
                lin.keep.assign(s.out_channels, 1);
                cur = lin.out_shape;
                linear_.push_back(std::move(lin));
                break;
            }
            case LayerKind::Relu:
                if (l == 0 || !layers_[l - 1].is_linear())
                    throw ConfigError(where + "relu must follow a linear layer");
                break;
            case LayerKind::SoftArgmax: {
                if (l + 1 != layers_.size()) throw ConfigError(where + "soft-argmax must be the final layer");
                if (s.keypoints <= 0 || s.heatmap_height <= 0 || s.heatmap_width <= 0)
                    throw ConfigError(where + "heatmap geometry must be positive");
                if (!(s.temperature > 0.0) || !(s.coord_scale > 0.0))
                    throw ConfigError(where + "temperature and scale must be positive");
                const std::size_t need = static_cast<std::size_t>(s.keypoints) * s.heatmap_height * s.heatmap_width;
                if (need != cur.size())
                    throw ConfigError(where + "expects " + std::to_string(need) + " heatmap values, got " +
                                      std::to_string(cur.size()));
                cur = Shape::flat(2 * s.keypoints);
                break;
            }
        }
        shapes_.push_back(cur);
    }
}

LinearLayer& Network::linear_mut(std::size_t k) {
    touch();
    return linear_.at(k);
}

const LayerSpec* Network::head() const {
    return layers_.back().kind == LayerKind::SoftArgmax ? &layers_.back() : nullptr;
}

double Network::head_lipschitz() const {
    if (head_lipschitz_override_ > 0.0) return head_lipschitz_override_;
    const LayerSpec* h = head();
    return h ? soft_argmax_lipschitz(*h) : 1.0;
}

void Network::set_head_lipschitz(double value) {
    if (!(value >= 0.0)) throw ContractError("set_head_lipschitz: value must be non-negative");
    head_lipschitz_override_ = value;
}

std::vector<std::span<double>> Network::parameters() {
    touch();
    std::vector<std::span<double>> out;
    for (auto& lin : linear_) {
        out.emplace_back(lin.weights);
        out.emplace_back(lin.bias);
    }
    return out;
}

std::size_t Network::parameter_count() const {
    std::size_t n = 0;
    for (const auto& lin : linear_) n += lin.weights.size() + lin.bias.size();
    return n;
}

void Network::apply_masks() {
    touch();
    for (std::size_t k = 0; k < linear_.size(); ++k) {
        LinearLayer& lin = linear_[k];
        const std::size_t per_out = lin.weights.size() / lin.keep.size();
        for (std::size_t c = 0; c < lin.keep.size(); ++c) {
            if (lin.keep[c]) continue;
            std::fill_n(lin.weights.begin() + c * per_out, per_out, 0.0);
            lin.bias[c] = 0.0;
        }
        if (k + 1 == linear_.size()) continue;
        LinearLayer& next = linear_[k + 1];
        const LayerSpec& nspec = layers_[next.position];
        const std::size_t plane = lin.out_shape.plane();
        for (std::size_t c = 0; c < lin.keep.size(); ++c) {
            if (lin.keep[c]) continue;
            if (nspec.kind == LayerKind::Dense) {
                const std::size_t n_in = next.in_shape.size();
                for (std::size_t o = 0; o < next.out_shape.size(); ++o)
                    std::fill_n(next.weights.begin() + o * n_in + c * plane, plane, 0.0);
            } else {
                const std::size_t ksq = static_cast<std::size_t>(nspec.kernel_size) * nspec.kernel_size;
                for (int oc = 0; oc < nspec.out_channels; ++oc)
                    std::fill_n(next.weights.begin() + (oc * nspec.in_channels + c) * ksq, ksq, 0.0);
            }
        }
    }
}

void initialize_he(Network& net, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    for (std::size_t k = 0; k < net.num_linear(); ++k) {
        LinearLayer& lin = net.linear_mut(k);
        const LayerSpec& spec = net.linear_spec(k);
        const double fan_in = spec.kind == LayerKind::Dense
                                  ? static_cast<double>(spec.in_dim)
                                  : static_cast<double>(spec.in_channels) * spec.kernel_size * spec.kernel_size;
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / fan_in));
        for (double& w : lin.weights) w = dist(rng);
        std::fill(lin.bias.begin(), lin.bias.end(), 0.0);
    }
    net.apply_masks();
    net.seed_lineage.push_back(seed);
}

void forward(const Network& net, std::span<const double> x, ForwardTrace& trace) {
    if (x.size() != net.input_shape().size())
        throw ConfigError("forward: input has " + std::to_string(x.size()) + " values, network expects " +
                          std::to_string(net.input_shape().size()));
    const auto& layers = net.layers();
    const auto& shapes = net.layer_output_shapes();
    trace.input.assign(x.begin(), x.end());
    trace.layer_outputs.resize(layers.size());
    trace.linear_positions.clear();
    std::size_t k = 0;
    std::span<const double> cur = trace.input;
    for (std::size_t l = 0; l < layers.size(); ++l) {
        Vec& out = trace.layer_outputs[l];
        out.resize(shapes[l].size());
        switch (layers[l].kind) {
            case LayerKind::Dense:
                dense_forward(net.linear(k), cur, out, true);
                trace.linear_positions.push_back(l);
                ++k;
                break;
            case LayerKind::Conv2d:
                conv_forward(net.linear(k), layers[l], cur, out, true);
                trace.linear_positions.push_back(l);
                ++k;
                break;
            case LayerKind::Relu:
                for (std::size_t i = 0; i < out.size(); ++i) out[i] = cur[i] > 0.0 ? cur[i] : 0.0;
                break;
            case LayerKind::SoftArgmax:
                soft_argmax_into(cur, layers[l], out);
                break;
        }
        cur = out;
    }
    trace.network_id = net.id();
    trace.network_revision = net.revision();
}

ForwardTrace forward(const Network& net, std::span<const double> x) {
    ForwardTrace t;
    forward(net, x, t);
    return t;
}

ForwardTrace forward(const Network& net, const Tensor& x) {
    if (x.shape.size() != net.input_shape().size())
        throw ConfigError("forward: input tensor shape does not match the network input");
    return forward(net, std::span<const double>(x.data));
}

Vec predict(const Network& net, std::span<const double> x) {
    ForwardTrace t = forward(net, x);
    return std::move(t.layer_outputs.back());
}

Vec soft_argmax(std::span<const double> heatmaps, int keypoints, int height, int width,
                double temperature) {
    if (!(temperature > 0.0)) throw ContractError("soft_argmax: temperature must be positive");
    if (heatmaps.size() != static_cast<std::size_t>(keypoints) * height * width)
        throw ConfigError("soft_argmax: heatmap size mismatch");
    const LayerSpec spec = LayerSpec::soft_argmax(keypoints, height, width, temperature, 1.0);
    Vec out(2 * keypoints);
    soft_argmax_into(heatmaps, spec, out);
    return out;
}

double soft_argmax_lipschitz(const LayerSpec& head) {
    const double w = head.heatmap_width - 1.0;
    const double h = head.heatmap_height - 1.0;
    return head.coord_scale * std::sqrt(w * w + h * h) / (2.0 * head.temperature);
}

Gradients Gradients::zeros_like(const Network& net) {
    Gradients g;
    for (std::size_t k = 0; k < net.num_linear(); ++k) {
        g.weights.emplace_back(net.linear(k).weights.size(), 0.0);
        g.bias.emplace_back(net.linear(k).bias.size(), 0.0);
    }
    return g;
}

void Gradients::add(const Gradients& other, double scale) {
    for (std::size_t k = 0; k < weights.size(); ++k) {
        for (std::size_t i = 0; i < weights[k].size(); ++i) weights[k][i] += scale * other.weights[k][i];
        for (std::size_t i = 0; i < bias[k].size(); ++i) bias[k][i] += scale * other.bias[k][i];
    }
}

void Gradients::scale(double factor) {
    for (auto& w : weights)
        for (double& v : w) v *= factor;
    for (auto& b : bias)
        for (double& v : b) v *= factor;
}

void Gradients::set_zero() {
    for (auto& w : weights) std::fill(w.begin(), w.end(), 0.0);
    for (auto& b : bias) std::fill(b.begin(), b.end(), 0.0);
}

double Gradients::squared_norm() const {
    double s = 0.0;
    for (const auto& w : weights)
        for (double v : w) s += v * v;
    for (const auto& b : bias)
        for (double v : b) s += v * v;
    return s;
}

void backward_accumulate(const Network& net, const ForwardTrace& trace,
                         std::span<const double> output_gradient,
                         std::span<const Vec> pre_activation_gradients, Gradients& grads) {
    check_trace(net, trace);
    const auto& layers = net.layers();
    if (!output_gradient.empty() && output_gradient.size() != net.output_size())
        throw ContractError("backward: output gradient has the wrong size");
    if (grads.weights.size() != net.num_linear()) grads = Gradients::zeros_like(net);

    Vec g(net.output_size(), 0.0);
    if (!output_gradient.empty()) std::copy(output_gradient.begin(), output_gradient.end(), g.begin());
    Vec g_in;
    std::size_t k = net.num_linear();
    for (std::size_t l = layers.size(); l-- > 0;) {
        std::span<const double> in = l == 0 ? std::span<const double>(trace.input) : trace.layer_outputs[l - 1];
        switch (layers[l].kind) {
            case LayerKind::SoftArgmax:
                g_in.assign(in.size(), 0.0);
                soft_argmax_backward(in, layers[l], g, g_in);
                g.swap(g_in);
                break;
            case LayerKind::Relu:
                for (std::size_t i = 0; i < g.size(); ++i)
                    if (!(in[i] > 0.0)) g[i] = 0.0;
                break;
            case LayerKind::Dense:
            case LayerKind::Conv2d: {
                --k;
                if (k < pre_activation_gradients.size() && !pre_activation_gradients[k].empty()) {
                    const Vec& seed = pre_activation_gradients[k];
                    if (seed.size() != g.size())
                        throw ContractError("backward: pre-activation gradient has the wrong size");
                    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
                }
                const LinearLayer& lin = net.linear(k);
                if (l == 0) g_in.clear();
                else g_in.assign(in.size(), 0.0);
                std::span<double> gin_span = l == 0 ? std::span<double>() : std::span<double>(g_in);
                if (layers[l].kind == LayerKind::Dense)
                    dense_backward(lin, in, g, gin_span, grads.weights[k].data(), grads.bias[k].data());
                else
                    conv_backward(lin, layers[l], in, g, gin_span, grads.weights[k].data(), grads.bias[k].data());
                if (l == 0) return;
                g.swap(g_in);
                break;
            }
        }
    }
}

Gradients backward(const Network& net, const ForwardTrace& trace,
                   std::span<const double> output_gradient) {
    Gradients g = Gradients::zeros_like(net);
    backward_accumulate(net, trace, output_gradient, {}, g);
    mask_gradients(net, g);
    return g;
}

void mask_gradients(const Network& net, Gradients& grads) {
    for (std::size_t k = 0; k < net.num_linear(); ++k) {
        const LinearLayer& lin = net.linear(k);
        const std::size_t per_out = lin.weights.size() / lin.keep.size();
        for (std::size_t c = 0; c < lin.keep.size(); ++c) {
            if (lin.keep[c]) continue;
            std::fill_n(grads.weights[k].begin() + c * per_out, per_out, 0.0);
            grads.bias[k][c] = 0.0;
        }
        if (k + 1 == net.num_linear()) continue;
        const LinearLayer& next = net.linear(k + 1);
        const LayerSpec& nspec = net.linear_spec(k + 1);
        const std::size_t plane = lin.out_shape.plane();
        for (std::size_t c = 0; c < lin.keep.size(); ++c) {
            if (lin.keep[c]) continue;
            if (nspec.kind == LayerKind::Dense) {
                const std::size_t n_in = next.in_shape.size();
                for (std::size_t o = 0; o < next.out_shape.size(); ++o)
                    std::fill_n(grads.weights[k + 1].begin() + o * n_in + c * plane, plane, 0.0);
            } else {
                const std::size_t ksq = static_cast<std::size_t>(nspec.kernel_size) * nspec.kernel_size;
                for (int oc = 0; oc < nspec.out_channels; ++oc)
                    std::fill_n(grads.weights[k + 1].begin() + (oc * nspec.in_channels + c) * ksq, ksq, 0.0);
            }
        }
    }
}

LinearOperator matrix_operator(Vec row_major, std::size_t rows, std::size_t cols) {
    if (row_major.size() != rows * cols) throw ContractError("matrix_operator: size mismatch");
    auto m = std::make_shared<const Vec>(std::move(row_major));
    LinearOperator op;
    op.in_dim = cols;
    op.out_dim = rows;
    op.apply = [m, rows, cols](std::span<const double> x, std::span<double> y) {
        for (std::size_t r = 0; r < rows; ++r) {
            double acc = 0.0;
            for (std::size_t c = 0; c < cols; ++c) acc += (*m)[r * cols + c] * x[c];
            y[r] = acc;
        }
    };
    op.apply_transpose = [m, rows, cols](std::span<const double> y, std::span<double> x) {
        std::fill(x.begin(), x.end(), 0.0);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) x[c] += (*m)[r * cols + c] * y[r];
    };
    return op;
}

LinearOperator layer_operator(const Network& net, std::size_t k) {
    auto lin = std::make_shared<const LinearLayer>(net.linear(k));
    auto spec = std::make_shared<const LayerSpec>(net.linear_spec(k));
    LinearOperator op;
    op.in_dim = lin->in_shape.size();
    op.out_dim = lin->out_shape.size();
    if (spec->kind == LayerKind::Dense) {
        op.apply = [lin](std::span<const double> x, std::span<double> y) { dense_forward(*lin, x, y, false); };
        op.apply_transpose = [lin](std::span<const double> y, std::span<double> x) {
            dense_backward(*lin, {}, y, x, nullptr, nullptr);
        };
    } else {
        op.apply = [lin, spec](std::span<const double> x, std::span<double> y) {
            conv_forward(*lin, *spec, x, y, false);
        };
        op.apply_transpose = [lin, spec](std::span<const double> y, std::span<double> x) {
            conv_backward(*lin, *spec, {}, y, x, nullptr, nullptr);
        };
    }
    return op;
}

double spectral_norm(const LinearOperator& op, const PowerIterationOptions& options) {
    if (!(options.tol > 0.0)) throw ContractError("spectral_norm: tol must be positive");
    if (!op.apply || !op.apply_transpose) throw ContractError("spectral_norm: operator is incomplete");
    if (op.in_dim == 0 || op.out_dim == 0) return 0.0;

    std::mt19937_64 rng(options.seed);
    std::normal_distribution<double> dist(0.0, 1.0);
    Vec v(op.in_dim);
    for (double& x : v) x = dist(rng);
    Vec u(op.out_dim);
    Vec w(op.in_dim);

    double nv = norm_l2(v);
    for (double& x : v) x /= nv;
    double previous = -1.0;
    for (std::size_t it = 1; it <= options.max_iterations; ++it) {
        op.apply(v, u);
        op.apply_transpose(u, w);
        // Rayleigh quotient of AᵀA at v: ‖Av‖² ≤ σ_max².
        const double lambda = std::inner_product(u.begin(), u.end(), u.begin(), 0.0);
        const double nw = norm_l2(w);
        if (!std::isfinite(nw)) throw NumericError("spectral_norm: non-finite iterate");
        if (nw == 0.0) return 0.0;
        if (previous >= 0.0 && std::abs(lambda - previous) <= options.tol * lambda) {
            return std::sqrt(std::max(lambda, 0.0));
        }
        previous = lambda;
        for (std::size_t i = 0; i < v.size(); ++i) v[i] = w[i] / nw;
    }
    throw ConvergenceError("spectral_norm: power iteration did not converge", options.max_iterations);
}

Vec layer_spectral_norms(const Network& net, const PowerIterationOptions& options) {
    Vec norms;
    for (std::size_t k = 0; k < net.num_linear(); ++k) norms.push_back(spectral_norm(layer_operator(net, k), options));
    return norms;
}

double lipschitz_from_norms(std::span<const double> norms, double head_lipschitz, std::size_t depth,
                            const LipschitzOptions& options) {
    const std::size_t L = norms.size();
    if (depth >= L) throw ContractError("lipschitz_to_output: layer index out of range");
    double c = head_lipschitz;
    for (std::size_t k = depth; k < L; ++k) c *= norms[k];  // ‖W^{k+1}‖ · L_σ (ReLU: 1)
    if (options.printed_leading_factor && depth >= 1) c *= norms[depth - 1];
    return c;
}

double lipschitz_to_output(const Network& net, std::size_t depth, const LipschitzOptions& options,
                           const PowerIterationOptions& power) {
    if (depth >= net.num_linear()) throw ContractError("lipschitz_to_output: layer index out of range");
    Vec norms(net.num_linear(), 0.0);
    for (std::size_t k = depth; k < net.num_linear(); ++k) norms[k] = spectral_norm(layer_operator(net, k), power);
    if (options.printed_leading_factor && depth >= 1)
        norms[depth - 1] = spectral_norm(layer_operator(net, depth - 1), power);
    return lipschitz_from_norms(norms, net.head_lipschitz(), depth, options);
}

void prune_channels_in_place(Network& net, std::size_t layer, std::span<const std::uint8_t> keep) {
    if (layer >= net.num_linear()) throw ContractError("prune_channels: layer index out of range");
    LinearLayer& lin = net.linear_mut(layer);
    if (keep.size() != lin.keep.size())
        throw ContractError("prune_channels: keep vector length " + std::to_string(keep.size()) +
                            " != channel count " + std::to_string(lin.keep.size()));
    if (std::none_of(keep.begin(), keep.end(), [](std::uint8_t b) { return b != 0; }))
        throw ContractError("prune_channels: at least one channel must be kept");
    for (std::size_t c = 0; c < keep.size(); ++c)
        if (!keep[c]) lin.keep[c] = 0;
    if (lin.active_channels() == 0) throw ContractError("prune_channels: mask would remove every channel");
    net.apply_masks();
}

Network prune_channels(const Network& net, std::size_t layer, std::span<const std::uint8_t> keep) {
    Network out = net;
    prune_channels_in_place(out, layer, keep);
    return out;
}

std::vector<int> channel_map(const Network& net, std::size_t k) {
    const LinearLayer& lin = net.linear(k);
    std::vector<int> map(lin.neurons());
    for (std::size_t n = 0; n < map.size(); ++n) map[n] = lin.channel_of(n);
    return map;
}

Network compact(const Network& net) {
    const std::size_t L = net.num_linear();
    std::vector<LayerSpec> specs = net.layers();
    // Kept channel indices per linear layer; the last layer keeps everything.
    std::vector<std::vector<int>> kept(L);
    for (std::size_t k = 0; k < L; ++k) {
        const LinearLayer& lin = net.linear(k);
        for (int c = 0; c < lin.channels(); ++c)
            if (k + 1 == L || lin.keep[c]) kept[k].push_back(c);
    }
    for (std::size_t k = 0; k < L; ++k) {
        LayerSpec& s = specs[net.linear(k).position];
        const int out_c = static_cast<int>(kept[k].size());
        if (s.kind == LayerKind::Conv2d) {
            s.out_channels = out_c;
            if (k > 0) s.in_channels = static_cast<int>(kept[k - 1].size());
        } else {
            s.out_dim = out_c;
            if (k > 0) s.in_dim = static_cast<int>(kept[k - 1].size() * net.linear(k - 1).out_shape.plane());
        }
    }
    Network out(net.input_shape(), specs);
    for (std::size_t k = 0; k < L; ++k) {
        const LinearLayer& src = net.linear(k);
        const LayerSpec& sspec = net.linear_spec(k);
        LinearLayer& dst = out.linear_mut(k);
        const std::vector<int> all_in = [&] {
            std::vector<int> v;
            if (k == 0)
                for (int c = 0; c < src.in_shape.channels; ++c) v.push_back(c);
            return v;
        }();
        const std::vector<int>& in_kept = k == 0 ? all_in : kept[k - 1];
        for (std::size_t oi = 0; oi < kept[k].size(); ++oi) {
            const int oc = kept[k][oi];
            dst.bias[oi] = src.bias[oc];
            dst.keep[oi] = src.keep[oc];
            if (sspec.kind == LayerKind::Conv2d) {
                const std::size_t ksq = static_cast<std::size_t>(sspec.kernel_size) * sspec.kernel_size;
                for (std::size_t ii = 0; ii < in_kept.size(); ++ii)
                    std::copy_n(src.weights.begin() + (oc * sspec.in_channels + in_kept[ii]) * ksq, ksq,
                                dst.weights.begin() + (oi * in_kept.size() + ii) * ksq);
            } else {
                const std::size_t plane = src.in_shape.plane();
                const std::size_t n_in_src = src.in_shape.size();
                const std::size_t n_in_dst = dst.in_shape.size();
                for (std::size_t ii = 0; ii < in_kept.size(); ++ii)
                    std::copy_n(src.weights.begin() + oc * n_in_src + in_kept[ii] * plane, plane,
                                dst.weights.begin() + oi * n_in_dst + ii * plane);
            }
        }
    }
    if (net.head_lipschitz_overridden()) out.set_head_lipschitz(net.head_lipschitz());
    out.seed_lineage = net.seed_lineage;
    out.apply_masks();
    return out;
}

Network make_cnn_small(int height, int width, int keypoints, int width_multiplier, double temperature) {
    if (height % 8 != 0 || width % 8 != 0) throw ConfigError("cnn-small: image sides must be multiples of 8");
    const int w = width_multiplier;
    const int hh = height / 4;
    const int hw = width / 4;
    std::vector<LayerSpec> layers = {
        LayerSpec::conv2d(1, w, 3, 1, 1),
        LayerSpec::relu(),
        LayerSpec::conv2d(w, w, 3, 2, 1),
        LayerSpec::relu(),
        LayerSpec::conv2d(w, 2 * w, 3, 2, 1),
        LayerSpec::relu(),
        LayerSpec::conv2d(2 * w, 2 * w, 3, 2, 1),
        LayerSpec::relu(),
        LayerSpec::dense(2 * w * (height / 8) * (width / 8), keypoints * hh * hw),
        LayerSpec::soft_argmax(keypoints, hh, hw, temperature, 4.0),
    };
    return Network(Shape{1, height, width}, std::move(layers));
}

}  // namespace usn
