#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "usn/tensor.hpp"

namespace usn {

enum class LayerKind { Dense, Conv2d, Relu, SoftArgmax };

const char* to_string(LayerKind kind);
LayerKind layer_kind_from_string(const std::string& name);

struct LayerSpec {
    LayerKind kind = LayerKind::Relu;

    int in_dim = 0;
    int out_dim = 0;

    int in_channels = 0;
    int out_channels = 0;
    int kernel_size = 0;
    int stride = 1;
    int padding = 0;

    // Soft-argmax head: K heatmaps of heatmap_height x heatmap_width. Coordinates are
    // mapped to image pixels by coord_scale * c + coord_offset.
    int keypoints = 0;
    int heatmap_height = 0;
    int heatmap_width = 0;
    double temperature = 1.0;
    double coord_scale = 1.0;
    double coord_offset = 0.0;

    static LayerSpec dense(int in, int out);
    static LayerSpec conv2d(int in_channels, int out_channels, int kernel_size, int stride = 1,
                            int padding = 0);
    static LayerSpec relu();
    /// `scale` is the heatmap stride in image pixels; the offset maps heatmap pixel
    /// centres onto image pixel centres.
    static LayerSpec soft_argmax(int keypoints, int height, int width, double temperature = 1.0,
                                 double scale = 1.0);

    bool is_linear() const { return kind == LayerKind::Dense || kind == LayerKind::Conv2d; }
};

/// Parameters of one dense or conv layer. Dense weights are [out][in]; conv kernels are
/// [out_c][in_c][k][k]. Conv biases are per output channel.
struct LinearLayer {
    std::size_t position = 0;  // index into Network::layers()
    Shape in_shape;
    Shape out_shape;
    Vec weights;
    Vec bias;
    std::vector<std::uint8_t> keep;  // one flag per output channel

    int channels() const { return out_shape.channels; }
    std::size_t neurons() const { return out_shape.size(); }
    int channel_of(std::size_t neuron) const {
        return static_cast<int>(neuron / out_shape.plane());
    }
    std::size_t active_channels() const;
};

/// Sequential network: linear layers (dense/conv) separated by ReLUs, optionally
/// terminated by a soft-argmax keypoint head.
class Network {
public:
    Network(Shape input, std::vector<LayerSpec> layers);

    Network(const Network& other);
    Network& operator=(const Network& other);
    Network(Network&&) noexcept = default;
    Network& operator=(Network&&) noexcept = default;

    const Shape& input_shape() const { return input_; }
    const std::vector<LayerSpec>& layers() const { return layers_; }
    const std::vector<Shape>& layer_output_shapes() const { return shapes_; }
    Shape output_shape() const { return shapes_.back(); }
    std::size_t output_size() const { return shapes_.back().size(); }

    std::size_t num_linear() const { return linear_.size(); }
    const LinearLayer& linear(std::size_t k) const { return linear_.at(k); }
    const LayerSpec& linear_spec(std::size_t k) const { return layers_[linear_.at(k).position]; }
    /// Mutable access invalidates outstanding forward traces.
    LinearLayer& linear_mut(std::size_t k);

    const LayerSpec* head() const;
    /// Lipschitz constant of everything after the last linear layer (1 without a head).
    double head_lipschitz() const;
    void set_head_lipschitz(double value);
    bool head_lipschitz_overridden() const { return head_lipschitz_override_ > 0.0; }

    std::vector<std::span<double>> parameters();
    std::size_t parameter_count() const;

    /// Zeroes every parameter tied to a masked channel: its own filter and bias and the
    /// next linear layer's incoming weights.
    void apply_masks();

    std::uint64_t id() const { return identity_.id; }
    std::uint64_t revision() const { return revision_; }
    void touch() { ++revision_; }

    std::vector<std::uint64_t> seed_lineage;

private:
    struct Identity {
        Identity();
        Identity(const Identity&);
        Identity& operator=(const Identity&);
        Identity(Identity&&) noexcept = default;
        Identity& operator=(Identity&&) noexcept = default;
        std::uint64_t id;
    };

    Shape input_;
    std::vector<LayerSpec> layers_;
    std::vector<Shape> shapes_;
    std::vector<LinearLayer> linear_;
    double head_lipschitz_override_ = 0.0;
    std::uint64_t revision_ = 0;
    Identity identity_;
};

/// He-normal weights, zero biases. Appends `seed` to the lineage.
void initialize_he(Network& net, std::uint64_t seed);

struct ForwardTrace {
    Vec input;
    std::vector<Vec> layer_outputs;               // one per entry of Network::layers()
    std::vector<std::size_t> linear_positions;    // positions of the linear layers
    std::uint64_t network_id = 0;
    std::uint64_t network_revision = 0;

    std::size_t num_pre_activations() const { return linear_positions.size(); }
    /// f^{k+1}(x): output of the k-th linear layer (0-based).
    std::span<const double> pre_activation(std::size_t k) const {
        return layer_outputs[linear_positions[k]];
    }
    std::span<const double> output() const { return layer_outputs.back(); }
};

ForwardTrace forward(const Network& net, std::span<const double> x);
ForwardTrace forward(const Network& net, const Tensor& x);
/// Reuses the buffers of `trace`.
void forward(const Network& net, std::span<const double> x, ForwardTrace& trace);
Vec predict(const Network& net, std::span<const double> x);

/// Softmax-weighted mean pixel coordinate for each of `keypoints` heatmaps.
/// Output layout is [x0, y0, x1, y1, ...] with x the column index.
Vec soft_argmax(std::span<const double> heatmaps, int keypoints, int height, int width,
                double temperature);

/// ℓ2 Lipschitz bound of the soft-argmax head: scale * sqrt((W-1)^2 + (H-1)^2) / (2T).
double soft_argmax_lipschitz(const LayerSpec& head);

struct Gradients {
    std::vector<Vec> weights;
    std::vector<Vec> bias;

    static Gradients zeros_like(const Network& net);
    void add(const Gradients& other, double scale = 1.0);
    void scale(double factor);
    void set_zero();
    double squared_norm() const;
};

/// Parameter gradients of <output_gradient, f^L(x)>.
Gradients backward(const Network& net, const ForwardTrace& trace,
                   std::span<const double> output_gradient);

/// Accumulates into `grads`. `pre_activation_gradients[k]`, when non-empty, is added as
/// the gradient with respect to f^{k+1}(x). An empty output_gradient means zero.
void backward_accumulate(const Network& net, const ForwardTrace& trace,
                         std::span<const double> output_gradient,
                         std::span<const Vec> pre_activation_gradients, Gradients& grads);

void mask_gradients(const Network& net, Gradients& grads);

/// Matrix-free view of a linear map.
struct LinearOperator {
    std::size_t in_dim = 0;
    std::size_t out_dim = 0;
    std::function<void(std::span<const double>, std::span<double>)> apply;
    std::function<void(std::span<const double>, std::span<double>)> apply_transpose;
};

LinearOperator matrix_operator(Vec row_major, std::size_t rows, std::size_t cols);
/// Weight part of a dense or conv layer (bias excluded), including stride and padding.
LinearOperator layer_operator(const Network& net, std::size_t k);

struct PowerIterationOptions {
    double tol = 1e-8;
    std::size_t max_iterations = 10000;
    std::uint64_t seed = 0x5eedULL;
};

double spectral_norm(const LinearOperator& op, const PowerIterationOptions& options = {});
Vec layer_spectral_norms(const Network& net, const PowerIterationOptions& options = {});

struct LipschitzOptions {
    /// Multiply in ‖W^i‖ as well, reproducing the constant exactly as printed.
    bool printed_leading_factor = false;
};

/// C_i bounding ‖f^L(x) - f^L(x0)‖ by ‖f^i(x) - f^i(x0)‖₂. `depth` = i counts linear
/// layers already applied; depth 0 measures the deviation at the input.
double lipschitz_to_output(const Network& net, std::size_t depth,
                           const LipschitzOptions& options = {},
                           const PowerIterationOptions& power = {});
double lipschitz_from_norms(std::span<const double> norms, double head_lipschitz,
                            std::size_t depth, const LipschitzOptions& options = {});

/// Masks channels of linear layer `layer` where keep is false (cumulative with the
/// existing mask) and zeroes the tied parameters.
Network prune_channels(const Network& net, std::size_t layer, std::span<const std::uint8_t> keep);
void prune_channels_in_place(Network& net, std::size_t layer, std::span<const std::uint8_t> keep);

/// Physically removes masked channels of every linear layer that feeds another linear
/// layer. The final linear layer keeps its width so the output layout is unchanged.
Network compact(const Network& net);

/// Neuron-to-channel partition for linear layer k.
std::vector<int> channel_map(const Network& net, std::size_t k);

/// Desk-scale keypoint CNN: 4 conv + 1 dense + soft-argmax, heatmaps at 1/4 resolution.
Network make_cnn_small(int height, int width, int keypoints, int width_multiplier = 8,
                       double temperature = 1.0);

}  // namespace usn
