#include "usn/checkpoint.hpp"

#include <fstream>

#include "usn/errors.hpp"

namespace usn {

using nlohmann::json;

json network_to_json(const Network& net) {
    json layers = json::array();
    std::size_t k = 0;
    for (const LayerSpec& s : net.layers()) {
        json l;
        l["kind"] = to_string(s.kind);
        switch (s.kind) {
            case LayerKind::Dense:
                l["in_dim"] = s.in_dim;
                l["out_dim"] = s.out_dim;
                break;
            case LayerKind::Conv2d:
                l["in_channels"] = s.in_channels;
                l["out_channels"] = s.out_channels;
                l["kernel_size"] = s.kernel_size;
                l["stride"] = s.stride;
                l["padding"] = s.padding;
                break;
            case LayerKind::SoftArgmax:
                l["keypoints"] = s.keypoints;
                l["heatmap_height"] = s.heatmap_height;
                l["heatmap_width"] = s.heatmap_width;
                l["temperature"] = s.temperature;
                l["coord_scale"] = s.coord_scale;
                l["coord_offset"] = s.coord_offset;
                break;
            case LayerKind::Relu:
                break;
        }
        if (s.is_linear()) {
            const LinearLayer& lin = net.linear(k++);
            l["weights"] = lin.weights;
            l["bias"] = lin.bias;
            l["mask"] = lin.keep;
        }
        layers.push_back(std::move(l));
    }
    json j;
    j["format"] = "usnprune-checkpoint";
    j["version"] = kCheckpointVersion;
    const Shape& in = net.input_shape();
    j["input_shape"] = {in.channels, in.height, in.width};
    j["head_lipschitz"] = net.head_lipschitz_overridden() ? json(net.head_lipschitz()) : json(nullptr);
    j["seed_lineage"] = net.seed_lineage;
    j["layers"] = std::move(layers);
    return j;
}

Network network_from_json(const json& j) {
    try {
        if (j.at("format").get<std::string>() != "usnprune-checkpoint")
            throw ConfigError("checkpoint: unexpected format tag");
        const int version = j.at("version").get<int>();
        if (version != kCheckpointVersion)
            throw ConfigError("checkpoint: unsupported version " + std::to_string(version));
        const auto shape = j.at("input_shape").get<std::vector<int>>();
        if (shape.size() != 3) throw ConfigError("checkpoint: input_shape needs 3 entries");

        std::vector<LayerSpec> specs;
        for (const json& l : j.at("layers")) {
            LayerSpec s;
            s.kind = layer_kind_from_string(l.at("kind").get<std::string>());
            switch (s.kind) {
                case LayerKind::Dense:
                    s.in_dim = l.at("in_dim").get<int>();
                    s.out_dim = l.at("out_dim").get<int>();
                    break;
                case LayerKind::Conv2d:
                    s.in_channels = l.at("in_channels").get<int>();
                    s.out_channels = l.at("out_channels").get<int>();
                    s.kernel_size = l.at("kernel_size").get<int>();
                    s.stride = l.at("stride").get<int>();
                    s.padding = l.at("padding").get<int>();
                    break;
                case LayerKind::SoftArgmax:
                    s.keypoints = l.at("keypoints").get<int>();
                    s.heatmap_height = l.at("heatmap_height").get<int>();
                    s.heatmap_width = l.at("heatmap_width").get<int>();
                    s.temperature = l.at("temperature").get<double>();
                    s.coord_scale = l.at("coord_scale").get<double>();
                    s.coord_offset = l.at("coord_offset").get<double>();
                    break;
                case LayerKind::Relu:
                    break;
            }
            specs.push_back(s);
        }
        Network net(Shape{shape[0], shape[1], shape[2]}, specs);
        std::size_t k = 0;
        for (const json& l : j.at("layers")) {
            const LayerKind kind = layer_kind_from_string(l.at("kind").get<std::string>());
            if (kind != LayerKind::Dense && kind != LayerKind::Conv2d) continue;
            LinearLayer& lin = net.linear_mut(k++);
            auto w = l.at("weights").get<Vec>();
            auto b = l.at("bias").get<Vec>();
            auto m = l.at("mask").get<std::vector<std::uint8_t>>();
            if (w.size() != lin.weights.size() || b.size() != lin.bias.size() || m.size() != lin.keep.size())
                throw ConfigError("checkpoint: parameter array sizes do not match layer " + std::to_string(k - 1));
            lin.weights = std::move(w);
            lin.bias = std::move(b);
            lin.keep = std::move(m);
        }
        if (!j.at("head_lipschitz").is_null()) net.set_head_lipschitz(j.at("head_lipschitz").get<double>());
        net.seed_lineage = j.at("seed_lineage").get<std::vector<std::uint64_t>>();
        net.apply_masks();
        return net;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("checkpoint: ") + e.what());
    }
}

void save_checkpoint(const Network& net, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
    out << network_to_json(net).dump() << '\n';
}

Network load_checkpoint(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open checkpoint " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::exception& e) {
        throw ConfigError("checkpoint " + path.string() + ": " + e.what());
    }
    return network_from_json(j);
}

}  // namespace usn
