#include "usn/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numbers>
#include <random>
#include <sstream>

#include "json.hpp"

#include "usn/errors.hpp"
#include "usn/rng.hpp"

namespace usn {

namespace {

struct CellGrid {
    int cols = 1;
    int rows = 1;
    double cell_w = 0.0;
    double cell_h = 0.0;
};

CellGrid cell_grid(const SceneParams& p) {
    CellGrid g;
    g.cols = static_cast<int>(std::ceil(std::sqrt(static_cast<double>(p.keypoints))));
    g.rows = (p.keypoints + g.cols - 1) / g.cols;
    g.cell_w = static_cast<double>(p.width) / g.cols;
    g.cell_h = static_cast<double>(p.height) / g.rows;
    return g;
}

std::uint64_t fnv1a(std::uint64_t h, const std::string& s) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string format_double(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

std::vector<LabeledImage> parse_split(const std::filesystem::path& path, const SceneParams& p) {
    std::ifstream in(path);
    if (!in) throw ConfigError("cannot open " + path.string());
    std::string line;
    if (!std::getline(in, line)) throw ConfigError(path.string() + ": missing header");
    const std::size_t n_kp = 2 * static_cast<std::size_t>(p.keypoints);
    const std::size_t n_px = static_cast<std::size_t>(p.height) * static_cast<std::size_t>(p.width);
    std::vector<LabeledImage> out;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ss(line);
        std::string field;
        LabeledImage li;
        std::getline(ss, li.id, ',');
        Vec values;
        while (std::getline(ss, field, ',')) values.push_back(std::stod(field));
        if (values.size() != n_kp + n_px)
            throw ConfigError(path.string() + ": row '" + li.id + "' has " + std::to_string(values.size()) +
                              " values, expected " + std::to_string(n_kp + n_px));
        li.keypoints.assign(values.begin(), values.begin() + static_cast<std::ptrdiff_t>(n_kp));
        li.image = Image(Shape{1, p.height, p.width}, Vec(values.begin() + static_cast<std::ptrdiff_t>(n_kp), values.end()));
        out.push_back(std::move(li));
    }
    return out;
}

}  // namespace

void validate(const SceneParams& p) {
    USN_REQUIRE(p.height >= 4 && p.width >= 4, "image must be at least 4x4");
    USN_REQUIRE(p.keypoints >= 1, "need at least one keypoint");
    USN_REQUIRE(p.blob_sigma > 0.0, "blob sigma must be positive");
    USN_REQUIRE(p.amplitude >= 0.0 && p.background >= 0.0 && p.gradient >= 0.0, "levels must be non-negative");
    USN_REQUIRE(p.margin >= 0.5, "margin must keep keypoints strictly inside the image");
    const CellGrid g = cell_grid(p);
    USN_REQUIRE(g.cell_w > 2.0 * p.margin && g.cell_h > 2.0 * p.margin,
                std::to_string(p.keypoints) + " keypoints do not fit a " + std::to_string(p.height) + "x" +
                    std::to_string(p.width) + " image with margin " + format_double(p.margin));
}

Image render_scene(const SceneParams& p, std::span<const double> keypoints, double angle, double ramp,
                   double amplitude) {
    USN_REQUIRE(keypoints.size() % 2 == 0, "keypoints come in (x, y) pairs");
    const double amp = amplitude < 0.0 ? p.amplitude : amplitude;
    Image img(Shape{1, p.height, p.width});
    const double ca = std::cos(angle);
    const double sa = std::sin(angle);
    const double inv = 1.0 / (2.0 * p.blob_sigma * p.blob_sigma);
    for (int y = 0; y < p.height; ++y)
        for (int x = 0; x < p.width; ++x) {
            const double u = static_cast<double>(x) / (p.width - 1) - 0.5;
            const double v = static_cast<double>(y) / (p.height - 1) - 0.5;
            double val = p.background + ramp * (ca * u + sa * v);
            for (std::size_t k = 0; k + 1 < keypoints.size(); k += 2) {
                const double dx = x - keypoints[k];
                const double dy = y - keypoints[k + 1];
                val += amp * std::exp(-(dx * dx + dy * dy) * inv);
            }
            img.at(0, y, x) = std::clamp(val, 0.0, 1.0);
        }
    return img;
}

SyntheticScene generate_scene(const SceneParams& p, std::uint64_t seed) {
    validate(p);
    std::mt19937_64 rng = make_rng({seed, 0x5ce9eULL});
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    const CellGrid g = cell_grid(p);
    SyntheticScene s;
    s.seed = seed;
    for (int k = 0; k < p.keypoints; ++k) {
        const int cx = k % g.cols;
        const int cy = k / g.cols;
        // Cells tile [-0.5, side - 0.5], the pixel extents.
        const double x0 = cx * g.cell_w - 0.5 + p.margin;
        const double y0 = cy * g.cell_h - 0.5 + p.margin;
        s.keypoints.push_back(x0 + u01(rng) * (g.cell_w - 2.0 * p.margin));
        s.keypoints.push_back(y0 + u01(rng) * (g.cell_h - 2.0 * p.margin));
    }
    const double angle = 2.0 * std::numbers::pi * u01(rng);
    const double ramp = p.gradient * u01(rng);
    const double amp = p.amplitude * (0.8 + 0.2 * u01(rng));
    s.image = render_scene(p, s.keypoints, angle, ramp, amp);
    return s;
}

Dataset generate_dataset(std::size_t n_train, std::size_t n_val, std::size_t n_test, const SceneParams& p,
                         std::uint64_t seed) {
    USN_REQUIRE(n_train >= 1 && n_val >= 1 && n_test >= 1, "every split needs at least one scene");
    validate(p);
    Dataset d;
    d.params = p;
    d.seed = seed;
    const auto fill = [&](std::vector<LabeledImage>& split, std::size_t n, const char* name, std::uint64_t tag) {
        std::mt19937_64 rng = make_rng({seed, tag});
        for (std::size_t i = 0; i < n; ++i) {
            SyntheticScene s = generate_scene(p, rng());
            char id[64];
            std::snprintf(id, sizeof id, "%s-%05zu", name, i);
            split.push_back({id, std::move(s.image), std::move(s.keypoints)});
        }
    };
    fill(d.train, n_train, "train", 1);
    fill(d.val, n_val, "val", 2);
    fill(d.test, n_test, "test", 3);
    return d;
}

std::string split_csv(std::span<const LabeledImage> split, const SceneParams& p) {
    std::string out = "id";
    for (int k = 0; k < p.keypoints; ++k) out += ",x" + std::to_string(k) + ",y" + std::to_string(k);
    for (int i = 0; i < p.height * p.width; ++i) out += ",p" + std::to_string(i);
    out += '\n';
    for (const LabeledImage& li : split) {
        out += li.id;
        for (double v : li.keypoints) out += ',' + format_double(v);
        for (double v : li.image.data) out += ',' + format_double(v);
        out += '\n';
    }
    return out;
}

void save_dataset(const Dataset& d, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    const auto write = [&](const char* name, const std::string& text) {
        std::ofstream out(dir / name, std::ios::binary);
        if (!out) throw std::runtime_error("cannot write " + (dir / name).string());
        out << text;
    };
    write("train.csv", split_csv(d.train, d.params));
    write("val.csv", split_csv(d.val, d.params));
    write("test.csv", split_csv(d.test, d.params));
    const SceneParams& p = d.params;
    nlohmann::ordered_json j = {
        {"seed", d.seed},
        {"n_train", d.train.size()},
        {"n_val", d.val.size()},
        {"n_test", d.test.size()},
        {"height", p.height},
        {"width", p.width},
        {"keypoints", p.keypoints},
        {"blob_sigma", p.blob_sigma},
        {"amplitude", p.amplitude},
        {"background", p.background},
        {"gradient", p.gradient},
        {"margin", p.margin},
        {"checksum", std::to_string(dataset_checksum(d))},
    };
    write("dataset.json", j.dump(2) + "\n");
}

Dataset load_dataset(const std::filesystem::path& dir) {
    std::ifstream in(dir / "dataset.json");
    if (!in) throw ConfigError("no dataset.json in " + dir.string());
    nlohmann::json j;
    try {
        in >> j;
        Dataset d;
        d.seed = j.at("seed").get<std::uint64_t>();
        SceneParams& p = d.params;
        p.height = j.at("height").get<int>();
        p.width = j.at("width").get<int>();
        p.keypoints = j.at("keypoints").get<int>();
        p.blob_sigma = j.at("blob_sigma").get<double>();
        p.amplitude = j.at("amplitude").get<double>();
        p.background = j.at("background").get<double>();
        p.gradient = j.at("gradient").get<double>();
        p.margin = j.at("margin").get<double>();
        d.train = parse_split(dir / "train.csv", p);
        d.val = parse_split(dir / "val.csv", p);
        d.test = parse_split(dir / "test.csv", p);
        return d;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(dir.string() + "/dataset.json: " + e.what());
    }
}

std::uint64_t dataset_checksum(const Dataset& d) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    h = fnv1a(h, split_csv(d.train, d.params));
    h = fnv1a(h, split_csv(d.val, d.params));
    h = fnv1a(h, split_csv(d.test, d.params));
    return h;
}

}  // namespace usn
