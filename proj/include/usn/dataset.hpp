#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "usn/certifier.hpp"
#include "usn/tensor.hpp"

namespace usn {

/// Gaussian blobs over a linear background ramp. Keypoint k is drawn inside cell k of a
/// near-square grid over the image, at least `margin` pixels from the cell border.
struct SceneParams {
    int height = 32;
    int width = 32;
    int keypoints = 8;
    double blob_sigma = 1.5;
    double amplitude = 0.6;
    double background = 0.2;
    double gradient = 0.15;  // largest ramp amplitude across the image
    double margin = 2.0;
};

void validate(const SceneParams& p);

struct SyntheticScene {
    Image image;
    Vec keypoints;  // [x0, y0, ...], x is the column, pixel centres at integers
    std::uint64_t seed = 0;
};

/// Background level + ramp of `ramp` along direction `angle`, plus one blob of height
/// `amplitude` per keypoint, clipped to [0, 1].
Image render_scene(const SceneParams& p, std::span<const double> keypoints, double angle = 0.0, double ramp = 0.0,
                   double amplitude = -1.0);

SyntheticScene generate_scene(const SceneParams& p, std::uint64_t seed);

struct Dataset {
    SceneParams params;
    std::uint64_t seed = 0;
    std::vector<LabeledImage> train;
    std::vector<LabeledImage> val;
    std::vector<LabeledImage> test;
};

Dataset generate_dataset(std::size_t n_train, std::size_t n_val, std::size_t n_test, const SceneParams& p,
                         std::uint64_t seed);

/// CSV rows: id,x0,y0,...,p0,p1,... with pixels in row-major order.
std::string split_csv(std::span<const LabeledImage> split, const SceneParams& p);

/// Writes train.csv, val.csv, test.csv and dataset.json into `dir`.
void save_dataset(const Dataset& d, const std::filesystem::path& dir);
Dataset load_dataset(const std::filesystem::path& dir);

/// FNV-1a over the serialized splits.
std::uint64_t dataset_checksum(const Dataset& d);

}  // namespace usn
