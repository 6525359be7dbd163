#pragma once

#include <cstddef>
#include <random>
#include <string>
#include <vector>

#include "usn/tensor.hpp"

namespace usn {

enum class PerturbationKind { Brightness, Contrast };

const char* to_string(PerturbationKind kind);
PerturbationKind perturbation_kind_from_string(const std::string& name);

/// Semantic perturbation h(s) with a one-dimensional parameter s, |s - s0| <= epsilon.
/// Brightness: clip(x0 + s), s0 = 0. Contrast: clip(s * x0), s0 = 1. Pixels live in [0, 1].
struct PerturbationSpec {
    PerturbationKind kind = PerturbationKind::Brightness;
    double epsilon = 0.0;

    double center() const { return kind == PerturbationKind::Brightness ? 0.0 : 1.0; }
    double lower() const { return center() - epsilon; }
    double upper() const { return center() + epsilon; }
    std::string label() const;
};

void validate(const PerturbationSpec& spec);

Image apply(const PerturbationSpec& spec, const Image& x0, double s);
/// Writes h(s) into `out` (same size as x0) without range checks on s.
void apply_unchecked(const PerturbationSpec& spec, std::span<const double> x0, double s,
                     std::span<double> out);

struct PerturbationSamples {
    std::vector<double> parameters;
    std::vector<Image> images;
};

/// m parameters drawn i.i.d. uniform on [s0 - eps, s0 + eps].
PerturbationSamples sample(const PerturbationSpec& spec, const Image& x0, std::size_t m,
                           std::mt19937_64& rng);

struct GridCell {
    double lower = 0.0;
    double upper = 0.0;
    double center = 0.0;
    Image image;                      // h(center)
    double input_radius_bound = 0.0;  // >= max over the cell of ‖h(s) - h(center)‖₂
};

/// Equal-width partition of [s0 - eps, s0 + eps] into n_cells.
std::vector<GridCell> grid(const PerturbationSpec& spec, const Image& x0, std::size_t n_cells);

/// ‖h(s) - h(c)‖₂ bound for |s - c| <= half_width. Clipping is 1-Lipschitz, so the
/// pre-clip bound is sound.
double input_radius_bound(const PerturbationSpec& spec, const Image& x0, double half_width);

}  // namespace usn
