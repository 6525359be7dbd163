#include "usn/perturbation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "usn/errors.hpp"

namespace usn {

const char* to_string(PerturbationKind kind) {
    return kind == PerturbationKind::Brightness ? "brightness" : "contrast";
}

PerturbationKind perturbation_kind_from_string(const std::string& name) {
    if (name == "brightness") return PerturbationKind::Brightness;
    if (name == "contrast") return PerturbationKind::Contrast;
    throw ConfigError("unknown perturbation kind '" + name + "'");
}

std::string PerturbationSpec::label() const {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s@%.6g", to_string(kind), epsilon);
    return buf;
}

void validate(const PerturbationSpec& spec) {
    if (!(spec.epsilon >= 0.0) || !std::isfinite(spec.epsilon))
        throw ContractError("perturbation: epsilon must be a finite non-negative number");
}

void apply_unchecked(const PerturbationSpec& spec, std::span<const double> x0, double s,
                     std::span<double> out) {
    if (spec.kind == PerturbationKind::Brightness) {
        for (std::size_t i = 0; i < x0.size(); ++i) out[i] = std::clamp(x0[i] + s, 0.0, 1.0);
    } else {
        for (std::size_t i = 0; i < x0.size(); ++i) out[i] = std::clamp(s * x0[i], 0.0, 1.0);
    }
}

Image apply(const PerturbationSpec& spec, const Image& x0, double s) {
    validate(spec);
    const double slack = 1e-12 * std::max(1.0, std::abs(spec.center()));
    if (!(std::abs(s - spec.center()) <= spec.epsilon + slack))
        throw ContractError("perturbation: parameter " + std::to_string(s) + " outside radius " +
                            std::to_string(spec.epsilon));
    Image out(x0.shape);
    apply_unchecked(spec, x0.data, s, out.data);
    return out;
}

PerturbationSamples sample(const PerturbationSpec& spec, const Image& x0, std::size_t m,
                           std::mt19937_64& rng) {
    validate(spec);
    USN_REQUIRE(m >= 1, "need at least one sample");
    std::uniform_real_distribution<double> dist(spec.lower(), spec.upper());
    PerturbationSamples out;
    out.parameters.reserve(m);
    out.images.reserve(m);
    for (std::size_t k = 0; k < m; ++k) {
        const double s = spec.epsilon > 0.0 ? dist(rng) : spec.center();
        out.parameters.push_back(s);
        Image img(x0.shape);
        apply_unchecked(spec, x0.data, s, img.data);
        out.images.push_back(std::move(img));
    }
    return out;
}

double input_radius_bound(const PerturbationSpec& spec, const Image& x0, double half_width) {
    if (spec.kind == PerturbationKind::Brightness)
        return half_width * std::sqrt(static_cast<double>(x0.data.size()));
    return half_width * norm_l2(x0.data);
}

std::vector<GridCell> grid(const PerturbationSpec& spec, const Image& x0, std::size_t n_cells) {
    validate(spec);
    USN_REQUIRE(n_cells >= 1, "n_cells must be at least 1");
    const double lo = spec.lower();
    const double width = 2.0 * spec.epsilon / static_cast<double>(n_cells);
    std::vector<GridCell> cells;
    cells.reserve(n_cells);
    for (std::size_t c = 0; c < n_cells; ++c) {
        GridCell cell;
        cell.lower = lo + width * static_cast<double>(c);
        cell.upper = c + 1 == n_cells ? spec.upper() : lo + width * static_cast<double>(c + 1);
        cell.center = 0.5 * (cell.lower + cell.upper);
        cell.image = Image(x0.shape);
        apply_unchecked(spec, x0.data, cell.center, cell.image.data);
        cell.input_radius_bound = input_radius_bound(spec, x0, 0.5 * (cell.upper - cell.lower));
        cells.push_back(std::move(cell));
    }
    return cells;
}

}  // namespace usn
