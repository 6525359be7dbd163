#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

namespace usn {

using Vec = std::vector<double>;

/// Channel-major (C, H, W) layout. Dense vectors use (1, 1, n).
struct Shape {
    int channels = 0;
    int height = 0;
    int width = 0;

    std::size_t size() const {
        return static_cast<std::size_t>(channels) * static_cast<std::size_t>(height) *
               static_cast<std::size_t>(width);
    }
    std::size_t plane() const {
        return static_cast<std::size_t>(height) * static_cast<std::size_t>(width);
    }
    bool operator==(const Shape&) const = default;

    static Shape flat(int n) { return Shape{1, 1, n}; }
};

struct Tensor {
    Shape shape;
    Vec data;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0) : shape(s), data(s.size(), fill) {}
    Tensor(Shape s, Vec values) : shape(s), data(std::move(values)) {}

    double& at(int c, int y, int x) {
        return data[(static_cast<std::size_t>(c) * shape.height + y) * shape.width + x];
    }
    double at(int c, int y, int x) const {
        return data[(static_cast<std::size_t>(c) * shape.height + y) * shape.width + x];
    }
};

using Image = Tensor;

inline double norm_l1(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += std::abs(x);
    return s;
}

inline double norm_l2(std::span<const double> v) {
    double s = 0.0;
    for (double x : v) s += x * x;
    return std::sqrt(s);
}

inline double norm_inf(std::span<const double> v) {
    double m = 0.0;
    for (double x : v) m = std::max(m, std::abs(x));
    return m;
}

inline Vec difference(std::span<const double> a, std::span<const double> b) {
    Vec out(a.size());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] - b[i];
    return out;
}

inline bool all_finite(std::span<const double> v) {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

}  // namespace usn
