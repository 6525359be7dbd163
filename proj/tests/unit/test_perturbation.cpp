#include "doctest.h"

#include "test_util.hpp"
#include "usn/errors.hpp"
#include "usn/perturbation.hpp"

using namespace usn;
using namespace usn::testing;

TEST_CASE("apply: identity parameters leave the image unchanged") {
    std::mt19937_64 rng(1);
    const Image x0 = random_image(rng, Shape{1, 8, 8});
    CHECK(apply({PerturbationKind::Brightness, 0.1}, x0, 0.0).data == x0.data);
    CHECK(apply({PerturbationKind::Contrast, 0.1}, x0, 1.0).data == x0.data);
}

TEST_CASE("apply: brightness shift of 2/255 on mid-gray adds exactly 2/255") {
    const Image x0(Shape{1, 4, 4}, 0.5);
    const double s = 2.0 / 255.0;
    const Image x = apply({PerturbationKind::Brightness, s}, x0, s);
    for (double v : x.data) CHECK(v == 0.5 + s);
}

TEST_CASE("apply: clipping and contrast scaling") {
    const Image x0(Shape{1, 1, 3}, Vec{0.0, 0.5, 0.99});
    const Image b = apply({PerturbationKind::Brightness, 0.05}, x0, 0.05);
    CHECK(b.data[0] == doctest::Approx(0.05));
    CHECK(b.data[2] == 1.0);
    const Image c = apply({PerturbationKind::Contrast, 0.1}, x0, 0.9);
    CHECK(c.data[1] == doctest::Approx(0.45));
    CHECK(c.data[0] == 0.0);
}

TEST_CASE("apply: parameter outside the radius is a contract error") {
    const Image x0(Shape{1, 2, 2}, 0.5);
    CHECK_THROWS_AS(apply({PerturbationKind::Brightness, 0.01}, x0, 0.02), ContractError);
    CHECK_THROWS_AS(apply({PerturbationKind::Contrast, 0.01}, x0, 0.5), ContractError);
    CHECK_THROWS_AS(apply({PerturbationKind::Brightness, -1.0}, x0, 0.0), ContractError);
}

TEST_CASE("apply: continuity under a shrinking parameter gap") {
    std::mt19937_64 rng(2);
    const Image x0 = random_image(rng, Shape{1, 8, 8}, 0.0, 1.0);
    for (PerturbationKind kind : {PerturbationKind::Brightness, PerturbationKind::Contrast}) {
        const PerturbationSpec spec{kind, 0.2};
        double prev = 1e9;
        for (double delta = 0.1; delta > 1e-7; delta /= 10) {
            const Image a = apply(spec, x0, spec.center());
            const Image b = apply(spec, x0, spec.center() + delta);
            const double gap = norm_l2(difference(a.data, b.data));
            CHECK(gap <= prev);
            CHECK(gap <= delta * 8.0 + 1e-15);
            prev = gap;
        }
    }
}

TEST_CASE("sample: zero radius, determinism and moments") {
    std::mt19937_64 rng(3);
    const Image x0 = random_image(rng, Shape{1, 4, 4});
    {
        std::mt19937_64 r(5);
        const auto s = sample({PerturbationKind::Contrast, 0.0}, x0, 7, r);
        for (const Image& img : s.images) CHECK(img.data == x0.data);
    }
    {
        std::mt19937_64 r1(9), r2(9);
        const PerturbationSpec spec{PerturbationKind::Brightness, 0.05};
        const auto a = sample(spec, x0, 20, r1);
        const auto b = sample(spec, x0, 20, r2);
        CHECK(a.parameters == b.parameters);
        for (std::size_t k = 0; k < 20; ++k) CHECK(a.images[k].data == b.images[k].data);
    }
    {
        const PerturbationSpec spec{PerturbationKind::Contrast, 5.0 / 255.0};
        const std::size_t m = 100000;
        std::mt19937_64 r(11);
        const auto s = sample(spec, Image(Shape{1, 1, 1}, 0.5), m, r);
        double mean = 0.0;
        for (double p : s.parameters) {
            CHECK(std::abs(p - spec.center()) <= spec.epsilon);
            mean += p;
        }
        mean /= static_cast<double>(m);
        CHECK(std::abs(mean - spec.center()) <= 3.0 * spec.epsilon / std::sqrt(3.0 * m));
    }
    std::mt19937_64 r(1);
    CHECK_THROWS_AS(sample({PerturbationKind::Brightness, 0.1}, x0, 0, r), ContractError);
}

TEST_CASE("grid: partition and closed-form bounds") {
    const double eps = 2.0 / 255.0;
    const PerturbationSpec spec{PerturbationKind::Brightness, eps};
    const Image x0(Shape{1, 64, 64}, 0.5);

    const auto one = grid(spec, x0, 1);
    REQUIRE(one.size() == 1);
    CHECK(one[0].lower == doctest::Approx(-eps));
    CHECK(one[0].upper == doctest::Approx(eps));
    CHECK(one[0].center == doctest::Approx(0.0));

    const auto four = grid(spec, x0, 4);
    REQUIRE(four.size() == 4);
    CHECK(four.front().lower == -eps);
    CHECK(four.back().upper == eps);
    for (std::size_t c = 0; c < 4; ++c) {
        CHECK(four[c].input_radius_bound == doctest::Approx(eps * 16.0).epsilon(1e-12));
        if (c > 0) CHECK(four[c].lower == four[c - 1].upper);
    }

    const auto eight = grid(spec, x0, 8);
    for (std::size_t c = 0; c < 8; ++c)
        CHECK(eight[c].input_radius_bound == doctest::Approx(four[0].input_radius_bound / 2).epsilon(1e-12));

    CHECK_THROWS_AS(grid(spec, x0, 0), ContractError);
}

TEST_CASE("grid: input radius bounds are sound on random parameters") {
    std::mt19937_64 rng(4);
    const Image x0 = random_image(rng, Shape{1, 8, 8}, 0.0, 1.0);
    for (PerturbationKind kind : {PerturbationKind::Brightness, PerturbationKind::Contrast}) {
        const PerturbationSpec spec{kind, 0.3};
        for (const GridCell& cell : grid(spec, x0, 5)) {
            std::uniform_real_distribution<double> in_cell(cell.lower, cell.upper);
            for (int t = 0; t < 10000; ++t) {
                const Image x = apply(spec, x0, in_cell(rng));
                CHECK(norm_l2(difference(x.data, cell.image.data)) <= cell.input_radius_bound * (1 + 1e-12));
            }
        }
    }
}

TEST_CASE("perturbation kind names round trip") {
    CHECK(perturbation_kind_from_string(to_string(PerturbationKind::Contrast)) == PerturbationKind::Contrast);
    CHECK(perturbation_kind_from_string("brightness") == PerturbationKind::Brightness);
    CHECK_THROWS_AS(perturbation_kind_from_string("rotation"), ConfigError);
}
