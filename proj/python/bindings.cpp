#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <random>

#include "usn/certifier.hpp"
#include "usn/checkpoint.hpp"
#include "usn/dataset.hpp"
#include "usn/errors.hpp"
#include "usn/experiment.hpp"
#include "usn/network.hpp"
#include "usn/perturbation.hpp"
#include "usn/pruning.hpp"
#include "usn/usn_metrics.hpp"
#include "usn/wasserstein.hpp"

namespace py = pybind11;
using namespace usn;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

Array to_array(const Vec& v) { return Array(static_cast<py::ssize_t>(v.size()), v.data()); }

Array to_array(const Image& img) {
    const Shape s = img.shape;
    if (s.channels == 1) return Array({s.height, s.width}, img.data.data());
    return Array({s.channels, s.height, s.width}, img.data.data());
}

/// (H, W) or (C, H, W) array, checked against the expected shape.
Image to_image(const Array& a, const Shape& expected) {
    Shape s;
    if (a.ndim() == 2)
        s = {1, static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1))};
    else if (a.ndim() == 3)
        s = {static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)), static_cast<int>(a.shape(2))};
    else if (a.ndim() == 1 && static_cast<std::size_t>(a.size()) == expected.size())
        s = expected;
    else
        throw ConfigError("expected a (H, W) or (C, H, W) array");
    if (s.size() != expected.size())
        throw ConfigError("image has " + std::to_string(s.size()) + " values, network expects " +
                          std::to_string(expected.size()));
    return Image(expected, Vec(a.data(), a.data() + a.size()));
}

Image to_image(const Array& a) {
    if (a.ndim() == 2) return to_image(a, Shape{1, static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1))});
    if (a.ndim() == 3)
        return to_image(a, Shape{static_cast<int>(a.shape(0)), static_cast<int>(a.shape(1)),
                                 static_cast<int>(a.shape(2))});
    throw ConfigError("expected a (H, W) or (C, H, W) array");
}

py::dict result_dict(const CertificateResult& r) {
    py::dict d;
    d["verdict"] = to_string(r.verdict);
    d["method"] = to_string(r.method);
    d["margin"] = r.margin;
    d["confidence"] = r.confidence;
    d["wall_time"] = r.wall_time;
    d["bound"] = r.bound;
    d["cells"] = r.cells;
    d["failing_layer"] = r.failing_layer;
    d["failing_neuron"] = r.failing_neuron;
    d["failing_condition"] = r.failing_condition;
    d["witness"] = r.witness ? py::cast(*r.witness) : py::none();
    d["max_deviation"] = r.max_deviation;
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "USN-guided pruning and certification of keypoint CNNs";

    static py::exception<ConfigError> config_error(m, "ConfigError", PyExc_ValueError);
    static py::exception<ContractError> contract_error(m, "ContractError", PyExc_ValueError);
    static py::exception<NumericError> numeric_error(m, "NumericError", PyExc_ArithmeticError);
    py::register_exception_translator([](std::exception_ptr p) {
        try {
            if (p) std::rethrow_exception(p);
        } catch (const ConfigError& e) {
            py::set_error(config_error, e.what());
        } catch (const ContractError& e) {
            py::set_error(contract_error, e.what());
        } catch (const NumericError& e) {
            py::set_error(numeric_error, e.what());
        }
    });

    py::class_<Network>(m, "Network")
        .def_static("cnn_small", &make_cnn_small, py::arg("height") = 32, py::arg("width") = 32,
                    py::arg("keypoints") = 8, py::arg("width_multiplier") = 8, py::arg("temperature") = 1.0)
        .def_static("load", [](const std::filesystem::path& p) { return load_checkpoint(p); })
        .def("save", [](const Network& n, const std::filesystem::path& p) { save_checkpoint(n, p); })
        .def("initialize", &initialize_he, py::arg("seed"))
        .def_property_readonly("input_shape",
                               [](const Network& n) {
                                   const Shape s = n.input_shape();
                                   return py::make_tuple(s.channels, s.height, s.width);
                               })
        .def_property_readonly("output_size", &Network::output_size)
        .def_property_readonly("num_linear", &Network::num_linear)
        .def_property_readonly("parameter_count", &Network::parameter_count)
        .def_property_readonly("active_channels",
                               [](const Network& n) {
                                   std::vector<std::size_t> out;
                                   for (std::size_t k = 0; k < n.num_linear(); ++k)
                                       out.push_back(n.linear(k).active_channels());
                                   return out;
                               })
        .def("predict",
             [](const Network& n, const Array& x) { return to_array(predict(n, to_image(x, n.input_shape()).data)); })
        .def("pre_activations",
             [](const Network& n, const Array& x) {
                 const ForwardTrace t = forward(n, to_image(x, n.input_shape()).data);
                 py::list out;
                 for (std::size_t k = 0; k < n.num_linear(); ++k) {
                     const auto pa = t.pre_activation(k);
                     out.append(Array(static_cast<py::ssize_t>(pa.size()), pa.data()));
                 }
                 return out;
             })
        .def("lipschitz_to_output", [](const Network& n, std::size_t depth) { return lipschitz_to_output(n, depth); },
             py::arg("depth"))
        .def("spectral_norms", [](const Network& n) { return to_array(layer_spectral_norms(n)); })
        .def("compact", &compact)
        .def("prune_random",
             [](const Network& n, double rho, std::uint64_t seed) {
                 std::mt19937_64 rng(seed);
                 return random_prune_baseline(n, rho, conv_layers(n), rng).net;
             },
             py::arg("rho"), py::arg("seed") = 0);

    py::enum_<PerturbationKind>(m, "PerturbationKind")
        .value("brightness", PerturbationKind::Brightness)
        .value("contrast", PerturbationKind::Contrast);

    py::class_<PerturbationSpec>(m, "PerturbationSpec")
        .def(py::init([](PerturbationKind k, double eps) {
                 PerturbationSpec s{k, eps};
                 validate(s);
                 return s;
             }),
             py::arg("kind"), py::arg("epsilon"))
        .def_readonly("kind", &PerturbationSpec::kind)
        .def_readonly("epsilon", &PerturbationSpec::epsilon)
        .def("__repr__", [](const PerturbationSpec& s) {
            return std::string(to_string(s.kind)) + "@" + std::to_string(s.epsilon);
        });

    m.def("apply", [](const PerturbationSpec& s, const Array& x, double param) { return to_array(apply(s, to_image(x), param)); },
          py::arg("spec"), py::arg("image"), py::arg("s"));
    m.def(
        "sample",
        [](const PerturbationSpec& s, const Array& x, std::size_t count, std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            const PerturbationSamples ps = sample(s, to_image(x), count, rng);
            py::list images;
            for (const Image& img : ps.images) images.append(to_array(img));
            return py::make_tuple(to_array(ps.parameters), images);
        },
        py::arg("spec"), py::arg("image"), py::arg("m"), py::arg("seed") = 0);

    py::class_<KeypointCriterion>(m, "KeypointCriterion")
        .def(py::init([](double delta, double q) {
                 KeypointCriterion c{delta, q};
                 validate(c);
                 return c;
             }),
             py::arg("delta") = 1.0, py::arg("q") = std::numeric_limits<double>::infinity())
        .def_readonly("delta", &KeypointCriterion::delta)
        .def_readonly("q", &KeypointCriterion::q);

    m.def(
        "certify_grid",
        [](const Network& n, const Array& x, const PerturbationSpec& s, const KeypointCriterion& c, std::size_t n_cells,
           std::size_t max_cells) {
            return result_dict(certify_grid(n, to_image(x, n.input_shape()), s, c,
                                            GridOptions{n_cells, std::max(n_cells, max_cells), 1e-6},
                                            lipschitz_profile(n)));
        },
        py::arg("net"), py::arg("image"), py::arg("spec"), py::arg("criterion"), py::arg("n_cells") = 16,
        py::arg("max_cells") = 16);
    m.def(
        "certify_probabilistic",
        [](const Network& n, const Array& x, const PerturbationSpec& s, const KeypointCriterion& c, double alpha,
           std::size_t samples, std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            return result_dict(certify_probabilistic(n, to_image(x, n.input_shape()), s, c, alpha, samples, rng));
        },
        py::arg("net"), py::arg("image"), py::arg("spec"), py::arg("criterion"), py::arg("alpha") = 0.01,
        py::arg("m") = 256, py::arg("seed") = 0);
    m.def(
        "falsify",
        [](const Network& n, const Array& x, const PerturbationSpec& s, const KeypointCriterion& c, std::size_t samples,
           std::uint64_t seed) {
            std::mt19937_64 rng(seed);
            return result_dict(falsify(n, to_image(x, n.input_shape()), s, c, samples, rng));
        },
        py::arg("net"), py::arg("image"), py::arg("spec"), py::arg("criterion"), py::arg("m") = 256,
        py::arg("seed") = 0);

    m.def(
        "usn_stats",
        [](const Network& n, const Array& x0, const std::vector<Array>& samples, std::size_t layer, double eps_usn) {
            std::vector<Image> imgs;
            for (const Array& a : samples) imgs.push_back(to_image(a, n.input_shape()));
            const UsnStats s = usn_stats(n, to_image(x0, n.input_shape()), imgs, layer, eps_usn);
            py::dict d;
            d["layer"] = s.layer;
            d["unbiased"] = s.unbiased;
            d["smooth"] = s.smooth;
            d["per_neuron_unbiased"] = to_array(s.per_neuron_unbiased);
            d["per_neuron_smooth"] = to_array(s.per_neuron_smooth);
            d["per_neuron_variance"] = to_array(s.per_neuron_variance);
            d["importance"] = to_array(s.importance);
            d["sample_count"] = s.sample_count;
            return d;
        },
        py::arg("net"), py::arg("x0"), py::arg("samples"), py::arg("layer"), py::arg("eps_usn") = kDefaultEpsUsn);

    m.def(
        "w2_discrete",
        [](const Vec& pa, const Vec& wa, const Vec& pb, const Vec& wb) { return w2_discrete({pa, wa}, {pb, wb}); },
        py::arg("points_a"), py::arg("weights_a"), py::arg("points_b"), py::arg("weights_b"));

    m.def(
        "rho_at",
        [](int t, double rho, int n_steps, int t_start, int t_end, int t_interval) {
            return rho_at(t, PruningSchedule{rho, n_steps, t_start, t_end, t_interval});
        },
        py::arg("t"), py::arg("rho"), py::arg("n_steps"), py::arg("t_start"), py::arg("t_end"),
        py::arg("t_interval"));

    m.def(
        "generate_scene",
        [](std::uint64_t seed, int height, int width, int keypoints) {
            SceneParams p;
            p.height = height;
            p.width = width;
            p.keypoints = keypoints;
            const SyntheticScene s = generate_scene(p, seed);
            return py::make_tuple(to_array(s.image), to_array(s.keypoints));
        },
        py::arg("seed"), py::arg("height") = 32, py::arg("width") = 32, py::arg("keypoints") = 8);

    m.def(
        "run_sweep",
        [](const std::filesystem::path& config, const std::filesystem::path& out_dir, std::size_t jobs) {
            const SweepResult r = [&] {
                py::gil_scoped_release release;
                return run_sweep(load_config(config), out_dir, jobs);
            }();
            py::list rows;
            for (const ReportRow& row : r.report) {
                py::dict d;
                d["rule"] = row.rule;
                d["rho"] = row.rho;
                d["lambda_w"] = row.lambda_w;
                d["spec"] = row.spec;
                d["runs"] = row.runs;
                d["images"] = row.images;
                d["holds"] = row.holds;
                d["accuracy"] = row.accuracy;
                d["mean_time"] = row.mean_time;
                rows.append(d);
            }
            return rows;
        },
        py::arg("config"), py::arg("out_dir"), py::arg("jobs") = 1);
}
