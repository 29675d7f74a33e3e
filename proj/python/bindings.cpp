#include "naronet/autograd.hpp"
#include "naronet/model.hpp"
#include "naronet/pcl.hpp"
#include "naronet/pipeline.hpp"
#include "naronet/stats.hpp"
#include "naronet/synthcohort.hpp"

#include <pybind11/eigen.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

namespace py = pybind11;
using namespace naronet;

namespace {

core::Activation parse_activation(const std::string& s) {
    if (s == "softmax") {
        return core::Activation::softmax;
    }
    if (s == "sigmoid") {
        return core::Activation::sigmoid;
    }
    throw ConfigError("activation must be softmax or sigmoid");
}

py::dict tissue_to_dict(const synth::Tissue& t) {
    const auto& im = t.image;
    py::array_t<float> image({im.channels, im.height, im.width});
    std::copy(im.data.begin(), im.data.end(), image.mutable_data());
    py::dict masks;
    for (const auto& m : t.masks) {
        py::array_t<std::uint8_t> a({m.height, m.width});
        std::copy(m.pixels.begin(), m.pixels.end(), a.mutable_data());
        masks[py::str("Nb" + std::to_string(m.neighborhood + 1))] = a;
    }
    py::list cells;
    for (const auto& c : t.cells) {
        py::dict d;
        d["cell_id"] = c.id;
        d["x"] = c.x;
        d["y"] = c.y;
        d["phenotype"] = c.phenotype;
        d["neighborhood"] = c.neighborhood;
        cells.append(d);
    }
    py::dict out;
    out["image"] = image;
    out["channel_names"] = im.channel_names;
    out["masks"] = masks;
    out["cells"] = cells;
    return out;
}

} // namespace

PYBIND11_MODULE(_naronet, m) {
    m.doc() = "NaroNet C++ core";
    m.attr("__version__") = kToolVersion;
    py::register_exception<ConfigError>(m, "ConfigError", PyExc_ValueError);

    m.def("paradigm_names", &synth::paradigm_names);

    m.def(
        "simulate_tissue",
        [](const std::string& paradigm, int group, std::uint64_t seed, const std::string& scale) {
            const auto spec = synth::build_paradigm(paradigm, synth::parse_scale(scale));
            synth::Tissue t;
            {
                py::gil_scoped_release release;
                t = synth::simulate_tissue(spec, group, seed);
            }
            return tissue_to_dict(t);
        },
        py::arg("paradigm"), py::arg("group"), py::arg("seed"), py::arg("scale") = "desk",
        "Simulates one tissue; returns image (B x H x W), masks and cells.");

    m.def(
        "nt_xent_loss",
        [](const Mat& z, double tau) { return pcl::nt_xent_loss(ag::Var::constant(z), tau).scalar(); },
        py::arg("z"), py::arg("tau") = 0.5, "NT-Xent loss of 2B projections (views in rows 2j, 2j+1).");

    m.def(
        "pool_abundance",
        [](const Mat& logits, const std::string& activation, bool use_max) {
            return Mat(core::pool_abundance(ag::Var::constant(logits), parse_activation(activation), use_max).value());
        },
        py::arg("logits"), py::arg("activation") = "softmax", py::arg("use_max") = true);

    m.def(
        "orthogonal_loss", [](const Mat& s) { return core::orthogonal_loss(ag::Var::constant(s)).scalar(); },
        py::arg("s"));

    m.def(
        "mann_whitney",
        [](const std::vector<double>& x, const std::vector<double>& y) {
            const auto r = stats::mann_whitney(x, y);
            return py::make_tuple(r.u, r.p, r.exact);
        },
        py::arg("x"), py::arg("y"), "Two-sided Mann-Whitney U test: (U, p, exact).");

    m.def(
        "stratify_survival",
        [](const std::vector<std::optional<double>>& months) {
            std::vector<std::optional<std::string>> out;
            for (const auto& g : pipeline::stratify_survival(months)) {
                out.push_back(g ? std::optional<std::string>(pipeline::to_string(*g)) : std::nullopt);
            }
            return out;
        },
        py::arg("months"));

    m.def(
        "run_stage",
        [](const std::string& stage, const std::string& config_json) {
            const auto cfg = pipeline::RunConfig::from_json(io::json::parse(config_json));
            py::gil_scoped_release release;
            pipeline::run_stage(stage, cfg);
        },
        py::arg("stage"), py::arg("config_json"), "Runs one pipeline stage from a JSON run configuration.");
}
