#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "commands.hpp"
#include "npm/checkpoint.hpp"
#include "npm/data.hpp"
#include "npm/embedding.hpp"
#include "npm/error.hpp"
#include "npm/metrics.hpp"
#include "npm/model_stage1.hpp"
#include "npm/model_stage2.hpp"
#include "npm/synthetic.hpp"

namespace py = pybind11;
using namespace npm;

namespace {

using FloatArray = py::array_t<float, py::array::c_style | py::array::forcecast>;

Tensor to_tensor(const FloatArray& a) {
    Shape shape(a.shape(), a.shape() + a.ndim());
    return Tensor(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

FloatArray to_array(const Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
    FloatArray out(shape);
    std::copy(t.data().begin(), t.data().end(), out.mutable_data());
    return out;
}

Frame frame_from(const std::vector<std::string>& tags, const FloatArray& chw) {
    if (chw.ndim() != 3) throw ShapeError("frame values must be [C x H x W]");
    return make_frame(to_tensor(chw), tags);
}

py::tuple frame_tuple(const Frame& f) { return py::make_tuple(f.tags, to_array(f.tensor())); }

py::dict scores(const ContingencyTable& t) {
    py::dict d;
    d["tp"] = t.tp;
    d["fp"] = t.fp;
    d["fn"] = t.fn;
    d["tn"] = t.tn;
    d["csi"] = csi(t);
    d["pod"] = pod(t);
    d["far"] = far(t);
    return d;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Satellite-to-radar nowcasting core";

    const auto base = py::register_exception<Error>(m, "Error", PyExc_RuntimeError);
    py::register_exception<ShapeError>(m, "ShapeError", base.ptr());
    py::register_exception<DomainError>(m, "DomainError", base.ptr());
    py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
    py::register_exception<ParseError>(m, "ParseError", base.ptr());
    py::register_exception<IoError>(m, "IoError", base.ptr());
    py::register_exception<WindowError>(m, "WindowError", base.ptr());

    m.def("positional_encode", &positional_encode, py::arg("x"), py::arg("d"));

    m.def("encode_frame",
          [](const std::vector<std::string>& tags, const FloatArray& chw) {
              return py::bytes(encode_frame(frame_from(tags, chw)));
          },
          py::arg("tags"), py::arg("values"));
    m.def("decode_frame", [](const py::bytes& b) { return frame_tuple(decode_frame(std::string(b))); });
    m.def("read_frame", [](const std::filesystem::path& p) { return frame_tuple(read_frame(p)); });
    m.def("write_frame",
          [](const std::filesystem::path& p, const std::vector<std::string>& tags, const FloatArray& chw) {
              write_frame(p, frame_from(tags, chw));
          },
          py::arg("path"), py::arg("tags"), py::arg("values"));

    m.def("contingency",
          [](const FloatArray& pred, const FloatArray& obs, double threshold, std::optional<py::array_t<std::uint8_t>> mask) {
              std::vector<std::uint8_t> mk;
              if (mask) mk.assign(mask->data(), mask->data() + mask->size());
              return scores(contingency(to_tensor(pred), to_tensor(obs), threshold, mk));
          },
          py::arg("pred"), py::arg("obs"), py::arg("threshold"), py::arg("mask") = py::none());

    py::class_<ManifestRecord>(m, "Record")
        .def_readonly("iso", &ManifestRecord::iso)
        .def_readonly("year", &ManifestRecord::year)
        .def_readonly("month", &ManifestRecord::month)
        .def_readonly("doy", &ManifestRecord::doy)
        .def_readonly("hour", &ManifestRecord::hour)
        .def_readonly("path", &ManifestRecord::path)
        .def_property_readonly("split", [](const ManifestRecord& r) { return std::string(split_name(r.split)); });

    py::class_<Manifest>(m, "Manifest")
        .def_static("load", &Manifest::load)
        .def_static("parse", [](const std::string& text) { return Manifest::parse(text); })
        .def("serialize", &Manifest::serialize)
        .def("save", &Manifest::save)
        .def("count", [](const Manifest& mf, const std::string& s) { return mf.count(parse_split(s)); })
        .def("resolve", [](const Manifest& mf, const std::string& rel) { return mf.resolve(rel); })
        .def_readonly("width", &Manifest::width)
        .def_readonly("height", &Manifest::height)
        .def_readonly("records", &Manifest::records)
        .def_readonly("dem_path", &Manifest::dem_path)
        .def("__len__", [](const Manifest& mf) { return mf.records.size(); })
        .def("__eq__", [](const Manifest& a, const Manifest& b) { return a == b; });

    m.def("generate_dataset",
          [](const std::filesystem::path& out, std::size_t grid, int years, int test_years, std::uint64_t seed) {
              SynthConfig c;
              c.grid = grid;
              c.years = years;
              c.test_years = test_years;
              c.seed = seed;
              return generate_dataset(c, out);
          },
          py::arg("out"), py::arg("grid") = 64, py::arg("years") = 2, py::arg("test_years") = 1,
          py::arg("seed") = 1);
    m.def("rain_rate", [](const FloatArray& ir) { return to_array(sat_to_radar_oracle(to_tensor(ir), SynthConfig{})); },
          py::arg("ir"));

    m.def("load_checkpoint", [](const std::filesystem::path& p) {
        py::dict d;
        const auto c = Checkpoint::load(p);
        for (const auto& r : c.records()) d[py::str(r.name)] = to_array(c.tensor<float>(r.name));
        return d;
    });

    py::class_<NpmModel<float>>(m, "Stage1")
        .def_static("load", [](const std::filesystem::path& p) { return NpmModel<float>::from_checkpoint(Checkpoint::load(p)); })
        .def_property_readonly("T", [](const NpmModel<float>& s) { return s.config().T; })
        .def_property_readonly("T_out", [](const NpmModel<float>& s) { return s.config().T_out; })
        .def(
            "forward",
            [](const NpmModel<float>& s, const FloatArray& inputs, const FloatArray& dem, int day, int hour) {
                const auto x = to_tensor(inputs), d = to_tensor(dem);
                const auto stamp = TimeStamp::make(day, hour);
                Tensor y;
                {
                    py::gil_scoped_release release;
                    y = s.forward(x, d, stamp);
                }
                return to_array(y);
            },
            py::arg("inputs"), py::arg("dem"), py::arg("day"), py::arg("hour"));

    py::class_<S2rModel<float>>(m, "Stage2")
        .def_static("load", [](const std::filesystem::path& p) { return S2rModel<float>::from_checkpoint(Checkpoint::load(p)); })
        .def(
            "generate",
            [](const S2rModel<float>& s, const FloatArray& sat, const FloatArray& dem) {
                return to_array(s.generate(to_tensor(sat), to_tensor(dem)).rate);
            },
            py::arg("sat"), py::arg("dem"));

    m.def("run_cli", [](const std::vector<std::string>& args) {
        std::ostringstream out, err;
        const int code = cli::run(args, out, err);
        return py::make_tuple(code, out.str(), err.str());
    });
}
