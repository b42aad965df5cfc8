#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "pipsim/autodiff.hpp"
#include "pipsim/cli.hpp"
#include "pipsim/microworld.hpp"
#include "pipsim/spanselect.hpp"

namespace py = pybind11;
using namespace pipsim;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

ad::Tensor to_tensor(const Array& a) {
    ad::Shape shape(a.shape(), a.shape() + a.ndim());
    ad::Tensor t(shape);
    std::copy(a.data(), a.data() + a.size(), t.data.begin());
    return t;
}

Array to_array(const ad::Tensor& t) {
    std::vector<py::ssize_t> shape(t.shape.begin(), t.shape.end());
    Array a(shape);
    std::copy(t.data.begin(), t.data.end(), a.mutable_data());
    return a;
}

Array span_weights(const Array& start, const Array& end, double eps) {
    if (start.ndim() != 1 || end.ndim() != 1 || start.size() != end.size()) {
        throw py::value_error("span_weights expects two 1-D arrays of equal length");
    }
    ad::Tape tape;
    const auto w = span::span_weights(tape.constant(to_tensor(start)), tape.constant(to_tensor(end)), eps);
    return to_array(w.r.value());
}

std::vector<std::size_t> salient_frames(const Array& r) {
    if (r.ndim() != 1) {
        throw py::value_error("salient_frames expects a 1-D array");
    }
    const std::vector<double> values(r.data(), r.data() + r.size());
    return span::select_salient_frames(values, span::threshold_profile(values.size()));
}

double psnr(const Array& a, const Array& b, double max_val) {
    return ad::psnr_value(to_tensor(a), to_tensor(b), max_val);
}

py::dict episode(const std::string& task, std::uint64_t seed, bool unseen) {
    const world::Episode ep = world::generate_episode(world::parse_task(task), seed, {}, unseen);
    py::array_t<float> frames({ep.raw_frames, 3, ep.height, ep.width});
    std::copy(ep.frames.begin(), ep.frames.end(), frames.mutable_data());
    py::list events;
    for (const auto& e : ep.events) {
        events.append(py::make_tuple(std::string(world::to_string(e.kind)), e.frame, e.objects));
    }
    py::dict d;
    d["task"] = std::string(world::to_string(ep.task));
    d["seed"] = ep.seed;
    d["unseen"] = ep.unseen;
    d["queryable"] = ep.queryable;
    d["labels"] = ep.labels;
    d["events"] = events;
    d["frames"] = frames;
    return d;
}

py::tuple run_cli(const std::vector<std::string>& args) {
    std::ostringstream out;
    std::ostringstream err;
    int code = 0;
    {
        py::gil_scoped_release release;
        code = cli::run(args, out, err);
    }
    return py::make_tuple(code, out.str(), err.str());
}

}  // namespace

PYBIND11_MODULE(_core, m) {
    m.doc() = "Bindings for the pipsim core library";
    m.attr("EXIT_OK") = cli::kExitOk;
    m.attr("EXIT_USAGE") = cli::kExitUsage;
    m.attr("EXIT_RUNTIME") = cli::kExitRuntime;
    m.def("span_weights", &span_weights, py::arg("start"), py::arg("end"), py::arg("eps") = span::kDefaultEps,
          "Normalized span weights r from start and end distributions.");
    m.def("threshold_profile", &span::threshold_profile, py::arg("n"),
          "Per-frame selection thresholds for a span of n frames.");
    m.def("salient_frames", &salient_frames, py::arg("r"), "Frames whose weight exceeds the threshold profile.");
    m.def("psnr", &psnr, py::arg("a"), py::arg("b"), py::arg("max_val") = 1.0, "PSNR in dB, capped at 100.");
    m.def("generate_episode", &episode, py::arg("task"), py::arg("seed"), py::arg("unseen") = false,
          "Simulates and renders one microworld episode.");
    m.def("run_cli", &run_cli, py::arg("args"), "Runs a command-line invocation; returns (code, stdout, stderr).");
}
