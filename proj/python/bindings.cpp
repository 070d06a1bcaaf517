#include <pybind11/functional.h>
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <sstream>

#include "scatsep/errors.hpp"
#include "scatsep/lbfgs.hpp"
#include "scatsep/metrics.hpp"
#include "scatsep/pipeline.hpp"

namespace py = pybind11;
using namespace scatsep;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

std::vector<double> to_vector(const Array& a) { return {a.data(), a.data() + a.size()}; }

Array to_array(const std::vector<double>& v) {
  Array a(static_cast<py::ssize_t>(v.size()));
  std::copy(v.begin(), v.end(), a.mutable_data());
  return a;
}

Array to_matrix(const std::vector<double>& v, std::size_t rows, std::size_t cols) {
  Array a({static_cast<py::ssize_t>(rows), static_cast<py::ssize_t>(cols)});
  std::copy(v.begin(), v.end(), a.mutable_data());
  return a;
}

}  // namespace

PYBIND11_MODULE(_scatsep, m) {
  m.doc() = "Scattering covariance features, factorial VAE clustering and source separation";

  py::register_exception<Error>(m, "ScatsepError", PyExc_RuntimeError);

  m.def(
      "scatcov",
      [](const Array& x, int octaves, std::size_t window, const std::string& family) {
        auto bank = cached_bank(octaves, window, parse_family(family));
        const auto v = compute_scatcov(to_vector(x), *bank, window);
        const std::size_t width = ScatCovLayout(octaves).flat_length();
        std::vector<double> flat;
        for (const auto& t : v) {
          const auto f = t.flat();
          flat.insert(flat.end(), f.begin(), f.end());
        }
        return to_matrix(flat, v.size(), width);
      },
      py::arg("x"), py::arg("octaves"), py::arg("window"), py::arg("family") = "battle_lemarie",
      "Per-tile flat scattering covariance vectors (tiles x F).");

  m.def(
      "scatcov_labels", [](int octaves) { return ScatCovLayout(octaves).labels(); }, py::arg("octaves"));

  m.def(
      "synth_dataset",
      [](std::size_t days, std::uint64_t seed) {
        SynthConfig c;
        c.n_days = days;
        c.seed = seed;
        const SynthDataset d = compose_dataset(c);
        py::dict out;
        out["x"] = to_array(d.x);
        out["large"] = to_array(d.large);
        out["medium"] = to_array(d.medium);
        out["fine"] = to_array(d.fine);
        out["gate"] = to_array(d.gate);
        py::list events;
        for (const auto& e : d.events) events.append(py::make_tuple(to_string(e.kind), e.start, e.length, e.amplitude));
        out["events"] = events;
        return out;
      },
      py::arg("days") = 8, py::arg("seed") = 0);

  m.def(
      "window_count",
      [](std::size_t n, std::vector<std::size_t> sizes, std::size_t hop) {
        std::vector<double> dummy(n);
        return WindowStream(dummy, std::move(sizes), hop).size();
      },
      py::arg("n_samples"), py::arg("window_sizes"), py::arg("hop"));

  m.def(
      "adjusted_rand_index",
      [](const std::vector<int>& a, const std::vector<int>& b) { return adjusted_rand_index(a, b); }, py::arg("a"),
      py::arg("b"));

  m.def(
      "lbfgs",
      [](const std::function<std::pair<double, Array>(Array)>& fun, const Array& x0, std::size_t max_iter) {
        LbfgsConfig cfg;
        cfg.max_iter = max_iter;
        const auto r = lbfgs_minimize(
            [&](std::span<const double> x, std::span<double> g) {
              py::gil_scoped_acquire gil;
              const auto [f, grad] = fun(to_array({x.begin(), x.end()}));
              if (static_cast<std::size_t>(grad.size()) != g.size())
                throw SizingError("gradient has the wrong length");
              std::copy(grad.data(), grad.data() + grad.size(), g.begin());
              return f;
            },
            to_vector(x0), cfg);
        std::vector<double> values;
        for (const auto& s : r.trajectory) values.push_back(s.value);
        return py::make_tuple(to_array(r.x), r.value, to_string(r.status), to_array(values));
      },
      py::arg("fun"), py::arg("x0"), py::arg("max_iter") = 1000,
      "Minimize fun(x) -> (value, gradient). Returns (x, value, status, accepted values).");

  m.def(
      "run_command",
      [](const std::vector<std::string>& args) {
        std::vector<std::string> argv{"scatsep"};
        argv.insert(argv.end(), args.begin(), args.end());
        std::ostringstream out, err;
        const int status = run_command(argv, out, err);
        return py::make_tuple(status, out.str(), err.str());
      },
      py::arg("args"), "Run a CLI stage in-process. Returns (status, stdout, stderr).");
}
