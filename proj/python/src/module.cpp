// SPDX-License-Identifier: Apache-2.0
#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <sstream>

#include "avsed/commands.hpp"
#include "avsed/errors.hpp"

namespace py = pybind11;
using namespace avsed;

namespace {

using EventTuple = std::tuple<double, double, std::size_t>;
using PyEvents = std::map<std::string, std::vector<EventTuple>>;

EventsByClip to_events(const PyEvents& in) {
  EventsByClip out;
  for (const auto& [clip, list] : in) {
    auto& v = out[clip];
    for (const auto& [on, off, cls] : list) v.push_back({on, off, cls});
  }
  return out;
}

PyEvents from_events(const EventsByClip& in) {
  PyEvents out;
  for (const auto& [clip, list] : in) {
    auto& v = out[clip];
    for (const auto& e : list) v.emplace_back(e.onset, e.offset, e.cls);
  }
  return out;
}

py::dict report_dict(const F1Report& r) {
  py::dict d;
  d["metric"] = r.metric;
  d["precision"] = r.precision;
  d["recall"] = r.recall;
  d["f1"] = r.f1;
  d["tp"] = r.total.tp;
  d["fp"] = r.total.fp;
  d["fn"] = r.total.fn;
  py::list per_class;
  for (const auto& k : r.per_class) per_class.append(py::make_tuple(k.tp, k.fp, k.fn));
  d["per_class"] = per_class;
  return d;
}

py::array_t<float> to_array(const Tensor<float>& t) {
  std::vector<py::ssize_t> shape(t.shape().begin(), t.shape().end());
  py::array_t<float> a(shape);
  std::copy(t.data().begin(), t.data().end(), a.mutable_data());
  return a;
}

Tensor<float> from_array(const py::array_t<float, py::array::c_style | py::array::forcecast>& a) {
  Shape shape(a.shape(), a.shape() + a.ndim());
  return Tensor<float>(shape, std::vector<float>(a.data(), a.data() + a.size()));
}

/// Runs a command and returns (exit status, captured log).
std::pair<int, std::string> run(int (*cmd)(const CommandContext&), const RunConfig& config,
                                const std::string& out, bool force) {
  std::ostringstream log;
  CommandContext ctx{config, out, force, &log};
  int rc;
  {
    py::gil_scoped_release release;
    rc = cmd(ctx);
  }
  return {rc, log.str()};
}

}  // namespace

PYBIND11_MODULE(_avsed, m) {
  m.doc() = "Audio-visual sound event detection: data, model, training and metrics";

  auto validation = py::register_exception<ValidationError>(m, "ValidationError", PyExc_ValueError);
  py::register_exception<RuntimeError>(m, "AvsedRuntimeError", PyExc_RuntimeError);
  (void)validation;

  py::class_<RunConfig>(m, "RunConfig")
      .def(py::init<const std::string&>(), py::arg("profile") = "desk")
      .def_static("from_file", &RunConfig::from_file)
      .def_static("from_text", [](const std::string& text) { return RunConfig::from_text(text, "<text>"); })
      .def("set", &RunConfig::set)
      .def("apply", &RunConfig::apply)
      .def("get", &RunConfig::get)
      .def_property_readonly("profile", &RunConfig::profile)
      .def("resolved",
           [](const RunConfig& c) {
             std::map<std::string, std::string> out;
             for (const auto& [k, v] : c.resolved()) out[k] = v;
             return out;
           })
      .def("to_text", &RunConfig::to_text);

  m.def("generate", [](const RunConfig& c, const std::string& out, bool force) {
    return run(cmd_generate, c, out, force);
  }, py::arg("config"), py::arg("out"), py::arg("force") = false);
  m.def("train", [](const RunConfig& c, const std::string& out, bool force) {
    return run(cmd_train, c, out, force);
  }, py::arg("config"), py::arg("out"), py::arg("force") = false);
  m.def("predict", [](const RunConfig& c, const std::string& out, bool force) {
    return run(cmd_predict, c, out, force);
  }, py::arg("config"), py::arg("out"), py::arg("force") = false);
  m.def("evaluate", [](const RunConfig& c, const std::string& out, bool force) {
    return run(cmd_evaluate, c, out, force);
  }, py::arg("config"), py::arg("out"), py::arg("force") = false);
  m.def("gradcheck", [](const RunConfig& c) { return run(cmd_gradcheck, c, "", false); },
        py::arg("config"));
  m.def("experiment", [](const RunConfig& c, const std::string& out, bool force) {
    return run(cmd_experiment, c, out, force);
  }, py::arg("config"), py::arg("out"), py::arg("force") = false);

  m.def("lr_at", &lr_at, py::arg("step"));
  m.def(
      "linear_pool",
      [](const py::array_t<double, py::array::c_style | py::array::forcecast>& p) {
        if (p.ndim() != 2) throw ShapeError("linear_pool expects a [frames, classes] array");
        const std::size_t n = static_cast<std::size_t>(p.shape(1));
        return linear_pool<double>(std::span<const double>(p.data(), p.size()), n);
      },
      py::arg("frame_probs"));
  m.def(
      "median_filter",
      [](const std::vector<std::uint8_t>& column, std::size_t window) {
        return median_filter(std::span<const std::uint8_t>(column), window);
      },
      py::arg("column"), py::arg("window") = 7);
  m.def(
      "clip_micro_f1",
      [](const std::map<std::string, std::set<std::size_t>>& pred,
         const std::map<std::string, std::set<std::size_t>>& ref, std::size_t n) {
        return report_dict(clip_micro_f1(pred, ref, n));
      },
      py::arg("predicted"), py::arg("reference"), py::arg("n_classes"));
  m.def(
      "segment_micro_f1",
      [](const PyEvents& pred, const PyEvents& ref, const std::map<std::string, double>& durations,
         std::size_t n, double segment_s) {
        return report_dict(segment_micro_f1(to_events(pred), to_events(ref), durations, n, segment_s));
      },
      py::arg("predicted"), py::arg("reference"), py::arg("durations"), py::arg("n_classes"),
      py::arg("segment_s") = 1.0);
  m.def(
      "event_macro_f1",
      [](const PyEvents& pred, const PyEvents& ref, std::size_t n) {
        return report_dict(event_macro_f1(to_events(pred), to_events(ref), n));
      },
      py::arg("predicted"), py::arg("reference"), py::arg("n_classes"));

  m.def(
      "read_features",
      [](const std::filesystem::path& path) {
        py::dict d;
        for (const auto& r : read_feature_file(path)) d[py::str(r.name)] = to_array(r.tensor);
        return d;
      },
      py::arg("path"));
  m.def(
      "write_features",
      [](const std::filesystem::path& path,
         const std::vector<std::pair<std::string, py::array_t<float, py::array::c_style | py::array::forcecast>>>& recs) {
        std::vector<NamedTensor> out;
        for (const auto& [name, a] : recs) out.push_back({name, from_array(a)});
        write_feature_file(path, out);
      },
      py::arg("path"), py::arg("records"));
  m.def(
      "parse_strong_tsv",
      [](const std::string& text, const std::vector<std::string>& vocab) {
        return from_events(parse_strong_tsv(text, Vocabulary(vocab)).events);
      },
      py::arg("text"), py::arg("classes"));

  m.def(
      "score_checkpoint",
      [](const std::filesystem::path& checkpoint, const std::filesystem::path& dataset,
         const std::string& split) {
        LoadedCheckpoint ck = load_checkpoint(checkpoint);
        DatasetInfo info;
        const Partition part = load_partition(dataset, split, &info);
        const auto diff = checkpoint_mismatches(ck, info);
        if (!diff.empty()) throw ConfigError("checkpoint does not match the dataset: " + diff.front());
        py::dict out;
        const auto scores = score_partition(ck.model, part, 16);
        const std::size_t n = ck.model.config().n_classes;
        for (const auto& [clip, s] : scores) {
          py::array_t<float> frames({static_cast<py::ssize_t>(s.frames), static_cast<py::ssize_t>(n)});
          std::copy(s.frame_probs.begin(), s.frame_probs.end(), frames.mutable_data());
          out[py::str(clip)] = py::make_tuple(py::array_t<float>(s.clip_probs.size(), s.clip_probs.data()), frames);
        }
        return out;
      },
      py::arg("checkpoint"), py::arg("dataset"), py::arg("split") = "test");
}
