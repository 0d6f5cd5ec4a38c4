#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <nlohmann/json.hpp>

#include "pnc/config.hpp"
#include "pnc/errors.hpp"
#include "pnc/eval.hpp"
#include "pnc/graft.hpp"
#include "pnc/localize.hpp"
#include "pnc/packet.hpp"
#include "pnc/selftest.hpp"
#include "pnc/zoo.hpp"

namespace py = pybind11;
namespace fs = std::filesystem;
using nlohmann::json;

namespace {

using Array = py::array_t<double, py::array::c_style | py::array::forcecast>;

py::object to_py(const json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

json from_py(const py::object& o) {
  return json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

pnc::Tensor to_tensor(const Array& a) {
  pnc::Dims dims(a.shape(), a.shape() + a.ndim());
  return pnc::Tensor(dims, std::vector<double>(a.data(), a.data() + a.size()));
}

Array to_array(const pnc::Tensor& t) {
  Array out(std::vector<py::ssize_t>(t.dims().begin(), t.dims().end()));
  std::copy(t.data().begin(), t.data().end(), out.mutable_data());
  return out;
}

pnc::RunConfig config_from(const py::object& overrides) {
  pnc::RunConfig c;
  if (!overrides.is_none()) c = pnc::merge_config(c, from_py(overrides));
  pnc::validate_config(c);
  return c;
}

Array forward_network(const pnc::NetworkModel& net, const Array& x) {
  pnc::NoGradGuard guard;
  return to_array(pnc::forward(net, to_tensor(x)));
}

}  // namespace

PYBIND11_MODULE(_pnc, m) {
  m.doc() = "Partial network cloning on MNIST";

  auto base = py::register_exception<pnc::Error>(m, "PncError");
  py::register_exception<pnc::ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<pnc::DataError>(m, "DataError", base.ptr());
  py::register_exception<pnc::FormatError>(m, "FormatError", base.ptr());
  py::register_exception<pnc::ShapeError>(m, "ShapeError", base.ptr());
  py::register_exception<pnc::ContractError>(m, "ContractError", base.ptr());
  py::register_exception<pnc::NumericError>(m, "NumericError", base.ptr());
  py::register_exception<pnc::ProvenanceError>(m, "ProvenanceError", base.ptr());
  py::register_exception<pnc::ZooError>(m, "ZooError", base.ptr());

  m.def("default_config", [] { return to_py(pnc::to_json(pnc::RunConfig{})); });
  m.def(
      "effective_config", [](const py::object& overrides) { return to_py(pnc::to_json(config_from(overrides))); },
      py::arg("overrides") = py::none());
  m.def(
      "config_digest", [](const py::object& overrides) { return pnc::config_digest(config_from(overrides)); },
      py::arg("overrides") = py::none());
  m.def("parse_class_list", &pnc::parse_class_list);
  m.def("binarize_topk",
        [](const std::vector<double>& values, std::size_t budget) { return pnc::binarize_topk(values, budget); });

  py::class_<pnc::NetworkModel>(m, "Network")
      .def_readonly("arch", &pnc::NetworkModel::arch_id)
      .def_readonly("num_classes", &pnc::NetworkModel::num_classes)
      .def_property_readonly("classes", [](const pnc::NetworkModel& n) { return n.meta.classes; })
      .def_property_readonly("test_accuracy", [](const pnc::NetworkModel& n) { return n.meta.test_accuracy; })
      .def_property_readonly("depth", &pnc::NetworkModel::depth)
      .def_property_readonly("maskable_widths", &pnc::NetworkModel::maskable_widths)
      .def_property_readonly("parameter_count", [](const pnc::NetworkModel& n) { return pnc::parameter_count(n); })
      .def_property_readonly("digest", [](const pnc::NetworkModel& n) { return pnc::checkpoint_digest(n); })
      .def("forward", &forward_network, py::arg("x"))
      .def("save", [](const pnc::NetworkModel& n, const fs::path& p) { pnc::save_checkpoint(n, p); })
      .def("budgets", &pnc::budgets_for_rate, py::arg("rate"));

  m.def("build_network", &pnc::build_network, py::arg("arch"), py::arg("num_classes"), py::arg("seed"));
  m.def("load_checkpoint", &pnc::load_checkpoint, py::arg("path"));

  py::class_<pnc::ClonedModel>(m, "ClonedModel")
      .def_readonly("position", &pnc::ClonedModel::position)
      .def_readonly("original_classes", &pnc::ClonedModel::original_classes)
      .def_readonly("cloned_classes", &pnc::ClonedModel::cloned_classes)
      .def_property_readonly("class_order", &pnc::ClonedModel::class_order)
      .def_property_readonly("selected", [](const pnc::ClonedModel& c) { return c.binary->selected; })
      .def(
          "forward",
          [](const pnc::ClonedModel& c, const Array& x) {
            pnc::NoGradGuard guard;
            return to_array(pnc::cloned_forward(c, to_tensor(x), pnc::MaskMode::binary));
          },
          py::arg("x"))
      .def("detach", &pnc::detach)
      .def("packet_bytes", [](const pnc::ClonedModel& c) { return py::bytes(pnc::serialize_packet(c)); });

  m.def("unpack", &pnc::unpack, py::arg("packet"), py::arg("zoo"));
  m.def(
      "packet_header", [](const fs::path& p) { return to_py(pnc::packet_header(pnc::read_file(p), p.string())); },
      py::arg("path"));

  m.def(
      "pretrain",
      [](const std::string& arch, const std::string& classes, const fs::path& data_dir, const py::object& overrides) {
        const pnc::RunConfig c = config_from(overrides);
        py::gil_scoped_release release;
        return pnc::pretrain(arch, pnc::parse_class_list(classes), pnc::load_mnist(data_dir), c);
      },
      py::arg("arch"), py::arg("classes"), py::arg("data_dir"), py::arg("config") = py::none());

  m.def(
      "clone",
      [](const pnc::NetworkModel& target, const pnc::NetworkModel& source, const fs::path& data_dir,
         const py::object& overrides) {
        const pnc::RunConfig c = config_from(overrides);
        pnc::CloneResult r;
        {
          py::gil_scoped_release release;
          r = pnc::clone(target, source, pnc::load_mnist(data_dir), c);
        }
        return py::make_tuple(std::move(r.model), to_py(r.report));
      },
      py::arg("target"), py::arg("source"), py::arg("data_dir"), py::arg("config") = py::none());

  m.def(
      "selftest",
      [](std::uint64_t seed) { return to_py(pnc::selftest_json(pnc::run_selftest(seed))); }, py::arg("seed") = 7);
}
