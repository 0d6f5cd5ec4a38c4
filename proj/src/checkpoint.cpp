#include <map>

#include <nlohmann/json.hpp>

#include "pnc/errors.hpp"
#include "pnc/model.hpp"

namespace pnc {

namespace {
constexpr std::string_view kMagic = "PNCM";
constexpr std::uint32_t kVersion = 1;
}  // namespace

std::string serialize_checkpoint(const NetworkModel& net) {
  nlohmann::json meta = {
      {"architecture", net.arch_id},
      {"num_classes", net.num_classes},
      {"classes", net.meta.classes},
      {"seed", net.meta.seed},
      {"epochs", net.meta.epochs},
      {"test_accuracy", net.meta.test_accuracy},
  };
  ByteWriter w;
  w.raw(kMagic);
  w.u32(kVersion);
  w.blob(meta.dump());
  w.tensors(net.named_parameters());
  return w.bytes();
}

NetworkModel parse_checkpoint(std::string_view bytes, const std::string& context) {
  ByteReader r(bytes, context);
  if (r.remaining() < 4 || r.raw(4) != kMagic) throw FormatError(context + ": bad magic, not a PNCM checkpoint");
  const auto version = r.u32();
  if (version != kVersion) {
    throw FormatError(context + ": unsupported checkpoint version " + std::to_string(version));
  }
  nlohmann::json meta;
  try {
    meta = nlohmann::json::parse(r.blob());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(context + ": metadata is not valid JSON (" + e.what() + ")");
  }
  NamedTensors tensors = r.tensors();
  r.expect_end();

  NetworkModel net;
  try {
    net = build_network(meta.at("architecture").get<std::string>(), meta.at("num_classes").get<std::size_t>(), 0);
    net.meta.classes = meta.at("classes").get<std::vector<int>>();
    net.meta.seed = meta.at("seed").get<std::uint64_t>();
    net.meta.epochs = meta.at("epochs").get<std::size_t>();
    net.meta.test_accuracy = meta.at("test_accuracy").get<double>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(context + ": incomplete metadata (" + e.what() + ")");
  }

  std::map<std::string, Tensor> by_name(tensors.begin(), tensors.end());
  if (by_name.size() != tensors.size()) throw FormatError(context + ": duplicate tensor names");
  const NamedTensors expected = net.named_parameters();
  if (expected.size() != tensors.size()) {
    throw FormatError(context + ": expected " + std::to_string(expected.size()) + " tensors, found " +
                      std::to_string(tensors.size()));
  }
  for (const auto& [name, slot] : expected) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError(context + ": missing tensor '" + name + "'");
    if (it->second.dims() != slot.dims()) {
      throw FormatError(context + ": tensor '" + name + "' has dims " + dims_str(it->second.dims()) + ", expected " +
                        dims_str(slot.dims()));
    }
    Tensor dst = slot;
    std::copy(it->second.data().begin(), it->second.data().end(), dst.data().begin());
  }
  return net;
}

void save_checkpoint(const NetworkModel& net, const std::filesystem::path& path) {
  write_file(path, serialize_checkpoint(net));
}

NetworkModel load_checkpoint(const std::filesystem::path& path) {
  return parse_checkpoint(read_file(path), path.filename().string());
}

}  // namespace pnc
