#include "pnc/packet.hpp"

#include <algorithm>
#include <map>
#include <optional>

#include "pnc/binary_io.hpp"
#include "pnc/errors.hpp"

namespace pnc {

namespace {
constexpr std::string_view kMagic = "PNCP";
constexpr std::uint32_t kVersion = 1;
constexpr double kSelectedLogit = 4.0;

struct ParsedPacket {
  nlohmann::json header;
  NamedTensors tensors;
};

ParsedPacket parse(std::string_view bytes, const std::string& context) {
  ByteReader r(bytes, context);
  if (r.remaining() < 4 || r.raw(4) != kMagic) throw FormatError(context + ": bad magic, not a PNCP packet");
  const auto version = r.u32();
  if (version != kVersion) throw FormatError(context + ": unsupported packet version " + std::to_string(version));
  ParsedPacket p;
  try {
    p.header = nlohmann::json::parse(r.blob());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(context + ": header is not valid JSON (" + e.what() + ")");
  }
  p.tensors = r.tensors();
  r.expect_end();
  return p;
}

}  // namespace

std::string checkpoint_digest(const NetworkModel& net) { return hex64(fnv1a64(serialize_checkpoint(net))); }

std::string serialize_packet(const ClonedModel& c) {
  if (!c.binary) throw ContractError("pack: masks are not binarized");
  nlohmann::json h;
  h["target"] = {{"architecture", c.target->arch_id},
                 {"classes", c.target->meta.classes},
                 {"digest", checkpoint_digest(*c.target)},
                 {"file", c.meta.target_file}};
  h["source"] = {{"architecture", c.source->arch_id},
                 {"classes", c.source->meta.classes},
                 {"digest", checkpoint_digest(*c.source)},
                 {"file", c.meta.source_file}};
  h["position"] = c.position;
  h["original_classes"] = c.original_classes;
  h["cloned_classes"] = c.cloned_classes;
  h["cloned_outputs"] = c.cloned_outputs;
  h["mask_widths"] = c.binary->widths;
  h["selected"] = c.binary->selected;
  h["adapter"] = {{"kind", c.adapter.kind == LayerKind::conv ? "conv1x1" : "dense"},
                  {"in_dims", c.adapter.in_dims},
                  {"out_dims", c.adapter.out_dims},
                  {"pool", c.adapter.pool}};
  h["head"] = {{"old_classes", c.head.old_classes}, {"new_classes", c.head.new_classes}};
  h["metadata"] = {{"seed", c.meta.seed}, {"config_digest", c.meta.config_digest}};

  NamedTensors named = c.adapter.named_parameters();
  for (auto& t : c.head.named_parameters()) named.push_back(std::move(t));
  ByteWriter w;
  w.raw(kMagic);
  w.u32(kVersion);
  w.blob(h.dump());
  w.tensors(named);
  return w.bytes();
}

std::size_t pack(const ClonedModel& c, const std::filesystem::path& path) {
  const std::string bytes = serialize_packet(c);
  write_file(path, bytes);
  return bytes.size();
}

nlohmann::json packet_header(std::string_view packet, const std::string& context) {
  return parse(packet, context).header;
}

ClonedModel attach(std::string_view packet, const NetworkModel& target, const NetworkModel& source,
                   const std::string& context) {
  ParsedPacket p = parse(packet, context);
  const auto& h = p.header;
  ClonedModel c;
  try {
    const auto td = h.at("target").at("digest").get<std::string>();
    const auto sd = h.at("source").at("digest").get<std::string>();
    if (checkpoint_digest(target) != td) {
      throw ProvenanceError(context + ": target checkpoint digest " + checkpoint_digest(target) +
                            " does not match the packet's " + td);
    }
    if (checkpoint_digest(source) != sd) {
      throw ProvenanceError(context + ": source checkpoint digest " + checkpoint_digest(source) +
                            " does not match the packet's " + sd);
    }
    c.target = std::make_shared<const NetworkModel>(frozen_copy(target));
    c.source = std::make_shared<const NetworkModel>(frozen_copy(source));
    c.position = h.at("position").get<std::size_t>();
    if (c.position >= source.depth() || c.position >= target.depth()) {
      throw FormatError(context + ": position " + std::to_string(c.position) + " out of range");
    }
    c.original_classes = h.at("original_classes").get<std::vector<int>>();
    c.cloned_classes = h.at("cloned_classes").get<std::vector<int>>();
    c.cloned_outputs = h.at("cloned_outputs").get<std::vector<std::size_t>>();
    c.meta.target_file = h.at("target").at("file").get<std::string>();
    c.meta.source_file = h.at("source").at("file").get<std::string>();
    c.meta.seed = h.at("metadata").at("seed").get<std::uint64_t>();
    c.meta.config_digest = h.at("metadata").at("config_digest").get<std::string>();

    BinaryMaskSet bin;
    bin.widths = h.at("mask_widths").get<std::vector<std::size_t>>();
    bin.selected = h.at("selected").get<std::vector<std::vector<std::size_t>>>();
    if (bin.widths != source.maskable_widths() || bin.selected.size() != bin.widths.size()) {
      throw FormatError(context + ": mask layout does not match the source network");
    }
    for (std::size_t b = 0; b < bin.widths.size(); ++b) {
      const auto& sel = bin.selected[b];
      if (sel.empty() || !std::is_sorted(sel.begin(), sel.end()) ||
          std::adjacent_find(sel.begin(), sel.end()) != sel.end() || sel.back() >= bin.widths[b]) {
        throw FormatError(context + ": block " + std::to_string(b) + " has an invalid selection");
      }
    }
    c.masks = init_masks(source, bin.budgets());
    const auto values = bin.values();
    for (std::size_t b = 0; b < values.size(); ++b) {
      auto d = c.masks.logits[b].data();
      for (std::size_t i = 0; i < d.size(); ++i) d[i] = values[b][i] != 0.0 ? kSelectedLogit : -kSelectedLogit;
    }
    c.masks.active_from = c.position;
    c.binary = std::move(bin);

    const auto& a = h.at("adapter");
    const auto kind = a.at("kind").get<std::string>();
    if (kind != "conv1x1" && kind != "dense") throw FormatError(context + ": unknown adapter kind '" + kind + "'");
    c.adapter.kind = kind == "conv1x1" ? LayerKind::conv : LayerKind::dense;
    c.adapter.in_dims = a.at("in_dims").get<Dims>();
    c.adapter.out_dims = a.at("out_dims").get<Dims>();
    c.adapter.pool = a.at("pool").get<bool>();
    c.head.old_classes = h.at("head").at("old_classes").get<std::size_t>();
    c.head.new_classes = h.at("head").at("new_classes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(context + ": incomplete header (" + e.what() + ")");
  }
  if (c.adapter.in_dims != target.block_input_dims(c.position) ||
      c.adapter.out_dims != source.block_input_dims(c.position)) {
    throw FormatError(context + ": adapter dims do not match the backbones at R=" + std::to_string(c.position));
  }
  if (c.head.old_classes != target.num_classes || c.cloned_classes.size() != c.head.new_classes ||
      c.cloned_outputs.size() != c.head.new_classes) {
    throw FormatError(context + ": class lists do not match the head");
  }

  std::map<std::string, Tensor> by_name;
  for (auto& [name, t] : p.tensors) {
    if (!by_name.emplace(name, t).second) throw FormatError(context + ": duplicate tensor '" + name + "'");
  }
  auto take = [&](const std::string& name, const Dims& dims) {
    auto it = by_name.find(name);
    if (it == by_name.end()) throw FormatError(context + ": missing tensor '" + name + "'");
    if (it->second.dims() != dims) {
      throw FormatError(context + ": tensor '" + name + "' has dims " + dims_str(it->second.dims()) + ", expected " +
                        dims_str(dims));
    }
    Tensor t = it->second;
    by_name.erase(it);
    t.set_requires_grad(true);
    return t;
  };
  const std::size_t ci = c.adapter.kind == LayerKind::conv ? c.adapter.in_dims[0] : product(c.adapter.in_dims);
  const std::size_t co = c.adapter.kind == LayerKind::conv ? c.adapter.out_dims[0] : product(c.adapter.out_dims);
  c.adapter.weight = take("adapter.weight", c.adapter.kind == LayerKind::conv ? Dims{co, ci, 1, 1} : Dims{co, ci});
  c.adapter.bias = take("adapter.bias", Dims{co});
  const std::size_t rows = c.head.old_classes + c.head.new_classes;
  c.head.trunk_weight = take("head.trunk_weight", Dims{rows, target.feature_width()});
  c.head.branch_weight = take("head.branch_weight", Dims{rows, source.feature_width()});
  c.head.bias = take("head.bias", Dims{rows});
  if (!by_name.empty()) throw FormatError(context + ": unexpected tensor '" + by_name.begin()->first + "'");
  return c;
}

namespace {

struct ZooEntry {
  std::filesystem::path path;
  std::string digest;
  NetworkModel net;
};

std::vector<ZooEntry> scan_zoo(const std::filesystem::path& dir) {
  if (!std::filesystem::is_directory(dir)) throw ZooError("zoo directory " + dir.string() + " does not exist");
  std::vector<std::filesystem::path> files;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".pncm") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<ZooEntry> out;
  for (const auto& f : files) {
    const std::string bytes = read_file(f);
    out.push_back({f, hex64(fnv1a64(bytes)), parse_checkpoint(bytes, f.string())});
  }
  return out;
}

const NetworkModel& find_in_zoo(const std::vector<ZooEntry>& zoo, const nlohmann::json& role, const char* name,
                                const std::filesystem::path& dir) {
  const auto digest = role.at("digest").get<std::string>();
  const auto arch = role.at("architecture").get<std::string>();
  const auto file = role.at("file").get<std::string>();
  const auto classes = role.at("classes").get<std::vector<int>>();
  for (const auto& e : zoo) {
    if (e.digest == digest) return e.net;
  }
  for (const auto& e : zoo) {
    const bool same_role = e.net.arch_id == arch && e.net.meta.classes == classes;
    if ((!file.empty() && e.path.filename() == file) || same_role) {
      throw ProvenanceError(std::string(name) + " checkpoint " + e.path.filename().string() + " has digest " +
                            e.digest + ", packet expects " + digest);
    }
  }
  throw ZooError(std::string(name) + " checkpoint with digest " + digest + " not found in " + dir.string());
}

}  // namespace

ClonedModel unpack(const std::filesystem::path& packet_path, const std::filesystem::path& zoo_dir) {
  const std::string bytes = read_file(packet_path);
  const ParsedPacket p = parse(bytes, packet_path.string());
  const auto zoo = scan_zoo(zoo_dir);
  try {
    const NetworkModel& target = find_in_zoo(zoo, p.header.at("target"), "target", zoo_dir);
    const NetworkModel& source = find_in_zoo(zoo, p.header.at("source"), "source", zoo_dir);
    return attach(bytes, target, source, packet_path.string());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(packet_path.string() + ": incomplete header (" + e.what() + ")");
  }
}

NetworkModel detach(const ClonedModel& c) { return c.target->clone(); }

FitResult repair(ClonedModel& c, const LocalModelSet& surrogates, const LabeledDataset& anchors,
                 const InsertionConfig& config) {
  FitResult fit = fit_at_position(c, surrogates, anchors, config);
  calibrate_binary(c, surrogates, anchors, config);
  return fit;
}

}  // namespace pnc
