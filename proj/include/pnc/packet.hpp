#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "pnc/graft.hpp"

namespace pnc {

/// Packet file: magic "PNCP", u32 version, u32-prefixed JSON header
/// (architectures, checkpoint digests, R, class lists, selected filter
/// indices per block, metadata), then named f64 tensors for the adapter and
/// head only. No backbone weight is ever written.
std::string serialize_packet(const ClonedModel& c);

/// Writes the packet and returns its size in bytes.
std::size_t pack(const ClonedModel& c, const std::filesystem::path& path);

/// FNV-1a of a checkpoint's serialized bytes, as hex.
std::string checkpoint_digest(const NetworkModel& net);

/// Rebuilds the cloned model against the given backbones. Digest mismatch
/// raises ProvenanceError.
ClonedModel attach(std::string_view packet, const NetworkModel& target, const NetworkModel& source,
                   const std::string& context = "packet");

/// Locates both checkpoints in `zoo_dir` by digest and attaches.
/// Missing checkpoints raise ZooError; a checkpoint that is present under
/// the packet's file name or with the same architecture and classes but a
/// different digest raises ProvenanceError.
ClonedModel unpack(const std::filesystem::path& packet_path, const std::filesystem::path& zoo_dir);

/// The pristine target network.
NetworkModel detach(const ClonedModel& c);

/// Receiver-side repair: retrains masks, adapter and head at the packet's R.
FitResult repair(ClonedModel& c, const LocalModelSet& surrogates, const LabeledDataset& anchors,
                 const InsertionConfig& config);

/// Header JSON of a packet, for inspection.
nlohmann::json packet_header(std::string_view packet, const std::string& context = "packet");

}  // namespace pnc
