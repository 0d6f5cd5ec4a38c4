#include <doctest.h>

#include "pnc/errors.hpp"
#include "pnc/packet.hpp"
#include "support.hpp"

using namespace pnc;
namespace fs = std::filesystem;

namespace {

/// A binarized toy graft with non-trivial adapter and head values.
ClonedModel trained_graft(const testing::ToyClone& t, std::size_t r) {
  ClonedModel c = assemble(t.target, t.source, init_masks(*t.source, {2, 2, 3}), r, {3}, 5);
  InsertionConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 4;
  cfg.calibrate_epochs = 1;
  fit_at_position(c, t.surrogates, t.anchors, cfg);
  calibrate_binary(c, t.surrogates, t.anchors, cfg);
  c.meta.target_file = "target.pncm";
  c.meta.source_file = "source.pncm";
  return c;
}

fs::path make_zoo(const testing::ToyClone& t, const std::string& name) {
  const fs::path dir = testing::scratch(name);
  save_checkpoint(*t.target, dir / "target.pncm");
  save_checkpoint(*t.source, dir / "source.pncm");
  return dir;
}

Tensor probe(std::uint64_t seed) {
  Rng rng(seed);
  return testing::random_tensor({5, 1, 8, 8}, rng, 0.0, 1.0);
}

/// Replaces the first hex digit of `digest` inside the packet bytes.
std::string tamper_digest(std::string bytes, const std::string& digest) {
  const auto at = bytes.find(digest);
  REQUIRE(at != std::string::npos);
  bytes[at] = bytes[at] == '0' ? '1' : '0';
  return bytes;
}

}  // namespace

TEST_CASE("packets hold only graft tensors") {
  const auto t = testing::toy_clone();
  const ClonedModel c = trained_graft(t, 1);
  const std::string bytes = serialize_packet(c);
  CHECK(bytes.substr(0, 4) == "PNCP");
  for (const auto& [name, tensor] : t.source->named_parameters()) {
    if (name.rfind("head.", 0) == 0) continue;  // the extended head reuses these names
    CHECK(bytes.find(name) == std::string::npos);
  }
  const nlohmann::json h = packet_header(bytes);
  CHECK(h["position"] == 1);
  CHECK(h["target"]["digest"] == checkpoint_digest(*t.target));
  CHECK(h["source"]["digest"] == checkpoint_digest(*t.source));
}

TEST_CASE("pack, attach, pack is byte-identical at every R") {
  const auto t = testing::toy_clone();
  for (std::size_t r = 0; r < 3; ++r) {
    const ClonedModel c = trained_graft(t, r);
    const std::string bytes = serialize_packet(c);
    const ClonedModel back = attach(bytes, *t.target, *t.source);
    CHECK(serialize_packet(back) == bytes);
    CHECK(back.position == r);
    CHECK(*back.binary == *c.binary);
    CHECK(back.class_order() == c.class_order());
    const Tensor x = probe(r);
    CHECK(bit_equal(cloned_forward(back, x, MaskMode::binary), cloned_forward(c, x, MaskMode::binary)));
  }
}

TEST_CASE("unpack finds backbones in the zoo by digest") {
  const auto t = testing::toy_clone();
  const ClonedModel c = trained_graft(t, 2);
  const fs::path zoo = make_zoo(t, "zoo_ok");
  const fs::path pkt = testing::scratch("pkt_ok") / "p.pncp";
  const std::size_t size = pack(c, pkt);
  CHECK(size == fs::file_size(pkt));
  CHECK(size < serialize_checkpoint(*t.source).size() * 4);
  const ClonedModel back = unpack(pkt, zoo);
  CHECK(serialize_packet(back) == read_file(pkt));
  CHECK(bit_equal(cloned_forward(back, probe(1), MaskMode::binary), cloned_forward(c, probe(1), MaskMode::binary)));
}

TEST_CASE("detach returns the pristine target; re-attach reproduces the logits") {
  const auto t = testing::toy_clone();
  const std::string target_bytes = serialize_checkpoint(*t.target);
  const ClonedModel c = trained_graft(t, 1);
  const NetworkModel plain = detach(c);
  CHECK(serialize_checkpoint(plain) == target_bytes);
  const Tensor x = probe(7);
  CHECK(bit_equal(forward(plain, x), forward(*t.target, x)));
  const std::string bytes = serialize_packet(c);
  const ClonedModel first = attach(bytes, plain, *t.source);
  const NetworkModel again = detach(first);
  const ClonedModel second = attach(bytes, again, *t.source);
  CHECK(bit_equal(cloned_forward(first, x, MaskMode::binary), cloned_forward(second, x, MaskMode::binary)));
}

TEST_CASE("provenance checks") {
  const auto t = testing::toy_clone();
  const ClonedModel c = trained_graft(t, 1);
  const std::string bytes = serialize_packet(c);

  SUBCASE("tampered digests") {
    CHECK_THROWS_AS(attach(tamper_digest(bytes, checkpoint_digest(*t.target)), *t.target, *t.source), ProvenanceError);
    CHECK_THROWS_AS(attach(tamper_digest(bytes, checkpoint_digest(*t.source)), *t.target, *t.source), ProvenanceError);
  }
  SUBCASE("wrong backbone") {
    const NetworkModel other = testing::toy_net({0, 1, 2}, 99);
    CHECK_THROWS_AS(attach(bytes, other, *t.source), ProvenanceError);
    CHECK_THROWS_AS(attach(bytes, *t.source, *t.target), ProvenanceError);
  }
  SUBCASE("zoo checkpoint replaced under the same name") {
    const fs::path zoo = make_zoo(t, "zoo_swapped");
    NetworkModel changed = t.target->clone();
    changed.head.bias.data()[0] += 1e-12;
    save_checkpoint(changed, zoo / "target.pncm");
    const fs::path pkt = zoo / "p.pncp";
    pack(c, pkt);
    CHECK_THROWS_AS(unpack(pkt, zoo), ProvenanceError);
  }
  SUBCASE("checkpoint missing from the zoo") {
    const fs::path zoo = testing::scratch("zoo_partial");
    save_checkpoint(*t.target, zoo / "target.pncm");
    const fs::path pkt = zoo / "p.pncp";
    pack(c, pkt);
    CHECK_THROWS_AS(unpack(pkt, zoo), ZooError);
    CHECK_THROWS_AS(unpack(pkt, zoo / "nowhere"), ZooError);
    NetworkModel lookalike = testing::toy_net({3, 4, 5}, 40);
    save_checkpoint(lookalike, zoo / "other.pncm");
    CHECK_THROWS_AS(unpack(pkt, zoo), ProvenanceError);
  }
}

TEST_CASE("malformed packets raise FormatError") {
  const auto t = testing::toy_clone();
  const std::string bytes = serialize_packet(trained_graft(t, 0));
  CHECK_THROWS_AS(attach(bytes.substr(0, bytes.size() - 3), *t.target, *t.source), FormatError);
  CHECK_THROWS_AS(attach("PNCM" + bytes.substr(4), *t.target, *t.source), FormatError);
  CHECK_THROWS_AS(packet_header("PN"), FormatError);
}

TEST_CASE("unbinarized grafts cannot be packed") {
  const auto t = testing::toy_clone();
  const ClonedModel c = assemble(t.target, t.source, init_masks(*t.source, {2, 2, 3}), 1, {3}, 5);
  CHECK_THROWS_AS(serialize_packet(c), ContractError);
}

TEST_CASE("repair retrains at the packet's position") {
  const auto t = testing::toy_clone();
  ClonedModel c = attach(serialize_packet(trained_graft(t, 1)), *t.target, *t.source);
  const Tensor before = c.head.branch_weight.clone();
  InsertionConfig cfg;
  cfg.epochs = 1;
  cfg.batch_size = 4;
  cfg.calibrate_epochs = 1;
  const FitResult fit = repair(c, t.surrogates, t.anchors, cfg);
  CHECK(fit.epoch_losses.size() == 1);
  CHECK(c.position == 1);
  CHECK(c.binary.has_value());
  CHECK(!bit_equal(c.head.branch_weight, before));
  CHECK(bit_equal(narrow(cloned_forward(c, probe(3), MaskMode::binary), 0, 3), forward(*t.target, probe(3))));
}
