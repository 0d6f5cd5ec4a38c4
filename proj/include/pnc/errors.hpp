#pragma once

#include <stdexcept>
#include <string>

namespace pnc {

/// Base of every error the library raises. `kind()` is a stable
/// machine-readable tag; the CLI maps it onto an exit code.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& what) : std::runtime_error(what), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

/// Incompatible tensor extents for an operation.
struct ShapeError : Error {
  explicit ShapeError(const std::string& what) : Error("shape", what) {}
};

/// A documented precondition was violated by the caller.
struct ContractError : Error {
  explicit ContractError(const std::string& what) : Error("contract", what) {}
};

/// Malformed or truncated file contents (IDX, checkpoint, packet, surrogate set).
struct FormatError : Error {
  explicit FormatError(const std::string& what) : Error("format", what) {}
};

/// Dataset level problems: missing files, inconsistent counts, bad class sets.
struct DataError : Error {
  explicit DataError(const std::string& what) : Error("data", what) {}
};

/// Singular systems, non-finite losses, undefined similarities.
struct NumericError : Error {
  explicit NumericError(const std::string& what) : Error("numeric", what) {}
};

/// A packet does not match the checkpoints it claims to be built from.
struct ProvenanceError : Error {
  explicit ProvenanceError(const std::string& what) : Error("provenance", what) {}
};

/// A checkpoint referenced by a packet is not present in the zoo directory.
struct ZooError : Error {
  explicit ZooError(const std::string& what) : Error("zoo", what) {}
};

/// Invalid run configuration (bad flag values, schema violations).
struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};

/// Rebuilds `e` with "stage: " prefixed to its message, keeping its kind.
[[noreturn]] inline void rethrow_in_stage(const Error& e, const std::string& stage) {
  const std::string what = stage + ": " + e.what();
  const std::string& k = e.kind();
  if (k == "shape") throw ShapeError(what);
  if (k == "contract") throw ContractError(what);
  if (k == "format") throw FormatError(what);
  if (k == "data") throw DataError(what);
  if (k == "numeric") throw NumericError(what);
  if (k == "provenance") throw ProvenanceError(what);
  if (k == "zoo") throw ZooError(what);
  if (k == "config") throw ConfigError(what);
  throw Error(k, what);
}

}  // namespace pnc
