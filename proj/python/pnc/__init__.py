"""Partial network cloning on MNIST."""

from ._pnc import (
    ClonedModel,
    ConfigError,
    ContractError,
    DataError,
    FormatError,
    Network,
    NumericError,
    PncError,
    ProvenanceError,
    ShapeError,
    ZooError,
    binarize_topk,
    build_network,
    clone,
    config_digest,
    default_config,
    effective_config,
    load_checkpoint,
    packet_header,
    parse_class_list,
    pretrain,
    selftest,
    unpack,
)

__all__ = [
    "ClonedModel",
    "ConfigError",
    "ContractError",
    "DataError",
    "FormatError",
    "Network",
    "NumericError",
    "PncError",
    "ProvenanceError",
    "ShapeError",
    "ZooError",
    "binarize_topk",
    "build_network",
    "clone",
    "config_digest",
    "default_config",
    "effective_config",
    "load_checkpoint",
    "packet_header",
    "parse_class_list",
    "pretrain",
    "selftest",
    "unpack",
]
