"""Versioned binary checkpoints with a weight-lineage (provenance) chain.

Layout::

    8 bytes   magic b"URLSCKPT"
    u32 LE    format version
    u64 LE    header length in bytes
    header    UTF-8 JSON: spec, blob directory, provenance, payload size + sha256
    payload   little-endian raw blobs at the offsets listed in the directory
"""
from __future__ import annotations

import hashlib
import json
import os
import struct
from pathlib import Path

import numpy as np

from .architectures import NetworkSpec, build_network
from .errors import (CheckpointFormatError, CheckpointSpecError, CheckpointTruncatedError,
                     CheckpointVersionError, ShapeError)
from .nn import Network

MAGIC = b"URLSCKPT"
FORMAT_VERSION = 1
_PREFIX = struct.Struct("<8sIQ")

TAG_IMAGENET = "ω(i)"
TAG_RANDOM = "ω(rand)"
TAG_CYS = "ω(c)"
TAG_URS = "ω(u)"
TAG_BOTH = "ω(c+u)"
KNOWN_TAGS = (TAG_IMAGENET, TAG_RANDOM, TAG_CYS, TAG_URS, TAG_BOTH)


def provenance_entry(tag: str, dataset_hash: str | None = None, timestamp: str | None = None) -> dict:
    return {"tag": tag, "dataset_hash": dataset_hash, "timestamp": timestamp}


def tags(provenance: list[dict]) -> list[str]:
    return [entry["tag"] for entry in provenance]


def encode_checkpoint(network: Network, provenance: list[dict]) -> bytes:
    if network.spec is None:
        raise CheckpointSpecError("only networks built from a NetworkSpec can be checkpointed")
    blobs = []
    payload = bytearray()
    for name, arr in sorted(network.state_dict().items()):
        a = np.ascontiguousarray(arr)
        le = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = le.tobytes()
        blobs.append({"name": name, "dtype": a.dtype.str.lstrip("<>=|"), "shape": list(a.shape),
                      "offset": len(payload), "length": len(raw)})
        payload += raw
    header = {
        "format": "urolesion-checkpoint",
        "spec": network.spec.to_dict(),
        "blobs": blobs,
        "provenance": provenance,
        "payload_size": len(payload),
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True, ensure_ascii=False, separators=(",", ":")).encode("utf-8")
    return _PREFIX.pack(MAGIC, FORMAT_VERSION, len(hbytes)) + hbytes + bytes(payload)


def save_checkpoint(network: Network, provenance_tag: str, path: str | os.PathLike,
                    dataset_hash: str | None = None, timestamp: str | None = None) -> list[dict]:
    """Append ``provenance_tag`` to the network's lineage and write it to ``path``.

    Returns the new provenance chain. Writes go through a temporary file so
    an interrupted save never leaves a half-written checkpoint behind.
    """
    chain = list(network.provenance) + [provenance_entry(provenance_tag, dataset_hash, timestamp)]
    data = encode_checkpoint(network, chain)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(data)
    os.replace(tmp, path)
    network.provenance = chain
    return chain


def read_header(data: bytes) -> tuple[dict, int]:
    if len(data) < _PREFIX.size:
        if MAGIC.startswith(data[:8]) and data:
            raise CheckpointTruncatedError("file ends inside the fixed header")
        raise CheckpointFormatError("not a checkpoint file")
    magic, version, hlen = _PREFIX.unpack_from(data)
    if magic != MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, expected {FORMAT_VERSION}")
    start = _PREFIX.size
    if len(data) < start + hlen:
        raise CheckpointTruncatedError("file ends inside the header")
    try:
        header = json.loads(data[start:start + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"unreadable header: {exc}") from None
    if header.get("format") != "urolesion-checkpoint":
        raise CheckpointFormatError("header does not describe a checkpoint")
    return header, start + hlen


def decode_checkpoint(data: bytes) -> tuple[NetworkSpec, dict[str, np.ndarray], list[dict]]:
    header, start = read_header(data)
    payload = data[start:]
    if len(payload) < header["payload_size"]:
        raise CheckpointTruncatedError(f"payload has {len(payload)} of {header['payload_size']} bytes")
    if len(payload) > header["payload_size"]:
        raise CheckpointFormatError("trailing bytes after payload")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointFormatError("payload checksum mismatch")
    state = {}
    for blob in header["blobs"]:
        dt = np.dtype(blob["dtype"]).newbyteorder("<")
        raw = payload[blob["offset"]:blob["offset"] + blob["length"]]
        arr = np.frombuffer(raw, dtype=dt).reshape(blob["shape"])
        state[blob["name"]] = arr.astype(arr.dtype.newbyteorder("="), copy=True)
    try:
        spec = NetworkSpec.from_dict(header["spec"])
    except (TypeError, ValueError) as exc:
        raise CheckpointFormatError(f"invalid network spec in header: {exc}") from None
    return spec, state, header["provenance"]


def load_checkpoint(path: str | os.PathLike, expected_spec: NetworkSpec | None = None
                    ) -> tuple[Network, list[dict]]:
    """Rebuild the network stored at ``path``; returns ``(network, provenance)``."""
    data = Path(path).read_bytes()
    spec, state, provenance = decode_checkpoint(data)
    if expected_spec is not None and spec != expected_spec:
        raise CheckpointSpecError(f"checkpoint holds {spec}, expected {expected_spec}")
    net = build_network(spec)
    try:
        net.load_state_dict(state)
    except ShapeError as exc:
        raise CheckpointSpecError(f"blobs do not match the {spec.backbone} graph: {exc}") from None
    net.provenance = list(provenance)
    return net, list(provenance)


def load_into(network: Network, path: str | os.PathLike) -> list[dict]:
    """Load weights into an existing network whose spec must match the file."""
    loaded, provenance = load_checkpoint(path, expected_spec=network.spec)
    network.load_state_dict(loaded.state_dict())
    network.provenance = list(provenance)
    return provenance
