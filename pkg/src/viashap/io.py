"""Versioned binary container for trained networks.

Layout (all integers little-endian)::

    b"SELFSHAP" | u32 version | u64 header length | JSON header | array bytes | sha256

The header (sorted keys, compact separators) holds the network spec, layer
configs, optional preprocessor and extras, plus a manifest of the arrays that
follow: name, shape and byte offset, float64 little-endian in row-major order.
The trailing digest covers every preceding byte.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from .data import Preprocessor
from .network import NetworkSpec, ShapNetwork

MAGIC = b"SELFSHAP"
FORMAT_VERSION = 1
_DIGEST = 32


class ContainerError(ValueError):
    pass


class ChecksumError(ContainerError):
    pass


class VersionError(ContainerError):
    pass


@dataclass
class LoadedModel:
    net: ShapNetwork
    preprocessor: Preprocessor | None = None
    extra: dict = field(default_factory=dict)


def _dumps(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode_model(net: ShapNetwork, preprocessor: Preprocessor | None = None, extra: dict | None = None) -> bytes:
    state = net.state()
    manifest, chunks, offset = [], [], 0
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name], dtype="<f8")
        raw = arr.tobytes(order="C")
        manifest.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    header = {
        "spec": net.spec.to_dict(),
        "layers": net.layer_configs(),
        "arrays": manifest,
        "preprocessor": preprocessor.to_dict() if preprocessor is not None else None,
        "extra": extra or {},
    }
    hdr = _dumps(header)
    body = MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hdr)) + hdr + b"".join(chunks)
    return body + hashlib.sha256(body).digest()


def decode_model(blob: bytes) -> LoadedModel:
    prefix = len(MAGIC) + 12
    if blob[: len(MAGIC)] != MAGIC:
        raise ContainerError("not a model container (bad magic string)")
    if len(blob) < prefix + _DIGEST:
        raise ChecksumError("checksum failure: container is truncated")
    (version, hlen) = struct.unpack("<IQ", blob[len(MAGIC) : prefix])
    if version != FORMAT_VERSION:
        raise VersionError(f"container format version {version} is not supported (this build reads version {FORMAT_VERSION})")
    body, digest = blob[:-_DIGEST], blob[-_DIGEST:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumError("checksum failure: container is truncated or corrupted")
    header = json.loads(body[prefix : prefix + hlen].decode("utf-8"))
    data = body[prefix + hlen :]
    state = {}
    for entry in header["arrays"]:
        raw = data[entry["offset"] : entry["offset"] + entry["nbytes"]]
        state[entry["name"]] = np.frombuffer(raw, dtype="<f8").reshape(entry["shape"]).astype(np.float64)
    spec = NetworkSpec.from_dict(header["spec"])
    net = ShapNetwork.from_configs(spec, header["layers"])
    net.load_state(state)
    pre = header.get("preprocessor")
    return LoadedModel(net, Preprocessor.from_dict(pre) if pre is not None else None, header.get("extra", {}))


def save_model(path, net: ShapNetwork, preprocessor: Preprocessor | None = None, extra: dict | None = None) -> None:
    blob = encode_model(net, preprocessor, extra)
    with open(path, "wb") as fh:
        fh.write(blob)


def load_model(path) -> LoadedModel:
    with open(path, "rb") as fh:
        return decode_model(fh.read())
