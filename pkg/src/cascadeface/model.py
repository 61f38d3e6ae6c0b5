"""Cascade model container and its binary file format.

Layout (all integers little-endian)::

    8 bytes   magic  b"CASCNN\\x00\\x01"
    4 bytes   uint32 format version
    8 bytes   uint64 header length L
    L bytes   UTF-8 JSON header (sorted keys, compact separators)
    ...       raw tensor data, little-endian, in header order

The header lists, per net, its layer spec, loss weights, a pre-trained flag
and the tensors (name, dtype, shape, byte offset, byte length).
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import StateError
from .losses import DEFAULT_WEIGHTS, LossWeights
from .nn import Network, NetworkSpec

MAGIC = b"CASCNN\x00\x01"
FORMAT_VERSION = 1
NET_ORDER = ("net12", "net24", "net48")


@dataclass
class CascadeModel:
    nets: dict = field(default_factory=dict)
    loss_weights: dict = field(default_factory=lambda: dict(DEFAULT_WEIGHTS))
    trained: set = field(default_factory=set)
    meta: dict = field(default_factory=dict)

    @classmethod
    def initialize(cls, rng=None, dtype=np.float32, names=NET_ORDER) -> "CascadeModel":
        rng = np.random.default_rng(rng)
        return cls(nets={name: Network.build(name, rng=rng, dtype=dtype) for name in names})

    def net(self, name: str) -> Network:
        if name not in self.nets:
            raise StateError(f"model has no {name}")
        return self.nets[name]

    def has(self, name: str) -> bool:
        return name in self.nets

    @property
    def bridged(self) -> bool:
        return any(n.spec.bridge_width for n in self.nets.values())

    def copy(self) -> "CascadeModel":
        return CascadeModel({k: v.copy() for k, v in self.nets.items()},
                            dict(self.loss_weights), set(self.trained), dict(self.meta))

    def astype(self, dtype) -> "CascadeModel":
        return CascadeModel({k: v.astype(dtype) for k, v in self.nets.items()},
                            dict(self.loss_weights), set(self.trained), dict(self.meta))

    def to_bytes(self) -> bytes:
        blobs = []
        offset = 0
        nets = []
        for name in [n for n in NET_ORDER if n in self.nets] + sorted(
                n for n in self.nets if n not in NET_ORDER):
            net = self.nets[name]
            tensors = []
            for pname, arr in net.params.items():
                data = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes()
                tensors.append({"name": pname, "dtype": arr.dtype.str.lstrip("<>=|"),
                                "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
                blobs.append(data)
                offset += len(data)
            w = self.loss_weights.get(name, DEFAULT_WEIGHTS.get(name, LossWeights()))
            nets.append({
                "id": name,
                "spec": net.spec.to_dict(),
                "loss_weights": {"alpha": w.alpha, "beta": w.beta, "gamma": w.gamma},
                "trained": name in self.trained,
                "tensors": tensors,
            })
        header = json.dumps({"format_version": FORMAT_VERSION, "nets": nets, "meta": self.meta},
                            sort_keys=True, separators=(",", ":")).encode("utf-8")
        buf = io.BytesIO()
        buf.write(MAGIC)
        buf.write(struct.pack("<IQ", FORMAT_VERSION, len(header)))
        buf.write(header)
        for b in blobs:
            buf.write(b)
        return buf.getvalue()

    @classmethod
    def from_bytes(cls, data: bytes) -> "CascadeModel":
        if data[:8] != MAGIC:
            raise ValueError("not a cascade model file")
        version, hlen = struct.unpack("<IQ", data[8:20])
        if version != FORMAT_VERSION:
            raise ValueError(f"unsupported model format version {version}")
        header = json.loads(data[20:20 + hlen].decode("utf-8"))
        base = 20 + hlen
        model = cls(meta=header.get("meta", {}))
        for entry in header["nets"]:
            spec = NetworkSpec.from_dict(entry["spec"])
            params = {}
            for t in entry["tensors"]:
                start = base + t["offset"]
                dtype = np.dtype("<" + t["dtype"])
                arr = np.frombuffer(data[start:start + t["nbytes"]], dtype=dtype)
                params[t["name"]] = arr.reshape(t["shape"]).astype(dtype.newbyteorder("="))
            model.nets[entry["id"]] = Network(spec, params)
            model.loss_weights[entry["id"]] = LossWeights(**entry["loss_weights"])
            if entry.get("trained"):
                model.trained.add(entry["id"])
        return model

    def save(self, path) -> int:
        data = self.to_bytes()
        Path(path).write_bytes(data)
        return len(data)

    @classmethod
    def load(cls, path) -> "CascadeModel":
        return cls.from_bytes(Path(path).read_bytes())


def load_model(path) -> CascadeModel:
    return CascadeModel.load(path)


def save_model(model: CascadeModel, path) -> int:
    return model.save(path)


def merge_models(base: Optional[CascadeModel], update: CascadeModel) -> CascadeModel:
    """Nets from ``update`` override those in ``base``."""
    if base is None:
        return update.copy()
    out = base.copy()
    for name, net in update.nets.items():
        out.nets[name] = net.copy()
        out.loss_weights[name] = update.loss_weights.get(name, out.loss_weights.get(name))
        if name in update.trained:
            out.trained.add(name)
    out.meta.update(update.meta)
    return out
