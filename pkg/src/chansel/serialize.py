"""Self-describing binary model file.

Layout (all integers little-endian)::

    8 bytes   magic  b"CHSLMDL\\0"
    u32       format version (1)
    u64       header length in bytes
    ...       header: UTF-8 JSON {"spec", "tensors", "pruning"}
    per tensor, in header order:
      u64     element count
      ...     count float64 values, little-endian, row-major

``tensors`` lists ``{"layer", "key", "shape", "requires_grad"}``; pruning
layers contribute ``<unit>.P``/``<unit>.B`` entries under layer ``"@pruning"``.
The file must end exactly after the last tensor.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .network import AugmentedNetwork, Network, NetworkSpec, SpecError, WeightStore
from .pruning import PruningLayer
from .tensor import Tensor

MAGIC = b"CHSLMDL\0"
VERSION = 1
PRUNING_KEY = "@pruning"


class ModelFileError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def dumps(model: Union[Network, AugmentedNetwork]) -> bytes:
    if isinstance(model, AugmentedNetwork):
        net, aug = model.network, model
    else:
        net, aug = model, None
    entries, arrays = [], []
    for lname, key, t in net.weights.entries():
        entries.append({"layer": lname, "key": key, "shape": list(t.shape),
                        "requires_grad": t.requires_grad})
        arrays.append(t.data)
    header = {"spec": net.spec.to_dict(), "tensors": entries, "pruning": None}
    if aug is not None:
        header["pruning"] = {"mode": aug.mode, "layers": [
            {"name": l.name, "kind": l.kind, "sites": list(l.sites), "tau": l.tau}
            for l in aug.layers.values()]}
        for l in aug.layers.values():
            for key, arr in (("P", l.P.data), ("B", l.B)):
                entries.append({"layer": PRUNING_KEY, "key": f"{l.name}.{key}",
                                "shape": list(arr.shape), "requires_grad": False})
                arrays.append(arr)
    text = json.dumps(header, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<IQ", VERSION, len(text)), text]
    for arr in arrays:
        flat = np.ascontiguousarray(arr, dtype="<f8").ravel()
        parts.append(struct.pack("<Q", flat.size))
        parts.append(flat.tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> Union[Network, AugmentedNetwork]:
    if len(buf) < len(MAGIC) + 12:
        raise ModelFileError("file too short for header", len(buf))
    if buf[:len(MAGIC)] != MAGIC:
        raise ModelFileError("bad magic", 0)
    pos = len(MAGIC)
    version, hlen = struct.unpack_from("<IQ", buf, pos)
    if version != VERSION:
        raise ModelFileError(f"unsupported version {version}", pos)
    pos += 12
    if pos + hlen > len(buf):
        raise ModelFileError(f"header declares {hlen} bytes, only {len(buf) - pos} remain", pos)
    try:
        header = json.loads(buf[pos:pos + hlen].decode("utf-8"))
        spec = NetworkSpec.from_dict(header["spec"])
        entries = header["tensors"]
    except (UnicodeDecodeError, ValueError, KeyError, TypeError) as exc:
        raise ModelFileError(f"unreadable header: {exc}", pos) from exc
    pos += hlen

    layers, pruning_arrays = {}, {}
    for e in entries:
        if pos + 8 > len(buf):
            raise ModelFileError(f"truncated before tensor {e['layer']}.{e['key']}", pos)
        (count,) = struct.unpack_from("<Q", buf, pos)
        shape = tuple(e["shape"])
        declared = int(np.prod(shape)) if shape else 1
        if count != declared:
            raise ModelFileError(f"tensor {e['layer']}.{e['key']}: declared shape {shape} holds "
                                 f"{declared} values but record has {count}", pos)
        pos += 8
        nbytes = 8 * count
        if pos + nbytes > len(buf):
            raise ModelFileError(f"tensor {e['layer']}.{e['key']}: needs {nbytes} bytes, "
                                 f"{len(buf) - pos} remain", pos)
        arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).astype(np.float64).reshape(shape)
        pos += nbytes
        if e["layer"] == PRUNING_KEY:
            pruning_arrays[e["key"]] = arr
        else:
            layers.setdefault(e["layer"], {})[e["key"]] = Tensor(
                arr, requires_grad=bool(e["requires_grad"]), name=f"{e['layer']}.{e['key']}")
    if pos != len(buf):
        raise ModelFileError(f"{len(buf) - pos} trailing bytes after last tensor", pos)

    try:
        net = Network(spec, WeightStore(layers))
    except SpecError as exc:
        raise ModelFileError(f"inconsistent model: {exc}", len(MAGIC) + 12) from exc
    if not header.get("pruning"):
        return net
    info = header["pruning"]
    pl = {}
    for d in info["layers"]:
        pl[d["name"]] = PruningLayer(d["name"], pruning_arrays[f"{d['name']}.P"], sites=d["sites"],
                                     kind=d["kind"], b=pruning_arrays[f"{d['name']}.B"], tau=d["tau"])
    return AugmentedNetwork(net, pl, info["mode"])


def save_model(path, model) -> None:
    Path(path).write_bytes(dumps(model))


def load_model(path):
    return loads(Path(path).read_bytes())
