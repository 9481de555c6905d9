"""Binary model checkpoints.

Layout: magic "IFSO", u32 version, u32 metadata length, JSON metadata
(layer specs, gate values, tensor manifest), then the tensors as
little-endian float64 payloads in manifest order. Round-trips are
bit-exact.
"""

import json
import struct
from dataclasses import asdict

import numpy as np

from .net import GatedModel, LayerSpec

MAGIC = b"IFSO"
VERSION = 1


def save_checkpoint(path, model):
    manifest = [{"name": n, "shape": list(model.weights[n].shape)}
                for n in model.weight_names()]
    meta = {
        "arch": model.arch_name,
        "input_shape": list(model.input_shape),
        "layers": [asdict(spec) for spec in model.layers],
        "gates": {str(i): model.gates[i].tolist() for i in model.gated_layers()},
        "manifest": manifest,
    }
    blob = json.dumps(meta, sort_keys=True).encode()
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", VERSION))
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for entry in manifest:
            f.write(np.ascontiguousarray(model.weights[entry["name"]],
                                         dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != MAGIC:
        raise ValueError(f"bad magic {data[:4]!r}")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != VERSION:
        raise ValueError(f"checkpoint version {version}, expected {VERSION}")
    (meta_len,) = struct.unpack_from("<I", data, 8)
    meta_end = 12 + meta_len
    if meta_end > len(data):
        raise ValueError("metadata length exceeds file size")
    meta = json.loads(data[12:meta_end].decode())
    layers = [LayerSpec(**d) for d in meta["layers"]]
    gates = {int(i): np.asarray(v, dtype=np.float64)
             for i, v in meta["gates"].items()}
    weights = {}
    pos = meta_end
    for entry in meta["manifest"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape)) * 8
        if pos + nbytes > len(data):
            raise ValueError(f"payload for {entry['name']} truncated "
                             f"(need {nbytes} bytes at offset {pos})")
        weights[entry["name"]] = np.frombuffer(
            data[pos:pos + nbytes], dtype="<f8").reshape(shape).copy()
        pos += nbytes
    if pos != len(data):
        raise ValueError(f"{len(data) - pos} trailing bytes after payloads")
    return GatedModel(meta["arch"], layers, weights, gates,
                      tuple(meta["input_shape"]))
