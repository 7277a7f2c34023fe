"""Checkpoint directories: ``model.json`` (layer specs + index table) and ``weights.bin``."""

from __future__ import annotations

import json
import os

import numpy as np

from .graph import Sequential
from .layers import NdiffError

FORMAT_VERSION = "ndiff-1"


def save_graph(graph: Sequential, directory, meta: dict | None = None) -> None:
    os.makedirs(directory, exist_ok=True)
    index = []
    blobs = []
    offset = 0
    for key, value in graph.state().items():
        arr = np.ascontiguousarray(value, dtype="<f4")
        index.append({"name": key, "shape": list(value.shape), "offset": offset, "count": int(arr.size)})
        blobs.append(arr.tobytes())
        offset += arr.size
    doc = {"version": FORMAT_VERSION, "layers": graph.specs(), "tensors": index}
    if meta:
        doc.update(meta)
    with open(os.path.join(directory, "weights.bin"), "wb") as fh:
        fh.write(b"".join(blobs))
    with open(os.path.join(directory, "model.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)


def load_graph(directory, dtype=np.float32) -> tuple[Sequential, dict]:
    with open(os.path.join(directory, "model.json")) as fh:
        doc = json.load(fh)
    if doc.get("version") != FORMAT_VERSION:
        raise NdiffError(f"unsupported checkpoint version {doc.get('version')!r}")
    graph = Sequential.from_specs(doc["layers"], dtype=dtype)
    flat = np.fromfile(os.path.join(directory, "weights.bin"), dtype="<f4")
    state = {}
    for entry in doc["tensors"]:
        chunk = flat[entry["offset"]:entry["offset"] + entry["count"]]
        state[entry["name"]] = chunk.reshape(entry["shape"])
    graph.load_state(state)
    return graph, doc
