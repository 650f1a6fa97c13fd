"""Tensor-manifest checkpoints: manifest.json plus a contiguous float32 blob.

The manifest lists every tensor (name, shape, byte offset) in blob order and
carries a metadata dict (config snapshot, schedule, encoder fingerprint).
Round trips are bit-exact; loads validate blob length and shapes and refuse
a fingerprint mismatch.
"""

from __future__ import annotations

import json
import os

import numpy as np

CKPT_FORMAT = "conrft-ckpt"
CKPT_VERSION = 1
MANIFEST_NAME = "manifest.json"
BLOB_NAME = "params.bin"


class CheckpointError(ValueError):
    pass


def save_checkpoint(dirpath, named_params, meta: dict):
    os.makedirs(dirpath, exist_ok=True)
    tensors = []
    chunks = []
    offset = 0
    for name, arr in named_params:
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        tensors.append({"name": name, "shape": list(arr.shape),
                        "dtype": "float32", "offset": offset,
                        "nbytes": len(data)})
        chunks.append(data)
        offset += len(data)
    manifest = {"format": CKPT_FORMAT, "version": CKPT_VERSION,
                "tensors": tensors, "meta": meta}
    with open(os.path.join(dirpath, MANIFEST_NAME), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    with open(os.path.join(dirpath, BLOB_NAME), "wb") as fh:
        fh.write(b"".join(chunks))


def load_checkpoint(dirpath, expect_fingerprint: str | None = None):
    """Returns (name -> float32 array, meta). Validates sizes and shapes."""
    manifest_path = os.path.join(dirpath, MANIFEST_NAME)
    if not os.path.exists(manifest_path):
        raise CheckpointError(f"no {MANIFEST_NAME} under {dirpath}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    if manifest.get("format") != CKPT_FORMAT:
        raise CheckpointError(f"not a checkpoint manifest: {manifest_path}")
    meta = manifest.get("meta", {})
    if expect_fingerprint is not None:
        found = meta.get("encoder_fingerprint")
        if found != expect_fingerprint:
            raise CheckpointError(
                "encoder fingerprint mismatch: checkpoint was written for "
                f"{found}, loaded backbone is {expect_fingerprint}")
    with open(os.path.join(dirpath, BLOB_NAME), "rb") as fh:
        blob = fh.read()
    tensors = manifest["tensors"]
    expected_len = (tensors[-1]["offset"] + tensors[-1]["nbytes"]) \
        if tensors else 0
    if len(blob) != expected_len:
        raise CheckpointError(
            f"blob length {len(blob)} does not match manifest end offset "
            f"{expected_len}")
    out = {}
    for spec in tensors:
        raw = blob[spec["offset"]:spec["offset"] + spec["nbytes"]]
        arr = np.frombuffer(raw, dtype="<f4")
        n_expected = int(np.prod(spec["shape"])) if spec["shape"] else 1
        if arr.size != n_expected:
            raise CheckpointError(
                f"tensor {spec['name']!r}: blob slice holds {arr.size} "
                f"values but shape {spec['shape']} needs {n_expected}")
        out[spec["name"]] = arr.reshape(spec["shape"]).copy()
    return out, meta


def assign_named(named_params, loaded: dict):
    """Copies loaded tensors into live parameter arrays by name."""
    for name, arr in named_params:
        if name not in loaded:
            raise CheckpointError(f"checkpoint is missing tensor {name!r}")
        src = loaded[name]
        if tuple(src.shape) != tuple(arr.shape):
            raise CheckpointError(
                f"tensor {name!r}: checkpoint shape {tuple(src.shape)} does "
                f"not match model shape {tuple(arr.shape)}")
        arr[:] = src.astype(arr.dtype)
