"""Checkpoint files: a JSON manifest plus one raw little-endian payload.

``<stem>.json`` lists every array (name, shape, dtype, byte offset) together
with the network config and optimizer scalars; ``<stem>.bin`` holds the
arrays back to back. Reading returns bit-identical arrays.
"""

import json
import os
from pathlib import Path

import numpy as np

FORMAT = "spinecascade-checkpoint"
VERSION = 1
_DTYPES = {"f32": "<f4", "f64": "<f8"}
_CODES = {np.dtype(np.float32): "f32", np.dtype(np.float64): "f64"}


class CheckpointError(ValueError):
    pass


def _paths(path):
    path = Path(path)
    if path.suffix in (".json", ".bin"):
        path = path.with_suffix("")
    return path.with_suffix(".json"), path.with_suffix(".bin")


def save_checkpoint(path, arrays, config, optimizer=None):
    """Write ``arrays`` (ordered name -> ndarray) atomically."""
    manifest_path, payload_path = _paths(path)
    entries, offset, chunks = [], 0, []
    for name, arr in arrays.items():
        arr = np.asarray(arr)
        code = _CODES.get(arr.dtype)
        if code is None:
            raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "dtype": code, "offset": offset})
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format": FORMAT,
        "version": VERSION,
        "config": config,
        "optimizer": optimizer or {},
        "payload": payload_path.name,
        "arrays": entries,
    }
    manifest_path.parent.mkdir(parents=True, exist_ok=True)
    tmp_payload = payload_path.with_name(payload_path.name + ".tmp")
    tmp_manifest = manifest_path.with_name(manifest_path.name + ".tmp")
    with open(tmp_payload, "wb") as fh:
        for raw in chunks:
            fh.write(raw)
    with open(tmp_manifest, "w") as fh:
        json.dump(manifest, fh, indent=1)
    os.replace(tmp_payload, payload_path)
    os.replace(tmp_manifest, manifest_path)
    return manifest_path


def load_checkpoint(path):
    """Return ``(config, arrays, optimizer)``."""
    manifest_path, _ = _paths(path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"malformed checkpoint manifest {manifest_path}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"{manifest_path} is not a {FORMAT} manifest")
    payload = (manifest_path.parent / manifest["payload"]).read_bytes()
    arrays = {}
    for entry in manifest["arrays"]:
        dt = np.dtype(_DTYPES[entry["dtype"]])
        count = int(np.prod(entry["shape"], dtype=np.int64))
        end = entry["offset"] + count * dt.itemsize
        if end > len(payload):
            raise CheckpointError(f"payload too short for {entry['name']!r}")
        arr = np.frombuffer(payload, dtype=dt, count=count, offset=entry["offset"])
        arrays[entry["name"]] = arr.reshape(entry["shape"]).astype(dt.newbyteorder("="))
    return manifest["config"], arrays, manifest["optimizer"]
