"""MLAM1 checkpoint format: JSON manifest + raw little-endian float blob.

The manifest lists every parameter name and shape in blob order plus a
SHA-256 of the blob, so a truncated or bit-flipped blob is rejected on
load, as is a manifest whose shapes disagree with the architecture.
"""

import hashlib
import json
from pathlib import Path

import numpy as np

from .. import errors
from . import network
from . import tensor as T

FORMAT = "MLAM1"


def _blob_path(manifest_path):
    p = Path(manifest_path)
    return p.with_suffix(".bin")


def save_checkpoint(weights, manifest_path, extras=None):
    """Write weights to ``manifest_path`` (.json) and a sibling .bin blob."""
    manifest_path = Path(manifest_path)
    chunks = []
    layers = []
    for name, p in weights.items():
        arr = np.ascontiguousarray(p.data, dtype="<f4")
        chunks.append(arr.tobytes())
        layers.append({"name": name, "shape": list(arr.shape)})
    blob = b"".join(chunks)
    manifest = {
        "format": FORMAT,
        "version": 1,
        "dtype": "<f4",
        "layers": layers,
        "sha256": hashlib.sha256(blob).hexdigest(),
        "extras": extras or {},
    }
    _blob_path(manifest_path).write_bytes(blob)
    manifest_path.write_text(
        json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n")
    return manifest_path


def load_checkpoint(manifest_path):
    """Read weights back; returns ``(NetworkWeights, extras)``."""
    manifest_path = Path(manifest_path)
    try:
        manifest = json.loads(manifest_path.read_text())
    except (OSError, json.JSONDecodeError) as e:
        raise errors.CorruptCheckpoint(f"unreadable manifest: {e}") from e
    if manifest.get("format") != FORMAT:
        raise errors.CorruptCheckpoint(
            f"not a {FORMAT} checkpoint: {manifest.get('format')!r}")

    expected = network.parameter_shapes()
    layers = manifest["layers"]
    names = [layer["name"] for layer in layers]
    if names != list(expected.keys()):
        raise errors.ShapeManifestMismatch("manifest layer list does not match architecture")
    for layer in layers:
        if tuple(layer["shape"]) != expected[layer["name"]]:
            raise errors.ShapeManifestMismatch(
                f"{layer['name']}: manifest shape {layer['shape']}, "
                f"architecture expects {list(expected[layer['name']])}")

    blob = _blob_path(manifest_path).read_bytes()
    n_expected = sum(int(np.prod(layer["shape"])) for layer in layers)
    if len(blob) != 4 * n_expected:
        raise errors.CorruptCheckpoint(
            f"blob holds {len(blob)} bytes, manifest implies {4 * n_expected}")
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise errors.CorruptCheckpoint("blob content hash mismatch")

    params = {}
    offset = 0
    for layer in layers:
        shape = tuple(layer["shape"])
        count = int(np.prod(shape))
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset).reshape(shape)
        params[layer["name"]] = T.Tensor(arr.copy(), requires_grad=True)
        offset += 4 * count
    return network.NetworkWeights(params), manifest.get("extras", {})
