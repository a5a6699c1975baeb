"""
Reader and writer for the PDM model format.

Layout::

    b"PDM1"                      4 bytes  magic
    manifest length              u32, little-endian
    manifest                     UTF-8 JSON
    blob                         float32 little-endian tensors, row-major

The manifest lists the input shape, the blob length and, per layer, its
kind, activation, layer options and a ``{offset, shape}`` entry for each
tensor.  Offsets are relative to the start of the blob.
"""

import json
import logging
import struct

import numpy as np

from nn_debloat.model import LAYER_TYPES, Model, ModelError
from nn_debloat.util import atomic_write

MAGIC = b"PDM1"
HEADER_SIZE = len(MAGIC) + 4
FLOAT_SIZE = 4

LOGGER = logging.getLogger(__name__)


class ModelFormatError(Exception):
    """
    A PDM file could not be parsed.
    """

    def __init__(self, message, offset):
        super().__init__(f"{message} (at byte {offset})")
        self.offset = offset


def manifest_bytes(model):
    """Return (manifest JSON bytes, list of tensors in blob order)."""
    offset = 0
    tensors = []
    layers = []
    for layer in model.layers:
        entry = {"kind": layer.kind, "activation": layer.activation.value}
        entry.update(layer.config())
        entry["tensors"] = {}
        for name, tensor in layer.tensors().items():
            entry["tensors"][name] = {"offset": offset, "shape": list(tensor.shape)}
            offset += tensor.size * FLOAT_SIZE
            tensors.append(tensor)
        layers.append(entry)
    manifest = {
        "input_shape": list(model.input_shape),
        "blob_length": offset,
        "layers": layers,
    }
    encoded = json.dumps(manifest, sort_keys=True, separators=(",", ":"))
    return encoded.encode("utf-8"), tensors


def serialize_model(model):
    manifest, tensors = manifest_bytes(model)
    chunks = [MAGIC, struct.pack("<I", len(manifest)), manifest]
    chunks.extend(
        np.ascontiguousarray(tensor, dtype="<f4").tobytes() for tensor in tensors
    )
    return b"".join(chunks)


def serialized_size(model):
    """Size in bytes `save_model` would write for `model`."""
    manifest, _ = manifest_bytes(model)
    return HEADER_SIZE + len(manifest) + FLOAT_SIZE * model.param_count()


def save_model(model, path):
    """
    Write `model` to `path` atomically and return the file size in bytes.
    """
    size = atomic_write(path, serialize_model(model))
    LOGGER.debug("wrote %s (%d bytes, %d params)", path, size, model.param_count())
    return size


def _read_tensor(blob, blob_start, spec, label):
    try:
        offset = int(spec["offset"])
        shape = tuple(int(dim) for dim in spec["shape"])
    except (KeyError, TypeError, ValueError, OverflowError):
        raise ModelFormatError(f"malformed tensor entry for {label}", HEADER_SIZE)
    if offset < 0 or any(dim < 1 for dim in shape):
        raise ModelFormatError(f"invalid offset or shape for {label}", HEADER_SIZE)
    length = int(np.prod(shape)) * FLOAT_SIZE
    if offset + length > len(blob):
        raise ModelFormatError(
            f"tensor {label} needs bytes {offset}..{offset + length} "
            f"but the blob holds {len(blob)}",
            blob_start + offset,
        )
    values = np.frombuffer(blob, dtype="<f4", count=length // FLOAT_SIZE, offset=offset)
    if not np.isfinite(values).all():
        raise ModelFormatError(f"non-finite value in {label}", blob_start + offset)
    return values.astype(np.float32).reshape(shape)


def _build_layer(entry, index, blob, blob_start):
    if not isinstance(entry, dict):
        raise ModelFormatError(f"layer {index}: entry is not an object", HEADER_SIZE)
    specs = entry.get("tensors", {})
    if not isinstance(specs, dict):
        raise ModelFormatError(
            f"layer {index}: tensors must be an object", HEADER_SIZE
        )
    try:
        layer_type = LAYER_TYPES[entry["kind"]]
        options = {
            key: value
            for key, value in entry.items()
            if key not in ("kind", "tensors")
        }
        tensors = {
            name: _read_tensor(blob, blob_start, spec, f"layer {index} {name}")
            for name, spec in specs.items()
        }
        return layer_type(**tensors, **options)
    except ModelFormatError:
        raise
    except (KeyError, TypeError, ValueError, OverflowError) as exc:
        raise ModelFormatError(f"layer {index}: invalid entry ({exc})", HEADER_SIZE)


def deserialize_model(data):
    """
    Parse PDM bytes into a `Model`.

    Raises `ModelFormatError` carrying the byte offset of the problem.
    """
    if len(data) < HEADER_SIZE:
        raise ModelFormatError(
            f"file too short for a header: {len(data)} bytes", len(data)
        )
    if data[: len(MAGIC)] != MAGIC:
        raise ModelFormatError(f"bad magic {data[:len(MAGIC)]!r}", 0)
    (manifest_length,) = struct.unpack("<I", data[len(MAGIC) : HEADER_SIZE])
    blob_start = HEADER_SIZE + manifest_length
    if blob_start > len(data):
        raise ModelFormatError(
            f"manifest length {manifest_length} exceeds the "
            f"{len(data) - HEADER_SIZE} bytes after the header",
            len(MAGIC),
        )
    try:
        manifest = json.loads(data[HEADER_SIZE:blob_start].decode("utf-8"))
    except UnicodeDecodeError as exc:
        raise ModelFormatError("manifest is not UTF-8", HEADER_SIZE + exc.start)
    except json.JSONDecodeError as exc:
        raise ModelFormatError(
            f"manifest is not JSON: {exc.msg}", HEADER_SIZE + exc.pos
        )
    if not isinstance(manifest, dict) or not isinstance(manifest.get("layers"), list):
        raise ModelFormatError("manifest lacks a layer list", HEADER_SIZE)

    blob = data[blob_start:]
    expected = manifest.get("blob_length")
    if not isinstance(expected, int) or expected != len(blob):
        raise ModelFormatError(
            f"expected {expected} blob bytes, found {len(blob)}", blob_start
        )

    layers = [
        _build_layer(entry, index, blob, blob_start)
        for index, entry in enumerate(manifest["layers"])
    ]
    try:
        return Model(manifest.get("input_shape", ()), layers)
    except (ModelError, TypeError, ValueError, OverflowError) as exc:
        raise ModelFormatError(f"invalid model structure: {exc}", HEADER_SIZE)


def load_model(path):
    with open(path, "rb") as model_file:
        data = model_file.read()
    return deserialize_model(data)
