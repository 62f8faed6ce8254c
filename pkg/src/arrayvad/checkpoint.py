"""Named-tensor checkpoint files shared by every trainable module.

Layout (little-endian, all integers uint64):

    magic, version, n_tensors
    per tensor: name_len, name bytes (utf-8), ndim, dims..., data offset
    float64 data blocks at the recorded offsets, in name order

The file carries only float64 arrays. Structured metadata (frontend and
model configs) rides along as a JSON document encoded byte-per-value in a
reserved ``meta/config_utf8`` tensor, which keeps the container format
single-typed and the metadata still human-recoverable with nothing but
numpy.

Tensors are written sorted by name, so two checkpoints holding equal
arrays are byte-identical regardless of insertion order.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from .errors import ArgumentError, FormatError
from .frontends import Frontend, make_frontend
from .seqmodel import ModelParams, TcnConfig, tcn_init

_MAGIC = 0x4156434B  # "AVCK"
_VERSION = 1
_META_NAME = "meta/config_utf8"

_U64 = struct.Struct("<Q")


def _config_to_array(config: dict) -> np.ndarray:
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    return np.frombuffer(blob, dtype=np.uint8).astype(np.float64)


def _config_from_array(arr: np.ndarray) -> dict:
    data = np.asarray(arr)
    as_bytes = data.astype(np.uint8).tobytes()
    try:
        return json.loads(as_bytes.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"embedded config is not valid JSON: {exc}") from exc


def write_checkpoint(path, tensors, config=None):
    """Write name -> array pairs (plus an optional config dict) to ``path``."""
    entries = {}
    for name, arr in tensors.items():
        if not name or not isinstance(name, str):
            raise ArgumentError("tensor names must be non-empty strings")
        if name == _META_NAME:
            raise ArgumentError(f"{_META_NAME!r} is reserved for the config")
        data = np.asarray(arr, dtype=np.float64)
        # ascontiguousarray promotes 0-d to 1-d; restore the true shape
        entries[name] = np.ascontiguousarray(data).reshape(data.shape)
    if len(entries) != len(tensors):
        raise ArgumentError("duplicate tensor names")
    if config is not None:
        entries[_META_NAME] = _config_to_array(config)

    names = sorted(entries)
    toc_size = 3 * 8
    for name in names:
        encoded = name.encode("utf-8")
        toc_size += 8 + len(encoded) + 8 + 8 * entries[name].ndim + 8

    blob = bytearray()
    blob += _U64.pack(_MAGIC) + _U64.pack(_VERSION) + _U64.pack(len(names))
    offset = toc_size
    for name in names:
        encoded = name.encode("utf-8")
        arr = entries[name]
        blob += _U64.pack(len(encoded)) + encoded
        blob += _U64.pack(arr.ndim)
        for dim in arr.shape:
            blob += _U64.pack(dim)
        blob += _U64.pack(offset)
        offset += arr.nbytes
    if len(blob) != toc_size:
        raise FormatError("table of contents size bookkeeping is wrong")
    for name in names:
        blob += entries[name].tobytes()
    with open(path, "wb") as fh:
        fh.write(bytes(blob))


def read_checkpoint(path):
    """Load a checkpoint; returns (tensors dict, config dict or None)."""
    with open(path, "rb") as fh:
        raw = fh.read()

    pos = 0

    def take_u64():
        nonlocal pos
        if pos + 8 > len(raw):
            raise FormatError("checkpoint truncated in header")
        (value,) = _U64.unpack_from(raw, pos)
        pos += 8
        return value

    if len(raw) < 24:
        raise FormatError("file too short to be a checkpoint")
    if take_u64() != _MAGIC:
        raise FormatError("bad checkpoint magic")
    version = take_u64()
    if version != _VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    count = take_u64()

    toc = []
    for _ in range(count):
        name_len = take_u64()
        if pos + name_len > len(raw):
            raise FormatError("checkpoint truncated in name table")
        name = raw[pos:pos + name_len].decode("utf-8")
        pos += name_len
        ndim = take_u64()
        shape = tuple(take_u64() for _ in range(ndim))
        offset = take_u64()
        toc.append((name, shape, offset))

    tensors = {}
    for name, shape, offset in toc:
        n_items = int(np.prod(shape)) if shape else 1
        end = offset + 8 * n_items
        if end > len(raw):
            raise FormatError(f"checkpoint truncated in data for {name!r}")
        flat = np.frombuffer(raw, dtype="<f8", count=n_items, offset=offset)
        tensors[name] = flat.reshape(shape).copy()
    if len(tensors) != count:
        raise FormatError("duplicate tensor names in checkpoint")

    config = None
    meta = tensors.pop(_META_NAME, None)
    if meta is not None:
        config = _config_from_array(meta)
    return tensors, config


# -- model + frontend bundles -------------------------------------------------


def save_model(path, frontend: Frontend, model: ModelParams, extra=None):
    """Bundle frontend weights, model weights, and both configs in one file."""
    tensors = {}
    for name, arr in frontend.state_arrays().items():
        tensors["frontend/" + name] = arr
    for name, arr in model.state_arrays().items():
        tensors["model/" + name] = arr
    config = {
        "frontend": frontend.config(),
        "model": model.config.to_dict(),
        "model_seed": model.seed,
    }
    if extra:
        config["extra"] = extra
    write_checkpoint(path, tensors, config)


def load_model(path):
    """Rebuild (frontend, model) from a ``save_model`` checkpoint."""
    tensors, config = read_checkpoint(path)
    if config is None or "frontend" not in config or "model" not in config:
        raise FormatError("checkpoint does not hold a frontend+model bundle")
    frontend = make_frontend(config["frontend"])
    frontend.load_state({name[len("frontend/"):]: arr
                         for name, arr in tensors.items()
                         if name.startswith("frontend/")})
    model = tcn_init(TcnConfig.from_dict(config["model"]),
                     seed=int(config.get("model_seed", 0)))
    saved = {name[len("model/"):]: arr for name, arr in tensors.items()
             if name.startswith("model/")}
    missing = set(model.tensors) - set(saved)
    if missing:
        raise FormatError(f"checkpoint missing model tensors: {sorted(missing)}")
    for name, tensor in model.tensors.items():
        arr = saved[name]
        if arr.shape != tensor.data.shape:
            raise FormatError(
                f"model tensor {name} has shape {arr.shape}, expected "
                f"{tensor.data.shape}")
        tensor.data[...] = arr
    return frontend, model
