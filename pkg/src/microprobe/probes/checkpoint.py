"""Versioned binary checkpoints for probe adapters (magic "PRBE").

Layout, little-endian: magic | version u32 | config JSON (u32 length +
bytes) | parameter count u32 | per parameter: name (u32 length + UTF-8),
ndim u32, dims u32 each, dtype code u32 (0 = f32, 1 = f64), payload.
"""

from __future__ import annotations

import json
import struct

import numpy as np

from ..store import FormatError, _read_exact
from .deap import DeapProbe
from .obap import ObapProbe

PROBE_MAGIC = b"PRBE"
PROBE_VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_KINDS = {"deap": DeapProbe, "obap": ObapProbe}


def save_probe(probe, path) -> None:
    config = probe.config()
    blob = json.dumps(config, sort_keys=True).encode("utf-8")
    named = probe.named_parameters()
    with open(path, "wb") as fh:
        fh.write(PROBE_MAGIC)
        fh.write(struct.pack("<II", PROBE_VERSION, len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(named)))
        for name, param in named:
            encoded = name.encode("utf-8")
            fh.write(struct.pack("<I", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<I", param.data.ndim))
            fh.write(struct.pack(f"<{param.data.ndim}I", *param.data.shape))
            fh.write(struct.pack("<I", _CODES[param.data.dtype]))
            fh.write(param.data.astype(param.data.dtype.newbyteorder("<"),
                                       copy=False).tobytes())


def load_probe(path):
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != PROBE_MAGIC:
            raise FormatError(f"bad magic at offset 0: expected {PROBE_MAGIC!r}, got {magic!r}")
        version, config_len = struct.unpack("<II", _read_exact(fh, 8, "header"))
        if version != PROBE_VERSION:
            raise FormatError(f"unsupported version {version} at offset 4")
        config = json.loads(_read_exact(fh, config_len, "config").decode("utf-8"))
        kind = config.get("kind")
        if kind not in _KINDS:
            raise FormatError(f"unknown probe kind {kind!r}")
        probe = _KINDS[kind].from_config(config)
        (n_params,) = struct.unpack("<I", _read_exact(fh, 4, "parameter count"))
        loaded: dict[str, np.ndarray] = {}
        for _ in range(n_params):
            (name_len,) = struct.unpack("<I", _read_exact(fh, 4, "name length"))
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (ndim,) = struct.unpack("<I", _read_exact(fh, 4, "ndim"))
            dims = struct.unpack(f"<{ndim}I", _read_exact(fh, 4 * ndim, "dims"))
            (code,) = struct.unpack("<I", _read_exact(fh, 4, "dtype"))
            if code not in _DTYPES:
                raise FormatError(f"unknown dtype code {code}")
            dt = _DTYPES[code]
            count = int(np.prod(dims)) if dims else 1
            payload = _read_exact(fh, count * dt.itemsize, f"parameter {name}")
            loaded[name] = np.frombuffer(payload, dtype=dt).reshape(dims).copy()
    expected = dict(probe.named_parameters())
    if set(loaded) != set(expected):
        missing = sorted(set(expected) - set(loaded))[:5]
        extra = sorted(set(loaded) - set(expected))[:5]
        raise FormatError(f"parameter set mismatch: missing {missing}, extra {extra}")
    for name, param in expected.items():
        if loaded[name].shape != param.data.shape:
            raise FormatError(
                f"parameter {name}: shape {loaded[name].shape} != {param.data.shape}")
        param.data = loaded[name].astype(param.data.dtype)
    return probe
