"""Bit-exact binary checkpoints.

Layout: magic "STYLNET1"; version as 4-byte little-endian unsigned (=1);
4-byte config-block length plus the canonical ArchConfig text (UTF-8);
4-byte parameter count; then per parameter: 2-byte name length + UTF-8 name,
1-byte rank, rank 4-byte little-endian dims, and row-major 32-bit
little-endian float values. Save -> load -> save reproduces the file
byte for byte.
"""

import struct

import numpy as np

from .errors import (CheckpointError, CheckpointMagicError,
                     CheckpointShapeError, CheckpointTruncatedError,
                     CheckpointVersionError, ConfigError)
from .models import Model, build_model, canonical_config_text, parse_config_text

MAGIC = b"STYLNET1"
VERSION = 1


def save_checkpoint(model: Model, path) -> None:
    config_block = canonical_config_text(model.config).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", VERSION))
        fh.write(struct.pack("<I", len(config_block)))
        fh.write(config_block)
        fh.write(struct.pack("<I", len(model.params)))
        for name, p in model.params.items():
            encoded = name.encode("utf-8")
            arr = np.ascontiguousarray(p.data, dtype="<f4")
            fh.write(struct.pack("<H", len(encoded)))
            fh.write(encoded)
            fh.write(struct.pack("<B", arr.ndim))
            for dim in arr.shape:
                fh.write(struct.pack("<I", dim))
            fh.write(arr.tobytes())


def _read(fh, n: int, what: str) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise CheckpointTruncatedError(
            f"checkpoint ends while reading {what} "
            f"(wanted {n} bytes, got {len(data)})")
    return data


def load_checkpoint(path) -> Model:
    """Rebuild the model recorded in a checkpoint file.

    The magic is checked before anything is parsed or allocated; magic,
    version, truncation, and shape problems raise distinct errors.
    """
    with open(path, "rb") as fh:
        magic = fh.read(len(MAGIC))
        if magic != MAGIC:
            raise CheckpointMagicError(
                f"{path}: bad magic {magic!r} (expected {MAGIC!r})")
        (version,) = struct.unpack("<I", _read(fh, 4, "version"))
        if version != VERSION:
            raise CheckpointVersionError(
                f"{path}: unsupported checkpoint version {version}")
        (config_len,) = struct.unpack("<I", _read(fh, 4, "config length"))
        config_text = _read(fh, config_len, "config block").decode("utf-8")
        try:
            config = parse_config_text(config_text)
        except ConfigError as e:
            raise CheckpointError(f"{path}: invalid config block: {e}") from None
        model = build_model(config)
        (count,) = struct.unpack("<I", _read(fh, 4, "parameter count"))
        if count != len(model.params):
            raise CheckpointShapeError(
                f"{path}: checkpoint stores {count} parameters but the config "
                f"defines {len(model.params)}")
        seen = set()
        for _ in range(count):
            (name_len,) = struct.unpack("<H", _read(fh, 2, "name length"))
            name = _read(fh, name_len, "parameter name").decode("utf-8")
            (rank,) = struct.unpack("<B", _read(fh, 1, "rank"))
            dims = struct.unpack(f"<{rank}I", _read(fh, 4 * rank, "dims"))
            values = _read(fh, 4 * int(np.prod(dims, dtype=np.int64)),
                           f"values of {name}")
            if name not in model.params:
                raise CheckpointShapeError(f"{path}: unknown parameter {name!r}")
            expected = model.params[name].data.shape
            if tuple(dims) != expected:
                raise CheckpointShapeError(
                    f"{path}: parameter {name!r} has shape {tuple(dims)}, "
                    f"model expects {expected}")
            arr = np.frombuffer(values, dtype="<f4").reshape(dims)
            model.params[name].data = arr.astype(np.float32)
            seen.add(name)
        if seen != set(model.params):
            missing = sorted(set(model.params) - seen)
            raise CheckpointShapeError(f"{path}: parameters missing: {missing}")
    return model
