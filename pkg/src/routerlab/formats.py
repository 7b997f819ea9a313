"""On-disk formats: embedding files, tensor containers and key=value configs.

Embedding file layout (all integers little-endian u32)::

    offset 0   magic  b"MOEB"
    offset 4   version (= 1)
    offset 8   B
    offset 12  S
    offset 16  H
    offset 20  B*S*H float32 little-endian, row-major

Tensor containers are numpy ``.npz`` archives of named float64 arrays.
"""

from __future__ import annotations

import dataclasses
import struct
import types
import typing
from pathlib import Path

import numpy as np

from .errors import FormatError, ShapeError

EMBEDDING_MAGIC = b"MOEB"
EMBEDDING_VERSION = 1
_HEADER = struct.Struct("<4sIIII")


def save_embeddings(path, states) -> None:
    arr = np.asarray(states)
    if arr.ndim != 3:
        raise ShapeError(f"embedding tensor must be (B, S, H), got {arr.shape}")
    B, S, H = arr.shape
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(EMBEDDING_MAGIC, EMBEDDING_VERSION, B, S, H))
        fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def load_embeddings(path) -> np.ndarray:
    """Read an embedding file into a float64 ``(B, S, H)`` array."""
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise FormatError(f"{path}: header truncated at byte {len(data)}, need {_HEADER.size} bytes")
    magic, version, B, S, H = _HEADER.unpack_from(data, 0)
    if magic != EMBEDDING_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r} at byte 0, expected {EMBEDDING_MAGIC!r}")
    if version != EMBEDDING_VERSION:
        raise FormatError(f"{path}: unsupported version {version} at byte 4, expected {EMBEDDING_VERSION}")
    expected = B * S * H * 4
    actual = len(data) - _HEADER.size
    if actual != expected:
        raise FormatError(
            f"{path}: payload at byte {_HEADER.size} has {actual} bytes, expected {expected} for B={B} S={S} H={H}"
        )
    payload = np.frombuffer(data, dtype="<f4", offset=_HEADER.size)
    return payload.astype(np.float64).reshape(B, S, H)


def save_tensors(path, tensors: dict[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        np.savez(fh, **{k: np.asarray(v, dtype=np.float64) for k, v in tensors.items()})


def load_tensors(path) -> dict[str, np.ndarray]:
    try:
        with np.load(path, allow_pickle=False) as z:
            return {k: z[k].astype(np.float64) for k in z.files}
    except (ValueError, OSError) as exc:
        if isinstance(exc, FileNotFoundError):
            raise
        raise FormatError(f"{path}: not a tensor container ({exc})") from exc


# -- key=value config ------------------------------------------------------

def _coerce(raw: str, tp, key: str):
    origin = typing.get_origin(tp)
    if origin in (typing.Union, types.UnionType):
        args = [a for a in typing.get_args(tp) if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        return _coerce(raw, args[0], key)
    try:
        if tp is bool:
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if tp is int:
            return int(raw)
        if tp is float:
            return float(raw)
        return raw
    except ValueError:
        raise FormatError(f"config key {key!r}: cannot parse {raw!r} as {getattr(tp, '__name__', tp)}") from None


def parse_config(text: str, cls):
    """Parse ``key = value`` lines into dataclass ``cls``.

    ``#`` starts a comment. Unknown or repeated keys are rejected.
    """
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    values = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise FormatError(f"line {lineno}: expected key=value, got {line!r}")
        key, raw = (part.strip() for part in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in names:
            raise FormatError(f"line {lineno}: unknown config key {key!r}")
        if key in values:
            raise FormatError(f"line {lineno}: duplicate config key {key!r}")
        values[key] = _coerce(raw, hints[key], key)
    return cls(**values)


def format_config(obj) -> str:
    lines = []
    for f in dataclasses.fields(obj):
        v = getattr(obj, f.name)
        lines.append(f"{f.name} = {'none' if v is None else v}")
    return "\n".join(lines) + "\n"


def load_config(path, cls):
    return parse_config(Path(path).read_text(), cls)
