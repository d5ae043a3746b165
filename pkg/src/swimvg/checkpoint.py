"""Single-file binary checkpoint container.

Layout (all integers little-endian)::

    magic      8 bytes  b"SWVGCKPT"
    version    uint32
    config     uint32 length + UTF-8 JSON (the full ModelConfig)
    meta       uint32 length + UTF-8 JSON (step, best_eval)
    arrays     uint32 count, then per array:
                 uint16 name length + UTF-8 name
                 uint8 dtype code, uint8 ndim, ndim x uint64 dims
                 raw little-endian element bytes
    checksum   32 bytes SHA-256 over everything above

Arrays are named ``param/<name>``, ``optim/<name>/<slot>`` and ``rng/torch``.
Writes go to a temporary file in the target directory and are renamed into
place, so a reader never observes a half-written checkpoint.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import struct
import tempfile
from typing import Optional

import numpy as np
import torch

from .config import ConfigError, ModelConfig, validate_config
from .model import SwimVG
from .trainer import TrainState, init_state, tunable_named_parameters

MAGIC = b"SWVGCKPT"
FORMAT_VERSION = 1

_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8"), 2: np.dtype("<i8"), 3: np.dtype("u1")}
_CODES = {v: k for k, v in _DTYPES.items()}
_U16, _U32, _U64, _U8 = struct.Struct("<H"), struct.Struct("<I"), struct.Struct("<Q"), struct.Struct("<B")


class CheckpointError(Exception):
    pass


class VersionMismatch(CheckpointError):
    pass


class ConfigMismatch(VersionMismatch):
    """The embedded config differs from the one the caller expects."""

    def __init__(self, keys: list[str]):
        super().__init__(f"checkpoint config differs on: {', '.join(keys)}")
        self.keys = keys


class CorruptFile(CheckpointError):
    pass


def _np(t: torch.Tensor) -> np.ndarray:
    a = t.detach().cpu().numpy()
    if a.dtype == np.float32:
        return a.astype("<f4", copy=False)
    if a.dtype == np.float64:
        return a.astype("<f8", copy=False)
    if a.dtype == np.uint8:
        return a
    return a.astype("<i8")


def _collect(model: SwimVG, state: Optional[TrainState]) -> dict[str, np.ndarray]:
    arrays = {f"param/{n}": _np(p) for n, p in model.named_parameters()}
    if state is None:
        return arrays
    for name, p in tunable_named_parameters(model):
        for slot, value in state.optimizer.state.get(p, {}).items():
            arrays[f"optim/{name}/{slot}"] = _np(torch.as_tensor(value))
    arrays["rng/torch"] = state.generator.get_state().numpy()
    return arrays


def encode_checkpoint(model: SwimVG, state: Optional[TrainState] = None) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(_U32.pack(FORMAT_VERSION))
    for blob in (
        model.cfg.to_json(),
        json.dumps({
            "step": state.step if state else 0,
            "best_eval": state.best_eval if state else -1.0,
            "has_state": state is not None,
        }, sort_keys=True),
    ):
        raw = blob.encode("utf-8")
        buf.write(_U32.pack(len(raw)))
        buf.write(raw)
    arrays = _collect(model, state)
    buf.write(_U32.pack(len(arrays)))
    for name, a in arrays.items():
        key = name.encode("utf-8")
        buf.write(_U16.pack(len(key)))
        buf.write(key)
        buf.write(_U8.pack(_CODES[a.dtype]))
        buf.write(_U8.pack(a.ndim))
        for d in a.shape:
            buf.write(_U64.pack(d))
        buf.write(np.ascontiguousarray(a).tobytes())
    body = buf.getvalue()
    return body + hashlib.sha256(body).digest()


def save_checkpoint(model: SwimVG, state: Optional[TrainState], path: str) -> None:
    """Atomically write ``model`` (and optional training state) to ``path``."""
    data = encode_checkpoint(model, state)
    directory = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(prefix=".ckpt-", dir=directory)
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
            fh.flush()
            os.fsync(fh.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class _Reader:
    def __init__(self, data: bytes):
        self.data, self.pos = data, 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CorruptFile("unexpected end of checkpoint data")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, s: struct.Struct) -> int:
        return s.unpack(self.take(s.size))[0]


def decode_checkpoint(data: bytes) -> tuple[dict, dict, dict[str, np.ndarray]]:
    """Return (raw config, meta, arrays); validates magic, version and checksum."""
    if len(data) < len(MAGIC) + 4 + 32 or data[:len(MAGIC)] != MAGIC:
        raise CorruptFile("not a checkpoint file (bad magic or truncated)")
    body, digest = data[:-32], data[-32:]
    version = _U32.unpack_from(data, len(MAGIC))[0]
    if hashlib.sha256(body).digest() != digest:
        raise CorruptFile("checksum mismatch")
    if version != FORMAT_VERSION:
        raise VersionMismatch(f"format version {version}, expected {FORMAT_VERSION}")
    r = _Reader(body)
    r.take(len(MAGIC) + 4)
    try:
        raw_cfg = json.loads(r.take(r.unpack(_U32)).decode("utf-8"))
        meta = json.loads(r.take(r.unpack(_U32)).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptFile(f"bad header: {exc}") from None
    arrays = {}
    for _ in range(r.unpack(_U32)):
        name = r.take(r.unpack(_U16)).decode("utf-8")
        code = r.unpack(_U8)
        if code not in _DTYPES:
            raise CorruptFile(f"unknown dtype code {code} for {name}")
        dtype = _DTYPES[code]
        shape = tuple(r.unpack(_U64) for _ in range(r.unpack(_U8)))
        count = int(np.prod(shape, dtype=np.int64))
        arrays[name] = np.frombuffer(r.take(count * dtype.itemsize), dtype=dtype).reshape(shape).copy()
    if r.pos != len(body):
        raise CorruptFile("trailing bytes after array section")
    return raw_cfg, meta, arrays


def config_diff(a: ModelConfig, b: ModelConfig) -> list[str]:
    da, db = a.to_dict(), b.to_dict()
    return sorted(k for k in da if da[k] != db[k])


def load_checkpoint(
    path: str, expected: Optional[ModelConfig] = None
) -> tuple[SwimVG, Optional[TrainState]]:
    """Rebuild the model and, when present, the optimizer/rng state bit-exactly."""
    try:
        with open(path, "rb") as fh:
            data = fh.read()
    except OSError as exc:
        raise CorruptFile(f"cannot read {path}: {exc.strerror}") from None
    raw_cfg, meta, arrays = decode_checkpoint(data)
    try:
        cfg = validate_config(raw_cfg)
    except ConfigError as exc:
        raise CorruptFile(f"embedded config invalid: {exc}") from None
    if expected is not None:
        diff = config_diff(cfg, expected)
        if diff:
            raise ConfigMismatch(diff)

    model = SwimVG(cfg)
    with torch.no_grad():
        for name, p in model.named_parameters():
            key = f"param/{name}"
            if key not in arrays or arrays[key].shape != tuple(p.shape):
                raise CorruptFile(f"missing or misshapen parameter {name}")
            p.copy_(torch.from_numpy(arrays[key]))
    if not meta.get("has_state"):
        return model, None

    state = init_state(model, cfg)
    state.step = int(meta["step"])
    state.best_eval = float(meta["best_eval"])
    state.generator.set_state(torch.from_numpy(arrays["rng/torch"]))
    for name, p in tunable_named_parameters(model):
        prefix = f"optim/{name}/"
        slots = {k[len(prefix):]: v for k, v in arrays.items() if k.startswith(prefix)}
        if slots:
            state.optimizer.state[p] = {k: torch.from_numpy(v) for k, v in slots.items()}
    return model, state
