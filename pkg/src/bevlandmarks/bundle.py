"""Binary bundle: model config, landmark table and named float32 tensors.

Layout (all little-endian)::

    b"BSLD" | u32 version | u32 len + JSON config | u32 L | L*2 f32 landmarks
    | u32 n_tensors | n * (u16 name_len, name, u8 rank, u32 dims[rank], f32 data)
    [ | b"OPTS" | u32 len + JSON state | u32 n_tensors | tensors ... ]

The optional OPTS section carries optimizer state for training checkpoints.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .bev import BevConfig
from .model import LandmarkNet, ModelConfig

MAGIC = b"BSLD"
OPT_MAGIC = b"OPTS"
VERSION = 1


class BundleError(ValueError):
    pass


@dataclass
class Bundle:
    model: LandmarkNet
    bev: BevConfig
    meta: dict = field(default_factory=dict)
    optimizer: dict | None = None  # {"state": json-able dict, "tensors": {name: ndarray}}

    @property
    def landmarks(self) -> np.ndarray:
        return self.model.landmarks.detach().cpu().numpy().astype(float)


def _write_tensor(buf, name: str, arr: np.ndarray) -> None:
    nb = name.encode()
    arr = np.ascontiguousarray(arr, dtype="<f4")
    buf.write(struct.pack("<H", len(nb)))
    buf.write(nb)
    buf.write(struct.pack("<B", arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(arr.tobytes())


def _read_exact(buf, n: int) -> bytes:
    b = buf.read(n)
    if len(b) != n:
        raise BundleError(f"truncated bundle at byte {buf.tell()}")
    return b


def _read_tensor(buf) -> tuple[str, np.ndarray]:
    (nlen,) = struct.unpack("<H", _read_exact(buf, 2))
    name = _read_exact(buf, nlen).decode()
    (rank,) = struct.unpack("<B", _read_exact(buf, 1))
    dims = struct.unpack(f"<{rank}I", _read_exact(buf, 4 * rank))
    count = int(np.prod(dims)) if rank else 1
    data = np.frombuffer(_read_exact(buf, 4 * count), dtype="<f4").reshape(dims)
    return name, data.copy()


def _write_json(buf, obj) -> None:
    raw = json.dumps(obj, sort_keys=True).encode()
    buf.write(struct.pack("<I", len(raw)))
    buf.write(raw)


def _read_json(buf):
    (n,) = struct.unpack("<I", _read_exact(buf, 4))
    return json.loads(_read_exact(buf, n).decode())


def to_bytes(bundle: Bundle) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    _write_json(buf, {"model": bundle.model.config.to_dict(), "bev": bundle.bev.__dict__, "meta": bundle.meta})
    lm = bundle.model.landmarks.detach().cpu().numpy()
    buf.write(struct.pack("<I", len(lm)))
    buf.write(np.ascontiguousarray(lm, dtype="<f4").tobytes())
    params = bundle.model.network_parameters()
    buf.write(struct.pack("<I", len(params)))
    for name, p in params:
        _write_tensor(buf, name, p.detach().cpu().numpy())
    if bundle.optimizer is not None:
        buf.write(OPT_MAGIC)
        _write_json(buf, bundle.optimizer.get("state", {}))
        tensors = bundle.optimizer.get("tensors", {})
        buf.write(struct.pack("<I", len(tensors)))
        for name in sorted(tensors):
            _write_tensor(buf, name, tensors[name])
    return buf.getvalue()


def from_bytes(raw: bytes) -> Bundle:
    buf = io.BytesIO(raw)
    if _read_exact(buf, 4) != MAGIC:
        raise BundleError("not a bundle (bad magic)")
    (version,) = struct.unpack("<I", _read_exact(buf, 4))
    if version != VERSION:
        raise BundleError(f"unsupported bundle version {version}")
    header = _read_json(buf)
    cfg = ModelConfig(**header["model"])
    bev = BevConfig(**header["bev"])
    (L,) = struct.unpack("<I", _read_exact(buf, 4))
    if L != cfg.num_landmarks:
        raise BundleError(f"landmark count {L} != config {cfg.num_landmarks}")
    lm = np.frombuffer(_read_exact(buf, 8 * L), dtype="<f4").reshape(L, 2)
    model = LandmarkNet(cfg, lm.copy())
    (count,) = struct.unpack("<I", _read_exact(buf, 4))
    expected = dict(model.network_parameters())
    seen = set()
    with torch.no_grad():
        for _ in range(count):
            name, arr = _read_tensor(buf)
            if name not in expected:
                raise BundleError(f"unexpected tensor {name!r}")
            if tuple(arr.shape) != tuple(expected[name].shape):
                raise BundleError(f"tensor {name!r} has shape {arr.shape}, expected {tuple(expected[name].shape)}")
            expected[name].copy_(torch.from_numpy(arr))
            seen.add(name)
    missing = set(expected) - seen
    if missing:
        raise BundleError(f"missing tensors: {sorted(missing)}")
    optimizer = None
    tag = buf.read(4)
    if tag == OPT_MAGIC:
        state = _read_json(buf)
        (n,) = struct.unpack("<I", _read_exact(buf, 4))
        tensors = dict(_read_tensor(buf) for _ in range(n))
        optimizer = {"state": state, "tensors": tensors}
    elif tag:
        raise BundleError("trailing bytes after tensor table")
    return Bundle(model, bev, header.get("meta", {}), optimizer)


def save_bundle(path, bundle: Bundle) -> int:
    raw = to_bytes(bundle)
    Path(path).write_bytes(raw)
    return len(raw)


def load_bundle(path) -> Bundle:
    return from_bytes(Path(path).read_bytes())
