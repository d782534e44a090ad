"""Versioned binary container for models and training state.

Layout (all integers little-endian)::

    magic      8 bytes  b"CTKDCKPT"
    version    u32
    hdr_len    u32, then hdr_len bytes of UTF-8 JSON (spec, seed, meta)
    n_blobs    u32
    blob*      section u8 | name_len u16 | name | dtype u8 | ndim u8 | dims u32*ndim | raw bytes

Sections: 0 = parameter, 1 = running-statistic, 2 = extra array.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path

import numpy as np

from .autodiff import RunningStats, Tensor
from .errors import FormatError
from .models import Model, WrnSpec

MAGIC = b"CTKDCKPT"
VERSION = 1
PARAM, STAT, EXTRA = 0, 1, 2
_DTYPES = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8"), 4: np.dtype("<u8")}
_CODES = {v: k for k, v in _DTYPES.items()}


def _write_blob(buf, section: int, name: str, arr: np.ndarray) -> None:
    arr = np.asarray(arr)
    le = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
    code = _CODES.get(np.dtype(le.dtype))
    if code is None:
        raise FormatError(f"unsupported dtype {arr.dtype} for blob {name!r}")
    raw = name.encode()
    buf.write(struct.pack("<BH", section, len(raw)))
    buf.write(raw)
    buf.write(struct.pack("<BB", code, arr.ndim))
    buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    buf.write(np.ascontiguousarray(le).tobytes())


def _read(buf, n: int) -> bytes:
    chunk = buf.read(n)
    if len(chunk) != n:
        raise FormatError("checkpoint truncated")
    return chunk


def dumps(
    model: Model | None = None,
    meta: dict | None = None,
    extras: dict[str, np.ndarray] | None = None,
) -> bytes:
    header = {"meta": meta or {}}
    blobs = []
    if model is not None:
        header["spec"] = [model.spec.depth, model.spec.widen, model.spec.num_classes]
        header["seed"] = model.seed
        blobs += [(PARAM, k, t.data) for k, t in model.params.items()]
        for k, s in model.stats.items():
            if s.initialized:
                blobs += [(STAT, f"{k}.mean", s.mean), (STAT, f"{k}.var", s.var)]
    blobs += [(EXTRA, k, v) for k, v in (extras or {}).items()]

    buf = io.BytesIO()
    buf.write(MAGIC)
    hdr = json.dumps(header, sort_keys=True).encode()
    buf.write(struct.pack("<II", VERSION, len(hdr)))
    buf.write(hdr)
    buf.write(struct.pack("<I", len(blobs)))
    for section, name, arr in blobs:
        _write_blob(buf, section, name, arr)
    return buf.getvalue()


def loads(data: bytes) -> tuple[Model | None, dict, dict[str, np.ndarray]]:
    buf = io.BytesIO(data)
    if _read(buf, 8) != MAGIC:
        raise FormatError("not a checkpoint file (bad magic)")
    version, hlen = struct.unpack("<II", _read(buf, 8))
    if version != VERSION:
        raise FormatError(f"unsupported checkpoint version {version}")
    header = json.loads(_read(buf, hlen).decode())
    (count,) = struct.unpack("<I", _read(buf, 4))
    params: dict[str, Tensor] = {}
    stat_arrays: dict[str, np.ndarray] = {}
    extras: dict[str, np.ndarray] = {}
    for _ in range(count):
        section, nlen = struct.unpack("<BH", _read(buf, 3))
        name = _read(buf, nlen).decode()
        code, ndim = struct.unpack("<BB", _read(buf, 2))
        if code not in _DTYPES:
            raise FormatError(f"unknown dtype code {code} in blob {name!r}")
        shape = struct.unpack(f"<{ndim}I", _read(buf, 4 * ndim))
        dt = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dt.itemsize
        arr = np.frombuffer(_read(buf, nbytes), dtype=dt).reshape(shape).astype(dt.newbyteorder("="))
        if section == PARAM:
            params[name] = Tensor(arr, requires_grad=True)
        elif section == STAT:
            stat_arrays[name] = arr
        elif section == EXTRA:
            extras[name] = arr
        else:
            raise FormatError(f"unknown section {section} in blob {name!r}")
    if buf.read(1):
        raise FormatError("trailing bytes after last blob")

    model = None
    if "spec" in header:
        stats = {}
        for key in stat_arrays:
            if key.endswith(".mean"):
                base = key[: -len(".mean")]
                stats[base] = RunningStats(stat_arrays[key], stat_arrays[f"{base}.var"])
        model = Model(WrnSpec(*header["spec"]), params, stats, header.get("seed"))
    return model, header["meta"], extras


def save(path, model: Model | None = None, meta: dict | None = None, extras=None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(dumps(model, meta, extras))
    tmp.replace(path)


def load(path) -> tuple[Model | None, dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())


def load_model(path) -> Model:
    model, _, _ = load(path)
    if model is None:
        raise FormatError(f"{path} holds no model")
    return model
