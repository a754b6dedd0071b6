"""Binary checkpoint container.

Layout of a ``.ckpt`` file::

    b"BIGL-CKPT-1\\n"
    uint64 little-endian header length
    UTF-8 JSON header {"kind", "tag", "iteration", "config_hash", "meta", "tensors": [...]}
    raw tensor bytes, concatenated in header order (C order, little endian)

Each tensor entry records ``name``, ``dtype``, ``shape``, ``offset`` and ``nbytes``
relative to the start of the payload.
"""

from __future__ import annotations

import hashlib
import json
import os
import struct
import tempfile
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, CheckpointWriteError

MAGIC = b"BIGL-CKPT-1\n"

_DTYPES = {
    torch.float32: "<f4",
    torch.float64: "<f8",
    torch.int64: "<i8",
    torch.int32: "<i4",
    torch.bool: "|b1",
}


def config_hash(cfg) -> str:
    d = cfg.to_dict() if hasattr(cfg, "to_dict") else dict(cfg)
    blob = json.dumps(d, sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path, tensors, *, kind, tag="", iteration=0, config_hash="", meta=None):
    """Atomically write ``tensors`` (name -> tensor) to ``path``."""
    path = Path(path)
    entries = []
    blobs = []
    offset = 0
    for name, t in tensors.items():
        t = torch.as_tensor(t).detach().cpu().contiguous()
        if t.dtype not in _DTYPES:
            raise CheckpointError(f"unsupported dtype {t.dtype} for {name}")
        arr = t.numpy().astype(_DTYPES[t.dtype], copy=False)
        raw = arr.tobytes(order="C")
        entries.append({"name": name, "dtype": _DTYPES[t.dtype], "shape": list(arr.shape),
                        "offset": offset, "nbytes": len(raw)})
        blobs.append(raw)
        offset += len(raw)
    header = json.dumps({
        "kind": kind, "tag": tag, "iteration": int(iteration),
        "config_hash": config_hash, "meta": meta or {}, "tensors": entries,
    }).encode()
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=".tmp-", suffix=".ckpt")
        with os.fdopen(fd, "wb") as fh:
            fh.write(MAGIC)
            fh.write(struct.pack("<Q", len(header)))
            fh.write(header)
            for raw in blobs:
                fh.write(raw)
        os.replace(tmp, path)
    except OSError as exc:
        raise CheckpointWriteError(f"cannot write checkpoint {path}: {exc}") from exc
    return path


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        return _read_header(fh, path)


def _read_header(fh, path):
    magic = fh.read(len(MAGIC))
    if magic != MAGIC:
        raise CheckpointError(f"{path}: not a BIGL-CKPT-1 file")
    (n,) = struct.unpack("<Q", fh.read(8))
    return json.loads(fh.read(n).decode())


def load_checkpoint(path):
    """Return ``(header, tensors)`` with tensors as a name -> torch.Tensor dict."""
    try:
        with open(path, "rb") as fh:
            header = _read_header(fh, path)
            payload = fh.read()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    tensors = {}
    for e in header["tensors"]:
        chunk = payload[e["offset"]:e["offset"] + e["nbytes"]]
        if len(chunk) != e["nbytes"]:
            raise CheckpointError(f"{path}: truncated tensor {e['name']}")
        arr = np.frombuffer(chunk, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
        tensors[e["name"]] = torch.from_numpy(arr)
    return header, tensors


def save_module(path, module, *, kind, tag="", iteration=0, cfg=None, meta=None):
    return save_checkpoint(path, module.state_dict(), kind=kind, tag=tag, iteration=iteration,
                           config_hash=config_hash(cfg) if cfg is not None else "", meta=meta)


def load_module(path, module, *, kind=None, tag=None):
    header, tensors = load_checkpoint(path)
    if kind is not None and header["kind"] != kind:
        raise CheckpointError(f"{path}: expected kind {kind!r}, found {header['kind']!r}")
    if tag is not None and header["tag"] != tag:
        raise CheckpointError(f"{path}: expected tag {tag!r}, found {header['tag']!r}")
    module.load_state_dict(tensors)
    return header


def optimizer_tensors(opt) -> dict:
    """Flatten an optimizer's per-parameter state into checkpointable tensors."""
    out = {}
    for idx, st in opt.state_dict()["state"].items():
        for key, val in st.items():
            out[f"{idx}/{key}"] = torch.as_tensor(val)
    return out


def restore_optimizer(opt, tensors):
    sd = opt.state_dict()
    state = {}
    for name, t in tensors.items():
        idx, key = name.split("/", 1)
        state.setdefault(int(idx), {})[key] = t
    sd["state"] = state
    opt.load_state_dict(sd)
