"""Byte-deterministic array containers and content hashing.

Containers are zip archives of ``.npy`` members plus a ``meta.json`` member,
written with fixed timestamps and sorted member order so that identical
inputs always produce identical bytes.  ``numpy.load`` can read them too.
"""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

from .errors import InputError

_EPOCH = (1980, 1, 1, 0, 0, 0)
META_MEMBER = "meta.json"


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), default=_json_default)


def _json_default(o):
    if isinstance(o, np.generic):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, Path):
        return str(o)
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"not JSON serialisable: {type(o).__name__}")


def content_hash(*parts: Any) -> str:
    """SHA-256 over canonical JSON of ``parts`` (arrays hashed by bytes)."""
    h = hashlib.sha256()
    for p in parts:
        if isinstance(p, np.ndarray):
            a = np.ascontiguousarray(p)
            h.update(str(a.dtype).encode() + str(a.shape).encode())
            h.update(a.tobytes())
        else:
            h.update(canonical_json(p).encode())
        h.update(b"\x00")
    return h.hexdigest()


def file_hash(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def save_container(path: str | Path, arrays: Mapping[str, np.ndarray], meta: Mapping[str, Any] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.BytesIO()
    with zipfile.ZipFile(buf, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        for name in sorted(arrays):
            if name == META_MEMBER[:-5]:
                raise InputError(f"array name {name!r} is reserved")
            member = io.BytesIO()
            np.lib.format.write_array(member, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            info = zipfile.ZipInfo(f"{name}.npy", date_time=_EPOCH)
            info.compress_type = zipfile.ZIP_DEFLATED
            info.external_attr = 0o644 << 16
            zf.writestr(info, member.getvalue())
        info = zipfile.ZipInfo(META_MEMBER, date_time=_EPOCH)
        info.compress_type = zipfile.ZIP_DEFLATED
        info.external_attr = 0o644 << 16
        zf.writestr(info, json.dumps(dict(meta or {}), sort_keys=True, indent=1, default=_json_default))
    path.write_bytes(buf.getvalue())
    return path


def load_container(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    arrays: dict[str, np.ndarray] = {}
    meta: dict[str, Any] = {}
    with zipfile.ZipFile(path, "r") as zf:
        for name in zf.namelist():
            data = zf.read(name)
            if name == META_MEMBER:
                meta = json.loads(data.decode())
            elif name.endswith(".npy"):
                arrays[name[:-4]] = np.lib.format.read_array(io.BytesIO(data), allow_pickle=False)
    return arrays, meta


def read_meta(path: str | Path) -> dict[str, Any]:
    with zipfile.ZipFile(Path(path), "r") as zf:
        return json.loads(zf.read(META_MEMBER).decode())
