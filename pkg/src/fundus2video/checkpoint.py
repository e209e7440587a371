"""Byte-reproducible checkpoint archive.

A checkpoint is an uncompressed zip with fixed timestamps holding
``header.json`` (magic string, format version, free-form header) and one
``.npy`` member per array, keyed by module path.
"""
from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np

from .errors import CheckpointError

MAGIC = "FUNDUS2VIDEO-CKPT"
FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _member(name):
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def save_checkpoint(path, header, arrays):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    full_header = {"magic": MAGIC, "format_version": FORMAT_VERSION, **header}
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w") as zf:
        zf.writestr(_member("header.json"), json.dumps(full_header, sort_keys=True, indent=1))
        for key in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[key]), allow_pickle=False)
            zf.writestr(_member(f"arrays/{key}.npy"), buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path):
    """Return ``(header, arrays)``; raises :class:`CheckpointError` on anything unexpected."""
    path = Path(path)
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            if header.get("magic") != MAGIC:
                raise CheckpointError(f"{path} is not a fundus2video checkpoint")
            if header.get("format_version") != FORMAT_VERSION:
                raise CheckpointError(f"{path}: unsupported format version {header.get('format_version')}")
            arrays = {}
            for name in zf.namelist():
                if name.startswith("arrays/") and name.endswith(".npy"):
                    arrays[name[len("arrays/"):-len(".npy")]] = np.load(io.BytesIO(zf.read(name)), allow_pickle=False)
    except (OSError, KeyError, zipfile.BadZipFile, json.JSONDecodeError, ValueError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return header, arrays


def file_sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()
