"""Deterministic ``.npz`` archives with a JSON metadata header.

The layout is plain numpy ``.npz`` (readable with ``np.load``) with one
extra ``__meta__`` member holding UTF-8 JSON. Zip entries carry a fixed
timestamp so identical content produces identical bytes.
"""

from __future__ import annotations

import io
import json
import os
import zipfile

import numpy as np

META_KEY = "__meta__"
FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def save_archive(path, arrays, meta):
    """Write ``arrays`` (name -> ndarray) and ``meta`` (JSON-able dict)."""
    if META_KEY in arrays:
        raise ValueError(f"array name {META_KEY!r} is reserved")
    path = os.fspath(path)
    parent = os.path.dirname(path)
    if parent:
        os.makedirs(parent, exist_ok=True)
    meta = dict(meta)
    meta.setdefault("format_version", FORMAT_VERSION)
    payload = np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name in sorted(arrays):
            _write_member(zf, name, np.asarray(arrays[name]))
        _write_member(zf, META_KEY, payload)


def _write_member(zf, name, array):
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.ascontiguousarray(array), allow_pickle=False)
    info = zipfile.ZipInfo(name + ".npy", date_time=_EPOCH)
    info.external_attr = 0o644 << 16
    zf.writestr(info, buf.getvalue())


def load_archive(path):
    """Return ``(arrays, meta)`` from an archive written by :func:`save_archive`."""
    with np.load(os.fspath(path), allow_pickle=False) as data:
        if META_KEY not in data.files:
            raise ValueError(f"{path}: missing {META_KEY} header")
        meta = json.loads(data[META_KEY].tobytes().decode())
        arrays = {k: data[k] for k in data.files if k != META_KEY}
    return arrays, meta
