"""Byte-reproducible array archives and file digests."""

from __future__ import annotations

import hashlib
import io
import json
import zipfile
from pathlib import Path

import numpy as np

ZIP_DATE = (1980, 1, 1, 0, 0, 0)


def write_archive(path, header: dict, arrays: dict) -> None:
    """Zip of ``header.json`` plus one ``.npy`` per array, with fixed timestamps.

    Identical inputs give identical bytes. Written atomically via a temp file.
    """
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with zipfile.ZipFile(tmp, "w", compression=zipfile.ZIP_DEFLATED) as zf:
        zf.writestr(zipfile.ZipInfo("header.json", ZIP_DATE), json.dumps(header, sort_keys=True, indent=1))
        for name in sorted(arrays):
            buf = io.BytesIO()
            np.save(buf, np.ascontiguousarray(arrays[name]), allow_pickle=False)
            zf.writestr(zipfile.ZipInfo(f"arrays/{name}.npy", ZIP_DATE), buf.getvalue())
    tmp.replace(path)


def read_header(path) -> dict:
    with zipfile.ZipFile(path) as zf:
        return json.loads(zf.read("header.json"))


def read_archive(path, names=None):
    with zipfile.ZipFile(path) as zf:
        header = json.loads(zf.read("header.json"))
        if names is None:
            names = [n[len("arrays/") : -len(".npy")] for n in zf.namelist() if n.startswith("arrays/")]
        arrays = {n: np.load(io.BytesIO(zf.read(f"arrays/{n}.npy")), allow_pickle=False) for n in names}
    return header, arrays


def file_digest(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def array_digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        a = np.ascontiguousarray(a)
        h.update(str(a.dtype).encode() + str(a.shape).encode())
        h.update(a.tobytes())
    return h.hexdigest()
