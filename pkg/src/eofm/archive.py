"""Deterministic zip archives of named numpy arrays plus a JSON text member.

Members are uncompressed ``.npy`` (format 1.0) files with a fixed timestamp, so writing
the same content twice produces byte-identical files. Any zip reader plus any ``.npy``
parser can read them; ``np.load`` reads them directly as ``.npz``.
"""

from __future__ import annotations

import io
import json
import zipfile
from pathlib import Path
from typing import Any, Mapping

import numpy as np

FIXED_DATE = (1980, 1, 1, 0, 0, 0)
MANIFEST = "manifest.json"


def _info(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=FIXED_DATE)
    info.compress_type = zipfile.ZIP_STORED
    info.external_attr = 0o644 << 16
    return info


def npy_bytes(array: np.ndarray) -> bytes:
    buf = io.BytesIO()
    np.lib.format.write_array(buf, np.asarray(array, order="C"), version=(1, 0), allow_pickle=False)
    return buf.getvalue()


def write_archive(
    target: Path | str | io.BytesIO, arrays: Mapping[str, np.ndarray], manifest: Any | None = None
) -> None:
    with zipfile.ZipFile(target, "w") as zf:
        if manifest is not None:
            zf.writestr(_info(MANIFEST), json.dumps(manifest, indent=2, sort_keys=True))
        for name, array in arrays.items():
            zf.writestr(_info(f"{name}.npy"), npy_bytes(np.asarray(array)))


def read_archive(source: Path | str | io.BytesIO) -> tuple[dict[str, np.ndarray], Any | None]:
    arrays: dict[str, np.ndarray] = {}
    manifest = None
    with zipfile.ZipFile(source) as zf:
        for name in zf.namelist():
            data = zf.read(name)
            if name == MANIFEST:
                manifest = json.loads(data)
            elif name.endswith(".npy"):
                arrays[name[: -len(".npy")]] = np.lib.format.read_array(io.BytesIO(data), allow_pickle=False)
    return arrays, manifest
