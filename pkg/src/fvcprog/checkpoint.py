"""Model checkpoint archive: zip of raw float32 buffers plus a JSON header.

Layout: header.json carries the format version, a config hash, shape and
trainability per parameter, and free-form metadata; each parameter's data
lives at data/<name>.bin as little-endian float32. Entries use a fixed
timestamp so identical state produces identical bytes.
"""

from __future__ import annotations

import json
import zipfile
from pathlib import Path

import numpy as np

from .errors import DataError
from .optim import ParamStore

FORMAT_VERSION = 1
_EPOCH = (1980, 1, 1, 0, 0, 0)


def _entry(name: str) -> zipfile.ZipInfo:
    info = zipfile.ZipInfo(name, date_time=_EPOCH)
    info.compress_type = zipfile.ZIP_STORED
    return info


def save_checkpoint(path: str | Path, params: ParamStore, config_hash: str,
                    meta: dict | None = None) -> None:
    """Write parameters and metadata as a deterministic zip archive."""
    header = {
        "format_version": FORMAT_VERSION,
        "config_hash": config_hash,
        "meta": meta or {},
        "params": {
            name: {"shape": list(params[name].data.shape),
                   "trainable": params.is_trainable(name)}
            for name in sorted(params.names())
        },
    }
    with zipfile.ZipFile(path, "w") as zf:
        zf.writestr(_entry("header.json"), json.dumps(header, indent=2, sort_keys=True))
        for name in sorted(params.names()):
            buf = params[name].data.astype("<f4").tobytes()
            zf.writestr(_entry(f"data/{name}.bin"), buf)


def load_checkpoint(path: str | Path, dtype=np.float32) -> tuple[ParamStore, dict]:
    """Read a checkpoint archive back into a ParamStore plus its header."""
    path = Path(path)
    if not path.exists():
        raise DataError(f"checkpoint not found: {path}")
    try:
        with zipfile.ZipFile(path) as zf:
            header = json.loads(zf.read("header.json"))
            if header.get("format_version") != FORMAT_VERSION:
                raise DataError(f"unsupported checkpoint format: "
                                f"{header.get('format_version')!r}")
            params = ParamStore()
            for name, spec in header["params"].items():
                raw = zf.read(f"data/{name}.bin")
                shape = tuple(spec["shape"])
                arr = np.frombuffer(raw, dtype="<f4")
                if arr.size != int(np.prod(shape)):
                    raise DataError(f"checkpoint buffer for {name!r} has "
                                    f"{arr.size} values, expected shape {shape}")
                params.register(name, arr.reshape(shape).astype(dtype),
                                trainable=spec["trainable"])
    except (zipfile.BadZipFile, KeyError) as exc:
        raise DataError(f"corrupt checkpoint {path}: {exc}") from exc
    return params, header
