"""Model archives and run manifests.

An archive is a little-endian binary container::

    magic  b"ASPBIAS\\0"   8 bytes
    version               u16
    meta length, meta     u32 + UTF-8 JSON (ids, aspect names, model kind, levels)
    array count           u32
    per array: name length u16, name, dtype code u8 (0=f8, 1=i8), ndim u8,
               shape u64 x ndim, raw little-endian data

Hyperparameters live in a plain JSON sidecar next to the archive. Nothing
time-dependent is written, so equal fits give byte-identical files.
"""

from __future__ import annotations

import hashlib
import json
import platform
import struct
import subprocess
from pathlib import Path

import numpy as np

from .domain import Hyperparameters, RatingsDataset
from .engine import ModelKind, PosteriorSamples

MAGIC = b"ASPBIAS\0"
VERSION = 1
_DTYPES = {0: np.dtype("<f8"), 1: np.dtype("<i8")}
_ARRAYS = ("z", "m", "s", "c", "mu", "Sigma", "log_density", "sweeps", "reference_m")


class ArchiveError(ValueError):
    code = "ArchiveError"


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name + ".hyperparameters.json")


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def save_archive(path, samples: PosteriorSamples, data: RatingsDataset) -> Path:
    meta = {
        "format": "aspectbias-archive",
        "ordinal": samples.kind.ordinal,
        "bias_mode": samples.kind.bias_mode,
        "num_levels": samples.num_levels,
        "user_ids": list(data.user_ids),
        "item_ids": list(data.item_ids),
        "aspect_names": list(data.aspect_names),
    }
    meta_bytes = _canonical_json(meta).encode("utf-8")
    arrays = [(name, getattr(samples, name)) for name in _ARRAYS if getattr(samples, name) is not None]
    buf = bytearray(MAGIC)
    buf += struct.pack("<H", VERSION)
    buf += struct.pack("<I", len(meta_bytes)) + meta_bytes
    buf += struct.pack("<I", len(arrays))
    for name, arr in arrays:
        arr = np.asarray(arr)
        code = 0 if arr.dtype.kind == "f" else 1
        raw = np.ascontiguousarray(arr, dtype=_DTYPES[code])
        key = name.encode("ascii")
        buf += struct.pack("<H", len(key)) + key
        buf += struct.pack("<BB", code, raw.ndim)
        buf += struct.pack(f"<{raw.ndim}Q", *raw.shape)
        buf += raw.tobytes()
    path = Path(path)
    path.write_bytes(bytes(buf))
    sidecar_path(path).write_text(json.dumps(samples.hp.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


class _Reader:
    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise ArchiveError("archive is truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def load_archive(path) -> tuple[PosteriorSamples, dict]:
    """Read an archive and its sidecar; returns the samples and the metadata dict."""
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise ArchiveError(f"cannot read archive {path}: {exc.strerror}") from None
    rd = _Reader(blob)
    if rd.take(len(MAGIC)) != MAGIC:
        raise ArchiveError(f"{path} is not a model archive")
    (version,) = rd.unpack("<H")
    if version != VERSION:
        raise ArchiveError(f"unsupported archive version {version}")
    (meta_len,) = rd.unpack("<I")
    meta = json.loads(rd.take(meta_len).decode("utf-8"))
    (count,) = rd.unpack("<I")
    arrays = {}
    for _ in range(count):
        (name_len,) = rd.unpack("<H")
        name = rd.take(name_len).decode("ascii")
        code, ndim = rd.unpack("<BB")
        if code not in _DTYPES:
            raise ArchiveError(f"unknown dtype code {code}")
        shape = rd.unpack(f"<{ndim}Q") if ndim else ()
        dtype = _DTYPES[code]
        nbytes = int(np.prod(shape, dtype=np.int64)) * dtype.itemsize
        arrays[name] = np.frombuffer(rd.take(nbytes), dtype=dtype).reshape(shape).astype(dtype.newbyteorder("="))
    try:
        hp = Hyperparameters.from_dict(json.loads(sidecar_path(path).read_text()))
    except OSError:
        raise ArchiveError(f"missing hyperparameter sidecar {sidecar_path(path)}") from None
    samples = PosteriorSamples(
        hp=hp,
        kind=ModelKind(meta["ordinal"], meta["bias_mode"]),
        num_levels=meta["num_levels"],
        reference_m=arrays.pop("reference_m", None),
        **arrays,
    )
    return samples, meta


# --------------------------------------------------------------------------- manifest


def dataset_hash(data: RatingsDataset) -> str:
    h = hashlib.sha256()
    h.update(_canonical_json({
        "levels": data.num_levels, "users": list(data.user_ids),
        "items": list(data.item_ids), "aspects": list(data.aspect_names),
    }).encode())
    for arr in (data.users, data.items, data.ratings):
        h.update(np.ascontiguousarray(arr, dtype="<i8").tobytes())
    return h.hexdigest()


def config_hash(config: dict) -> str:
    return hashlib.sha256(_canonical_json(config).encode()).hexdigest()


def git_describe(cwd=None) -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty", "--tags"], cwd=cwd,
                             capture_output=True, text=True, timeout=10)
    except (OSError, subprocess.SubprocessError):
        return "unknown"
    return out.stdout.strip() if out.returncode == 0 and out.stdout.strip() else "unknown"


def write_manifest(out_dir, command: str, seed: int, config: dict, data: RatingsDataset | None = None,
                   outputs: list | None = None) -> Path:
    from . import __version__

    manifest = {
        "command": command,
        "seed": seed,
        "config": config,
        "config_hash": config_hash(config),
        "git_describe": git_describe(Path(__file__).parent),
        "dataset_hash": dataset_hash(data) if data is not None else None,
        "package_version": __version__,
        "python": platform.python_version(),
        "numpy": np.__version__,
        "outputs": sorted(str(p) for p in outputs or []),
    }
    path = Path(out_dir) / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path
