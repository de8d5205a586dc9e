"""Model persistence: an ASCII manifest plus a binary float64 section.

Layout (all text lines ASCII, ``\n`` terminated)::

    STAN-ARCHIVE-1
    config <k>
    <key> = <value>          (k lines)
    tensors <n>
    <name> <ndim> <d0> ... <offset>   (n lines)
    blob <nbytes>
    <raw little-endian float64 data>

Tensor names and location ids are percent-encoded so they tokenize on
spaces.  Loading validates every offset and shape before reading; a
round-trip reproduces predictions bit-exactly.
"""

from __future__ import annotations

import dataclasses
from pathlib import Path
from urllib.parse import quote, unquote

import numpy as np

from .model import StanParams
from .training import NormStats, TrainConfig, TrainResult

MAGIC = "STAN-ARCHIVE-1"
_NORM_FIELDS = ("static_mean", "static_std", "dynamic_mean", "dynamic_std")


class ArchiveError(ValueError):
    """The file is not a valid model archive; names the first violation."""


def _config_lines(result: TrainResult) -> dict[str, str]:
    out = {"version": "1"}
    for f in dataclasses.fields(TrainConfig):
        out[f.name] = repr(getattr(result.config, f.name))
    order = [k for k in result.params]
    out["locations"] = ",".join(quote(k, safe="") for k in order)
    return out


def _parse_config(entries: dict[str, str]) -> tuple[TrainConfig, list[str]]:
    kwargs = {}
    for f in dataclasses.fields(TrainConfig):
        if f.name not in entries:
            raise ArchiveError(f"config entry {f.name!r} missing")
        raw = entries[f.name]
        if f.type in ("int",):
            kwargs[f.name] = int(raw)
        elif f.type in ("float",):
            kwargs[f.name] = float(raw)
        elif f.type in ("bool",):
            kwargs[f.name] = raw == "True"
        else:
            kwargs[f.name] = raw.strip("'\"")
    order = [unquote(tok) for tok in entries["locations"].split(",") if tok]
    return TrainConfig(**kwargs), order


def save_archive(result: TrainResult, path) -> Path:
    """Write the trained model, its config and normalization statistics."""
    path = Path(path)
    tensors: list[tuple[str, np.ndarray]] = []
    for field in _NORM_FIELDS:
        tensors.append((f"norm/{field}", getattr(result.norm_stats, field)))
    for loc_id, params in result.params.items():
        prefix = f"loc/{quote(loc_id, safe='')}"
        for name, arr in params.flatten().items():
            tensors.append((f"{prefix}/{name}", arr))

    manifest = []
    blob = bytearray()
    for name, arr in tensors:
        arr = np.ascontiguousarray(arr, dtype=np.float64)
        offset = len(blob)
        blob.extend(arr.astype("<f8").tobytes())
        dims = " ".join(str(d) for d in arr.shape)
        entry = f"{name} {arr.ndim}"  # loc ids were quoted when the name was built
        if dims:
            entry += f" {dims}"
        manifest.append(f"{entry} {offset}")

    lines = [MAGIC]
    config = _config_lines(result)
    lines.append(f"config {len(config)}")
    lines.extend(f"{k} = {v}" for k, v in config.items())
    lines.append(f"tensors {len(manifest)}")
    lines.extend(manifest)
    lines.append(f"blob {len(blob)}")
    header = ("\n".join(lines) + "\n").encode("ascii")
    path.write_bytes(header + bytes(blob))
    return path


def load_archive(path) -> TrainResult:
    """Read and validate an archive; reconstruct the TrainResult."""
    raw = Path(path).read_bytes()
    magic = MAGIC.encode("ascii") + b"\n"
    if not raw.startswith(magic):
        raise ArchiveError(f"bad magic: expected {MAGIC!r}")
    pos = len(magic)

    def next_line() -> str:
        nonlocal pos
        end = raw.find(b"\n", pos)
        if end < 0:
            raise ArchiveError("truncated header")
        line = raw[pos:end].decode("ascii")
        pos = end + 1
        return line

    head = next_line().split()
    if len(head) != 2 or head[0] != "config":
        raise ArchiveError(f"expected 'config <k>', got {head}")
    entries: dict[str, str] = {}
    for _ in range(int(head[1])):
        line = next_line()
        key, _, value = line.partition(" = ")
        if not key or not _:
            raise ArchiveError(f"malformed config line {line!r}")
        entries[key] = value

    head = next_line().split()
    if len(head) != 2 or head[0] != "tensors":
        raise ArchiveError(f"expected 'tensors <n>', got {head}")
    manifest: list[tuple[str, tuple[int, ...], int]] = []
    for _ in range(int(head[1])):
        toks = next_line().split()
        if len(toks) < 3:
            raise ArchiveError(f"malformed tensor line {toks}")
        name = toks[0]  # kept percent-encoded; param suffixes are URL-safe
        ndim = int(toks[1])
        if len(toks) != 3 + ndim:
            raise ArchiveError(f"tensor {name!r}: expected {ndim} dims, got {len(toks) - 3}")
        shape = tuple(int(t) for t in toks[2 : 2 + ndim])
        offset = int(toks[-1])
        manifest.append((name, shape, offset))

    head = next_line().split()
    if len(head) != 2 or head[0] != "blob":
        raise ArchiveError(f"expected 'blob <nbytes>', got {head}")
    nbytes = int(head[1])
    blob = raw[pos:]
    if len(blob) != nbytes:
        raise ArchiveError(f"blob truncated: header says {nbytes} bytes, file has {len(blob)}")

    tensors: dict[str, np.ndarray] = {}
    for name, shape, offset in manifest:
        size = 8 * int(np.prod(shape)) if shape else 8
        if offset < 0 or offset + size > nbytes:
            raise ArchiveError(
                f"tensor {name!r}: offset {offset} + {size} bytes exceeds blob of {nbytes}"
            )
        flat = np.frombuffer(blob, dtype="<f8", count=size // 8, offset=offset)
        tensors[name] = flat.reshape(shape).astype(np.float64)

    config, order = _parse_config(entries)
    missing = [f"norm/{f}" for f in _NORM_FIELDS if f"norm/{f}" not in tensors]
    if missing:
        raise ArchiveError(f"missing normalization tensors {missing}")
    stats = NormStats(*(tensors[f"norm/{f}"] for f in _NORM_FIELDS))

    params: dict[str, StanParams] = {}
    for loc_id in order:
        prefix = f"loc/{quote(loc_id, safe='')}/"
        flat = {
            name[len(prefix):]: arr for name, arr in tensors.items()
            if name.startswith(prefix)
        }
        if not flat:
            raise ArchiveError(f"no tensors found for location {loc_id!r}")
        params[loc_id] = StanParams.unflatten(loc_id, flat)

    return TrainResult(params=params, history={}, norm_stats=stats, config=config)
