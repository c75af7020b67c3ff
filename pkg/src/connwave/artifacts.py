"""File formats: binary field container, JSON/CSV reports, gnuplot data, fixtures, masks.

Container layout::

    b"CWAVE001"                  magic
    uint64 little-endian         header length H
    H bytes UTF-8 JSON           header: meta + one entry per array
    payload                      raw little-endian arrays, each split into chunks

Each array entry records dtype, shape, payload offset and the byte lengths of
its chunks.  The only non-deterministic header field is ``created``.
"""
from __future__ import annotations

import csv
import hashlib
import json
import struct
import time
from pathlib import Path
from typing import Iterable, Mapping, Optional, Sequence

import numpy as np

from .bundle import ConnectionData, GaugeGroupSpec, PotentialData

MAGIC = b"CWAVE001"
CHUNK_BYTES = 1 << 22


class ArtifactError(ValueError):
    """Malformed artifact file or fixture."""


# ---------------------------------------------------------------------------
# binary container
# ---------------------------------------------------------------------------


def write_container(path, arrays: Mapping[str, np.ndarray], meta: Optional[dict] = None,
                    chunk_bytes: int = CHUNK_BYTES) -> Path:
    path = Path(path)
    entries, blobs, offset = [], [], 0
    for name in sorted(arrays):
        a = np.ascontiguousarray(arrays[name])
        if a.dtype.byteorder == ">":
            a = a.astype(a.dtype.newbyteorder("<"))
        raw = a.tobytes()
        chunks = [raw[i:i + chunk_bytes] for i in range(0, len(raw), chunk_bytes)] or [b""]
        entries.append({"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset,
                        "chunks": [len(c) for c in chunks],
                        "sha256": hashlib.sha256(raw).hexdigest()})
        blobs.extend(chunks)
        offset += len(raw)
    header = {"format": "connwave-container", "version": 1,
              "created": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
              "meta": _jsonable(meta or {}), "arrays": entries}
    hb = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hb)))
        fh.write(hb)
        for b in blobs:
            fh.write(b)
    return path


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    """Returns ``(header, arrays)``; array hashes are verified."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ArtifactError(f"{path}: not a connwave container")
        (hl,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hl).decode())
        base = fh.tell()
        out = {}
        for e in header["arrays"]:
            fh.seek(base + e["offset"])
            raw = b"".join(fh.read(n) for n in e["chunks"])
            if hashlib.sha256(raw).hexdigest() != e["sha256"]:
                raise ArtifactError(f"{path}: array {e['name']!r} is corrupted")
            out[e["name"]] = np.frombuffer(raw, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return header, out


# ---------------------------------------------------------------------------
# text reports
# ---------------------------------------------------------------------------


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.bool_, bool)):
        return bool(obj)
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return v if np.isfinite(v) else repr(v)
    if isinstance(obj, (complex, np.complexfloating)):
        return [float(obj.real), float(obj.imag)]
    return obj


def write_json(path, data) -> Path:
    path = Path(path)
    path.write_text(json.dumps(_jsonable(data), indent=2, sort_keys=True) + "\n")
    return path


def write_csv(path, rows: Sequence[Mapping], columns: Optional[Sequence[str]] = None) -> Path:
    path = Path(path)
    columns = list(columns or (rows[0].keys() if rows else []))
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(r[c]) for c in columns])
    return path


def _fmt(v) -> str:
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    return str(v)


def write_plot_data(path, x: Iterable[float], y: Iterable[float], comment: str = "") -> Path:
    """Two whitespace-separated columns, ``#`` comment header (gnuplot ``plot 'f' u 1:2``)."""
    path = Path(path)
    lines = [f"# {ln}" for ln in comment.splitlines()] if comment else []
    lines += [f"{float(a)!r} {float(b)!r}" for a, b in zip(x, y)]
    path.write_text("\n".join(lines) + "\n")
    return path


def file_digest(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def container_digest(path) -> str:
    """SHA-256 over the array names, dtypes, shapes and payload hashes (timestamp excluded)."""
    with open(path, "rb") as fh:
        if fh.read(len(MAGIC)) != MAGIC:
            raise ArtifactError(f"{path}: not a connwave container")
        (hl,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(hl).decode())
    header.pop("created", None)
    return hashlib.sha256(json.dumps(header, sort_keys=True).encode()).hexdigest()


def write_manifest(out_dir, files: Sequence, extra: Optional[dict] = None) -> Path:
    """``manifest.json`` listing every produced file with size and SHA-256.

    Containers are hashed with :func:`container_digest` so the manifest itself
    is reproducible; their byte size still includes the timestamp header.
    """
    out_dir = Path(out_dir)
    listing = []
    for f in sorted(Path(f) for f in files):
        entry = {"path": f.relative_to(out_dir).as_posix(), "bytes": f.stat().st_size}
        if f.suffix == ".cwc":
            entry["content_sha256"] = container_digest(f)
        else:
            entry["sha256"] = file_digest(f)
        listing.append(entry)
    return write_json(out_dir / "manifest.json", {"files": listing, **(extra or {})})


# ---------------------------------------------------------------------------
# bundle fixtures
# ---------------------------------------------------------------------------


def _flatten(M: np.ndarray) -> list[float]:
    M = np.asarray(M, complex).reshape(-1)
    return np.column_stack([M.real, M.imag]).reshape(-1).tolist()


def _unflatten(values, N: int, what: str) -> np.ndarray:
    v = np.asarray(values, float)
    if v.shape != (2 * N * N,):
        raise ArtifactError(f"{what}: expected {2 * N * N} numbers, got {v.size}")
    return (v[0::2] + 1j * v[1::2]).reshape(N, N)


def fixture_to_dict(B: ConnectionData, V: PotentialData, point=None) -> dict:
    """Constant-coefficient snapshot of ``(B, V)`` at ``point`` (origin by default)."""
    m = B.n + 1
    X = np.zeros((1, m)) if point is None else np.asarray(point, float).reshape(1, m)
    return {"N": B.N, "group": B.group.tag, "B": [_flatten(b) for b in B(X)[0]],
            "V": _flatten(V(X)[0])}


def fixture_from_dict(data: Mapping, tol: float = 1e-10) -> tuple[ConnectionData, PotentialData]:
    try:
        N = int(data["N"])
        group = str(data.get("group", f"U({N})"))
        rows = data["B"]
        vrow = data["V"]
    except (KeyError, TypeError, ValueError) as exc:
        raise ArtifactError(f"fixture is missing a field: {exc}") from None
    kind = group.split("(")[0]
    if kind not in ("U", "SU") or group != f"{kind}({N})":
        raise ArtifactError(f"unsupported group {group!r} for N={N}")
    g = GaugeGroupSpec(N, kind)
    mats = np.array([_unflatten(r, N, f"B[{i}]") for i, r in enumerate(rows)])
    if mats.shape[0] not in (2, 3):
        raise ArtifactError("B must list one matrix per space-time direction (2 or 3)")
    if g.algebra_defect(mats) > tol:
        raise ArtifactError("connection matrices are not in the Lie algebra")
    V = _unflatten(vrow, N, "V")
    if np.abs(V - V.conj().T).max() > tol:
        raise ArtifactError("potential is not Hermitian")
    return ConnectionData.constant(mats, g, name="fixture"), PotentialData.constant(V, name="fixture")


def write_fixture(path, B: ConnectionData, V: PotentialData, point=None) -> Path:
    return write_json(path, fixture_to_dict(B, V, point))


def read_fixture(path) -> tuple[ConnectionData, PotentialData]:
    try:
        data = json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise ArtifactError(f"{path}: no such fixture file") from None
    except json.JSONDecodeError as exc:
        raise ArtifactError(f"{path}: {exc}") from None
    return fixture_from_dict(data)


# ---------------------------------------------------------------------------
# masks
# ---------------------------------------------------------------------------


def mask_to_rle(mask: np.ndarray, meta: Optional[dict] = None) -> dict:
    """Run lengths of the C-ordered flattened mask, starting with a run of ``False``."""
    flat = np.asarray(mask, bool).ravel()
    edges = np.flatnonzero(np.diff(flat.astype(np.int8))) + 1
    bounds = np.concatenate([[0], edges, [flat.size]])
    runs = np.diff(bounds).tolist()
    if flat.size and flat[0]:
        runs = [0] + runs
    return {"shape": list(mask.shape), "runs": runs, "count": int(flat.sum()), **(meta or {})}


def mask_from_rle(data: Mapping) -> np.ndarray:
    shape = tuple(int(s) for s in data["shape"])
    runs = np.asarray(data["runs"], int)
    if runs.sum() != int(np.prod(shape)):
        raise ArtifactError("run lengths do not cover the grid")
    values = np.arange(runs.size) % 2 == 1
    return np.repeat(values, runs).reshape(shape)
