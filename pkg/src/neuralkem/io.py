"""On-disk formats: sparse matrices, network checkpoints, raw images, PGM and traces.

Binary layouts are little-endian.

NKSM (sparse matrix): b"NKSM", u64 n_rows, u64 n_cols, u64 nnz,
u64 row_offsets[n_rows + 1], u32 col_indices[nnz], f64 values[nnz].

NKNP (network parameters): b"NKNP", u32 descriptor-json length, descriptor
json, u32 tensor count, then per tensor u32 name length, name, u32 ndim,
u64 dims[ndim], f64 data.
"""

from __future__ import annotations

import csv
import hashlib
import json
import struct
from dataclasses import asdict
from pathlib import Path
from typing import Sequence

import numpy as np

from .kernel import KernelModel
from .neural import NetDescriptor, NetParams, flat_from_arrays
from .tomo import SparseMatrix

SPARSE_MAGIC = b"NKSM"
PARAMS_MAGIC = b"NKNP"
TRACE_COLUMNS = ("iter", "loglik", "Q_before", "Q_after", "guard_retries", "wall_ms")


class FormatError(ValueError):
    pass


def write_json(path: str | Path, obj) -> Path:
    path = Path(path)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    return path


def read_json(path: str | Path):
    return json.loads(Path(path).read_text())


def file_sha256(path: str | Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# --- sparse matrices --------------------------------------------------------

def write_sparse(path: str | Path, M: SparseMatrix) -> Path:
    if M.n_cols > np.iinfo(np.uint32).max:
        raise FormatError("column count exceeds u32 indices")
    path = Path(path)
    with path.open("wb") as fh:
        fh.write(SPARSE_MAGIC)
        fh.write(struct.pack("<QQQ", M.n_rows, M.n_cols, M.nnz))
        fh.write(M.row_offsets.astype("<u8").tobytes())
        fh.write(M.col_indices.astype("<u4").tobytes())
        fh.write(M.values.astype("<f8").tobytes())
    return path


def read_sparse(path: str | Path) -> SparseMatrix:
    raw = Path(path).read_bytes()
    if raw[:4] != SPARSE_MAGIC:
        raise FormatError(f"{path}: not an NKSM file")
    n_rows, n_cols, nnz = struct.unpack_from("<QQQ", raw, 4)
    pos = 28
    expect = pos + 8 * (n_rows + 1) + 4 * nnz + 8 * nnz
    if len(raw) != expect:
        raise FormatError(f"{path}: size {len(raw)} does not match header ({expect})")
    ro = np.frombuffer(raw, "<u8", n_rows + 1, pos).astype(np.int64)
    pos += 8 * (n_rows + 1)
    ci = np.frombuffer(raw, "<u4", nnz, pos).astype(np.int64)
    pos += 4 * nnz
    va = np.frombuffer(raw, "<f8", nnz, pos).astype(np.float64)
    return SparseMatrix(int(n_rows), int(n_cols), ro, ci, va)


def write_kernel(path: str | Path, model: KernelModel) -> list[Path]:
    """Matrix as NKSM plus a JSON sidecar holding the build parameters."""
    path = Path(path)
    side = path.with_suffix(".json")
    write_sparse(path, model.K)
    write_json(side, model.metadata())
    return [path, side]


def read_kernel(path: str | Path) -> KernelModel:
    path = Path(path)
    K = read_sparse(path)
    meta = read_json(path.with_suffix(".json"))
    window = tuple(meta["window"]) if meta.get("window") else None
    return KernelModel(K, int(meta["k"]), float(meta["sigma"]), window, bool(meta["row_normalized"]),
                       tuple(meta["feature_mean"]), tuple(meta["feature_std"]))


# --- network parameters -------------------------------------------------------

def _descriptor_json(desc: NetDescriptor) -> bytes:
    d = asdict(desc)
    if d["spatial_shape"] is not None:
        d["spatial_shape"] = list(d["spatial_shape"])
    return json.dumps(d, sort_keys=True).encode()


def write_params(path: str | Path, params: NetParams) -> Path:
    path = Path(path)
    header = _descriptor_json(params.descriptor)
    arrays = params.named_arrays()
    with path.open("wb") as fh:
        fh.write(PARAMS_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(arrays)))
        for name, a in arrays.items():
            enc = name.encode()
            fh.write(struct.pack("<I", len(enc)))
            fh.write(enc)
            fh.write(struct.pack("<I", a.ndim))
            fh.write(struct.pack(f"<{a.ndim}Q", *a.shape))
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())
    return path


def read_params(path: str | Path) -> NetParams:
    raw = Path(path).read_bytes()
    if raw[:4] != PARAMS_MAGIC:
        raise FormatError(f"{path}: not an NKNP file")
    (hlen,) = struct.unpack_from("<I", raw, 4)
    d = json.loads(raw[8:8 + hlen])
    if d.get("spatial_shape") is not None:
        d["spatial_shape"] = tuple(d["spatial_shape"])
    desc = NetDescriptor(**d)
    pos = 8 + hlen
    (count,) = struct.unpack_from("<I", raw, pos)
    pos += 4
    arrays = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        name = raw[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<I", raw, pos)
        pos += 4
        shape = struct.unpack_from(f"<{ndim}Q", raw, pos)
        pos += 8 * ndim
        size = int(np.prod(shape))
        arrays[name] = np.frombuffer(raw, "<f8", size, pos).reshape(shape)
        pos += 8 * size
    if pos != len(raw):
        raise FormatError(f"{path}: trailing bytes after the last tensor")
    return flat_from_arrays(desc, arrays)


# --- images -------------------------------------------------------------------

def write_image(path: str | Path, data, shape: Sequence[int], **meta) -> list[Path]:
    """Raw little-endian f64, row-major, with a JSON sidecar of dims and metadata."""
    path = Path(path)
    data = np.asarray(data, dtype=np.float64)
    shape = tuple(int(s) for s in shape)
    if data.size % int(np.prod(shape)):
        raise FormatError("data size is not a multiple of the image shape")
    count = data.size // int(np.prod(shape))
    path.write_bytes(data.astype("<f8").tobytes())
    side = path.with_suffix(".json")
    write_json(side, {"dtype": "float64", "byte_order": "little", "shape": list(shape), "count": count, **meta})
    return [path, side]


def read_image(path: str | Path) -> tuple[np.ndarray, dict]:
    """Returns (count, *shape) data (count dropped when 1) and the sidecar dict."""
    path = Path(path)
    meta = read_json(path.with_suffix(".json"))
    data = np.frombuffer(path.read_bytes(), "<f8").astype(np.float64)
    shape = tuple(meta["shape"])
    count = int(meta.get("count", 1))
    if data.size != count * int(np.prod(shape)):
        raise FormatError(f"{path}: {data.size} values do not match sidecar shape")
    data = data.reshape((count, *shape))
    return (data[0] if count == 1 else data), meta


def write_pgm(path: str | Path, image2d, window: tuple[float, float] | None = None) -> tuple[float, float]:
    """16-bit binary PGM with a linear [lo, hi] window (default image min/max)."""
    img = np.asarray(image2d, dtype=np.float64)
    if img.ndim != 2:
        raise FormatError("PGM export needs a 2-D image")
    lo, hi = (float(img.min()), float(img.max())) if window is None else map(float, window)
    span = hi - lo
    scaled = np.zeros_like(img) if span <= 0 else np.clip((img - lo) / span, 0.0, 1.0)
    pix = np.round(scaled * 65535).astype(">u2")
    with Path(path).open("wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n65535\n".encode())
        fh.write(pix.tobytes())
    return lo, hi


def read_pgm(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    parts = raw.split(maxsplit=4)
    if parts[0] != b"P5":
        raise FormatError(f"{path}: not a binary PGM")
    w, h, maxval = int(parts[1]), int(parts[2]), int(parts[3])
    dtype = ">u2" if maxval > 255 else "u1"
    return np.frombuffer(parts[4], dtype, w * h).reshape(h, w)


# --- traces --------------------------------------------------------------------

def write_trace(path: str | Path, trace, wall_clock: bool = True) -> Path:
    """Per-iteration CSV; ``wall_clock=False`` drops the timing column for reproducible output."""
    cols = TRACE_COLUMNS if wall_clock else TRACE_COLUMNS[:-1]
    path = Path(path)
    with path.open("w", newline="") as fh:
        out = csv.writer(fh, lineterminator="\n")
        out.writerow(cols)
        for s in trace:
            row = [s.iteration, repr(s.loglik), repr(s.q_before), repr(s.q_after), s.guard_retries]
            if wall_clock:
                row.append(f"{s.wall_ms:.3f}")
            out.writerow(row)
    return path


def read_trace(path: str | Path) -> list[dict]:
    with Path(path).open(newline="") as fh:
        return list(csv.DictReader(fh))
