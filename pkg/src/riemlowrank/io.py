"""Binary containers for problems and snapshot matrices.

Layout (all integers little endian)::

    8 bytes   magic  b"RLRMAT\\x00\\x01"
    u32       format version
    u64       header length H
    H bytes   UTF-8 JSON header
    payload   raw little-endian arrays, each starting at an 8-byte boundary

The header lists every array as ``{"name", "dtype", "shape", "offset",
"nbytes"}`` (offsets relative to the payload start) and carries a ``meta``
dictionary plus a ``created`` timestamp.  The payload depends only on the
stored data, so re-writing the same problem reproduces it byte for byte.
"""

from __future__ import annotations

import json
import struct
import time
from pathlib import Path

import numpy as np
import scipy.io
import scipy.sparse as sp

from .linalg import FactoredAmbient
from .problem import AffineOperator, NonlinearitySpec, ProblemData, SampleSet, XiMatrices
from .reference import SnapshotMatrix

__all__ = [
    "MAGIC",
    "VERSION",
    "write_container",
    "read_container",
    "save_problem",
    "load_problem",
    "save_snapshot",
    "load_snapshot",
    "export_matrix_market",
]

MAGIC = b"RLRMAT\x00\x01"
VERSION = 1
_ALIGN = 8


def write_container(path, arrays: dict, meta: dict | None = None) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr)
        a = a.astype(a.dtype.newbyteorder("<"), copy=False)
        raw = a.tobytes()
        entries.append(
            {"name": name, "dtype": a.dtype.str, "shape": list(a.shape), "offset": offset, "nbytes": len(raw)}
        )
        pad = (-len(raw)) % _ALIGN
        chunks.append(raw + b"\x00" * pad)
        offset += len(raw) + pad
    header = json.dumps(
        {"arrays": entries, "meta": meta or {}, "created": time.time()}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for c in chunks:
            fh.write(c)


def read_container(path):
    """Return ``(arrays, meta, header)``."""
    data = Path(path).read_bytes()
    if data[: len(MAGIC)] != MAGIC:
        raise ValueError(f"{path}: not a container file (bad magic)")
    version, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    start = len(MAGIC) + 12
    header = json.loads(data[start : start + hlen].decode("utf-8"))
    base = start + hlen
    arrays = {}
    for e in header["arrays"]:
        buf = data[base + e["offset"] : base + e["offset"] + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.dtype(e["dtype"])).reshape(e["shape"]).copy()
    return arrays, header["meta"], header


def payload_bytes(path) -> bytes:
    """Everything after the header (used to compare runs while ignoring timestamps)."""
    data = Path(path).read_bytes()
    _, hlen = struct.unpack_from("<IQ", data, len(MAGIC))
    return data[len(MAGIC) + 12 + hlen :]


def _put_csr(arrays, name, A):
    A = sp.csr_matrix(A)
    arrays[f"{name}.data"] = A.data.astype(float)
    arrays[f"{name}.indices"] = A.indices.astype(np.int64)
    arrays[f"{name}.indptr"] = A.indptr.astype(np.int64)


def _get_csr(arrays, name, m):
    return sp.csr_matrix(
        (arrays[f"{name}.data"], arrays[f"{name}.indices"], arrays[f"{name}.indptr"]), shape=(m, m)
    )


def save_problem(path, P: ProblemData) -> None:
    arrays = {}
    for i, A in enumerate(P.operator.mats):
        _put_csr(arrays, f"A{i}", A)
    _put_csr(arrays, "K", P.K)
    for i, d in enumerate(P.xi.diags):
        arrays[f"Xi{i}"] = d
    arrays["B.left"] = P.B.left
    arrays["B.right"] = P.B.right
    if P.B.core is not None:
        arrays["B.core"] = P.B.core
    if P.nonlinearity.active:
        arrays["w"] = P.nonlinearity.w
    if P.samples is not None:
        arrays["samples.xi"] = P.samples.xi
        arrays["samples.weights"] = P.samples.weights
    meta = {"m": P.m, "n": P.n, "p": P.p, "nonlinearity": P.nonlinearity.kind, "problem": P.meta}
    write_container(path, arrays, json.loads(json.dumps(meta, default=float)))


def load_problem(path) -> ProblemData:
    arrays, meta, _ = read_container(path)
    m, p = int(meta["m"]), int(meta["p"])
    op = AffineOperator(tuple(_get_csr(arrays, f"A{i}", m) for i in range(p + 1)))
    xi = XiMatrices(tuple(arrays[f"Xi{i}"] for i in range(p + 1)))
    B = FactoredAmbient(arrays["B.left"], arrays["B.right"], arrays.get("B.core"))
    nl = NonlinearitySpec.quartic(arrays["w"]) if meta["nonlinearity"] != "none" else NonlinearitySpec()
    samples = None
    if "samples.xi" in arrays:
        samples = SampleSet(arrays["samples.xi"], arrays["samples.weights"])
    return ProblemData(op, xi, B, K=_get_csr(arrays, "K", m), nonlinearity=nl, samples=samples,
                       meta=dict(meta.get("problem", {})))


def save_snapshot(path, S: SnapshotMatrix) -> None:
    write_container(
        path,
        {"X": S.X, "iterations": S.iterations.astype(np.int64), "residuals": S.residuals,
         "converged": S.converged.astype(np.uint8)},
        {"method": S.method, **S.meta},
    )


def load_snapshot(path) -> SnapshotMatrix:
    arrays, meta, _ = read_container(path)
    meta = dict(meta)
    method = meta.pop("method", "linear")
    return SnapshotMatrix(arrays["X"], arrays["iterations"], arrays["residuals"],
                          arrays["converged"].astype(bool), method, meta)


def export_matrix_market(path, X, comment: str = "") -> None:
    """Write a dense or sparse matrix in Matrix Market text format."""
    scipy.io.mmwrite(str(path), X if sp.issparse(X) else np.asarray(X), comment=comment, precision=17)
