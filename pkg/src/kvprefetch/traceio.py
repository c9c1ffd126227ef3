"""Binary trace files: one JSON header line, then raw little-endian float32.

Header example::

    {"version": 1, "dtype": "f32", "layout": "BHTD", "dims": [1, 4, 128, 64], "field": "query"}

The body holds exactly ``B*H*T*D`` values in ``(b, h, t, d)`` row-major
order.  A trace is three files per layer (query, key, value) sharing one
prefix: ``<prefix>.<field>.bin`` for a single layer, otherwise
``<prefix>.l<layer>.<field>.bin``.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .attention import DecodeTrace
from .errors import TraceFormatError
from .selection import AttentionLayout

FIELDS = ("query", "key", "value")
_DTYPE = np.dtype("<f4")


def write_tensor(path, data: np.ndarray, field: str, **extra) -> Path:
    arr = np.ascontiguousarray(data, dtype=_DTYPE)
    if arr.ndim != 4:
        raise ValueError("trace tensors are (B, H, T, D)")
    if field not in FIELDS:
        raise ValueError(f"field must be one of {FIELDS}")
    header = {"version": 1, "dtype": "f32", "layout": "BHTD", "dims": list(arr.shape), "field": field}
    header.update({k: v for k, v in extra.items() if v is not None})
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(arr.tobytes(order="C"))
    return path


def read_tensor(path) -> tuple[dict, np.ndarray]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise TraceFormatError("header line is not newline-terminated", len(raw))
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        pos = getattr(exc, "pos", getattr(exc, "start", 0))
        raise TraceFormatError(f"malformed header: {exc}", pos) from None
    if not isinstance(header, dict):
        raise TraceFormatError("header must be a JSON object", 0)
    for key, want in (("version", 1), ("dtype", "f32"), ("layout", "BHTD")):
        if header.get(key) != want:
            raise TraceFormatError(f"header {key}={header.get(key)!r}, expected {want!r}", 0)
    if header.get("field") not in FIELDS:
        raise TraceFormatError(f"header field={header.get('field')!r} not in {FIELDS}", 0)
    dims = header.get("dims")
    if not (isinstance(dims, list) and len(dims) == 4 and all(isinstance(d, int) and d > 0 for d in dims)):
        raise TraceFormatError(f"dims must be four positive integers, got {dims!r}", 0)
    body = raw[nl + 1:]
    expect = 4 * int(np.prod(dims))
    if len(body) != expect:
        raise TraceFormatError(f"body holds {len(body)} bytes, dims need {expect}", nl + 1 + min(len(body), expect))
    arr = np.frombuffer(body, dtype=_DTYPE).reshape(dims).astype(np.float32)
    return header, arr


def trace_paths(prefix, n_layers: int = 1) -> list[dict[str, Path]]:
    prefix = str(prefix)
    if n_layers == 1:
        return [{f: Path(f"{prefix}.{f}.bin") for f in FIELDS}]
    return [{f: Path(f"{prefix}.l{l}.{f}.bin") for f in FIELDS} for l in range(n_layers)]


def save_trace(trace: DecodeTrace, prefix) -> list[Path]:
    meta = {k: trace.meta.get(k) for k in ("seed", "alpha", "sigma")}
    written = []
    for layer, paths in enumerate(trace_paths(prefix, trace.n_layers)):
        arrays = {"query": trace.queries[layer], "key": trace.keys[layer], "value": trace.values[layer]}
        for field, path in paths.items():
            written.append(write_tensor(path, arrays[field], field, **meta))
    return written


def load_trace(prefix) -> DecodeTrace:
    prefix = str(prefix)
    n_layers = 1
    if not Path(f"{prefix}.query.bin").exists():
        n_layers = 0
        while Path(f"{prefix}.l{n_layers}.query.bin").exists():
            n_layers += 1
        if n_layers == 0:
            raise FileNotFoundError(f"no trace files found for prefix {prefix!r}")
    queries, keys, values = [], [], []
    meta = {"source": prefix}
    for paths in trace_paths(prefix, n_layers):
        hq, q = read_tensor(paths["query"])
        _, k = read_tensor(paths["key"])
        _, v = read_tensor(paths["value"])
        meta.update({key: hq[key] for key in ("seed", "alpha", "sigma") if key in hq})
        queries.append(q)
        keys.append(k)
        values.append(v)
    q0, k0 = queries[0], keys[0]
    layout = AttentionLayout(q0.shape[1], k0.shape[1], q0.shape[3])
    context = k0.shape[2] - q0.shape[2]
    if context < 0:
        raise TraceFormatError(f"key stream shorter than query stream in {prefix}", 0)
    return DecodeTrace(layout, queries, keys, values, context, meta)
