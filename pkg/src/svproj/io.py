"""Binary and text file formats: embeddings, tokens, parameters, configs.

Embedding files ("SVPE") and token files ("SVPT") are little-endian binaries
with a fixed header; token files append a line-oriented stats block.
Parameter files are a text header (names, shapes, dtypes, meta key/values)
followed by the concatenated raw payloads.  All writers are canonical so
that identical inputs produce identical bytes.
"""
from __future__ import annotations

import struct

import numpy as np

from .autodiff import ParamStore
from .errors import FormatError
from .projector import PatchGrid, TokenSequence, TokenStats

__all__ = ["save_embeddings", "load_embeddings", "save_tokens", "load_tokens",
           "save_params", "load_params", "read_kv_config", "format_stats_block"]

_DTYPE_CODE = {np.dtype(np.float32): 0, np.dtype(np.float64): 1}
_CODE_DTYPE = {0: np.dtype("<f4"), 1: np.dtype("<f8")}


def _dtype_code(arr: np.ndarray) -> int:
    code = _DTYPE_CODE.get(arr.dtype)
    if code is None:
        raise FormatError("dtype", f"unsupported dtype {arr.dtype}")
    return code


def save_embeddings(path, grid: PatchGrid):
    """Write a patch-embedding grid: magic 'SVPE', version, H, W, d, dtype, payload."""
    code = _dtype_code(grid.embeddings)
    with open(path, "wb") as f:
        f.write(b"SVPE")
        f.write(struct.pack("<IIIIB", 1, grid.height, grid.width, grid.dim, code))
        f.write(np.ascontiguousarray(grid.embeddings,
                                     dtype=_CODE_DTYPE[code]).tobytes())


def load_embeddings(path) -> PatchGrid:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != b"SVPE":
        raise FormatError("magic", "not an SVPE file")
    version, height, width, dim, code = struct.unpack_from("<IIIIB", blob, 4)
    if version != 1:
        raise FormatError("version", f"unsupported version {version}")
    if code not in _CODE_DTYPE:
        raise FormatError("dtype", f"unknown dtype code {code}")
    dt = _CODE_DTYPE[code]
    off = 4 + struct.calcsize("<IIIIB")
    need = height * width * dim * dt.itemsize
    if len(blob) - off != need:
        raise FormatError("payload", f"expected {need} bytes, found {len(blob) - off}")
    emb = np.frombuffer(blob, dtype=dt, count=height * width * dim, offset=off)
    return PatchGrid(height=height, width=width, dim=dim,
                     embeddings=emb.reshape(height * width, dim).astype(dt.newbyteorder("=")))


def format_stats_block(stats: TokenStats) -> str:
    areas = ",".join(str(int(a)) for a in stats.areas)
    return (f"token_count={stats.token_count}\n"
            f"compression={stats.compression!r}\n"
            f"areas={areas}\n")


def save_tokens(path, seq: TokenSequence):
    """Write tokens: magic 'SVPT', M, d', dtype, payload, then a stats block."""
    values = seq.values
    code = _dtype_code(values)
    with open(path, "wb") as f:
        f.write(b"SVPT")
        f.write(struct.pack("<IIB", values.shape[0], values.shape[1], code))
        f.write(np.ascontiguousarray(values, dtype=_CODE_DTYPE[code]).tobytes())
        f.write(format_stats_block(seq.stats).encode("ascii"))


def load_tokens(path) -> tuple[np.ndarray, TokenStats]:
    with open(path, "rb") as f:
        blob = f.read()
    if blob[:4] != b"SVPT":
        raise FormatError("magic", "not an SVPT file")
    m, dprime, code = struct.unpack_from("<IIB", blob, 4)
    if code not in _CODE_DTYPE:
        raise FormatError("dtype", f"unknown dtype code {code}")
    dt = _CODE_DTYPE[code]
    off = 4 + struct.calcsize("<IIB")
    need = m * dprime * dt.itemsize
    if len(blob) < off + need:
        raise FormatError("payload", "truncated token payload")
    values = np.frombuffer(blob, dtype=dt, count=m * dprime, offset=off)
    values = values.reshape(m, dprime).astype(dt.newbyteorder("="))
    text = blob[off + need:].decode("ascii")
    fields = {}
    for line in text.strip().splitlines():
        if "=" not in line:
            raise FormatError("stats", f"expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        fields[k] = v
    for key in ("token_count", "compression", "areas"):
        if key not in fields:
            raise FormatError(key, "missing from stats block")
    areas = np.array([int(a) for a in fields["areas"].split(",") if a != ""])
    stats = TokenStats(token_count=int(fields["token_count"]),
                       reference_count=0, compression=float(fields["compression"]),
                       areas=areas)
    # reference count is implied by count and compression
    if stats.compression < 1.0:
        stats.reference_count = int(round(stats.token_count / (1.0 - stats.compression)))
    return values, stats


def save_params(path, store: ParamStore, meta: dict[str, str] | None = None):
    """Write a parameter store: text header, 'payload' sentinel, raw arrays."""
    lines = ["svproj-params 1"]
    for k, v in sorted((meta or {}).items()):
        if any(ch in k or ch in str(v) for ch in "\n"):
            raise FormatError("meta", "newlines not allowed in meta entries")
        lines.append(f"meta {k} {v}")
    payloads = []
    for name in store.names():
        t = store[name]
        code = _dtype_code(t.value)
        shape = ",".join(str(s) for s in t.value.shape) or "scalar"
        lines.append(f"entry {name} {code} {int(store.is_trainable(name))} {shape}")
        payloads.append(np.ascontiguousarray(t.value, dtype=_CODE_DTYPE[code]).tobytes())
    with open(path, "wb") as f:
        f.write(("\n".join(lines) + "\npayload\n").encode("ascii"))
        for p in payloads:
            f.write(p)


def load_params(path) -> tuple[ParamStore, dict[str, str]]:
    with open(path, "rb") as f:
        blob = f.read()
    sentinel = b"\npayload\n"
    cut = blob.find(sentinel)
    if cut < 0:
        raise FormatError("payload", "missing payload sentinel")
    header = blob[:cut].decode("ascii").splitlines()
    body = blob[cut + len(sentinel):]
    if not header or header[0] != "svproj-params 1":
        raise FormatError("magic", "not an svproj parameter file")
    store = ParamStore()
    meta: dict[str, str] = {}
    off = 0
    for line in header[1:]:
        kind, rest = line.split(" ", 1)
        if kind == "meta":
            k, v = rest.split(" ", 1)
            meta[k] = v
        elif kind == "entry":
            try:
                name, code_s, trainable_s, shape_s = rest.rsplit(" ", 3)
                code = int(code_s)
                dt = _CODE_DTYPE[code]
                shape = () if shape_s == "scalar" else \
                    tuple(int(s) for s in shape_s.split(","))
            except (ValueError, KeyError) as e:
                raise FormatError("entry", f"{rest!r}: {e}") from e
            n = int(np.prod(shape)) if shape else 1
            nbytes = n * dt.itemsize
            if off + nbytes > len(body):
                raise FormatError("payload", f"truncated payload at entry {name}")
            arr = np.frombuffer(body, dtype=dt, count=n, offset=off).reshape(shape)
            store.add(name, arr.astype(dt.newbyteorder("=")),
                      trainable=bool(int(trainable_s)))
            off += nbytes
        else:
            raise FormatError("header", f"unknown record kind {kind!r}")
    if off != len(body):
        raise FormatError("payload", "trailing bytes after last entry")
    return store, meta


def read_kv_config(path) -> dict[str, str]:
    """Parse 'key=value' lines; '#' starts a comment, blank lines are skipped."""
    out: dict[str, str] = {}
    with open(path, "r", encoding="ascii") as f:
        for i, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise FormatError("config", f"line {i}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip()] = v.strip()
    return out
