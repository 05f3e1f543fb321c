"""Serialization: flat binary buffers with sidecar text headers, checkpoint
bundles, flat key=value config files, and 8-bit PPM/PGM for eyeballing.

Array files are a raw little-endian buffer at ``<name>`` plus a
``<name>.hdr`` sidecar declaring dtype, shape and kind (image, deformation,
mask or svf). Checkpoints pack many named float64 arrays into one buffer
described by a text manifest (name, dtype, shape, byte offset) next to a
JSON blob for non-array state.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

KINDS = ("image", "deformation", "mask", "svf", "tensor")

_DTYPES = {"float64": "<f8", "float32": "<f4", "uint8": "|u1"}


def write_array(path, arr: np.ndarray, kind: str):
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}")
    path = Path(path)
    arr = np.asarray(arr)
    name = {np.dtype(np.float64): "float64", np.dtype(np.float32): "float32",
            np.dtype(np.uint8): "uint8", np.dtype(bool): "uint8"}.get(arr.dtype)
    if name is None:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    if arr.dtype == bool:
        arr = arr.astype(np.uint8)
    buf = np.ascontiguousarray(arr.astype(_DTYPES[name]))
    path.write_bytes(buf.tobytes())
    hdr = f"dtype={name}\nshape={' '.join(str(s) for s in arr.shape)}\nkind={kind}\n"
    Path(str(path) + ".hdr").write_text(hdr)


def read_array(path):
    path = Path(path)
    hdr = {}
    for line in Path(str(path) + ".hdr").read_text().splitlines():
        if line.strip():
            k, v = line.split("=", 1)
            hdr[k.strip()] = v.strip()
    shape = tuple(int(s) for s in hdr["shape"].split()) if hdr["shape"] else ()
    arr = np.frombuffer(path.read_bytes(), dtype=_DTYPES[hdr["dtype"]]).reshape(shape)
    return np.array(arr), hdr["kind"]


# -- checkpoints ------------------------------------------------------------------


def save_checkpoint(stem, named_arrays, meta: dict):
    """Write ``<stem>.bin`` / ``<stem>.manifest`` / ``<stem>.json``.

    ``named_arrays`` is an iterable of (name, float64 ndarray); the manifest
    records byte offsets so single entries can be mapped back losslessly.
    """
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    lines = []
    offset = 0
    with open(f"{stem}.bin", "wb") as fh:
        for name, arr in named_arrays:
            arr = np.ascontiguousarray(np.asarray(arr, dtype=np.float64))
            fh.write(arr.astype("<f8").tobytes())
            shape = " ".join(str(s) for s in arr.shape)
            lines.append(f"{name}\tfloat64\t{shape}\t{offset}")
            offset += arr.nbytes
    Path(f"{stem}.manifest").write_text("\n".join(lines) + "\n")
    Path(f"{stem}.json").write_text(json.dumps(meta, indent=1, sort_keys=True))


def load_checkpoint(stem):
    stem = Path(stem)
    raw = Path(f"{stem}.bin").read_bytes()
    arrays = {}
    for line in Path(f"{stem}.manifest").read_text().splitlines():
        if not line.strip():
            continue
        name, dtype, shape_s, offset_s = line.split("\t")
        shape = tuple(int(s) for s in shape_s.split()) if shape_s else ()
        count = int(np.prod(shape)) if shape else 1
        start = int(offset_s)
        arr = np.frombuffer(raw, dtype=_DTYPES[dtype], count=count, offset=start)
        arrays[name] = np.array(arr).reshape(shape)
    meta = json.loads(Path(f"{stem}.json").read_text())
    return arrays, meta


# -- flat key=value config ------------------------------------------------------------


def parse_kv(text: str) -> dict:
    out = {}
    for ln, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"config line {ln}: expected key=value, got {line!r}")
        k, v = line.split("=", 1)
        out[k.strip()] = v.strip()
    return out


def read_config(path) -> dict:
    return parse_kv(Path(path).read_text())


def write_config(path, values: dict):
    lines = [f"{k} = {values[k]}" for k in values]
    Path(path).write_text("\n".join(lines) + "\n")


# -- portable 8-bit images -------------------------------------------------------------


def write_pnm(path, arr: np.ndarray):
    """(3,H,W) -> binary PPM, (H,W) or (1,H,W) -> binary PGM; values clipped
    to [0, 255]."""
    arr = np.asarray(arr)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    data = np.clip(np.round(arr), 0, 255).astype(np.uint8)
    if data.ndim == 2:
        magic, h, w = b"P5", *data.shape
        body = data.tobytes()
    elif data.ndim == 3 and data.shape[0] == 3:
        magic, h, w = b"P6", data.shape[1], data.shape[2]
        body = data.transpose(1, 2, 0).tobytes()
    else:
        raise ValueError(f"cannot write shape {arr.shape} as PPM/PGM")
    with open(path, "wb") as fh:
        fh.write(magic + f"\n{w} {h}\n255\n".encode())
        fh.write(body)


def read_pnm(path) -> np.ndarray:
    """Binary PPM/PGM -> float64 array, (3,H,W) or (1,H,W)."""
    raw = Path(path).read_bytes()
    if not raw[:2] in (b"P5", b"P6"):
        raise ValueError("only binary PGM (P5) / PPM (P6) supported")
    fields, pos = [], 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while raw[pos:pos + 1] not in (b"\n", b""):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        fields.append(int(raw[start:pos]))
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise ValueError("only 8-bit PPM/PGM supported")
    body = np.frombuffer(raw, dtype=np.uint8, offset=pos)
    if raw[:2] == b"P5":
        return body[: h * w].reshape(1, h, w).astype(np.float64)
    return body[: h * w * 3].reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64)
