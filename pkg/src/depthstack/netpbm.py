"""Binary PGM/PPM reading and writing (P5/P6, 8- or 16-bit big-endian)."""

from __future__ import annotations

import os

import numpy as np


class FormatError(ValueError):
    pass


def _tokens(buf: bytes, count: int) -> tuple[list[bytes], int]:
    out = []
    pos = 0
    while len(out) < count:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated netpbm header")
        out.append(buf[start:pos])
    # exactly one whitespace byte separates the header from the raster
    return out, pos + 1


def read(path: str | os.PathLike) -> np.ndarray:
    """Return an (H, W) or (H, W, 3) unsigned integer array."""
    with open(path, "rb") as fh:
        buf = fh.read()
    magic, width, height, maxval = None, 0, 0, 0
    try:
        toks, pos = _tokens(buf, 4)
        magic = toks[0]
        width, height, maxval = (int(t) for t in toks[1:])
    except (ValueError, FormatError) as exc:
        raise FormatError(f"{path}: malformed netpbm header") from exc
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"{path}: unsupported netpbm magic {magic!r}")
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise FormatError(f"{path}: bad netpbm dimensions or maxval")
    chans = 3 if magic == b"P6" else 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    need = width * height * chans * dtype.itemsize
    payload = buf[pos:pos + need]
    if len(payload) != need:
        raise FormatError(f"{path}: truncated payload ({len(payload)} of {need} bytes)")
    arr = np.frombuffer(payload, dtype=dtype).astype(np.uint16 if dtype.itemsize == 2 else np.uint8)
    return arr.reshape((height, width, 3) if chans == 3 else (height, width))


def write(path: str | os.PathLike, arr: np.ndarray, maxval: int | None = None) -> None:
    arr = np.asarray(arr)
    if arr.ndim == 2:
        magic = b"P5"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        magic = b"P6"
    else:
        raise ValueError(f"cannot write array of shape {arr.shape} as netpbm")
    if maxval is None:
        maxval = 65535 if arr.dtype == np.uint16 else 255
    dtype = ">u2" if maxval > 255 else "u1"
    h, w = arr.shape[:2]
    header = b"%s\n%d %d\n%d\n" % (magic, w, h, maxval)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(arr.astype(dtype)).tobytes())


def to_gray8(values: np.ndarray, lo: float | None = None, hi: float | None = None) -> np.ndarray:
    """Linearly map values onto 0..255 for viewing."""
    values = np.asarray(values, dtype=np.float64)
    lo = float(values.min()) if lo is None else lo
    hi = float(values.max()) if hi is None else hi
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    return np.clip(np.round((values - lo) * scale), 0, 255).astype(np.uint8)
