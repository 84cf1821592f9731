"""File formats: binary PGM (P5) for single-channel images and masks, and a
raw little-endian float32 volume with a JSON sidecar for anything else."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .geodesic import ImageGrid


class FormatError(ValueError):
    pass


def write_pgm(path, array, maxval: int = 255):
    """Write a 2D array as binary PGM. Float arrays are scaled from [0, 1]."""
    arr = np.asarray(array)
    if arr.ndim != 2:
        raise FormatError(f"PGM needs a 2D array, got {arr.shape}")
    if maxval < 1 or maxval > 255:
        raise FormatError("maxval must be in 1..255")
    if np.issubdtype(arr.dtype, np.floating):
        arr = np.clip(np.rint(arr * maxval), 0, maxval)
    data = arr.astype(np.uint8)
    header = f"P5\n{arr.shape[1]} {arr.shape[0]}\n{maxval}\n".encode()
    Path(path).write_bytes(header + data.tobytes())


def read_pgm(path_or_bytes):
    """Read a binary PGM; returns (float array in [0, 1], maxval)."""
    if isinstance(path_or_bytes, (bytes, bytearray)):
        raw = bytes(path_or_bytes)
    else:
        raw = Path(path_or_bytes).read_bytes()
    if not raw.startswith(b"P5"):
        raise FormatError("not a binary PGM (P5) file")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise FormatError("truncated PGM header")
        fields.append(raw[start:pos])
    pos += 1  # single whitespace byte after maxval
    try:
        width, height, maxval = (int(f) for f in fields)
    except ValueError as e:
        raise FormatError(f"bad PGM header fields {fields}") from e
    if maxval < 1 or maxval > 65535:
        raise FormatError(f"bad PGM maxval {maxval}")
    bytes_per = 1 if maxval < 256 else 2
    need = width * height * bytes_per
    body = raw[pos:pos + need]
    if len(body) != need:
        raise FormatError(f"PGM body has {len(body)} bytes, expected {need}")
    dtype = np.uint8 if bytes_per == 1 else ">u2"
    arr = np.frombuffer(body, dtype=dtype).reshape(height, width)
    return arr.astype(np.float64) / maxval, maxval


def write_f32(path_stem, grid: ImageGrid):
    """Write grid values as <stem>.f32 plus a <stem>.json sidecar."""
    stem = Path(path_stem)
    if stem.suffix == ".f32":
        stem = stem.with_suffix("")
    vals = np.ascontiguousarray(grid.values, dtype="<f4")
    stem.with_suffix(".f32").write_bytes(vals.tobytes())
    sidecar = {"extents": list(grid.extents), "spacing": list(grid.spacing),
               "channels": grid.channels}
    stem.with_suffix(".json").write_text(json.dumps(sidecar))


def read_f32(path_stem) -> ImageGrid:
    stem = Path(path_stem)
    if stem.suffix == ".f32":
        stem = stem.with_suffix("")
    sidecar = json.loads(stem.with_suffix(".json").read_text())
    extents = tuple(int(e) for e in sidecar["extents"])
    channels = int(sidecar["channels"])
    raw = stem.with_suffix(".f32").read_bytes()
    count = channels * int(np.prod(extents))
    if len(raw) != count * 4:
        raise FormatError(f"f32 blob has {len(raw)} bytes, expected {count * 4}")
    vals = np.frombuffer(raw, dtype="<f4").astype(np.float64)
    return ImageGrid(vals.reshape((channels,) + extents),
                     spacing=tuple(sidecar["spacing"]))


def load_image_any(path) -> ImageGrid:
    """Load a PGM or f32(+json) image by extension."""
    p = Path(path)
    if p.suffix == ".pgm":
        vals, _ = read_pgm(p)
        return ImageGrid(vals[None])
    if p.suffix in (".f32", ".json"):
        return read_f32(p)
    raise FormatError(f"unsupported image format: {p.suffix}")


def write_mask_pgm(path, mask):
    """Write a binary mask as 0/255 PGM."""
    write_pgm(path, (np.asarray(mask) > 0).astype(np.uint8) * 255, maxval=255)


def read_mask_pgm(path_or_bytes):
    vals, _ = read_pgm(path_or_bytes)
    return (vals > 0.5).astype(np.uint8)
