"""EVGRID / CSV / PGM file formats.

EVGRID is an ASCII header line::

    EVGRID <rows> <cols> <fs> <fc> <c> <line_pitch>\\n

followed by ``rows * cols`` little-endian float64 samples in row-major order.
"""

import os

import numpy as np

from .errors import GridFormatError
from .signal import RfFrame

MAGIC = "EVGRID"
DEFAULT_META = {"fs": 40e6, "fc": 10e6, "c": 1540.0, "line_pitch": 3e-4}
_META_KEYS = ("fs", "fc", "c", "line_pitch")


def write_grid(path, values, meta=None):
    """Write a 2-D array as EVGRID; ``meta`` supplies fs, fc, c, line_pitch."""
    values = np.asarray(values, dtype="<f8")
    if values.ndim != 2:
        raise GridFormatError(f"EVGRID stores 2-D grids, got shape {values.shape}")
    meta = {**DEFAULT_META, **(meta or {})}
    header = "{} {} {} {} {} {} {}\n".format(
        MAGIC, values.shape[0], values.shape[1],
        *(repr(float(meta[k])) for k in _META_KEYS))
    with open(path, "wb") as fh:
        fh.write(header.encode("ascii"))
        fh.write(np.ascontiguousarray(values).tobytes())


def read_grid(path):
    """Read an EVGRID file, returning ``(values, meta)``."""
    with open(path, "rb") as fh:
        line = fh.readline(4096)
        payload = fh.read()
    try:
        fields = line.decode("ascii").split()
    except UnicodeDecodeError:
        raise GridFormatError(f"{path}: header is not ASCII") from None
    if len(fields) != 7 or fields[0] != MAGIC:
        raise GridFormatError(
            f"{path}: malformed header {line[:80]!r}; expected "
            f"'{MAGIC} <rows> <cols> <fs> <fc> <c> <line_pitch>'")
    try:
        rows, cols = int(fields[1]), int(fields[2])
        meta = dict(zip(_META_KEYS, map(float, fields[3:])))
    except ValueError:
        raise GridFormatError(f"{path}: non-numeric header field in {line[:80]!r}") from None
    if rows <= 0 or cols <= 0:
        raise GridFormatError(f"{path}: header declares empty grid {rows}x{cols}")
    expected = rows * cols * 8
    if len(payload) != expected:
        raise GridFormatError(
            f"{path}: header declares {rows}x{cols} ({expected} bytes) "
            f"but payload has {len(payload)} bytes")
    values = np.frombuffer(payload, dtype="<f8").reshape(rows, cols).astype(np.float64)
    return values, meta


def read_frame(path, **meta_overrides):
    """Load an RF frame from EVGRID or CSV (chosen by file extension).

    CSV files carry one row per axial sample and no metadata; acquisition
    parameters then come from ``meta_overrides`` or the defaults.
    """
    if os.path.splitext(str(path))[1].lower() == ".csv":
        try:
            values = np.loadtxt(path, delimiter=",", ndmin=2)
        except ValueError as exc:
            raise GridFormatError(f"{path}: {exc}") from None
        meta = dict(DEFAULT_META)
    else:
        values, meta = read_grid(path)
    meta.update(meta_overrides)
    return RfFrame(values, **meta)


def write_frame(path, frame):
    write_grid(path, frame.samples, frame.metadata())


def write_pgm(path, values):
    """Min-max normalised 8-bit binary PGM (P5) rendering of a grid."""
    values = np.asarray(values, dtype=np.float64)
    lo, hi = np.min(values), np.max(values)
    if hi > lo:
        scaled = np.round((values - lo) / (hi - lo) * 255.0)
    else:
        scaled = np.zeros_like(values)
    img = scaled.astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{img.shape[1]} {img.shape[0]}\n255\n".encode("ascii"))
        fh.write(img.tobytes())
