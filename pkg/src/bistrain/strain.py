"""Least-squares strain estimation from displacement fields."""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse

from .errors import InvalidInputError

AXIAL = "axial"
LATERAL = "lateral"


@dataclass
class StrainField:
    values: np.ndarray
    window_len: int
    direction: str

    def __post_init__(self):
        if self.window_len < 2:
            raise InvalidInputError("window_len must be >= 2")
        if self.direction not in (AXIAL, LATERAL):
            raise InvalidInputError(f"direction must be {AXIAL!r} or {LATERAL!r}")
        if not np.all(np.isfinite(self.values)):
            raise InvalidInputError("strain values must be finite")


def window_bounds(n, window_len):
    """Inclusive ``(start, stop)`` of the fitting window at each index.

    The nominal window is centred (one extra sample ahead for even lengths);
    near the ends both sides are trimmed to the distance from the border,
    with a two-point window at the very first and last samples.
    """
    left_nom = (window_len - 1) // 2
    right_nom = window_len - 1 - left_nom
    idx = np.arange(n)
    room = np.minimum(idx, n - 1 - idx)
    left = np.minimum(left_nom, room)
    right = np.minimum(right_nom, room)
    start, stop = idx - left, idx + right
    single = start == stop
    start = np.where(single & (idx == n - 1), idx - 1, start)
    stop = np.where(single & (idx < n - 1), idx + 1, stop)
    return start, stop


@lru_cache(maxsize=64)
def slope_operator(n, window_len):
    """Sparse ``(n, n)`` matrix mapping a 1-D profile to its windowed LSQ slope."""
    if n < 2:
        raise InvalidInputError("need at least 2 samples to fit a slope")
    start, stop = window_bounds(n, window_len)
    rows, cols, vals = [], [], []
    for i, (s, e) in enumerate(zip(start, stop)):
        x = np.arange(s, e + 1, dtype=np.float64)
        xc = x - x.mean()
        k = xc / np.dot(xc, xc)
        rows.extend([i] * k.size)
        cols.extend(range(s, e + 1))
        vals.extend(k)
    return sparse.csr_matrix((vals, (rows, cols)), shape=(n, n))


def lsq_strain(component, window_len, direction=AXIAL):
    """Slope of a least-squares line fitted in a sliding 1-D window.

    Axial strain differentiates the axial displacement along depth (axis 0);
    lateral strain differentiates the lateral displacement along axis 1.
    """
    u = np.asarray(component, dtype=np.float64)
    if u.ndim != 2:
        raise InvalidInputError("displacement component must be a 2-D grid")
    if direction not in (AXIAL, LATERAL):
        raise InvalidInputError(f"direction must be {AXIAL!r} or {LATERAL!r}")
    axis = 0 if direction == AXIAL else 1
    n = u.shape[axis]
    window_len = int(window_len)
    if window_len < 2:
        raise InvalidInputError("window_len must be >= 2")
    if window_len > n:
        raise InvalidInputError(
            f"window_len {window_len} exceeds the {direction} extent {n}")
    op = slope_operator(n, window_len)
    values = op @ u if axis == 0 else (op @ u.T).T
    return StrainField(np.asarray(values), window_len, direction)
