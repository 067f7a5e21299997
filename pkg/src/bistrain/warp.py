"""Bilinear warping, its adjoint with respect to the displacement, and the
windowed residuals consumed by the data loss."""

from dataclasses import dataclass, field as dc_field

import numpy as np

from .errors import InvalidInputError


@dataclass
class DisplacementField:
    """Axial and lateral displacement in samples, plus an in-frame mask.

    ``valid`` marks samples whose displaced coordinate lands inside the
    frame; it is derived from ``w_a``/``w_l`` when not given.
    """

    w_a: np.ndarray
    w_l: np.ndarray
    valid: np.ndarray = dc_field(default=None)

    def __post_init__(self):
        self.w_a = np.asarray(self.w_a, dtype=np.float64)
        self.w_l = np.asarray(self.w_l, dtype=np.float64)
        if self.w_a.ndim != 2 or self.w_a.shape != self.w_l.shape:
            raise InvalidInputError(
                f"w_a {self.w_a.shape} and w_l {self.w_l.shape} must be equal 2-D shapes")
        if not (np.all(np.isfinite(self.w_a)) and np.all(np.isfinite(self.w_l))):
            raise InvalidInputError("displacement field contains non-finite values")
        if self.valid is None:
            self.valid = valid_mask(self.w_a, self.w_l)
        else:
            self.valid = np.asarray(self.valid, dtype=bool)
            if self.valid.shape != self.w_a.shape:
                raise InvalidInputError("validity mask shape differs from field shape")

    @classmethod
    def zeros(cls, shape):
        return cls(np.zeros(shape), np.zeros(shape))

    @property
    def shape(self):
        return self.w_a.shape

    def copy(self):
        return DisplacementField(self.w_a.copy(), self.w_l.copy(), self.valid.copy())


def _coords(shape, w_a, w_l):
    rows, cols = shape
    ya = np.arange(rows, dtype=np.float64)[:, None] + w_a
    yl = np.arange(cols, dtype=np.float64)[None, :] + w_l
    return ya, yl


def valid_mask(w_a, w_l):
    rows, cols = w_a.shape
    ya, yl = _coords(w_a.shape, w_a, w_l)
    return (ya >= 0) & (ya <= rows - 1) & (yl >= 0) & (yl <= cols - 1)


def _cell(y, n):
    # Left-cell convention: an integer coordinate k belongs to cell [k-1, k].
    i0 = np.clip(np.ceil(y) - 1, 0, n - 2).astype(np.intp)
    return i0, y - i0


def sample_bilinear(image, ya, yl, derivatives=False, node_slope="left"):
    """Sample ``image`` (rows, cols) or (C, rows, cols) at coordinates.

    Returns ``(values, valid)`` or, with ``derivatives``, ``(values, d_a,
    d_l, valid)`` where ``d_a``/``d_l`` are the exact piecewise-constant
    derivatives of the interpolant.  Out-of-frame samples are zero.

    On a grid node the interpolant has a kink.  ``node_slope="left"`` takes
    the slope of the cell below the node; ``"mean"`` averages the two
    neighbouring cells, which removes the sign bias of a one-sided choice.
    """
    if node_slope not in ("left", "mean"):
        raise InvalidInputError("node_slope must be 'left' or 'mean'")
    rows, cols = image.shape[-2:]
    if rows < 2 or cols < 2:
        raise InvalidInputError("bilinear sampling needs at least 2x2 samples")
    valid = (ya >= 0) & (ya <= rows - 1) & (yl >= 0) & (yl <= cols - 1)
    a0, fa = _cell(ya, rows)
    l0, fl = _cell(yl, cols)
    i00 = image[..., a0, l0]
    i10 = image[..., a0 + 1, l0]
    i01 = image[..., a0, l0 + 1]
    i11 = image[..., a0 + 1, l0 + 1]
    # Weighted form is exact at fractions 0 and 1, so integer warps copy samples.
    top = (1.0 - fl) * i00 + fl * i01
    bottom = (1.0 - fl) * i10 + fl * i11
    values = np.where(valid, (1.0 - fa) * top + fa * bottom, 0.0)
    if not derivatives:
        return values, valid
    d_a = bottom - top
    d_l = (i01 - i00) + fa * ((i11 - i10) - (i01 - i00))
    mean = node_slope == "mean"
    node_a = (fa == 1.0) & (a0 < rows - 2) if mean else None
    if mean and np.any(node_a):
        a2 = np.minimum(a0 + 2, rows - 1)
        i20 = image[..., a2, l0]
        i21 = image[..., a2, l0 + 1]
        beyond = i20 + fl * (i21 - i20)
        d_a = np.where(node_a, 0.5 * (d_a + beyond - bottom), d_a)
    node_l = (fl == 1.0) & (l0 < cols - 2) if mean else None
    if mean and np.any(node_l):
        l2 = np.minimum(l0 + 2, cols - 1)
        i02 = image[..., a0, l2]
        i12 = image[..., a0 + 1, l2]
        right = (i02 - i01) + fa * ((i12 - i11) - (i02 - i01))
        d_l = np.where(node_l, 0.5 * (d_l + right), d_l)
    d_a = np.where(valid, d_a, 0.0)
    d_l = np.where(valid, d_l, 0.0)
    return values, d_a, d_l, valid


def _check_shapes(image, field):
    if image.shape[-2:] != field.shape:
        raise InvalidInputError(
            f"image shape {image.shape[-2:]} does not match field shape {field.shape}")


def warp_image(image, field):
    """Resample ``image`` at ``(a + w_a, l + w_l)``.

    Works on single grids and on channel stacks ``(C, rows, cols)``.  Returns
    the warped image and the validity mask; invalid samples are zero-filled.
    """
    image = np.asarray(image, dtype=np.float64)
    _check_shapes(image, field)
    ya, yl = _coords(field.shape, field.w_a, field.w_l)
    return sample_bilinear(image, ya, yl)


def warp_gradient(image, field, upstream, node_slope="left"):
    """Gradient of ``sum(upstream * warp_image(image, field))`` w.r.t. the field.

    For channel stacks, ``upstream`` has the same (C, rows, cols) shape and
    contributions are summed over channels.  Returns ``(g_a, g_l)``.
    """
    image = np.asarray(image, dtype=np.float64)
    upstream = np.asarray(upstream, dtype=np.float64)
    _check_shapes(image, field)
    if upstream.shape != image.shape:
        raise InvalidInputError(
            f"upstream shape {upstream.shape} does not match image shape {image.shape}")
    ya, yl = _coords(field.shape, field.w_a, field.w_l)
    _, d_a, d_l, _ = sample_bilinear(image, ya, yl, derivatives=True, node_slope=node_slope)
    g_a = upstream * d_a
    g_l = upstream * d_l
    if image.ndim == 3:
        g_a, g_l = g_a.sum(axis=0), g_l.sum(axis=0)
    return g_a, g_l


@dataclass
class WindowedResidual:
    """Residuals of every sample's w x w neighbourhood.

    ``values`` and ``valid`` have shape (C, rows, cols, w*w); element
    ``[c, a, l, k]`` is the difference at the k-th neighbour (row-major
    offsets) of sample ``(a, l)`` in channel ``c``.
    """

    values: np.ndarray
    valid: np.ndarray
    w: int

    def flat(self):
        return self.values[self.valid]


def window_multiplicity(shape, w):
    """Number of in-frame w x w windows covering each sample."""
    if w < 1 or w % 2 == 0:
        raise InvalidInputError(f"window size must be a positive odd integer, got {w}")
    r = w // 2

    def axis_count(n):
        idx = np.arange(n)
        return np.minimum(idx, r) + np.minimum(n - 1 - idx, r) + 1

    rows, cols = shape
    return np.outer(axis_count(rows), axis_count(cols)).astype(np.float64)


def windowed_data_residual(i1, i2_warped, w=3, valid=None):
    """Gather ``i1 - i2_warped`` over a w x w window around every sample.

    Neighbours outside the frame, or where ``valid`` (the warp mask) is
    false, are flagged invalid; border windows therefore shrink.
    """
    a = np.asarray(getattr(i1, "channels", i1), dtype=np.float64)
    b = np.asarray(getattr(i2_warped, "channels", i2_warped), dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"frame shapes differ: {a.shape} vs {b.shape}")
    if w < 1 or w % 2 == 0:
        raise InvalidInputError(f"window size must be a positive odd integer, got {w}")
    if a.ndim == 2:
        a, b = a[None], b[None]
    n_ch, rows, cols = a.shape
    mask = np.ones((rows, cols), bool) if valid is None else np.asarray(valid, bool)
    r = w // 2
    diff = np.pad(a - b, ((0, 0), (r, r), (r, r)))
    ok = np.pad(mask, r, constant_values=False)
    values = np.empty((n_ch, rows, cols, w * w))
    flags = np.empty((rows, cols, w * w), bool)
    k = 0
    for da in range(w):
        for dl in range(w):
            values[..., k] = diff[:, da:da + rows, dl:dl + cols]
            flags[..., k] = ok[da:da + rows, dl:dl + cols]
            k += 1
    flags = np.broadcast_to(flags, values.shape)
    return WindowedResidual(np.where(flags, values, 0.0), flags.copy(), w)


@dataclass
class BiDisplacement:
    """Forward (frame 1 -> 2) and backward (frame 2 -> 1) displacement."""

    forward: DisplacementField
    backward: DisplacementField

    def __post_init__(self):
        if self.forward.shape != self.backward.shape:
            raise InvalidInputError(
                f"forward {self.forward.shape} and backward {self.backward.shape} differ")

    @classmethod
    def zeros(cls, shape):
        return cls(DisplacementField.zeros(shape), DisplacementField.zeros(shape))

    @classmethod
    def from_stack(cls, stack):
        """Build from an array ordered (fwd_a, fwd_l, bwd_a, bwd_l)."""
        return cls(DisplacementField(stack[0], stack[1]), DisplacementField(stack[2], stack[3]))

    def stack(self):
        return np.stack([self.forward.w_a, self.forward.w_l,
                         self.backward.w_a, self.backward.w_l])

    @property
    def shape(self):
        return self.forward.shape

    def swapped(self):
        return BiDisplacement(self.backward, self.forward)


def interpolate_linear(grid, ya, yl):
    """Bilinear interpolation of ``grid`` that extrapolates linearly outside.

    Used for resampling smooth displacement fields, where zero-filling would
    be wrong.
    """
    rows, cols = grid.shape
    a0 = np.clip(np.floor(ya), 0, rows - 2).astype(np.intp)
    l0 = np.clip(np.floor(yl), 0, cols - 2).astype(np.intp)
    fa = ya - a0
    fl = yl - l0
    top = grid[a0, l0] + fl * (grid[a0, l0 + 1] - grid[a0, l0])
    bottom = grid[a0 + 1, l0] + fl * (grid[a0 + 1, l0 + 1] - grid[a0 + 1, l0])
    return top + fa * (bottom - top)
