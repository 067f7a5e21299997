"""The unsupervised objective: windowed data term, weighted smoothness
regulariser and bi-directional strain consistency, with analytic gradients.

Gradients are ordered as a (4, rows, cols) stack: forward axial, forward
lateral, backward axial, backward lateral.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse

from .errors import DegenerateInputError, InvalidInputError, NumericalError
from .warp import sample_bilinear, warp_image, window_multiplicity, windowed_data_residual


@dataclass(frozen=True)
class LossWeights:
    """Weights of the total objective.

    Only ``lam`` (smoothness) and ``gamma`` (consistency) are meant to be
    tuned; the eight regulariser weights follow from ``beta``:
    lateral-derivative terms are scaled by ``beta``, lateral-displacement
    terms by the Poisson ratio 0.5 and second derivatives by 5.
    """

    alpha_data: float = 0.5
    alpha_reg: float = 0.2
    epsilon: float = 1e-6
    beta: float = 0.1
    lam: float = 0.03
    gamma: float = 0.05
    w: int = 3

    POISSON = 0.5
    SECOND_ORDER_GAIN = 5.0
    LAMBDA11 = 1.0

    def __post_init__(self):
        for name in ("alpha_data", "alpha_reg"):
            value = getattr(self, name)
            if not 0 < value <= 1:
                raise InvalidInputError(f"{name} must lie in (0, 1], got {value}")
        if not self.epsilon > 0:
            raise InvalidInputError("epsilon must be positive")
        if not 0 < self.beta < 1:
            raise InvalidInputError(f"beta must lie in (0, 1), got {self.beta}")
        if self.lam < 0 or self.gamma < 0:
            raise InvalidInputError("lam and gamma must be non-negative")
        if int(self.w) != self.w or self.w < 1 or self.w % 2 == 0:
            raise InvalidInputError(f"data window must be a positive odd integer, got {self.w}")

    @property
    def derived(self):
        l11 = self.LAMBDA11
        l31 = self.SECOND_ORDER_GAIN * l11
        return {
            "lambda11": l11,
            "lambda12": self.beta * l11,
            "lambda21": self.POISSON * l11,
            "lambda22": self.POISSON * self.beta * l11,
            "lambda31": l31,
            "lambda32": self.beta * l31,
            "lambda41": self.beta * l31,
            "lambda42": self.POISSON * self.beta * l31,
        }

    def replace(self, **changes):
        params = {k: getattr(self, k) for k in
                  ("alpha_data", "alpha_reg", "epsilon", "beta", "lam", "gamma", "w")}
        params.update(changes)
        return LossWeights(**params)


@dataclass(frozen=True)
class LossBreakdown:
    total: float
    data: float
    smoothness: float
    consistency: float

    CSV_HEADER = "total,data,smoothness,consistency"

    def csv_row(self):
        return ",".join(repr(float(v)) for v in
                        (self.total, self.data, self.smoothness, self.consistency))


@dataclass
class LossGradient:
    """Per-term gradients, each a (4, rows, cols) stack; ``total`` is weighted."""

    data: np.ndarray
    smoothness: np.ndarray
    consistency: np.ndarray
    total: np.ndarray


def charbonnier(values, alpha, epsilon):
    """Mean of ``(x**2 + epsilon) ** alpha`` over all elements (0 if empty)."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        return 0.0
    if not np.all(np.isfinite(x)):
        raise NumericalError("non-finite value passed to charbonnier")
    return float(np.mean((x * x + epsilon) ** alpha))


def charbonnier_grad(values, alpha, epsilon):
    """Elementwise gradient of :func:`charbonnier` (includes the 1/N)."""
    x = np.asarray(values, dtype=np.float64)
    if x.size == 0:
        return np.zeros_like(x)
    return 2.0 * alpha * x * (x * x + epsilon) ** (alpha - 1.0) / x.size


# --- difference stencils -------------------------------------------------

def _first_difference(n):
    if n < 2:
        raise InvalidInputError("first differences need at least 2 samples")
    d = sparse.lil_matrix((n, n))
    d[0, 0], d[0, 1] = -1.0, 1.0
    d[n - 1, n - 2], d[n - 1, n - 1] = -1.0, 1.0
    for i in range(1, n - 1):
        d[i, i - 1], d[i, i + 1] = -0.5, 0.5
    return d.tocsr()


def _second_difference(n):
    # Three-point stencil; border rows reuse the nearest interior stencil.
    if n < 3:
        raise InvalidInputError("second differences need at least 3 samples")
    d = sparse.lil_matrix((n, n))
    for i in range(n):
        c = min(max(i, 1), n - 2)
        d[i, c - 1], d[i, c], d[i, c + 1] = 1.0, -2.0, 1.0
    return d.tocsr()


@lru_cache(maxsize=64)
def _stencils(shape):
    rows, cols = shape
    return {"a1": _first_difference(rows), "a2": _second_difference(rows),
            "l1": _first_difference(cols), "l2": _second_difference(cols)}


def _along_a(op, f):
    return op @ f


def _along_l(op, f):
    return (op @ f.T).T


def derivative(f, kind):
    """Apply one of the stencils ``a``, ``l``, ``aa``, ``ll``, ``al``."""
    f = np.asarray(f, dtype=np.float64)
    s = _stencils(f.shape)
    if kind == "a":
        return _along_a(s["a1"], f)
    if kind == "l":
        return _along_l(s["l1"], f)
    if kind == "aa":
        return _along_a(s["a2"], f)
    if kind == "ll":
        return _along_l(s["l2"], f)
    if kind == "al":
        return _along_l(s["l1"], _along_a(s["a1"], f))
    raise ValueError(f"unknown derivative kind {kind!r}")


def derivative_adjoint(g, kind):
    g = np.asarray(g, dtype=np.float64)
    s = _stencils(g.shape)
    if kind == "a":
        return _along_a(s["a1"].T, g)
    if kind == "l":
        return _along_l(s["l1"].T, g)
    if kind == "aa":
        return _along_a(s["a2"].T, g)
    if kind == "ll":
        return _along_l(s["l2"].T, g)
    if kind == "al":
        return _along_a(s["a1"].T, _along_l(s["l1"].T, g))
    raise ValueError(f"unknown derivative kind {kind!r}")


# (component, stencil, weight key, subtract mean)
SMOOTHNESS_TERMS = (
    ("w_a", "a", "lambda11", True),
    ("w_a", "l", "lambda12", False),
    ("w_l", "a", "lambda21", False),
    ("w_l", "l", "lambda22", False),
    ("w_a", "aa", "lambda31", False),
    ("w_a", "al", "lambda32", False),
    ("w_l", "al", "lambda41", False),
    ("w_l", "ll", "lambda42", False),
)


def _check_field_size(field):
    rows, cols = field.shape
    if rows < 3 or cols < 3:
        raise InvalidInputError(f"smoothness needs a field of at least 3x3, got {rows}x{cols}")


def _smoothness(field, weights, gradient=False):
    _check_field_size(field)
    derived = weights.derived
    alpha, eps = weights.alpha_reg, weights.epsilon
    value = 0.0
    grads = {"w_a": np.zeros(field.shape), "w_l": np.zeros(field.shape)}
    for comp, kind, key, center in SMOOTHNESS_TERMS:
        lam = derived[key]
        d = derivative(getattr(field, comp), kind)
        if center:
            d = d - d.mean()
        value += lam * charbonnier(d, alpha, eps)
        if gradient:
            g = charbonnier_grad(d, alpha, eps)
            if center:
                g = g - g.mean()
            grads[comp] += lam * derivative_adjoint(g, kind)
    return value, grads


def smoothness_loss(field, weights=LossWeights()):
    """Weighted robust penalty on first and second displacement derivatives.

    The axial strain term is centred on its spatial mean, so a uniform
    compression costs nothing.
    """
    return _smoothness(field, weights)[0]


def _consistency(forward, backward, weights, gradient=False):
    if forward.shape != backward.shape:
        raise InvalidInputError(
            f"forward {forward.shape} and backward {backward.shape} shapes differ")
    alpha, eps = weights.alpha_reg, weights.epsilon
    lateral_weight = weights.POISSON * weights.beta
    s_a = derivative(forward.w_a, "a") + derivative(backward.w_a, "a")
    s_l = derivative(forward.w_l, "l") + derivative(backward.w_l, "l")
    value = charbonnier(s_a, alpha, eps) + lateral_weight * charbonnier(s_l, alpha, eps)
    if not gradient:
        return value, None
    g_a = derivative_adjoint(charbonnier_grad(s_a, alpha, eps), "a")
    g_l = lateral_weight * derivative_adjoint(charbonnier_grad(s_l, alpha, eps), "l")
    return value, (g_a, g_l)


def consistency_loss(forward, backward, weights=LossWeights()):
    """Penalty on the sum of forward and backward axial and lateral strains."""
    return _consistency(forward, backward, weights)[0]


def _channels(frame):
    c = np.asarray(getattr(frame, "channels", frame), dtype=np.float64)
    return c[None] if c.ndim == 2 else c


def data_loss(i1, i2, field, weights=LossWeights()):
    """Charbonnier penalty on ``i1 - warp(i2)`` over w x w windows, all channels."""
    a, b = _channels(i1), _channels(i2)
    if a.shape != b.shape or a.shape[1:] != field.shape:
        raise InvalidInputError(
            f"inconsistent shapes: i1 {a.shape}, i2 {b.shape}, field {field.shape}")
    warped, valid = warp_image(b, field)
    residual = windowed_data_residual(a, warped, weights.w, valid=valid)
    flat = residual.flat()
    if flat.size == 0:
        raise DegenerateInputError("every warped sample falls outside the frame")
    return charbonnier(flat, weights.alpha_data, weights.epsilon)


def _data(fixed, moving, field, weights, gradient=False, node_slope="left"):
    # Equivalent to data_loss: each sample is counted once per valid window
    # containing it, which turns the window gather into a per-sample weight.
    ya = np.arange(field.shape[0], dtype=np.float64)[:, None] + field.w_a
    yl = np.arange(field.shape[1], dtype=np.float64)[None, :] + field.w_l
    if gradient:
        warped, d_a, d_l, valid = sample_bilinear(moving, ya, yl, derivatives=True,
                                                   node_slope=node_slope)
    else:
        warped, valid = sample_bilinear(moving, ya, yl)
    mult = window_multiplicity(field.shape, weights.w) * valid
    count = mult.sum() * fixed.shape[0]
    if count == 0:
        raise DegenerateInputError("every warped sample falls outside the frame")
    r = fixed - warped
    alpha, eps = weights.alpha_data, weights.epsilon
    phi = (r * r + eps) ** alpha
    value = float(np.sum(mult * phi) / count)
    if not gradient:
        return value, None
    upstream = -(2.0 * alpha * r * (r * r + eps) ** (alpha - 1.0)) * mult / count
    return value, ((upstream * d_a).sum(axis=0), (upstream * d_l).sum(axis=0))


def _evaluate(i1, i2, bi, weights, gradient, node_slope="left"):
    a, b = _channels(i1), _channels(i2)
    if a.shape != b.shape or a.shape[1:] != bi.shape:
        raise InvalidInputError(
            f"inconsistent shapes: i1 {a.shape}, i2 {b.shape}, fields {bi.shape}")
    fwd, bwd = bi.forward, bi.backward
    d_f, gd_f = _data(a, b, fwd, weights, gradient, node_slope)
    d_b, gd_b = _data(b, a, bwd, weights, gradient, node_slope)
    s_f, gs_f = _smoothness(fwd, weights, gradient)
    s_b, gs_b = _smoothness(bwd, weights, gradient)
    cons, gc = _consistency(fwd, bwd, weights, gradient)
    data = 0.5 * (d_f + d_b)
    smooth = 0.5 * (s_f + s_b)
    total = data + weights.lam * smooth + weights.gamma * cons
    if not np.isfinite(total):
        raise NumericalError("total loss is not finite",
                             data=data, smoothness=smooth, consistency=cons)
    breakdown = LossBreakdown(total, data, smooth, cons)
    if not gradient:
        return breakdown, None
    g_data = 0.5 * np.stack([gd_f[0], gd_f[1], gd_b[0], gd_b[1]])
    g_smooth = 0.5 * np.stack([gs_f["w_a"], gs_f["w_l"], gs_b["w_a"], gs_b["w_l"]])
    g_cons = np.stack([gc[0], gc[1], gc[0], gc[1]])
    g_total = g_data + weights.lam * g_smooth + weights.gamma * g_cons
    return breakdown, LossGradient(g_data, g_smooth, g_cons, g_total)


def total_loss(i1, i2, bi, weights=LossWeights()):
    """``data + lam * smoothness + gamma * consistency`` as a :class:`LossBreakdown`.

    Data and smoothness terms are averaged over the forward and backward
    directions.
    """
    return _evaluate(i1, i2, bi, weights, gradient=False)[0]


def total_loss_gradient(i1, i2, bi, weights=LossWeights(), node_slope="left"):
    """Analytic gradient of :func:`total_loss` w.r.t. all four displacement grids.

    ``node_slope`` selects the warp derivative on grid nodes (see
    :func:`~bistrain.warp.sample_bilinear`).
    """
    return _evaluate(i1, i2, bi, weights, True, node_slope)[1]


def loss_and_gradient(i1, i2, bi, weights=LossWeights(), node_slope="left"):
    """``(LossBreakdown, LossGradient)`` in one pass."""
    return _evaluate(i1, i2, bi, weights, True, node_slope)


@dataclass
class ResidualStatistics:
    """Moments of the summed forward+backward strain residual."""

    mean: float
    variance: float
    standard_error: float
    n_draws: int
    sigma: float

    @property
    def model_variance(self):
        # Independent errors of equal variance add.
        return 2.0 * self.sigma ** 2


def simulate_consistency_residual(n_draws, sigma, mu, strain=0.01, seed=0):
    """Monte-Carlo model of the strain consistency residual.

    Forward strain is ``strain + N(mu, sigma^2)`` and backward strain is
    ``-strain + N(-mu, sigma^2)``, drawn independently; the statistics of
    their sum are returned.
    """
    if n_draws < 2 or sigma < 0:
        raise InvalidInputError("need n_draws >= 2 and sigma >= 0")
    rng = np.random.default_rng(seed)
    forward = strain + rng.normal(mu, sigma, n_draws)
    backward = -strain + rng.normal(-mu, sigma, n_draws)
    total = forward + backward
    var = float(total.var(ddof=1))
    return ResidualStatistics(float(total.mean()), var, float(np.sqrt(var / n_draws)),
                              int(n_draws), float(sigma))
