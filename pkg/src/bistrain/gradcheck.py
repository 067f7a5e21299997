"""Finite-difference verification of the analytic loss gradient."""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .loss import LossWeights, loss_and_gradient
from .signal import MultiChannelFrame
from .warp import BiDisplacement, window_multiplicity

TERMS = ("data", "smoothness", "consistency", "total")
KINK_MARGIN = 1e-3
# Charbonnier floor for the check: at the default 1e-6 the alpha=0.2 penalty
# bends on a 1e-3 scale and h=1e-5 differences lose ~1e-4 to truncation.
GRADCHECK_EPSILON = 1e-4


@dataclass
class GradcheckReport:
    seed: int
    shape: tuple
    max_rel_error: dict

    def passed(self, tol=1e-4):
        return all(err < tol for err in self.max_rel_error.values())

    def format(self):
        lines = [f"gradcheck seed={self.seed} shape={self.shape[0]}x{self.shape[1]}"]
        for term in TERMS:
            lines.append(f"  {term:<12s} max_rel_error={self.max_rel_error[term]:.3e}")
        return "\n".join(lines)


def random_problem(seed, shape=(16, 12), displacement_scale=0.8):
    """Smooth-ish random frames and non-integer random fields."""
    rng = np.random.default_rng(seed)
    rows, cols = shape
    a = np.arange(rows)[:, None]
    l = np.arange(cols)[None, :]
    base = np.cos(0.9 * a + 0.3 * l) + 0.5 * np.sin(0.4 * a - 0.7 * l)
    i1 = np.stack([base + 0.3 * rng.standard_normal(shape) for _ in range(3)])
    i2 = np.stack([base + 0.3 * rng.standard_normal(shape) for _ in range(3)])
    fields = displacement_scale * rng.uniform(-1, 1, size=(4, rows, cols))
    # Keep displaced coordinates clear of integers: the interpolant has kinks
    # there and the validity mask switches on the frame edges.
    frac = fields - np.round(fields)
    fields = np.where(np.abs(frac) < KINK_MARGIN, fields + 2 * KINK_MARGIN, fields)
    return MultiChannelFrame(i1), MultiChannelFrame(i2), fields


def relative_error(analytic, numeric):
    """Worst grid of ``max|analytic - numeric| / max(|analytic|, |numeric|)``.

    Each of the four displacement grids is normalised by its own gradient
    scale, so a wrong stencil entry anywhere shows up as an O(1) error.
    """
    worst = 0.0
    for a, n in zip(analytic, numeric):
        scale = max(np.max(np.abs(a)), np.max(np.abs(n)))
        if scale == 0.0:
            continue
        worst = max(worst, float(np.max(np.abs(a - n)) / scale))
    return worst


def _d1(f, axis):
    f = np.moveaxis(f, axis, -1)
    out = np.empty_like(f)
    out[..., 1:-1] = 0.5 * (f[..., 2:] - f[..., :-2])
    out[..., 0] = f[..., 1] - f[..., 0]
    out[..., -1] = f[..., -1] - f[..., -2]
    return np.moveaxis(out, -1, axis)


def _d2(f, axis):
    f = np.moveaxis(f, axis, -1)
    inner = f[..., 2:] - 2.0 * f[..., 1:-1] + f[..., :-2]
    out = np.concatenate([inner[..., :1], inner, inner[..., -1:]], axis=-1)
    return np.moveaxis(out, -1, axis)


def _phi(x, alpha, eps):
    return np.mean((x * x + eps) ** alpha, axis=(-2, -1))


def _batched_data(fixed, moving, w_a, w_l, weights):
    batch, rows, cols = w_a.shape
    ya = np.arange(rows)[:, None] + w_a
    yl = np.arange(cols)[None, :] + w_l
    valid = (ya >= 0) & (ya <= rows - 1) & (yl >= 0) & (yl <= cols - 1)
    coords = np.stack([ya.ravel(), yl.ravel()])
    mult = window_multiplicity((rows, cols), weights.w) * valid
    count = mult.sum(axis=(-2, -1)) * fixed.shape[0]
    total = np.zeros(batch)
    for c in range(fixed.shape[0]):
        warped = ndimage.map_coordinates(moving[c], coords, order=1, mode="nearest")
        r = fixed[c] - warped.reshape(batch, rows, cols) * valid
        total += np.sum(mult * (r * r + weights.epsilon) ** weights.alpha_data, axis=(-2, -1))
    return total / count


def _batched_smoothness(w_a, w_l, weights):
    d = weights.derived
    alpha, eps = weights.alpha_reg, weights.epsilon
    strain = _d1(w_a, -2)
    strain = strain - strain.mean(axis=(-2, -1), keepdims=True)
    return (d["lambda11"] * _phi(strain, alpha, eps)
            + d["lambda12"] * _phi(_d1(w_a, -1), alpha, eps)
            + d["lambda21"] * _phi(_d1(w_l, -2), alpha, eps)
            + d["lambda22"] * _phi(_d1(w_l, -1), alpha, eps)
            + d["lambda31"] * _phi(_d2(w_a, -2), alpha, eps)
            + d["lambda32"] * _phi(_d1(_d1(w_a, -2), -1), alpha, eps)
            + d["lambda41"] * _phi(_d1(_d1(w_l, -2), -1), alpha, eps)
            + d["lambda42"] * _phi(_d2(w_l, -1), alpha, eps))


def batched_loss(i1, i2, stacks, weights):
    """Value-only loss for a batch of (4, rows, cols) field stacks.

    An independent re-implementation (slicing stencils, ``map_coordinates``
    interpolation) used as the finite-difference oracle.  Returns a dict of
    per-batch arrays keyed by term.
    """
    a = np.asarray(i1.channels)
    b = np.asarray(i2.channels)
    fa, fl, ba, bl = (stacks[:, k] for k in range(4))
    data = 0.5 * (_batched_data(a, b, fa, fl, weights) + _batched_data(b, a, ba, bl, weights))
    smooth = 0.5 * (_batched_smoothness(fa, fl, weights) + _batched_smoothness(ba, bl, weights))
    alpha, eps = weights.alpha_reg, weights.epsilon
    cons = (_phi(_d1(fa, -2) + _d1(ba, -2), alpha, eps)
            + weights.POISSON * weights.beta * _phi(_d1(fl, -1) + _d1(bl, -1), alpha, eps))
    total = data + weights.lam * smooth + weights.gamma * cons
    return {"data": data, "smoothness": smooth, "consistency": cons, "total": total}


def finite_difference(i1, i2, fields, weights, h=1e-5):
    """Central differences of every term w.r.t. every displacement sample."""
    n = fields.size
    eye = np.eye(n).reshape((n,) + fields.shape) * h
    plus = batched_loss(i1, i2, fields[None] + eye, weights)
    minus = batched_loss(i1, i2, fields[None] - eye, weights)
    return {term: ((plus[term] - minus[term]) / (2 * h)).reshape(fields.shape)
            for term in TERMS}


def run_gradcheck(seed=0, shape=(16, 12), weights=None, h=1e-5, perturb=0.0):
    """Compare analytic and central-difference gradients on a random instance.

    ``perturb`` adds a relative error to the analytic gradient; it exists so
    the failure path can be exercised.
    """
    weights = weights or LossWeights(lam=1.0, gamma=1.0, epsilon=GRADCHECK_EPSILON)
    i1, i2, fields = random_problem(seed, shape)
    _, grad = loss_and_gradient(i1, i2, BiDisplacement.from_stack(fields), weights)
    numeric = finite_difference(i1, i2, fields, weights, h)
    errors = {}
    for term in TERMS:
        analytic = getattr(grad, term) * (1.0 + perturb)
        errors[term] = relative_error(analytic, numeric[term])
    return GradcheckReport(seed, tuple(shape), errors)
