"""Coarse-to-fine joint estimation of forward and backward displacement by
direct minimisation of the total loss."""

from dataclasses import dataclass, field
import logging

import numpy as np
from scipy import ndimage

from .errors import InvalidConfigError, InvalidInputError, NumericalError
from .loss import LossWeights, loss_and_gradient, total_loss
from .signal import MultiChannelFrame, build_channels
from .warp import BiDisplacement, DisplacementField, interpolate_linear

log = logging.getLogger(__name__)

MIN_LEVEL_SIZE = 8

__all__ = ["BiDisplacement", "SolverConfig", "StepRule", "EstimateResult",
           "downsample_frame", "upsample_field", "pyramid_factors", "estimate"]


@dataclass(frozen=True)
class StepRule:
    """Adam-style per-parameter steps, in samples, with backtracking.

    The raw gradient is first smoothed with a Gaussian of ``gradient_sigma``
    samples applied twice (a positive semi-definite operator, so the result
    is still a descent direction); per-sample sign-like steps otherwise
    create derivative noise that the alpha=0.2 penalty punishes immediately.
    A trial step that raises the loss is rejected and the step length
    multiplied by ``shrink``; accepted steps let it recover by ``grow`` up to
    ``base_step``.

    The zero start puts every warped coordinate on a grid node, where the
    interpolant has a kink; the solver takes the two-cell mean slope there,
    since the one-sided slope pushes every field the same way.
    """

    base_step: float = 0.05
    gradient_sigma: float = 2.0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-12
    shrink: float = 0.5
    grow: float = 1.2
    max_backtracks: int = 20


@dataclass(frozen=True)
class SolverConfig:
    pyramid_levels: int = 4
    iterations_per_level: int = 300
    step_rule: StepRule = field(default_factory=StepRule)
    convergence_tol: float = 1e-6
    convergence_window: int = 20
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    coarse_channels: tuple = (1,)

    def __post_init__(self):
        if self.pyramid_levels < 1:
            raise InvalidConfigError("pyramid_levels must be >= 1")
        if self.iterations_per_level < 1:
            raise InvalidConfigError("iterations_per_level must be >= 1")
        if self.convergence_window < 1 or self.convergence_tol < 0:
            raise InvalidConfigError("convergence window/tolerance must be positive")
        if self.step_rule.base_step <= 0 or not 0 < self.step_rule.shrink < 1:
            raise InvalidConfigError("base_step must be > 0 and shrink in (0, 1)")
        if self.step_rule.gradient_sigma < 0:
            raise InvalidConfigError("gradient_sigma must be non-negative")
        if not self.coarse_channels or not set(self.coarse_channels) <= {0, 1, 2}:
            raise InvalidConfigError("coarse_channels must be a non-empty subset of {0, 1, 2}")


@dataclass
class EstimateResult:
    """Full-resolution fields, the per-iteration trace and convergence flags."""

    fields: BiDisplacement
    trace: list
    converged_levels: list
    level_shapes: list

    @property
    def converged(self):
        # Only the finest level decides; coarse levels are warm starts.
        return bool(self.converged_levels and self.converged_levels[-1])

    TRACE_HEADER = "iteration,level,data,smoothness,consistency,total"

    def trace_csv(self):
        rows = [self.TRACE_HEADER]
        for t in self.trace:
            rows.append("{},{},{!r},{!r},{!r},{!r}".format(
                t["iteration"], t["level"], t["data"], t["smoothness"],
                t["consistency"], t["total"]))
        return "\n".join(rows) + "\n"


def downsample_frame(frame, factor=2):
    """Box-average each channel over ``factor`` blocks.

    ``factor`` is an int or an ``(axial, lateral)`` pair of 1s and 2s; odd
    extents lose their last row/column.  Spacing metadata is scaled to match.
    """
    fa, fl = (factor, factor) if np.isscalar(factor) else factor
    channels = np.asarray(frame.channels)
    n_ch, rows, cols = channels.shape
    new_rows, new_cols = rows // fa, cols // fl
    if new_rows < MIN_LEVEL_SIZE or new_cols < MIN_LEVEL_SIZE:
        raise InvalidConfigError(
            f"downsampling {rows}x{cols} by {fa}x{fl} gives {new_rows}x{new_cols}, "
            f"below the {MIN_LEVEL_SIZE}x{MIN_LEVEL_SIZE} minimum")
    c = channels[:, :new_rows * fa, :new_cols * fl]
    c = c.reshape(n_ch, new_rows, fa, new_cols, fl).mean(axis=(2, 4))
    spacing = (frame.spacing[0] * fa, frame.spacing[1] * fl)
    return MultiChannelFrame(c, spacing=spacing)


def upsample_field(field, target_shape, factor=2):
    """Bilinearly resample a coarse field onto the finer grid.

    Fine sample ``i`` sits at coarse coordinate ``(i - (f - 1) / 2) / f``
    (block centres); values are multiplied by ``f`` per axis so they are
    expressed in fine-grid samples.
    """
    fa, fl = (factor, factor) if np.isscalar(factor) else factor
    rows, cols = target_shape
    ya = ((np.arange(rows) - 0.5 * (fa - 1)) / fa)[:, None] * np.ones((1, cols))
    yl = ((np.arange(cols) - 0.5 * (fl - 1)) / fl)[None, :] * np.ones((rows, 1))
    w_a = fa * interpolate_linear(field.w_a, ya, yl)
    w_l = fl * interpolate_linear(field.w_l, ya, yl)
    return DisplacementField(w_a, w_l)


def _downsample_field(field, factor):
    fa, fl = factor
    rows, cols = field.shape
    nr, nc = rows // fa, cols // fl

    def box(x):
        return x[:nr * fa, :nc * fl].reshape(nr, fa, nc, fl).mean(axis=(1, 3))

    return DisplacementField(box(field.w_a) / fa, box(field.w_l) / fl)


def pyramid_factors(shape, levels):
    """Per-level downsampling factors, halving only axes that stay >= 8.

    Narrow frames therefore keep downsampling axially after the lateral axis
    has bottomed out.
    """
    rows, cols = shape
    if rows < MIN_LEVEL_SIZE or cols < MIN_LEVEL_SIZE:
        raise InvalidConfigError(f"frame {rows}x{cols} is below {MIN_LEVEL_SIZE}x{MIN_LEVEL_SIZE}")
    factors = []
    for _ in range(levels - 1):
        fa = 2 if rows // 2 >= MIN_LEVEL_SIZE else 1
        fl = 2 if cols // 2 >= MIN_LEVEL_SIZE else 1
        if fa == fl == 1:
            raise InvalidConfigError(
                f"cannot build {levels} pyramid levels: coarsest level {rows}x{cols} "
                f"cannot be halved without dropping below {MIN_LEVEL_SIZE}x{MIN_LEVEL_SIZE}")
        rows, cols = rows // fa, cols // fl
        factors.append((fa, fl))
    return factors


def _project(x):
    # Keep displaced coordinates inside the frame so the validity mask, and
    # with it the loss, cannot jump between iterates.
    _, rows, cols = x.shape
    a = np.arange(rows, dtype=np.float64)[:, None]
    l = np.arange(cols, dtype=np.float64)[None, :]
    out = x.copy()
    for k in (0, 2):
        out[k] = np.clip(x[k], -a, rows - 1 - a)
    for k in (1, 3):
        out[k] = np.clip(x[k], -l, cols - 1 - l)
    return out


def _smooth(g, sigma):
    if sigma == 0:
        return g
    out = np.empty_like(g)
    for k in range(g.shape[0]):
        once = ndimage.gaussian_filter(g[k], sigma, mode="constant")
        out[k] = ndimage.gaussian_filter(once, sigma, mode="constant")
    return out


def _optimize_level(i1, i2, fields, config, level, trace):
    rule = config.step_rule
    weights = config.weights
    x = _project(fields.stack())
    fields = BiDisplacement.from_stack(x)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    step = rule.base_step
    breakdown, grad = loss_and_gradient(i1, i2, fields, weights, node_slope="mean")
    history = [breakdown.total]
    _record(trace, 0, level, breakdown)
    converged = False
    for it in range(1, config.iterations_per_level + 1):
        if not np.all(np.isfinite(grad.total)):
            raise NumericalError(f"non-finite gradient at level {level}, iteration {it}",
                                 level=level, iteration=it)
        g = _smooth(grad.total, rule.gradient_sigma)
        m = rule.beta1 * m + (1 - rule.beta1) * g
        v = rule.beta2 * v + (1 - rule.beta2) * g * g
        m_hat = m / (1 - rule.beta1 ** it)
        v_hat = v / (1 - rule.beta2 ** it)
        direction = m_hat / (np.sqrt(v_hat) + rule.eps)
        accepted = False
        for _ in range(rule.max_backtracks + 1):
            trial = BiDisplacement.from_stack(_project(x - step * direction))
            try:
                candidate = total_loss(i1, i2, trial, weights)
            except NumericalError as exc:
                raise NumericalError(f"{exc} at level {level}, iteration {it}",
                                     level=level, iteration=it, **exc.diagnostics) from exc
            if candidate.total <= breakdown.total:
                accepted = True
                break
            step *= rule.shrink
        if not accepted:
            # No descent even for a tiny step: treat the level as converged.
            converged = True
            break
        x = trial.stack()
        fields = trial
        step = min(step * rule.grow, rule.base_step)
        breakdown, grad = loss_and_gradient(i1, i2, fields, weights, node_slope="mean")
        history.append(breakdown.total)
        _record(trace, it, level, breakdown)
        w = config.convergence_window
        if len(history) > w:
            ref = history[-1 - w]
            if ref - history[-1] <= config.convergence_tol * abs(ref):
                converged = True
                break
    return fields, converged


def _record(trace, iteration, level, breakdown):
    trace.append({"iteration": iteration, "level": level, "data": breakdown.data,
                  "smoothness": breakdown.smoothness, "consistency": breakdown.consistency,
                  "total": breakdown.total})


def estimate(i1, i2, config=SolverConfig(), initial=None):
    """Estimate forward and backward displacement between two RF frames.

    Parameters
    ----------
    i1, i2 : RfFrame
        Pre- and post-deformation frames with identical shape and metadata.
    config : SolverConfig
    initial : BiDisplacement, optional
        Full-resolution starting fields (e.g. from a previous frame pair);
        zero when omitted.

    Returns
    -------
    EstimateResult
    """
    if i1.shape != i2.shape:
        raise InvalidInputError(f"frame shapes differ: {i1.shape} vs {i2.shape}")
    if i1.metadata() != i2.metadata():
        raise InvalidInputError("frames carry different acquisition metadata")
    factors = pyramid_factors(i1.shape, config.pyramid_levels)
    frames = [(build_channels(i1), build_channels(i2))]
    for f in factors:
        c1, c2 = frames[-1]
        frames.append((downsample_frame(c1, f), downsample_frame(c2, f)))
    if not factors:
        # Without a pyramid the zero start may sit half a carrier period from
        # the optimum; a same-resolution coarse-channel stage comes first.
        factors = [(1, 1)]
        frames.append(frames[0])
    shapes = [c1.shape for c1, _ in frames]
    # The box pyramid folds the RF carrier onto Nyquist after one level and
    # erases it after two; coarse levels match on the envelope alone.
    keep = list(config.coarse_channels)
    frames[1:] = [(MultiChannelFrame(c1.channels[keep], c1.spacing),
                   MultiChannelFrame(c2.channels[keep], c2.spacing)) for c1, c2 in frames[1:]]

    if initial is None:
        fields = BiDisplacement.zeros(shapes[-1])
    else:
        if initial.shape != i1.shape:
            raise InvalidInputError("initial fields must match the frame shape")
        fwd, bwd = initial.forward, initial.backward
        for f in factors:
            fwd, bwd = _downsample_field(fwd, f), _downsample_field(bwd, f)
        fields = BiDisplacement(fwd, bwd)

    trace, converged = [], []
    n_levels = len(frames)
    for k in range(n_levels - 1, -1, -1):
        level = n_levels - 1 - k  # 0 = coarsest
        c1, c2 = frames[k]
        fields, ok = _optimize_level(c1, c2, fields, config, level, trace)
        converged.append(ok)
        log.debug("level %d %s: loss %.6g after %d iterations (converged=%s)",
                  level, c1.shape, trace[-1]["total"], trace[-1]["iteration"], ok)
        if k > 0:
            f = factors[k - 1]
            target = frames[k - 1][0].shape
            fields = BiDisplacement(upsample_field(fields.forward, target, f),
                                    upsample_field(fields.backward, target, f))
    return EstimateResult(fields, trace, converged, shapes[::-1])
