"""Strain-image quality metrics: CNR, SR, patch sweeps, SSIM, Friedman test."""

from dataclasses import dataclass, field
import math

import numpy as np
from scipy import ndimage

from .errors import DegenerateInputError, InvalidInputError


@dataclass(frozen=True)
class Rect:
    a0: int
    l0: int
    height: int
    width: int

    def contains(self, shape):
        return (self.a0 >= 0 and self.l0 >= 0 and self.height > 0 and self.width > 0
                and self.a0 + self.height <= shape[0] and self.l0 + self.width <= shape[1])

    def overlaps(self, other):
        return not (self.a0 + self.height <= other.a0 or other.a0 + other.height <= self.a0
                    or self.l0 + self.width <= other.l0 or other.l0 + other.width <= self.l0)


@dataclass(frozen=True)
class MetricWindows:
    target: Rect
    background: Rect
    patch: int = 9
    stride: int = 4

    def validate(self, shape):
        for name in ("target", "background"):
            r = getattr(self, name)
            if not r.contains(shape):
                raise InvalidInputError(f"{name} window {r} lies outside the {shape} image")
            if self.patch > min(r.height, r.width):
                raise InvalidInputError(f"patch {self.patch} exceeds the {name} window {r}")
        if self.target.overlaps(self.background):
            raise InvalidInputError("target and background windows overlap")
        if self.patch < 1 or self.stride < 1:
            raise InvalidInputError("patch and stride must be >= 1")


@dataclass
class MetricReport:
    cnr_values: np.ndarray
    sr_values: np.ndarray
    cnr_mean: float
    cnr_std: float
    sr_mean: float
    sr_std: float
    n_degenerate: int = 0
    ssim: float = None
    friedman: tuple = None
    extras: dict = field(default_factory=dict)

    def summary(self):
        out = {"n_pairs": int(self.sr_values.size), "n_degenerate": self.n_degenerate,
               "cnr_mean": self.cnr_mean, "cnr_std": self.cnr_std,
               "sr_mean": self.sr_mean, "sr_std": self.sr_std,
               "sr_mean_percent": 100.0 * self.sr_mean}
        if self.ssim is not None:
            out["ssim"] = self.ssim
        if self.friedman is not None:
            stat, p, k, n = self.friedman
            out["friedman"] = {"statistic": stat, "p_value": p, "k": k, "n": n}
        out.update(self.extras)
        return out

    def csv(self):
        lines = ["pair,cnr,sr"]
        for i, (c, s) in enumerate(zip(self.cnr_values, self.sr_values)):
            lines.append(f"{i},{c!r},{s!r}")
        return "\n".join(lines) + "\n"


def cnr(target_mean, target_std, bg_mean, bg_std):
    """Contrast-to-noise ratio ``sqrt(2 (sb - st)^2 / (sigma_b^2 + sigma_t^2))``."""
    if target_std < 0 or bg_std < 0:
        raise InvalidInputError("standard deviations must be non-negative")
    denom = bg_std ** 2 + target_std ** 2
    if denom == 0:
        raise DegenerateInputError("CNR undefined: both regions have zero variance")
    return math.sqrt(2.0 * (bg_mean - target_mean) ** 2 / denom)


def sr(target_mean, bg_mean):
    """Strain ratio ``target_mean / bg_mean`` (a fraction; x100 for percent)."""
    if bg_mean == 0:
        raise DegenerateInputError("SR undefined: background mean strain is zero")
    return target_mean / bg_mean


def _patch_stats(values, rect, patch, stride):
    means, stds = [], []
    for a in range(rect.a0, rect.a0 + rect.height - patch + 1, stride):
        for l in range(rect.l0, rect.l0 + rect.width - patch + 1, stride):
            block = values[a:a + patch, l:l + patch]
            means.append(block.mean())
            # An exactly flat patch has zero spread, not rounding noise.
            stds.append(0.0 if block.max() == block.min() else block.std())
    return np.array(means), np.array(stds)


def patch_sweep(strain, windows):
    """CNR and SR for every (target patch, background patch) combination.

    Patches are enumerated row-major on the stride grid of each window; pairs
    are ordered target-outer.  Pairs whose CNR is undefined (both patches
    constant) get NaN and are counted in ``n_degenerate``.
    """
    values = np.asarray(getattr(strain, "values", strain), dtype=np.float64)
    windows.validate(values.shape)
    t_mean, t_std = _patch_stats(values, windows.target, windows.patch, windows.stride)
    b_mean, b_std = _patch_stats(values, windows.background, windows.patch, windows.stride)
    if t_mean.size < 2 or b_mean.size < 2:
        raise InvalidInputError(
            f"need >= 2 patches per window, got {t_mean.size} target and {b_mean.size} background")
    if np.any(b_mean == 0):
        raise DegenerateInputError("background patch with zero mean strain: SR undefined")
    tm, ts = t_mean[:, None], t_std[:, None]
    bm, bs = b_mean[None, :], b_std[None, :]
    denom = bs ** 2 + ts ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        cnr_values = np.where(denom > 0, np.sqrt(2.0 * (bm - tm) ** 2 / denom), np.nan).ravel()
    sr_values = (tm / bm).ravel()
    n_degenerate = int(np.count_nonzero(np.isnan(cnr_values)))
    if n_degenerate == cnr_values.size:
        cnr_mean = cnr_std = float("nan")
    else:
        cnr_mean = float(np.nanmean(cnr_values))
        cnr_std = float(np.nanstd(cnr_values))
    return MetricReport(cnr_values, sr_values, cnr_mean, cnr_std,
                        float(sr_values.mean()), float(sr_values.std()), n_degenerate)


def _gaussian_window(size=11, sigma=1.5):
    x = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    g /= g.sum()
    return np.outer(g, g)


def ssim(a, b, window=11, sigma=1.5):
    """Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5).

    The dynamic range is taken jointly over both images; the mean is over
    window positions fully inside the image.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise InvalidInputError(f"shape mismatch {a.shape} vs {b.shape}")
    if a.ndim != 2 or min(a.shape) < window:
        raise InvalidInputError(f"SSIM needs 2-D images of at least {window}x{window}")
    dyn = max(a.max(), b.max()) - min(a.min(), b.min())
    if dyn == 0:
        return 1.0
    c1 = (0.01 * dyn) ** 2
    c2 = (0.03 * dyn) ** 2
    k = _gaussian_window(window, sigma)
    h = window // 2

    def filt(x):
        return ndimage.correlate(x, k, mode="constant")[h:-h, h:-h]

    mu_a, mu_b = filt(a), filt(b)
    # Second moments are shift invariant; centring limits cancellation.
    m = 0.5 * (a.mean() + b.mean())
    ca, cb = a - m, b - m
    mc_a, mc_b = mu_a - m, mu_b - m
    var_a = filt(ca * ca) - mc_a * mc_a
    var_b = filt(cb * cb) - mc_b * mc_b
    cov = filt(ca * cb) - mc_a * mc_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return float(np.mean(num / den))


# --- Friedman test ---------------------------------------------------------

def _gammainc_series(s, x):
    term = 1.0 / s
    total = term
    for n in range(1, 10000):
        term *= x / (s + n)
        total += term
        if abs(term) < abs(total) * 1e-17:
            break
    return total * math.exp(-x + s * math.log(x) - math.lgamma(s))


def _gammaincc_fraction(s, x):
    # Modified Lentz evaluation of the continued fraction for Q(s, x).
    tiny = 1e-300
    b = x + 1.0 - s
    c = 1.0 / tiny
    d = 1.0 / b
    h = d
    for i in range(1, 10000):
        an = -i * (i - s)
        b += 2.0
        d = an * d + b
        if abs(d) < tiny:
            d = tiny
        c = b + an / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < 1e-16:
            break
    return h * math.exp(-x + s * math.log(x) - math.lgamma(s))


def gammaincc(s, x):
    """Regularised upper incomplete gamma ``Q(s, x)``."""
    if s <= 0:
        raise InvalidInputError("shape parameter must be positive")
    if x < 0:
        raise InvalidInputError("x must be non-negative")
    if x == 0:
        return 1.0
    if x < s + 1.0:
        return 1.0 - _gammainc_series(s, x)
    return _gammaincc_fraction(s, x)


def chi2_sf(x, dof):
    """Chi-squared survival function."""
    if x <= 0:
        return 1.0
    return gammaincc(0.5 * dof, 0.5 * x)


def _rank_rows(scores):
    ranks = np.empty_like(scores)
    ties = 0.0
    for i, row in enumerate(scores):
        order = np.argsort(row, kind="stable")
        sorted_row = row[order]
        r = np.empty(row.size)
        j = 0
        while j < row.size:
            k = j
            while k + 1 < row.size and sorted_row[k + 1] == sorted_row[j]:
                k += 1
            r[order[j:k + 1]] = 0.5 * (j + k) + 1.0
            t = k - j + 1
            ties += t ** 3 - t
            j = k + 1
        ranks[i] = r
    return ranks, ties


def friedman(scores):
    """Friedman test over an ``(n blocks, k treatments)`` score matrix.

    Returns ``(statistic, p_value)``.  Ranks are averaged over ties and the
    statistic carries the usual tie correction; if every block is fully tied
    the statistic is 0 and p is 1.
    """
    x = np.asarray(scores, dtype=np.float64)
    if x.ndim != 2:
        raise InvalidInputError("scores must be a 2-D (blocks x treatments) matrix")
    n, k = x.shape
    if n < 2 or k < 2:
        raise InvalidInputError(f"need at least 2 blocks and 2 treatments, got {n}x{k}")
    if not np.all(np.isfinite(x)):
        raise InvalidInputError("scores must be finite")
    ranks, ties = _rank_rows(x)
    correction = 1.0 - ties / (n * (k ** 3 - k))
    if correction <= 0:
        return 0.0, 1.0
    mean_ranks = ranks.mean(axis=0)
    stat = 12.0 * n / (k * (k + 1)) * np.sum((mean_ranks - 0.5 * (k + 1)) ** 2) / correction
    stat = float(stat)
    return stat, chi2_sf(stat, k - 1)


def friedman_matrix(method_scores):
    """Pairwise Friedman p-values between methods.

    ``method_scores`` maps a method name to its per-block score vector (all
    vectors paired, i.e. same length and block order).  Returns a list of
    ``(name_a, name_b, statistic, p_value)``.
    """
    names = list(method_scores)
    lengths = {len(np.asarray(method_scores[m])) for m in names}
    if len(lengths) != 1:
        raise InvalidInputError("methods have different numbers of paired blocks")
    out = []
    for i in range(len(names)):
        for j in range(i + 1, len(names)):
            pair = np.column_stack([method_scores[names[i]], method_scores[names[j]]])
            pair = pair[np.all(np.isfinite(pair), axis=1)]
            stat, p = friedman(pair)
            out.append((names[i], names[j], stat, p))
    return out
