"""Synthetic RF phantoms with exactly known displacement.

Point scatterers with unit-normal amplitudes are convolved with a separable
Gaussian-windowed cosine PSF.  The second frame is rendered from the same
scatterers moved by an analytic compression field whose local axial strain
drops inside stiff circular inclusions.
"""

from dataclasses import dataclass, field
import math

import numpy as np

from .errors import InvalidSpecError, NumericalError
from .signal import RfFrame
from .warp import DisplacementField, interpolate_linear

TRANSITION_BAND = 3.0  # samples, raised-cosine edge of each inclusion
PSF_TRUNCATION = 4.0  # in PSF standard deviations
MAX_BACKGROUND_STRAIN = 0.05


@dataclass(frozen=True)
class Inclusion:
    center_a: float
    center_l: float
    radius: float
    strain_ratio: float = 0.5


@dataclass(frozen=True)
class PhantomSpec:
    """Geometry, speckle and deformation of a synthetic phantom.

    Distances are in grid units (axial samples, lateral lines); an inclusion
    is a disc of ``radius`` in those units.  ``noise_snr_db=None`` renders
    noise-free frames.
    """

    rows: int = 256
    cols: int = 48
    scatterer_density: float = 2.0
    psf_axial_sigma: float = 2.0
    psf_lateral_sigma: float = 1.2
    psf_center_freq_cycles: float = 0.25
    background_strain: float = 0.01
    inclusions: tuple = field(default_factory=tuple)
    noise_snr_db: float = 30.0
    seed: int = 0
    fs: float = 40e6
    c: float = 1540.0
    line_pitch: float = 3e-4

    def __post_init__(self):
        object.__setattr__(self, "inclusions", tuple(self.inclusions))
        if self.rows < 64 or self.cols < 16:
            raise InvalidSpecError(f"phantom {self.rows}x{self.cols} is below 64x16")
        # Zero strain is accepted so that no-motion pairs can be rendered.
        if not 0 <= self.background_strain <= MAX_BACKGROUND_STRAIN:
            raise InvalidSpecError(
                f"background_strain must lie in [0, {MAX_BACKGROUND_STRAIN}], "
                f"got {self.background_strain}")
        if self.scatterer_density <= 0:
            raise InvalidSpecError("scatterer_density must be positive")
        if self.psf_axial_sigma <= 0 or self.psf_lateral_sigma <= 0:
            raise InvalidSpecError("PSF widths must be positive")
        if not 0 < self.psf_center_freq_cycles < 0.5:
            raise InvalidSpecError("psf_center_freq_cycles must lie in (0, 0.5)")
        if self.seed < 0:
            raise InvalidSpecError("seed must be a non-negative integer")
        for k, inc in enumerate(self.inclusions):
            if not 0 < inc.strain_ratio <= 1:
                raise InvalidSpecError(f"inclusion {k}: strain_ratio must lie in (0, 1]")
            if inc.radius <= 0:
                raise InvalidSpecError(f"inclusion {k}: radius must be positive")
            if (inc.center_a - inc.radius < 0 or inc.center_a + inc.radius > self.rows - 1
                    or inc.center_l - inc.radius < 0
                    or inc.center_l + inc.radius > self.cols - 1):
                raise InvalidSpecError(f"inclusion {k} does not lie fully inside the frame")
        for i, p in enumerate(self.inclusions):
            for j in range(i + 1, len(self.inclusions)):
                q = self.inclusions[j]
                gap = math.hypot(p.center_a - q.center_a, p.center_l - q.center_l)
                if gap < p.radius + q.radius + TRANSITION_BAND:
                    raise InvalidSpecError(
                        f"inclusions {i} and {j} overlap (centre distance {gap:.2f} < "
                        f"radii plus transition band {p.radius + q.radius + TRANSITION_BAND:.2f})")

    @property
    def shape(self):
        return (self.rows, self.cols)

    @property
    def fc(self):
        return self.psf_center_freq_cycles * self.fs


@dataclass
class GroundTruth:
    forward: DisplacementField
    backward: DisplacementField
    local_axial_strain: np.ndarray


def local_strain_map(spec):
    """Axial strain of the phantom: background level, reduced inside inclusions."""
    a = np.arange(spec.rows, dtype=np.float64)[:, None]
    l = np.arange(spec.cols, dtype=np.float64)[None, :]
    factor = np.ones(spec.shape)
    half = 0.5 * TRANSITION_BAND
    for inc in spec.inclusions:
        d = np.hypot(a - inc.center_a, l - inc.center_l)
        t = np.clip((d - (inc.radius - half)) / TRANSITION_BAND, 0.0, 1.0)
        inside = 0.5 * (1.0 + np.cos(np.pi * t))
        factor -= inside * (1.0 - inc.strain_ratio)
    return spec.background_strain * factor


def _integrate_axial(strain):
    # W(0) = 0 and W(a+1) = W(a-1) + 2 s(a): the central difference of W
    # reproduces s exactly at every interior sample.
    rows = strain.shape[0]
    w = np.zeros_like(strain)
    w[1] = 0.5 * (strain[0] + strain[1])
    w[2::2] = 2.0 * np.cumsum(strain[1:rows - 1:2], axis=0)[: w[2::2].shape[0]]
    w[3::2] = w[1] + 2.0 * np.cumsum(strain[2:rows - 1:2], axis=0)[: w[3::2].shape[0]]
    return w


def invert_field(forward, tol=1e-6, max_iter=50):
    """Backward field ``b`` with ``b(y) = -f(y + b(y))`` by fixed-point iteration."""
    rows, cols = forward.shape
    a = np.arange(rows, dtype=np.float64)[:, None]
    l = np.arange(cols, dtype=np.float64)[None, :]
    b_a, b_l = -forward.w_a, -forward.w_l
    change = np.inf
    for iteration in range(1, max_iter + 1):
        ya, yl = a + b_a, l + b_l
        new_a = -interpolate_linear(forward.w_a, ya, yl)
        new_l = -interpolate_linear(forward.w_l, ya, yl)
        change = max(np.max(np.abs(new_a - b_a)), np.max(np.abs(new_l - b_l)))
        b_a, b_l = new_a, new_l
        if change < tol:
            return DisplacementField(b_a, b_l)
    raise NumericalError(
        f"backward field did not converge in {max_iter} iterations "
        f"(last update {change:.3e} samples, tolerance {tol:.1e})",
        iterations=max_iter, last_update=change)


def ground_truth_displacement(spec):
    """Forward/backward fields of the phantom's compression.

    Axial displacement is zero at the transducer face and accumulates the
    local strain with depth; lateral displacement follows incompressibility
    (Poisson ratio 0.5) about the central line.
    """
    strain = local_strain_map(spec)
    w_a = _integrate_axial(strain)
    l_center = 0.5 * (spec.cols - 1)
    l = np.arange(spec.cols, dtype=np.float64)
    column_strain = strain.mean(axis=0)
    w_l = np.broadcast_to(-0.5 * column_strain * (l - l_center), spec.shape).copy()
    forward = DisplacementField(w_a, w_l)
    return GroundTruth(forward, invert_field(forward), strain)


def _draw_scatterers(spec, gt, rng):
    margin_a = PSF_TRUNCATION * spec.psf_axial_sigma + np.max(np.abs(gt.forward.w_a)) + 2
    margin_l = PSF_TRUNCATION * spec.psf_lateral_sigma + np.max(np.abs(gt.forward.w_l)) + 2
    lo_a, hi_a = -margin_a, spec.rows - 1 + margin_a
    lo_l, hi_l = -margin_l, spec.cols - 1 + margin_l
    count = rng.poisson(spec.scatterer_density * (hi_a - lo_a) * (hi_l - lo_l))
    pos_a = rng.uniform(lo_a, hi_a, count)
    pos_l = rng.uniform(lo_l, hi_l, count)
    amp = rng.standard_normal(count)
    return pos_a, pos_l, amp


def render_scatterers(spec, pos_a, pos_l, amp, chunk=4096):
    """Sum each scatterer's truncated separable PSF onto the sample grid."""
    rows, cols = spec.shape
    sa, sl = spec.psf_axial_sigma, spec.psf_lateral_sigma
    reach_a, reach_l = PSF_TRUNCATION * sa, PSF_TRUNCATION * sl
    off_a = np.arange(int(math.ceil(2 * reach_a)) + 2)
    off_l = np.arange(int(math.ceil(2 * reach_l)) + 2)
    image = np.zeros(rows * cols)
    # Fixed chunk order keeps accumulation, and thus the output, bit-exact.
    for start in range(0, pos_a.size, chunk):
        pa = pos_a[start:start + chunk, None]
        pl = pos_l[start:start + chunk, None]
        ia = np.ceil(pa - reach_a) + off_a
        il = np.ceil(pl - reach_l) + off_l
        da, dl = ia - pa, il - pl
        fa = np.cos(2 * np.pi * spec.psf_center_freq_cycles * da) * np.exp(-da ** 2 / (2 * sa ** 2))
        fl = np.exp(-dl ** 2 / (2 * sl ** 2))
        fa = np.where((np.abs(da) <= reach_a) & (ia >= 0) & (ia < rows), fa, 0.0)
        fl = np.where((np.abs(dl) <= reach_l) & (il >= 0) & (il < cols), fl, 0.0)
        contrib = amp[start:start + chunk, None, None] * fa[:, :, None] * fl[:, None, :]
        index = (np.clip(ia, 0, rows - 1)[:, :, None] * cols
                 + np.clip(il, 0, cols - 1)[:, None, :]).astype(np.intp)
        image += np.bincount(index.ravel(), weights=contrib.ravel(), minlength=rows * cols)
    return image.reshape(rows, cols)


def render_pair(spec):
    """Render ``(I1, I2, ground_truth)`` for a phantom description."""
    gt = ground_truth_displacement(spec)
    rng = np.random.default_rng(spec.seed)
    pos_a, pos_l, amp = _draw_scatterers(spec, gt, rng)
    moved_a = pos_a + interpolate_linear(gt.forward.w_a, pos_a, pos_l)
    moved_l = pos_l + interpolate_linear(gt.forward.w_l, pos_a, pos_l)
    clean1 = render_scatterers(spec, pos_a, pos_l, amp)
    clean2 = render_scatterers(spec, moved_a, moved_l, amp)
    if spec.noise_snr_db is None or math.isinf(spec.noise_snr_db):
        noisy1, noisy2 = clean1, clean2
    else:
        sigma = np.sqrt(np.mean(clean1 ** 2)) * 10.0 ** (-spec.noise_snr_db / 20.0)
        noisy1 = clean1 + sigma * rng.standard_normal(spec.shape)
        noisy2 = clean2 + sigma * rng.standard_normal(spec.shape)
    meta = dict(fs=spec.fs, fc=spec.fc, c=spec.c, line_pitch=spec.line_pitch)
    return RfFrame(noisy1, **meta), RfFrame(noisy2, **meta), gt
