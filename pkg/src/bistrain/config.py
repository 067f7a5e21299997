"""Plain-text experiment configuration.

The format is ``key = value`` lines, ``#`` comments and optional section
headers.  ``[inclusion]`` may repeat; each occurrence starts a new inclusion
block.  Keys are unique across sections so every key can also be given as a
command-line flag of the same name::

    output_dir = runs/incl
    strain_windows = 5, 15, 30, 40

    [phantom]
    rows = 256
    cols = 48
    background_strain = 0.02

    [inclusion]
    center_a = 128
    center_l = 24
    radius = 12
    strain_ratio = 0.5

    [loss]
    lambda = 0.03
    gamma = 0.05

    [metrics]
    target = 120, 16, 16, 16
    background = 26, 6, 83, 36
"""

from dataclasses import dataclass, field, fields, replace
import hashlib
import math

from .errors import BistrainError, InvalidConfigError
from .loss import LossWeights
from .metrics import MetricWindows, Rect
from .phantom import TRANSITION_BAND, Inclusion, PhantomSpec
from .solver import SolverConfig, StepRule

DEFAULT_WINDOWS = (5, 15, 30, 40)


def _float_or_none(text):
    if text.strip().lower() in ("none", "inf", "off"):
        return None
    return float(text)


def _int_list(text):
    return tuple(int(v) for v in text.replace(",", " ").split())


def _rect(text):
    vals = _int_list(text)
    if len(vals) != 4:
        raise ValueError("expected a0, l0, height, width")
    return vals


# key -> (section, parser)
KEYS = {
    "output_dir": ("", str),
    "strain_windows": ("", _int_list),
    "rows": ("phantom", int),
    "cols": ("phantom", int),
    "scatterer_density": ("phantom", float),
    "psf_axial_sigma": ("phantom", float),
    "psf_lateral_sigma": ("phantom", float),
    "psf_center_freq_cycles": ("phantom", float),
    "background_strain": ("phantom", float),
    "noise_snr_db": ("phantom", _float_or_none),
    "seed": ("phantom", int),
    "fs": ("phantom", float),
    "c": ("phantom", float),
    "line_pitch": ("phantom", float),
    "center_a": ("inclusion", float),
    "center_l": ("inclusion", float),
    "radius": ("inclusion", float),
    "strain_ratio": ("inclusion", float),
    "pyramid_levels": ("solver", int),
    "iterations_per_level": ("solver", int),
    "convergence_tol": ("solver", float),
    "convergence_window": ("solver", int),
    "solver_seed": ("solver", int),
    "coarse_channels": ("solver", _int_list),
    "base_step": ("solver", float),
    "gradient_sigma": ("solver", float),
    "beta1": ("solver", float),
    "beta2": ("solver", float),
    "shrink": ("solver", float),
    "grow": ("solver", float),
    "max_backtracks": ("solver", int),
    "step_eps": ("solver", float),
    "alpha_data": ("loss", float),
    "alpha_reg": ("loss", float),
    "epsilon": ("loss", float),
    "beta": ("loss", float),
    "lambda": ("loss", float),
    "gamma": ("loss", float),
    "w": ("loss", int),
    "target": ("metrics", _rect),
    "background": ("metrics", _rect),
    "patch": ("metrics", int),
    "stride": ("metrics", int),
}
SECTIONS = {"", "phantom", "inclusion", "solver", "loss", "metrics"}
# config key -> StepRule field
_STEP_KEYS = {("step_eps" if f.name == "eps" else f.name): f.name for f in fields(StepRule)}
_SOLVER_KEYS = {"pyramid_levels", "iterations_per_level", "convergence_tol",
                "convergence_window", "coarse_channels"}


@dataclass
class ExperimentConfig:
    phantom: PhantomSpec = field(default_factory=PhantomSpec)
    solver: SolverConfig = field(default_factory=SolverConfig)
    strain_windows: tuple = DEFAULT_WINDOWS
    metrics: MetricWindows = None
    output_dir: str = "."

    def __post_init__(self):
        self.strain_windows = tuple(int(w) for w in self.strain_windows)
        if not self.strain_windows or min(self.strain_windows) < 2:
            raise InvalidConfigError("strain_windows must be a non-empty list of lengths >= 2")
        if self.metrics is not None:
            self.metrics.validate(self.phantom.shape)

    def metric_windows(self, shape=None):
        """Configured windows, or defaults derived from the first inclusion."""
        if self.metrics is not None:
            if shape is not None:
                self.metrics.validate(shape)
            return self.metrics
        return default_windows(self.phantom, shape)

    def to_text(self):
        """Canonical serialisation; equal configs give identical text."""
        p, s, wts = self.phantom, self.solver, self.solver.weights
        lines = [f"output_dir = {self.output_dir}",
                 f"strain_windows = {', '.join(map(str, self.strain_windows))}", "",
                 "[phantom]"]
        for f in fields(PhantomSpec):
            if f.name != "inclusions":
                lines.append(f"{f.name} = {getattr(p, f.name)!r}")
        for inc in p.inclusions:
            lines += ["", "[inclusion]"]
            lines += [f"{f.name} = {getattr(inc, f.name)!r}" for f in fields(Inclusion)]
        lines += ["", "[solver]"]
        for name in sorted(_SOLVER_KEYS):
            value = getattr(s, name)
            if name == "coarse_channels":
                value = ", ".join(map(str, value))
            else:
                value = repr(value)
            lines.append(f"{name} = {value}")
        lines.append(f"solver_seed = {s.seed!r}")
        for key, name in _STEP_KEYS.items():
            lines.append(f"{key} = {getattr(s.step_rule, name)!r}")
        lines += ["", "[loss]"]
        for f in fields(LossWeights):
            key = "lambda" if f.name == "lam" else f.name
            lines.append(f"{key} = {getattr(wts, f.name)!r}")
        if self.metrics is not None:
            m = self.metrics
            lines += ["", "[metrics]",
                      "target = {}, {}, {}, {}".format(*_rect_tuple(m.target)),
                      "background = {}, {}, {}, {}".format(*_rect_tuple(m.background)),
                      f"patch = {m.patch}", f"stride = {m.stride}"]
        return "\n".join(lines) + "\n"

    def hash(self):
        return hashlib.sha256(self.to_text().encode()).hexdigest()


def _rect_tuple(r):
    return (r.a0, r.l0, r.height, r.width)


def default_windows(phantom, shape=None):
    """Target square inscribed in the first inclusion, background above it.

    The background spans the full width (less a margin) from a tenth of the
    depth down to just above the inclusion's transition band.
    """
    rows, cols = shape or phantom.shape
    if not phantom.inclusions:
        raise InvalidConfigError(
            "no metric windows configured and no inclusion to derive them from; "
            "set target and background")
    inc = phantom.inclusions[0]
    side = int(math.floor(inc.radius * math.sqrt(2.0)))
    a0 = int(round(inc.center_a - side / 2.0))
    l0 = int(round(inc.center_l - side / 2.0))
    target = Rect(a0, l0, side, side)
    margin_a, margin_l = rows // 10, cols // 8
    top = int(math.floor(inc.center_a - inc.radius - TRANSITION_BAND)) - 1
    background = Rect(margin_a, margin_l, top - margin_a, cols - 2 * margin_l)
    # Shrink the patch on small inclusions so the target holds 2x2 patches.
    stride = 4
    patch = max(3, min(9, side - stride))
    windows = MetricWindows(target, background, patch, stride)
    windows.validate((rows, cols))
    return windows


def parse_text(text, source="<config>"):
    """Parse config text into ``(flat values, inclusion blocks)``."""
    values, inclusions = {}, []
    section = ""
    for number, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        where = f"{source}:{number}"
        if line.startswith("["):
            if not line.endswith("]"):
                raise InvalidConfigError(f"{where}: malformed section header {raw.strip()!r}")
            section = line[1:-1].strip().lower()
            if section not in SECTIONS:
                raise InvalidConfigError(f"{where}: unknown section [{section}]")
            if section == "inclusion":
                inclusions.append({})
            continue
        if "=" not in line:
            raise InvalidConfigError(f"{where}: expected 'key = value', got {raw.strip()!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise InvalidConfigError(f"{where}: unknown key {key!r}")
        home = KEYS[key][0]
        if section and home and section != home:
            raise InvalidConfigError(f"{where}: key {key!r} belongs in [{home}], not [{section}]")
        if home == "inclusion":
            if section != "inclusion":
                raise InvalidConfigError(f"{where}: {key!r} must appear inside an [inclusion] block")
            target = inclusions[-1]
        else:
            target = values
        if key in target:
            raise InvalidConfigError(f"{where}: duplicate key {key!r}")
        target[key] = _convert(key, value, where)
    return values, inclusions


def _convert(key, value, where):
    try:
        return KEYS[key][1](value)
    except ValueError as exc:
        raise InvalidConfigError(f"{where}: bad value {value!r} for {key!r} ({exc})") from None


def build_config(values, inclusions=()):
    """Assemble an :class:`ExperimentConfig` from parsed values."""
    try:
        incs = []
        for k, block in enumerate(inclusions):
            missing = {"center_a", "center_l", "radius"} - set(block)
            if missing:
                raise InvalidConfigError(f"inclusion {k} is missing {sorted(missing)}")
            incs.append(Inclusion(**block))
        phantom_args = {k: v for k, v in values.items() if KEYS[k][0] == "phantom"}
        phantom = PhantomSpec(inclusions=tuple(incs), **phantom_args)
        step = StepRule(**{_STEP_KEYS[k]: v for k, v in values.items() if k in _STEP_KEYS})
        loss_args = {("lam" if k == "lambda" else k): v
                     for k, v in values.items() if KEYS[k][0] == "loss"}
        weights = LossWeights(**loss_args)
        solver_args = {k: v for k, v in values.items() if k in _SOLVER_KEYS}
        if "solver_seed" in values:
            solver_args["seed"] = values["solver_seed"]
        solver = SolverConfig(step_rule=step, weights=weights, **solver_args)
        metrics = None
        if "target" in values or "background" in values:
            if not ("target" in values and "background" in values):
                raise InvalidConfigError("target and background windows must be given together")
            metrics = MetricWindows(Rect(*values["target"]), Rect(*values["background"]),
                                    values.get("patch", 9), values.get("stride", 4))
        elif "patch" in values or "stride" in values:
            defaults = default_windows(phantom)
            metrics = replace(defaults, patch=values.get("patch", 9),
                              stride=values.get("stride", 4))
        return ExperimentConfig(phantom, solver, values.get("strain_windows", DEFAULT_WINDOWS),
                                metrics, values.get("output_dir", "."))
    except BistrainError:
        raise
    except (TypeError, ValueError) as exc:
        raise InvalidConfigError(str(exc)) from None


def load_config(path=None, overrides=None):
    """Read a config file (optional) and apply ``{key: text}`` overrides."""
    values, inclusions = {}, []
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            values, inclusions = parse_text(fh.read(), str(path))
    for key, text in (overrides or {}).items():
        if key not in KEYS:
            raise InvalidConfigError(f"unknown config key {key!r}")
        if KEYS[key][0] == "inclusion":
            if len(inclusions) != 1:
                raise InvalidConfigError(
                    f"--{key} needs exactly one [inclusion] block, found {len(inclusions)}")
            inclusions[0][key] = _convert(key, text, f"--{key}")
        else:
            values[key] = _convert(key, text, f"--{key}")
    return build_config(values, inclusions)

