"""Command-line interface: ``bistrain simulate|estimate|strain|evaluate|gradcheck``.

Exit codes: 0 success, 1 input or configuration error, 2 the solver hit its
iteration limit without converging (results are still written).
"""

import argparse
from concurrent.futures import ThreadPoolExecutor
import hashlib
import json
import logging
import os
import sys

import numpy as np

from . import __version__
from .config import KEYS, load_config
from .errors import BistrainError, GridFormatError
from .gradcheck import run_gradcheck
from .gridio import read_frame, read_grid, write_frame, write_grid, write_pgm
from .loss import LossBreakdown, total_loss
from .metrics import friedman_matrix, patch_sweep
from .phantom import render_pair
from .signal import build_channels
from .solver import estimate
from .strain import AXIAL, LATERAL, lsq_strain
from .warp import BiDisplacement, DisplacementField

log = logging.getLogger("bistrain")

EXIT_OK, EXIT_INPUT, EXIT_NOT_CONVERGED = 0, 1, 2
FIELD_FILES = ("forward_axial", "forward_lateral", "backward_axial", "backward_lateral")
SUFFIX = ".evgrid"


class UsageError(BistrainError):
    pass


def _sha256(path):
    with open(path, "rb") as fh:
        return hashlib.sha256(fh.read()).hexdigest()


def write_manifest(out_dir, command, config, outputs, extra=None):
    """Plain-text manifest: command, config hash, seeds and output digests."""
    lines = [f"command = {command}", f"version = {__version__}",
             f"config_sha256 = {config.hash()}",
             f"phantom_seed = {config.phantom.seed}", f"solver_seed = {config.solver.seed}"]
    for key, value in (extra or {}).items():
        lines.append(f"{key} = {value}")
    for path in outputs:
        lines.append(f"output {os.path.basename(path)} = {_sha256(path)}")
    path = os.path.join(out_dir, "manifest.txt")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as fh:
        fh.write(config.to_text())
    return path


def _out_dir(args, config):
    out = args.output or config.output_dir
    os.makedirs(out, exist_ok=True)
    return out


def _config(args):
    overrides = dict(args.overrides)
    if getattr(args, "lam", None) is not None:
        overrides["lambda"] = repr(args.lam)
    if getattr(args, "gamma", None) is not None:
        overrides["gamma"] = repr(args.gamma)
    return load_config(args.config, overrides)


def cmd_simulate(args):
    config = _config(args)
    out = _out_dir(args, config)
    i1, i2, gt = render_pair(config.phantom)
    meta = i1.metadata()
    outputs = [os.path.join(out, "i1" + SUFFIX), os.path.join(out, "i2" + SUFFIX)]
    write_frame(outputs[0], i1)
    write_frame(outputs[1], i2)
    grids = {"gt_forward_axial": gt.forward.w_a, "gt_forward_lateral": gt.forward.w_l,
             "gt_backward_axial": gt.backward.w_a, "gt_backward_lateral": gt.backward.w_l,
             "gt_axial_strain": gt.local_axial_strain}
    for name, values in grids.items():
        path = os.path.join(out, name + SUFFIX)
        write_grid(path, values, meta)
        outputs.append(path)
    write_manifest(out, "simulate", config, outputs)
    print(f"wrote {len(outputs)} grids to {out}")
    return EXIT_OK


def _read_fields(path):
    """Read the four displacement grids of an estimate run directory."""
    grids = []
    for name in FIELD_FILES:
        values, _ = read_grid(os.path.join(path, name + SUFFIX))
        grids.append(values)
    return BiDisplacement(DisplacementField(grids[0], grids[1]),
                          DisplacementField(grids[2], grids[3]))


def cmd_estimate(args):
    config = _config(args)
    i1 = read_frame(args.i1)
    i2 = read_frame(args.i2)
    if i1.shape != i2.shape:
        raise UsageError(f"frame shapes differ: {args.i1} is {i1.shape}, {args.i2} is {i2.shape}")
    if i1.metadata() != i2.metadata():
        raise UsageError(f"frame metadata differ: {i1.metadata()} vs {i2.metadata()}")
    initial = _read_fields(args.initial) if args.initial else None
    out = _out_dir(args, config)
    result = estimate(i1, i2, config.solver, initial)
    meta = i1.metadata()
    outputs = []
    for name, values in zip(FIELD_FILES, result.fields.stack()):
        path = os.path.join(out, name + SUFFIX)
        write_grid(path, values, meta)
        outputs.append(path)
    trace_path = os.path.join(out, "trace.csv")
    with open(trace_path, "w", encoding="utf-8") as fh:
        fh.write(result.trace_csv())
    final = total_loss(build_channels(i1), build_channels(i2), result.fields,
                       config.solver.weights)
    loss_path = os.path.join(out, "loss.csv")
    with open(loss_path, "w", encoding="utf-8") as fh:
        fh.write(LossBreakdown.CSV_HEADER + "\n" + final.csv_row() + "\n")
    outputs += [trace_path, loss_path]
    write_manifest(out, "estimate", config, outputs,
                   {"i1_sha256": _sha256(args.i1), "i2_sha256": _sha256(args.i2),
                    "converged": result.converged})
    print(f"final loss {final.total:.6g} (data {final.data:.6g}, smoothness "
          f"{final.smoothness:.6g}, consistency {final.consistency:.6g})")
    if not result.converged:
        print("warning: finest level reached iterations_per_level without converging",
              file=sys.stderr)
        return EXIT_NOT_CONVERGED
    return EXIT_OK


def _component_path(path, direction):
    if os.path.isdir(path):
        name = "forward_axial" if direction == AXIAL else "forward_lateral"
        return os.path.join(path, name + SUFFIX)
    return path


def cmd_strain(args):
    path = _component_path(args.displacement, args.direction)
    values, meta = read_grid(path)
    result = lsq_strain(values, args.window, args.direction)
    out = args.output or os.path.splitext(path)[0] + f"_strain{args.window}{SUFFIX}"
    parent = os.path.dirname(out)
    if parent:
        os.makedirs(parent, exist_ok=True)
    write_grid(out, result.values, meta)
    write_pgm(os.path.splitext(out)[0] + ".pgm", result.values)
    print(f"wrote {out}")
    return EXIT_OK


def _parse_methods(items):
    methods = {}
    for k, item in enumerate(items):
        name, sep, path = item.partition("=")
        if not sep:
            name, path = f"method{k + 1}", item
        if name in methods:
            raise UsageError(f"duplicate method name {name!r}")
        methods[name] = path
    return methods


def _evaluate_one(name, displacement, window, windows, out):
    strain = lsq_strain(displacement, window, AXIAL)
    report = patch_sweep(strain, windows)
    stem = os.path.join(out, f"{name}_w{window}")
    return name, window, strain, report, stem


def cmd_evaluate(args):
    config = _config(args)
    out = _out_dir(args, config)
    methods = _parse_methods(args.methods)
    displacements, meta, shape = {}, None, None
    for name, path in methods.items():
        values, meta_k = read_grid(_component_path(path, AXIAL))
        if shape is not None and values.shape != shape:
            raise UsageError(f"method {name!r} has shape {values.shape}, expected {shape}: "
                             "Friedman comparisons need paired patch grids")
        shape, meta = values.shape, meta or meta_k
        displacements[name] = values
    windows = config.metric_windows(shape)
    jobs = [(name, disp, w) for w in config.strain_windows
            for name, disp in displacements.items()]
    with ThreadPoolExecutor(max_workers=max(1, args.jobs)) as pool:
        results = list(pool.map(lambda j: _evaluate_one(*j, windows, out), jobs))

    outputs, summary = [], {"windows": list(config.strain_windows), "methods": {}}
    reports = {}
    for name, window, strain, report, stem in results:
        write_grid(stem + "_strain" + SUFFIX, strain.values, meta)
        write_pgm(stem + "_strain.pgm", strain.values)
        with open(stem + "_report.csv", "w", encoding="utf-8") as fh:
            fh.write(report.csv())
        outputs += [stem + "_strain" + SUFFIX, stem + "_strain.pgm", stem + "_report.csv"]
        summary["methods"].setdefault(name, {})[str(window)] = report.summary()
        reports[(name, window)] = report
        print(f"{name} window {window}: CNR {report.cnr_mean:.3f} +/- {report.cnr_std:.3f}, "
              f"SR {100 * report.sr_mean:.1f}% +/- {100 * report.sr_std:.1f}%")

    if len(methods) >= 2:
        for metric in ("cnr", "sr"):
            path = os.path.join(out, f"friedman_{metric}.csv")
            _write_friedman(path, metric, list(methods), config.strain_windows, reports)
            outputs.append(path)

    if args.ground_truth:
        gt_path = args.ground_truth
        if os.path.isdir(gt_path):
            gt_path = os.path.join(gt_path, "gt_forward_axial" + SUFFIX)
        gt_axial, _ = read_grid(gt_path)
        if gt_axial.shape != shape:
            raise UsageError(f"ground truth shape {gt_axial.shape} does not match {shape}")
        for name, disp in displacements.items():
            err = disp - gt_axial
            summary["methods"][name]["displacement_mae"] = float(np.mean(np.abs(err)))
            summary["methods"][name]["displacement_rmse"] = float(np.sqrt(np.mean(err ** 2)))

    summary_path = os.path.join(out, "summary.json")
    with open(summary_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    outputs.append(summary_path)
    write_manifest(out, "evaluate", config, outputs)
    return EXIT_OK


def _write_friedman(path, metric, names, windows, reports):
    """Rows are method pairs, columns smoothing windows; cells are p-values."""
    columns = {}
    for w in windows:
        scores = {n: getattr(reports[(n, w)], f"{metric}_values") for n in names}
        columns[w] = friedman_matrix(scores)
    lines = ["method_a,method_b," + ",".join(f"w{w}" for w in windows)]
    for k, (a, b, _, _) in enumerate(columns[windows[0]]):
        cells = [repr(columns[w][k][3]) for w in windows]
        lines.append(f"{a},{b}," + ",".join(cells))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")


def cmd_gradcheck(args):
    if args.rows < 12 or args.cols < 12:
        raise UsageError(f"gradcheck needs dims >= 12x12, got {args.rows}x{args.cols}")
    ok = True
    for seed in range(args.seed, args.seed + args.seeds):
        report = run_gradcheck(seed, (args.rows, args.cols), perturb=args.perturb)
        print(report.format())
        ok &= report.passed()
    print("PASS" if ok else "FAIL")
    return EXIT_OK if ok else EXIT_INPUT


def _add_config_args(p):
    p.add_argument("--config", help="experiment config file (key = value)")
    p.add_argument("-o", "--output", help="output directory (default: output_dir of the config)")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="bistrain",
        description="Bi-directional displacement and strain estimation for RF ultrasound.",
        epilog="Any config key may also be passed as --KEY VALUE.")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="render a phantom pair and its ground truth")
    _add_config_args(p)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("estimate", help="estimate forward and backward displacement")
    p.add_argument("i1", help="pre-deformation RF frame (EVGRID or CSV)")
    p.add_argument("i2", help="post-deformation RF frame (EVGRID or CSV)")
    p.add_argument("--lambda", dest="lam", type=float, help="smoothness weight")
    p.add_argument("--gamma", type=float, help="consistency weight")
    p.add_argument("--initial", help="directory of a previous estimate used as the start")
    _add_config_args(p)
    p.set_defaults(func=cmd_estimate)

    p = sub.add_parser("strain", help="least-squares strain of one displacement component")
    p.add_argument("displacement", help="displacement EVGRID, or an estimate output directory")
    p.add_argument("--window", type=int, default=5, help="fitting window length (default 5)")
    p.add_argument("--direction", choices=(AXIAL, LATERAL), default=AXIAL)
    p.add_argument("-o", "--output", help="output EVGRID path")
    p.set_defaults(func=cmd_strain, overrides=[])

    p = sub.add_parser("evaluate", help="strain images, CNR/SR reports and Friedman tests")
    p.add_argument("methods", nargs="+", metavar="[NAME=]PATH",
                   help="estimate output directory or axial displacement EVGRID")
    p.add_argument("--ground-truth", help="simulate output directory or GT axial EVGRID")
    p.add_argument("--jobs", type=int, default=1, help="parallel evaluations")
    _add_config_args(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", help="finite-difference check of the loss gradient")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--rows", type=int, default=16)
    p.add_argument("--cols", type=int, default=12)
    p.add_argument("--perturb", type=float, default=0.0,
                   help="relative error injected into the analytic gradient (test hook)")
    p.set_defaults(func=cmd_gradcheck, overrides=[])
    return parser


def _split_overrides(extra):
    """Turn leftover ``--key value`` / ``--key=value`` tokens into overrides."""
    overrides, k = [], 0
    while k < len(extra):
        token = extra[k]
        if not token.startswith("--"):
            raise UsageError(f"unexpected argument {token!r}")
        key, sep, value = token[2:].partition("=")
        key = key.replace("-", "_")
        if not sep:
            if k + 1 >= len(extra):
                raise UsageError(f"missing value for --{key}")
            value = extra[k + 1]
            k += 1
        if key not in KEYS:
            raise UsageError(f"unknown option --{key}")
        overrides.append((key, value))
        k += 1
    return overrides


def main(argv=None):
    parser = build_parser()
    args, extra = parser.parse_known_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        overrides = _split_overrides(extra)
        if overrides and args.func in (cmd_strain, cmd_gradcheck):
            raise UsageError(f"{args.command} takes no config overrides")
        args.overrides = overrides
        return args.func(args)
    except GridFormatError as exc:
        print(f"error: bad EVGRID input: {exc}", file=sys.stderr)
    except BistrainError as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
