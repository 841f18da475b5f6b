"""Command-line interface.

Subcommands: simulate, solve, subset, compare, strain, render.  Every flag
may also come from a ``--config`` file of ``key=value`` lines (``#`` starts a
comment); flags on the command line win.  Each run writes ``run_manifest.txt``
into its output directory, which is itself a valid ``--config`` file for
replaying the run.

Exit codes: 0 success, 2 usage error, 3 I/O or format error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import contextlib
import hashlib
import math
import os
import sys
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .baseline import SubsetConfig, subset_solve
from .grid import (DimensionError, EmptyRoiError, FormatError, RoiMask, ScalarField,
                   VectorField2, load_field, load_image, load_mask, save_field)
from .interp import BICUBIC, BILINEAR
from .network import MlpConfig, NumericalError, load_params
from .objective import residual_field
from .optim import StageConfig
from .simulate import PRESETS, Linear, Rigid, Star, make_pair, speckle_preset
from .solver import (SolveConfig, SolveFailed, error_metrics, format_kv, gray_histogram,
                     save_strain, solve, strain)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_IO = 3
EXIT_NUMERICAL = 4


class UsageError(Exception):
    pass


# -- run manifest ------------------------------------------------------------------

def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: dict
    inputs: dict = field(default_factory=dict)
    seeds: dict = field(default_factory=dict)
    version: str = __version__

    def to_text(self) -> str:
        # provenance lines are comments, so the file replays as a --config file
        lines = [f"# command={self.command}", f"# version={self.version}"]
        lines += [f"# input.{k}.sha256={v}" for k, v in self.inputs.items()]
        lines += [f"# seed.{k}={v}" for k, v in self.seeds.items()]
        for k, v in self.config.items():
            if v is None or v is False:
                continue
            if isinstance(v, (list, tuple)):
                v = ",".join(str(x) for x in v)
            lines.append(f"{k}={v}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir) -> None:
        Path(out_dir, "run_manifest.txt").write_text(self.to_text())


# -- config files --------------------------------------------------------------------

def read_config(path) -> dict[str, str]:
    out = {}
    for n, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{n}: expected key=value")
        k, v = line.split("=", 1)
        out[k.strip().lstrip("-").replace("_", "-")] = v.strip()
    return out


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def apply_config(sub: argparse.ArgumentParser, values: dict[str, str]) -> None:
    """Install config-file values as parser defaults so explicit flags still override."""
    by_name = {}
    for act in sub._actions:
        for opt in act.option_strings:
            if opt.startswith("--"):
                by_name[opt[2:]] = act
    defaults = {}
    for key, text in values.items():
        if key == "config":
            continue
        act = by_name.get(key)
        if act is None:
            raise UsageError(f"unknown config key {key!r}")
        if isinstance(act, (argparse._StoreTrueAction, argparse._StoreFalseAction)):
            val = _parse_bool(text)
            if isinstance(act, argparse._StoreFalseAction):
                val = not val
        else:
            try:
                val = act.type(text) if act.type else text
            except (TypeError, ValueError) as exc:
                raise UsageError(f"config key {key}: {exc}") from None
            if act.choices is not None and val not in act.choices:
                raise UsageError(f"config key {key}: {val!r} not in {sorted(act.choices)}")
        defaults[act.dest] = val
    sub.set_defaults(**defaults)


def resolved(args: argparse.Namespace, skip=("func", "command", "config")) -> dict:
    """Resolved flag values keyed by their long option names."""
    return {k.replace("_", "-"): v for k, v in vars(args).items() if k not in skip}


def _require(args, *names) -> None:
    missing = [f"--{n.replace('_', '-')}" for n in names if getattr(args, n) is None]
    if missing:
        raise UsageError(f"missing required option(s): {', '.join(missing)}")


def _int_list(text: str) -> list[int]:
    try:
        return [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}")


# -- heatmaps ------------------------------------------------------------------------

def heatmap(values: np.ndarray) -> tuple[np.ndarray, float, float]:
    """Linear 8-bit map of the finite range; NaN maps to 0, a constant field to mid-gray."""
    v = np.asarray(values, dtype=np.float64)
    fin = np.isfinite(v)
    if not fin.any():
        return np.zeros(v.shape), math.nan, math.nan
    lo, hi = float(v[fin].min()), float(v[fin].max())
    if hi == lo:
        img = np.full(v.shape, 128.0)
    else:
        img = (np.where(fin, v, lo) - lo) / (hi - lo) * 255.0
    return np.where(fin, img, 0.0), lo, hi


def write_heatmap(values: np.ndarray, path) -> dict:
    path = Path(path)
    img, lo, hi = heatmap(values)
    save_field(ScalarField(img), path, "pgm")
    info = {"min": lo, "max": hi, "degenerate_range": lo == hi or not math.isfinite(lo)}
    path.with_suffix(".minmax.txt").write_text(format_kv(info))
    return info


def write_histogram(values: np.ndarray, path) -> None:
    edges, counts, below, above = gray_histogram(np.abs(np.asarray(values, dtype=np.float64)))
    rows = ["lo,hi,count", f"0.0,{float(edges[0])!r},{below}"]
    rows += [f"{float(a)!r},{float(b)!r},{c}" for a, b, c in zip(edges[:-1], edges[1:], counts)]
    rows.append(f"{float(edges[-1])!r},inf,{above}")
    Path(path).write_text("\n".join(rows) + "\n")


# -- subcommands ---------------------------------------------------------------------

_FIELD_FLAGS = {"rigid": ("u0", "v0"), "linear": ("ulo", "uhi", "vlo", "vhi"), "star": ("pmin", "pmax")}
_FIELD_DEFAULTS = {"u0": 0.0, "v0": 0.2, "ulo": -1.0, "uhi": 1.0, "vlo": -1.0, "vhi": 1.0,
                   "pmin": 10.0, "pmax": 120.0}


def cmd_simulate(args) -> int:
    _require(args, "out_dir")
    for fname, flags in _FIELD_FLAGS.items():
        if fname == args.field:
            continue
        for f in flags:
            if getattr(args, f) is not None:
                raise UsageError(f"--{f} does not apply to --field {args.field}")
    vals = {f: getattr(args, f) if getattr(args, f) is not None else _FIELD_DEFAULTS[f]
            for f in _FIELD_FLAGS[args.field]}
    if args.field == "rigid":
        spec = Rigid(vals["u0"], vals["v0"])
    elif args.field == "linear":
        spec = Linear(vals["ulo"], vals["uhi"], vals["vlo"], vals["vhi"])
    else:
        spec = Star(vals["pmin"], vals["pmax"])
    speckle = speckle_preset(args.preset, args.width, args.height, seed=args.seed)
    if args.speckles is not None:
        speckle = replace(speckle, num_speckles=args.speckles)
    if args.radius is not None:
        speckle = replace(speckle, radius=args.radius)
    scheme = BILINEAR if args.scheme == "bilinear" else BICUBIC
    bench = make_pair(speckle, spec, args.noise_sigma, scheme)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_field(bench.ref, out / "ref.pgm")
    save_field(bench.deformed, out / "def.pgm")
    # unquantized copies for experiments that must not see 8-bit rounding
    save_field(bench.ref, out / "ref.dicf")
    save_field(bench.deformed, out / "def.dicf")
    save_field(bench.truth, out / "truth.dicf")
    (out / "manifest.txt").write_text(format_kv(bench.manifest))
    RunManifest("simulate", resolved(args), seeds={"speckle": args.seed}).write(out)
    print(f"wrote {out}/ref.pgm def.pgm truth.dicf ({args.width}x{args.height}, field={args.field})")
    return EXIT_OK


def _load_pair(args):
    ref = load_image(args.ref)
    deformed = load_image(getattr(args, "def"))
    if ref.shape != deformed.shape:
        raise DimensionError(f"reference is {ref.width}x{ref.height} but deformed is "
                             f"{deformed.width}x{deformed.height}")
    roi = load_mask(args.mask, ref.shape) if args.mask else None
    inputs = {"ref": sha256_file(args.ref), "def": sha256_file(getattr(args, "def"))}
    if args.mask:
        inputs["mask"] = sha256_file(args.mask)
    return ref, deformed, roi, inputs


def _stage(base: StageConfig, args) -> StageConfig:
    cfg = base
    if args.adam_iters is not None:
        cfg = replace(cfg, adam=replace(cfg.adam, max_iters=args.adam_iters))
    if args.lbfgs_iters is not None:
        cfg = replace(cfg, lbfgs=replace(cfg.lbfgs, max_iters=args.lbfgs_iters))
    if args.stage_iters is not None:
        cfg = replace(cfg, max_iters=args.stage_iters)
    return cfg


def cmd_solve(args) -> int:
    _require(args, "ref", "def", "out_dir")
    ref, deformed, roi, inputs = _load_pair(args)
    base = SolveConfig()
    mlp = MlpConfig(hidden_layers=args.hidden_layers, hidden_width=args.hidden_width,
                    output_scale=args.output_scale, precision=args.precision)
    config = SolveConfig(mlp=mlp, scheme=BILINEAR if args.scheme == "bilinear" else BICUBIC,
                         warmup=_stage(base.warmup, args), formal=_stage(base.formal, args),
                         warmup_enabled=not args.no_warmup, seed=args.seed)

    def monitor(trace):
        if args.verbose and trace.iteration and trace.iteration[-1] % 100 == 0:
            print(f"[{trace.name}] iter {trace.iteration[-1]} loss {trace.loss[-1]:.6g} "
                  f"gray {trace.mean_abs_gray_error[-1]:.4g}", file=sys.stderr)

    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest = RunManifest("solve", resolved(args), inputs, {"network": args.seed})
    code = EXIT_OK
    try:
        report = solve(ref, deformed, roi, config, monitor)
    except SolveFailed as exc:
        print(f"error: {exc}; best-so-far result written", file=sys.stderr)
        report, code = exc.report, EXIT_NUMERICAL
    report.save(out)
    save_field(residual_field(ref, deformed, report.params, roi, config.scheme), out / "residual.dicf")
    manifest.write(out)
    for k, v in report.summary().items():
        if not k.startswith("config."):
            print(f"{k}={v}")
    return code


def cmd_subset(args) -> int:
    _require(args, "ref", "def", "out_dir")
    ref, deformed, roi, inputs = _load_pair(args)
    config = SubsetConfig(subset_size=args.subset_size, step=args.step, shape_order=args.shape_order,
                          scheme=BILINEAR if args.scheme == "bilinear" else BICUBIC,
                          search_radius=args.search_radius)
    disp, valid, stats = subset_solve(ref, deformed, roi, config, return_stats=True)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_field(disp, out / "displacement.dicf")
    save_field(ScalarField(valid * 255.0), out / "valid.pgm")
    summary = {"subset_size": config.subset_size, "step": config.step,
               "shape_order": config.shape_order, "valid_points": int(valid.sum()),
               **{f"points.{k}": v for k, v in vars(stats).items()}}
    (out / "summary.txt").write_text(format_kv(summary))
    RunManifest("subset", resolved(args), inputs).write(out)
    for k, v in summary.items():
        print(f"{k}={v}")
    return EXIT_OK


def cmd_compare(args) -> int:
    _require(args, "result", "truth", "out_dir")
    res, truth = load_field(args.result), load_field(args.truth)
    if not (isinstance(res, VectorField2) and isinstance(truth, VectorField2)):
        raise UsageError("compare needs two-channel displacement files")
    if res.shape != truth.shape:
        raise DimensionError(f"result is {res.width}x{res.height} but truth is {truth.width}x{truth.height}")
    h, w = res.shape
    inside = load_mask(args.mask, res.shape).inside if args.mask else np.ones((h, w), dtype=bool)
    # points the method could not measure (NaN) are excluded and counted
    finite = np.isfinite(res.u) & np.isfinite(res.v)
    roi = RoiMask(inside & finite)
    m = error_metrics(VectorField2(np.where(finite, res.u, 0), np.where(finite, res.v, 0)), truth, roi)
    metrics = {**m.summary(), "excluded_points": int((inside & ~finite).sum())}
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for c in args.columns:
        if not 0 <= c < w:
            raise UsageError(f"column {c} outside the {w}-wide field")
        rows, eu, ev = m.column_profile(c)
        lines = ["row,err_u,err_v"] + [f"{r},{a!r},{b!r}" for r, a, b in zip(rows, eu, ev)]
        (out / f"column_{c}.csv").write_text("\n".join(lines) + "\n")
        if rows.size:
            metrics[f"column_{c}.mae_u"], metrics[f"column_{c}.mae_v"] = m.column_mae(c)
    (out / "metrics.txt").write_text(format_kv(metrics))
    inputs = {"result": sha256_file(args.result), "truth": sha256_file(args.truth)}
    RunManifest("compare", resolved(args), inputs).write(out)
    for k, v in metrics.items():
        print(f"{k}={v}")
    return EXIT_OK


def cmd_strain(args) -> int:
    _require(args, "disp", "out_dir")
    disp = load_field(args.disp)
    if not isinstance(disp, VectorField2):
        raise UsageError("strain needs a two-channel displacement file")
    roi = load_mask(args.mask, disp.shape) if args.mask else None
    fit = None
    if args.method == "network_jacobian":
        _require(args, "network")
        fit = load_params(args.network)
    sf = strain(disp, roi, args.method, args.window, fit)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_strain(sf, out / "strain")
    info = write_heatmap(sf.gamma_max, out / "gamma_max.pgm")
    RunManifest("strain", resolved(args), {"disp": sha256_file(args.disp)}).write(out)
    print(f"invalid_points={sf.invalid_count}")
    print(f"gamma_max.min={info['min']}")
    print(f"gamma_max.max={info['max']}")
    return EXIT_OK


def cmd_render(args) -> int:
    _require(args, "input", "out")
    f = load_field(args.input)
    chans = [f.values] if isinstance(f, ScalarField) else [f.u, f.v]
    if not 0 <= args.channel < len(chans):
        raise UsageError(f"channel {args.channel} not in a {len(chans)}-channel file")
    vals = chans[args.channel]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    info = write_heatmap(vals, out)
    write_histogram(vals, args.hist or out.with_suffix(".hist.csv"))
    RunManifest("render", resolved(args), {"input": sha256_file(args.input)}).write(out.parent)
    for k, v in info.items():
        print(f"{k}={v}")
    return EXIT_OK


# -- parser ----------------------------------------------------------------------------

def build_parser() -> tuple[argparse.ArgumentParser, dict[str, argparse.ArgumentParser]]:
    p = argparse.ArgumentParser(prog="pinndic", description=__doc__.split("\n\n")[0])
    p.add_argument("--version", action="version", version=f"pinndic {__version__}")
    sp = p.add_subparsers(dest="command", required=True)
    subs = {}

    def sub(name, func, help):
        s = sp.add_parser(name, help=help)
        s.add_argument("--config", help="key=value file; command-line flags override it")
        s.add_argument("--out-dir")
        s.set_defaults(func=func)
        subs[name] = s
        return s

    s = sub("simulate", cmd_simulate, "synthetic speckle pair with known displacement")
    s.add_argument("--width", type=int, default=256)
    s.add_argument("--height", type=int, default=256)
    s.add_argument("--field", choices=sorted(_FIELD_FLAGS), default="rigid")
    for f in _FIELD_DEFAULTS:
        s.add_argument(f"--{f}", type=float, default=None)
    s.add_argument("--noise-sigma", type=float, default=0.0)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--preset", choices=sorted(PRESETS), default="medium_dense")
    s.add_argument("--speckles", type=int, default=None, help="override the preset's speckle count")
    s.add_argument("--radius", type=float, default=None, help="override the preset's spot radius")
    s.add_argument("--scheme", choices=["bicubic", "bilinear"], default="bicubic")

    def pair_flags(s):
        s.add_argument("--ref")
        s.add_argument("--def", dest="def")
        s.add_argument("--mask")
        s.add_argument("--scheme", choices=["bicubic", "bilinear"], default="bicubic")

    s = sub("solve", cmd_solve, "fit the displacement network to an image pair")
    pair_flags(s)
    s.add_argument("--no-warmup", action="store_true")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--adam-iters", type=int, default=None)
    s.add_argument("--lbfgs-iters", type=int, default=None)
    s.add_argument("--stage-iters", type=int, default=None)
    s.add_argument("--hidden-layers", type=int, default=4)
    s.add_argument("--hidden-width", type=int, default=50)
    s.add_argument("--output-scale", type=float, default=MlpConfig().output_scale)
    s.add_argument("--precision", choices=["float64", "float32"], default="float64")
    s.add_argument("--deterministic", action="store_true",
                   help="single-threaded reductions for bit-exact reruns")
    s.add_argument("--verbose", action="store_true", help="progress on stderr")

    s = sub("subset", cmd_subset, "classical subset matching baseline")
    pair_flags(s)
    s.add_argument("--subset-size", type=int, default=31)
    s.add_argument("--step", type=int, default=1)
    s.add_argument("--shape-order", choices=["zero", "first"], default="first")
    s.add_argument("--search-radius", type=int, default=10)

    s = sub("compare", cmd_compare, "error metrics of a result against ground truth")
    s.add_argument("--result")
    s.add_argument("--truth")
    s.add_argument("--mask")
    s.add_argument("--columns", type=_int_list, default=[128, 512, 896])

    s = sub("strain", cmd_strain, "strain and maximum shear from a displacement field")
    s.add_argument("--disp")
    s.add_argument("--mask")
    s.add_argument("--method", choices=["central_diff", "network_jacobian"], default="central_diff")
    s.add_argument("--window", type=int, default=11)
    s.add_argument("--network", help="network.dicp from solve, for network_jacobian")

    s = sub("render", cmd_render, "8-bit PGM heatmap and log-bucketed histogram of a field")
    s.add_argument("--input")
    s.add_argument("--out", help="output PGM path")
    s.add_argument("--channel", type=int, default=0)
    s.add_argument("--hist", help="histogram CSV path (default: next to --out)")
    return p, subs


def parse_args(argv=None) -> argparse.Namespace:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser, subs = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("command", nargs="?")
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config and known.command in subs:
        try:
            values = read_config(known.config)
        except OSError as exc:
            raise UsageError(f"cannot read config file: {exc}") from None
        apply_config(subs[known.command], values)
    return parser.parse_args(argv)


def _thread_limit(args) -> int | None:
    if getattr(args, "deterministic", False):
        return 1
    env = os.environ.get("DIC_THREADS")
    if not env:
        return None
    try:
        n = int(env)
    except ValueError:
        raise UsageError(f"DIC_THREADS must be a positive integer, got {env!r}") from None
    if n < 1:
        raise UsageError(f"DIC_THREADS must be a positive integer, got {env!r}")
    return n


def main(argv=None) -> int:
    try:
        args = parse_args(argv)
        limit = _thread_limit(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    ctx = threadpool_limits(limits=limit) if limit else contextlib.nullcontext()
    try:
        with ctx, np.errstate(over="ignore", under="ignore"):
            return args.func(args)
    except (UsageError, DimensionError, EmptyRoiError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (NumericalError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
