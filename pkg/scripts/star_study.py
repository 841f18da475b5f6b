"""Star-field study: network fit with and without warm-up, column error
profiles, and the subset baseline at one or more subset sizes.

    python scripts/star_study.py --noise-sigma 0 --out results/star_s0
"""
import argparse
import json
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from pinndic.baseline import SubsetConfig, subset_solve
from pinndic.network import MlpConfig
from pinndic.simulate import Star, make_pair, speckle_preset
from pinndic.solver import SolveConfig, error_metrics, solve

COLUMNS = (128, 512, 896)


def column_mae(disp, truth, cols=COLUMNS, band=0):
    m = error_metrics(disp, truth)
    rows = np.arange(band, disp.height - band)
    return {c: m.column_mae(c, rows)[1] for c in cols}


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--noise-sigma", type=float, default=0.0)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--preset", default="medium_dense")
    ap.add_argument("--adam-iters", type=int, default=1000)
    ap.add_argument("--lbfgs-iters", type=int, default=2000)
    ap.add_argument("--precision", default="float32")
    ap.add_argument("--output-scale", type=float, default=MlpConfig().output_scale)
    ap.add_argument("--no-warmup", action="store_true")
    ap.add_argument("--subset", default="", help="comma-separated subset sizes, e.g. 11,21")
    ap.add_argument("--log-every", type=int, default=200)
    ap.add_argument("--out", default="results/star")
    args = ap.parse_args()

    bench = make_pair(speckle_preset(args.preset, 1024, 256, seed=args.seed), Star(),
                      noise_sigma=args.noise_sigma)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    results = {"noise_sigma": args.noise_sigma, "warmup": not args.no_warmup}

    for size in [int(s) for s in args.subset.split(",") if s]:
        t = time.perf_counter()
        disp, valid = subset_solve(bench.ref, bench.deformed, config=SubsetConfig(subset_size=size))
        results[f"subset{size}"] = {"column_mae_v": column_mae(disp, bench.truth, band=size // 2),
                                    "seconds": time.perf_counter() - t}
        print(f"subset {size}: {results[f'subset{size}']}", flush=True)

    def stage(base, **kw):
        return replace(base, adam=replace(base.adam, max_iters=args.adam_iters),
                       lbfgs=replace(base.lbfgs, max_iters=args.lbfgs_iters), **kw)

    base = SolveConfig()
    mlp = MlpConfig(precision=args.precision, output_scale=args.output_scale)
    cfg = SolveConfig(mlp=mlp, warmup=stage(base.warmup), formal=stage(base.formal),
                      warmup_enabled=not args.no_warmup, seed=args.seed)
    t0 = time.perf_counter()
    total = [0]

    def monitor(trace):
        total[0] += 1
        if total[0] % args.log_every == 0:
            print(f"{trace.name} it={trace.iteration[-1]} opt={trace.optimizer[-1]} "
                  f"loss={trace.loss[-1]:.5g} gray={trace.mean_abs_gray_error[-1]:.4f} "
                  f"t={time.perf_counter() - t0:.0f}s", flush=True)

    rep = solve(bench.ref, bench.deformed, config=cfg, monitor=monitor)
    m = error_metrics(rep.displacement, bench.truth)
    results["network"] = {
        "column_mae_v": column_mae(rep.displacement, bench.truth),
        "mae_v": m.mae_v, "final_gray": rep.final_mean_abs_gray_error,
        "stop_causes": {k: v.value for k, v in rep.stop_causes.items()},
        "steps": {t.name: t.steps for t in rep.traces}, "seconds": rep.wall_seconds,
        "points_per_second": rep.points_per_second}
    print(json.dumps(results, indent=1), flush=True)
    (out / "results.json").write_text(json.dumps(results, indent=1))
    rep.save(out / "network_fit")


if __name__ == "__main__":
    main()
