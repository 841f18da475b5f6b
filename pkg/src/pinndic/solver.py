"""Two-stage network fit of the displacement field, strain and error metrics."""
from __future__ import annotations

import math
import time
import warnings
from dataclasses import asdict, dataclass, field, is_dataclass, replace
from pathlib import Path
from typing import Callable, Literal

import numpy as np
from scipy import ndimage

from . import network
from .grid import RoiMask, ScalarField, VectorField2, check_same_shape, save_field
from .interp import BICUBIC, SampleScheme
from .network import MlpConfig, MlpParams
from .objective import Photometric
from .optim import StageConfig, StageTrace, StopCause, run_stage


def _warmup_default() -> StageConfig:
    return StageConfig(kind="log_residual", stop_mean_gray_error=3.0)


def _formal_default() -> StageConfig:
    return StageConfig(kind="mse", stop_mean_gray_error=0.1)


@dataclass(frozen=True)
class SolveConfig:
    mlp: MlpConfig = field(default_factory=MlpConfig)
    scheme: SampleScheme = BICUBIC
    warmup: StageConfig = field(default_factory=_warmup_default)
    formal: StageConfig = field(default_factory=_formal_default)
    warmup_enabled: bool = True
    seed: int = 0
    border: str = "clamp"

    def __post_init__(self):
        if self.warmup.kind != "log_residual" or self.formal.kind != "mse":
            raise ValueError("warm-up uses log_residual and the formal stage uses mse")


def flat_config(obj, prefix: str = "") -> dict:
    """Flatten nested dataclasses into dotted key=value pairs."""
    out = {}
    for k, v in (asdict(obj) if is_dataclass(obj) else obj).items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flat_config(v, key + "."))
        else:
            out[key] = v
    return out


class SolveFailed(RuntimeError):
    """A stage hit a numerical error; ``report`` holds the best-so-far result."""

    def __init__(self, message: str, report: "SolveReport"):
        super().__init__(message)
        self.report = report


@dataclass
class SolveReport:
    displacement: VectorField2
    params: MlpParams
    roi: RoiMask
    traces: list[StageTrace]
    wall_seconds: float
    points_per_second: float
    config: SolveConfig
    final_mean_abs_gray_error: float
    warnings: list[str] = field(default_factory=list)

    @property
    def stop_causes(self) -> dict[str, StopCause]:
        return {t.name: t.stop_cause for t in self.traces}

    @property
    def chart(self) -> tuple[int, int]:
        return self.roi.width, self.roi.height

    def summary(self) -> dict:
        out = {f"stop_cause.{t.name}": t.stop_cause.value for t in self.traces}
        out.update({f"iterations.{t.name}": t.steps for t in self.traces})
        out.update({
            "roi_points": self.roi.count,
            "wall_seconds": self.wall_seconds,
            "points_per_second": self.points_per_second,
            "final_mean_abs_gray_error": self.final_mean_abs_gray_error,
            "param_count": self.params.theta.size,
            "adam_weight_decay_mode": "coupled_l2",
            "coord_normalization": f"x_norm = 2x/({self.chart[0]}-1) - 1, y_norm = 2y/({self.chart[1]}-1) - 1",
        })
        out.update(flat_config(self.config, "config."))
        return out

    def trace_csv(self) -> str:
        return "".join(t.to_csv(header=(i == 0)) for i, t in enumerate(self.traces))

    def save(self, out_dir) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        save_field(self.displacement, out / "displacement.dicf")
        (out / "trace.csv").write_text(self.trace_csv())
        (out / "summary.txt").write_text(format_kv(self.summary()))
        network.save_params(self.params, out / "network.dicp", chart=self.chart)


def format_kv(d: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in d.items())


def solve(ref: ScalarField, deformed: ScalarField, roi: RoiMask | None = None,
          config: SolveConfig = SolveConfig(),
          monitor: Callable[[StageTrace], None] | None = None) -> SolveReport:
    """Fit the displacement network to an image pair; u, v are returned in pixels."""
    check_same_shape(ref, deformed, roi)
    h, w = ref.shape
    roi = roi if roi is not None else RoiMask.full(w, h)
    params = network.init(replace(config.mlp, seed=config.seed))
    notes = []
    if roi.count < 10 * params.theta.size:
        msg = (f"ROI has {roi.count} pixels, fewer than 10x the {params.theta.size} "
               "network parameters; the fit may be poorly determined")
        warnings.warn(msg)
        notes.append(msg)

    t0 = time.perf_counter()
    obj = Photometric(ref, deformed, roi, config.scheme, config.border)

    def stage_objective(kind):
        def f(theta):
            ev = obj(params.with_theta(theta), kind)
            return ev.loss, ev.param_grad, ev.mean_abs_gray_error
        return f

    stages = [("formal", config.formal)]
    if config.warmup_enabled:
        stages.insert(0, ("warmup", config.warmup))
    theta = params.theta
    traces = []
    best_err, best_theta = math.inf, theta
    failed = None
    for name, stage in stages:
        theta, trace = run_stage(theta, stage_objective(stage.kind), stage, monitor, name)
        traces.append(trace)
        if trace.best_gray_error < best_err:
            best_err, best_theta = trace.best_gray_error, theta
        if trace.stop_cause is StopCause.numerical_error:
            failed = name
            break
    final = params.with_theta(best_theta)
    uv = obj.displacement(final)
    wall = time.perf_counter() - t0

    u = np.zeros((h, w))
    v = np.zeros((h, w))
    u[obj.iy, obj.ix] = uv[:, 0]
    v[obj.iy, obj.ix] = uv[:, 1]
    report = SolveReport(VectorField2(u, v), final, roi, traces, wall,
                         roi.count / wall if wall > 0 else math.inf, config, best_err, notes)
    if failed:
        raise SolveFailed(f"numerical error in the {failed} stage", report)
    return report


# -- strain ------------------------------------------------------------------------

@dataclass
class StrainField:
    exx: np.ndarray
    eyy: np.ndarray
    exy: np.ndarray
    gamma_max: np.ndarray
    valid: np.ndarray

    @property
    def invalid_count(self) -> int:
        return int((~self.valid).sum())


def max_shear(exx, eyy, exy):
    return 2.0 * np.sqrt(((exx - eyy) / 2.0) ** 2 + exy**2)


def plane_fit_gradients(values: np.ndarray, mask: np.ndarray, window: int):
    """Least-squares plane over each ``window``-square neighbourhood restricted to ``mask``.

    Returns (d/dx, d/dy, valid); pixels with fewer than 3 usable neighbours or a
    degenerate (collinear) neighbourhood are invalid and hold NaN.
    """
    if window < 3 or window % 2 == 0:
        raise ValueError("strain window must be odd and >= 3")
    k = window // 2
    off = np.arange(-k, k + 1, dtype=np.float64)
    dy, dx = np.meshgrid(off, off, indexing="ij")
    m = mask.astype(np.float64)
    f = np.where(mask, values, 0.0)

    def corr(a, kern):
        return ndimage.correlate(a, kern, mode="constant", cval=0.0)

    ones = np.ones_like(dx)
    s0, sx, sy = corr(m, ones), corr(m, dx), corr(m, dy)
    sxx, sxy, syy = corr(m, dx * dx), corr(m, dx * dy), corr(m, dy * dy)
    sf, sxf, syf = corr(f, ones), corr(f, dx), corr(f, dy)

    A = np.stack([np.stack([s0, sx, sy], -1), np.stack([sx, sxx, sxy], -1),
                  np.stack([sy, sxy, syy], -1)], -2)
    b = np.stack([sf, sxf, syf], -1)
    valid = mask & (s0 > 2.5)
    det = np.linalg.det(A[valid])
    scale = np.maximum(s0[valid], 1.0) ** 3 * max(k, 1) ** 4
    good = np.abs(det) > 1e-9 * scale
    idx = np.flatnonzero(valid.ravel())[good]
    gx = np.full(values.shape, np.nan)
    gy = np.full(values.shape, np.nan)
    sol = np.linalg.solve(A.reshape(-1, 3, 3)[idx], b.reshape(-1, 3)[idx][..., None])[..., 0]
    gx.ravel()[idx] = sol[:, 1]
    gy.ravel()[idx] = sol[:, 2]
    ok = np.zeros(values.shape, dtype=bool)
    ok.ravel()[idx] = True
    return gx, gy, ok


def strain(disp: VectorField2, roi: RoiMask | None = None,
           method: Literal["central_diff", "network_jacobian"] = "central_diff",
           window: int = 11, fit: tuple[MlpParams, tuple[int, int]] | None = None) -> StrainField:
    """Small-strain components from a displacement field.

    ``exy`` is the tensor shear 0.5 (du/dy + dv/dx).  ``network_jacobian``
    differentiates the fitted network exactly; ``fit`` is its (params, chart),
    e.g. ``(report.params, report.chart)`` or the pair returned by ``load_params``.
    """
    h, w = disp.shape
    roi = roi if roi is not None else RoiMask.full(w, h)
    roi.check_shape(disp.shape, "displacement")
    if method == "central_diff":
        ux, uy, ok_u = plane_fit_gradients(disp.u, roi.inside, window)
        vx, vy, ok_v = plane_fit_gradients(disp.v, roi.inside, window)
        valid = ok_u & ok_v
    elif method == "network_jacobian":
        if fit is None:
            raise ValueError("network_jacobian strain needs the fitted network")
        params, (cw, ch) = fit
        if (ch, cw) != (h, w):
            raise ValueError(f"network chart {cw}x{ch} does not match the {w}x{h} displacement field")
        xs, ys = roi.coords()
        J = network.input_jacobian(params, network.normalize_coords(xs, ys, cw, ch))
        sx, sy = network.normalization_scale(cw, ch)
        grids = []
        for comp in (J[:, 0, 0] * sx, J[:, 0, 1] * sy, J[:, 1, 0] * sx, J[:, 1, 1] * sy):
            g = np.full((h, w), np.nan)
            g[ys.astype(np.intp), xs.astype(np.intp)] = comp
            grids.append(g)
        ux, uy, vx, vy = grids
        valid = roi.inside.copy()
    else:
        raise ValueError(f"unknown strain method {method!r}")
    exx, eyy, exy = ux, vy, 0.5 * (uy + vx)
    return StrainField(exx, eyy, exy, max_shear(exx, eyy, exy), valid)


# -- error metrics -------------------------------------------------------------------

@dataclass
class ErrorMetrics:
    mae_u: float
    mae_v: float
    rmse_u: float
    rmse_v: float
    err_u: np.ndarray
    err_v: np.ndarray
    mask: np.ndarray

    def column_profile(self, col: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(rows, signed u error, signed v error) down one column, ROI rows only."""
        rows = np.flatnonzero(self.mask[:, col])
        return rows, self.err_u[rows, col], self.err_v[rows, col]

    def column_mae(self, col: int, rows: np.ndarray | None = None) -> tuple[float, float]:
        r, eu, ev = self.column_profile(col)
        if rows is not None:
            keep = np.isin(r, rows)
            eu, ev = eu[keep], ev[keep]
        if eu.size == 0:
            raise ValueError(f"column {col} has no ROI pixels")
        return float(np.abs(eu).mean()), float(np.abs(ev).mean())

    def summary(self) -> dict:
        return {"mae_u": self.mae_u, "mae_v": self.mae_v,
                "rmse_u": self.rmse_u, "rmse_v": self.rmse_v,
                "points": int(self.mask.sum())}


def error_metrics(disp: VectorField2, truth: VectorField2, roi: RoiMask | None = None) -> ErrorMetrics:
    check_same_shape(disp, truth, roi)
    h, w = disp.shape
    mask = roi.inside if roi is not None else np.ones((h, w), dtype=bool)
    if not mask.any():
        raise ValueError("error metrics need a non-empty ROI")
    eu = np.where(mask, disp.u - truth.u, 0.0)
    ev = np.where(mask, disp.v - truth.v, 0.0)
    n = mask.sum()
    return ErrorMetrics(
        float(np.abs(eu[mask]).sum() / n), float(np.abs(ev[mask]).sum() / n),
        float(np.sqrt((eu[mask] ** 2).sum() / n)), float(np.sqrt((ev[mask] ** 2).sum() / n)),
        eu, ev, mask.copy())


def gray_histogram(values: np.ndarray, lo_exp: int = 0, hi_exp: int = 3, per_decade: int = 4):
    """Log-spaced histogram over 10**lo_exp..10**hi_exp.

    Returns (edges, counts, below, above); ``below``/``above`` count values
    outside the edge range (NaN is ignored).
    """
    edges = np.logspace(lo_exp, hi_exp, (hi_exp - lo_exp) * per_decade + 1)
    v = np.asarray(values, dtype=np.float64).ravel()
    v = v[np.isfinite(v)]
    counts, _ = np.histogram(v, bins=edges)
    return edges, counts, int((v < edges[0]).sum()), int((v > edges[-1]).sum())


def save_strain(sf: StrainField, path) -> None:
    """Strain container: a DICF holding exx and eyy, plus exy and gamma_max."""
    save_field(VectorField2(sf.exx, sf.eyy), Path(path).with_suffix(".normal.dicf"))
    save_field(VectorField2(sf.exy, sf.gamma_max), Path(path).with_suffix(".shear.dicf"))
