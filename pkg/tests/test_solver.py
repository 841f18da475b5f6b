import warnings

import numpy as np
import pytest

from pinndic.grid import RoiMask, VectorField2, load_field
from pinndic.network import MlpConfig, load_params
from pinndic.optim import AdamConfig, LbfgsConfig, StageConfig, StopCause
from pinndic.simulate import Rigid, SpeckleConfig, Star, eval_field, make_pair, star_dv_dy
from pinndic.solver import (SolveConfig, error_metrics, gray_histogram, max_shear, solve, strain)


def small_config(adam=30, lbfgs=30, warmup=True, **kw):
    stage = dict(adam=AdamConfig(max_iters=adam), lbfgs=LbfgsConfig(max_iters=lbfgs))
    return SolveConfig(mlp=MlpConfig(hidden_layers=2, hidden_width=12, **kw),
                       warmup=StageConfig(kind="log_residual", stop_mean_gray_error=3.0, **stage),
                       formal=StageConfig(kind="mse", stop_mean_gray_error=0.1, **stage),
                       warmup_enabled=warmup)


@pytest.fixture(scope="module")
def pair():
    return make_pair(SpeckleConfig(32, 24, 150, 1.5, seed=2), Rigid(0.3, -0.2))


def quiet_solve(*args, **kw):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return solve(*args, **kw)


def test_solve_deterministic(pair):
    a = quiet_solve(pair.ref, pair.deformed, config=small_config())
    b = quiet_solve(pair.ref, pair.deformed, config=small_config())
    assert a.displacement.u.tobytes() == b.displacement.u.tobytes()
    assert a.displacement.v.tobytes() == b.displacement.v.tobytes()
    assert a.params.theta.tobytes() == b.params.theta.tobytes()
    assert a.trace_csv() == b.trace_csv()
    sa, sb = a.summary(), b.summary()
    for k in ("wall_seconds", "points_per_second"):
        sa.pop(k), sb.pop(k)
    assert sa == sb


def test_full_mask_equals_no_mask(pair):
    a = quiet_solve(pair.ref, pair.deformed, config=small_config(10, 10))
    full = RoiMask.full(pair.ref.width, pair.ref.height)
    b = quiet_solve(pair.ref, pair.deformed, full, config=small_config(10, 10))
    assert a.trace_csv() == b.trace_csv()
    assert a.displacement.u.tobytes() == b.displacement.u.tobytes()


def test_identical_images_give_zero_field(pair):
    # a tiny image cannot pull back the default several-pixel initial field
    rep = quiet_solve(pair.ref, pair.ref, config=small_config(200, 200, output_scale=1.0))
    m = error_metrics(rep.displacement, VectorField2.zeros(32, 24))
    assert m.mae_u < 0.02 and m.mae_v < 0.02


def test_small_rigid_recovered():
    b = make_pair(SpeckleConfig(48, 48, 350, 1.5, seed=5), Rigid(0.0, 0.4))
    rep = quiet_solve(b.ref, b.deformed, config=small_config(300, 300, output_scale=1.0))
    m = error_metrics(rep.displacement, b.truth)
    assert m.mae_u < 0.05 and m.mae_v < 0.05
    assert rep.final_mean_abs_gray_error < 1.0


def test_report_fields(pair, tmp_path):
    rep = quiet_solve(pair.ref, pair.deformed, config=small_config(5, 5))
    assert set(rep.stop_causes) == {"warmup", "formal"}
    assert rep.points_per_second == pytest.approx(rep.roi.count / rep.wall_seconds)
    assert rep.points_per_second > 0
    rep.save(tmp_path)
    text = (tmp_path / "summary.txt").read_text()
    assert "points_per_second=" in text and "stop_cause.formal=" in text
    assert "adam_weight_decay_mode=coupled_l2" in text
    assert load_field(tmp_path / "displacement.dicf").u.tobytes() == rep.displacement.u.tobytes()
    params, chart = load_params(tmp_path / "network.dicp")
    assert chart == (32, 24)
    assert params.theta.tobytes() == rep.params.theta.tobytes()


def test_no_warmup_single_stage(pair):
    rep = quiet_solve(pair.ref, pair.deformed, config=small_config(5, 5, warmup=False))
    assert list(rep.stop_causes) == ["formal"]


def test_small_roi_warns(pair):
    with pytest.warns(UserWarning, match="fewer than 10x"):
        rep = solve(pair.ref, pair.deformed, config=small_config(1, 1))
    assert rep.warnings


def test_roi_outside_is_zero(pair):
    inside = np.zeros((24, 32), dtype=bool)
    inside[4:20, 6:26] = True
    rep = quiet_solve(pair.ref, pair.deformed, RoiMask(inside), config=small_config(5, 5))
    assert np.all(rep.displacement.u[~inside] == 0.0)
    assert rep.roi.count == inside.sum()


def test_returns_best_not_last(pair):
    rep = quiet_solve(pair.ref, pair.deformed, config=small_config(20, 20))
    best = min(min(t.mean_abs_gray_error) for t in rep.traces)
    assert rep.final_mean_abs_gray_error == best


def test_config_stage_kinds():
    with pytest.raises(ValueError):
        SolveConfig(warmup=StageConfig(kind="mse"))


# -- strain ----------------------------------------------------------------------

@pytest.mark.parametrize("window", [3, 5, 11])
def test_strain_affine_exact(window):
    y, x = np.mgrid[0:30, 0:40].astype(float)
    sf = strain(VectorField2(0.01 * x, np.zeros_like(x)), window=window)
    assert sf.valid.all()
    assert np.abs(sf.exx - 0.01).max() < 1e-10
    assert np.abs(sf.eyy).max() < 1e-10 and np.abs(sf.exy).max() < 1e-10
    assert np.abs(sf.gamma_max - 0.01).max() < 1e-10


def test_strain_general_affine_with_roi():
    y, x = np.mgrid[0:30, 0:40].astype(float)
    disp = VectorField2(1 + 0.02 * x - 0.01 * y, -2 + 0.005 * x + 0.03 * y)
    inside = (x - 20) ** 2 + (y - 15) ** 2 < 140
    sf = strain(disp, RoiMask(inside), window=7)
    v = sf.valid
    assert np.abs(sf.exx[v] - 0.02).max() < 1e-10
    assert np.abs(sf.eyy[v] - 0.03).max() < 1e-10
    assert np.abs(sf.exy[v] + 0.0025).max() < 1e-10


def test_strain_rigid_zero():
    sf = strain(VectorField2(np.full((20, 20), 3.5), np.full((20, 20), -1.25)))
    for c in (sf.exx, sf.eyy, sf.exy, sf.gamma_max):
        assert np.abs(c).max() < 1e-10


def test_strain_star_right_half():
    s = Star()
    truth = eval_field(s, 1024, 256)
    exact = star_dv_dy(s, 1024, 256)
    # the smallest window holds the bound on every row
    e3 = np.abs(strain(truth, window=3).eyy - exact)
    assert e3[:, 513:].max() < 5e-3
    # wider windows hold it wherever the fit window is centred
    e11 = np.abs(strain(truth, window=11).eyy - exact)
    assert e11[5:-5, 513:].max() < 5e-3


def test_strain_sparse_roi_invalid():
    inside = np.zeros((9, 9), dtype=bool)
    inside[4, 4] = True
    inside[0, 0] = True
    sf = strain(VectorField2.zeros(9, 9), RoiMask(inside), window=3)
    assert sf.invalid_count == 81
    assert np.isnan(sf.exx).all()


def test_strain_window_validation():
    with pytest.raises(ValueError):
        strain(VectorField2.zeros(5, 5), window=4)


def test_strain_network_jacobian(pair):
    rep = quiet_solve(pair.ref, pair.deformed, config=small_config(3, 3))
    sf = strain(rep.displacement, method="network_jacobian", fit=(rep.params, rep.chart))
    fd = strain(rep.displacement, window=3)
    # a smooth network: the plane fit approximates its exact derivative
    assert np.nanmax(np.abs(sf.exx - fd.exx)[2:-2, 2:-2]) < 1e-2
    with pytest.raises(ValueError):
        strain(rep.displacement, method="network_jacobian")


def test_max_shear_formula():
    assert max_shear(0.03, 0.01, 0.0) == pytest.approx(0.02)
    assert max_shear(0.0, 0.0, 0.5) == pytest.approx(1.0)


# -- error metrics -------------------------------------------------------------------

def test_metrics_zero():
    f = VectorField2(np.ones((4, 5)), np.zeros((4, 5)))
    m = error_metrics(f, f)
    assert m.mae_u == m.mae_v == m.rmse_u == m.rmse_v == 0.0


def test_metrics_constant_error():
    truth = VectorField2.zeros(6, 4)
    m = error_metrics(VectorField2(np.full((4, 6), 0.1), np.zeros((4, 6))), truth)
    assert m.mae_u == pytest.approx(0.1, abs=1e-15) and m.rmse_u == pytest.approx(0.1, abs=1e-15)


def test_metrics_scalar_loop():
    rng = np.random.default_rng(4)
    a = VectorField2(rng.normal(size=(7, 9)), rng.normal(size=(7, 9)))
    b = VectorField2(rng.normal(size=(7, 9)), rng.normal(size=(7, 9)))
    inside = rng.random((7, 9)) > 0.3
    m = error_metrics(a, b, RoiMask(inside))
    su = sv = qu = n = 0.0
    for y in range(7):
        for x in range(9):
            if inside[y, x]:
                du = a.u[y, x] - b.u[y, x]
                su += abs(du)
                qu += du * du
                sv += abs(a.v[y, x] - b.v[y, x])
                n += 1
    assert m.mae_u == pytest.approx(su / n, abs=1e-12)
    assert m.mae_v == pytest.approx(sv / n, abs=1e-12)
    assert m.rmse_u == pytest.approx((qu / n) ** 0.5, abs=1e-12)


def test_column_profile():
    truth = VectorField2.zeros(4, 3)
    err = np.arange(12.0).reshape(3, 4)
    m = error_metrics(VectorField2(np.zeros((3, 4)), err), truth)
    rows, eu, ev = m.column_profile(2)
    assert rows.tolist() == [0, 1, 2] and ev.tolist() == [2.0, 6.0, 10.0]
    assert m.column_mae(2) == (0.0, 6.0)


def test_metrics_empty_roi():
    with pytest.raises(Exception):
        error_metrics(VectorField2.zeros(2, 2), VectorField2.zeros(2, 2),
                      RoiMask(np.zeros((2, 2), dtype=bool)))


def test_gray_histogram():
    edges, counts, below, above = gray_histogram(np.array([0.5, 1.5, 20.0, 999.0, 5000.0, np.nan]))
    assert len(edges) == 13 and edges[0] == 1.0 and edges[-1] == 1000.0
    assert counts.sum() == 3 and below == 1 and above == 1
