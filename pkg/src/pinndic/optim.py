"""Adam, L-BFGS and the staged schedule with early stopping.

A stage runs Adam for its budget and then L-BFGS for its budget.  After every
iteration the mean absolute gray error is compared with the stage threshold;
after every epoch the plateau rule is applied to the epoch-mean loss.  The
plateau rule ends the current optimizer phase (so a flat Adam phase hands over
to L-BFGS); the gray-error threshold ends the whole stage.
"""
from __future__ import annotations

import enum
import io
import math
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .network import NumericalError

# theta -> (loss, grad, mean_abs_gray_error)
StageObjective = Callable[[np.ndarray], tuple[float, np.ndarray, float]]


class StopCause(str, enum.Enum):
    gray_error_threshold = "gray_error_threshold"
    plateau = "plateau"
    max_iters = "max_iters"
    line_search_failure = "line_search_failure"
    numerical_error = "numerical_error"


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-4
    max_iters: int = 1000

    def __post_init__(self):
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if not (self.lr > 0 and self.eps > 0):
            raise ValueError("Adam lr and eps must be > 0")


@dataclass(frozen=True)
class LbfgsConfig:
    lr: float = 1.0
    max_iters: int = 2000
    history: int = 10
    c1: float = 1e-4
    c2: float = 0.9
    max_ls: int = 25
    grad_tol: float = 1e-10

    def __post_init__(self):
        if self.history < 1:
            raise ValueError("L-BFGS history must be >= 1")
        if not 0 < self.c1 < self.c2 < 1:
            raise ValueError("need 0 < c1 < c2 < 1")


@dataclass(frozen=True)
class PlateauRule:
    epoch_len: int = 100
    rel_change: float = 0.01
    consecutive: int = 3

    def __post_init__(self):
        if self.epoch_len < 1 or self.consecutive < 1:
            raise ValueError("epoch_len and consecutive must be >= 1")


@dataclass(frozen=True)
class StageConfig:
    kind: str = "mse"
    adam: AdamConfig = field(default_factory=AdamConfig)
    lbfgs: LbfgsConfig = field(default_factory=LbfgsConfig)
    max_iters: int = 4000
    stop_mean_gray_error: float = 0.1
    plateau: PlateauRule = field(default_factory=PlateauRule)

    def __post_init__(self):
        if not self.stop_mean_gray_error > 0:
            raise ValueError("gray-error threshold must be > 0")


# -- Adam --------------------------------------------------------------------

@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int) -> "AdamState":
        return cls(np.zeros(n), np.zeros(n), 0)


def adam_step(state: AdamState, theta: np.ndarray, grad: np.ndarray,
              config: AdamConfig) -> tuple[AdamState, np.ndarray]:
    """One bias-corrected Adam update with L2 weight decay folded into the gradient."""
    if state.m.shape != theta.shape:
        raise ValueError("Adam state does not match the parameter vector")
    if not np.all(np.isfinite(grad)):
        raise NumericalError("non-finite gradient in Adam step")
    g = grad + config.weight_decay * theta if config.weight_decay else grad
    t = state.t + 1
    m = config.beta1 * state.m + (1 - config.beta1) * g
    v = config.beta2 * state.v + (1 - config.beta2) * g * g
    mhat = m / (1 - config.beta1**t)
    vhat = v / (1 - config.beta2**t)
    return AdamState(m, v, t), theta - config.lr * mhat / (np.sqrt(vhat) + config.eps)


# -- strong Wolfe line search -------------------------------------------------

def _cubic_interpolate(x1, f1, g1, x2, f2, g2, lo=None, hi=None):
    if lo is None:
        lo, hi = (x1, x2) if x1 <= x2 else (x2, x1)
    d1 = g1 + g2 - 3 * (f1 - f2) / (x1 - x2)
    d2_sq = d1 * d1 - g1 * g2
    if d2_sq >= 0:
        d2 = math.sqrt(d2_sq)
        if x1 <= x2:
            pos = x2 - (x2 - x1) * ((g2 + d2 - d1) / (g2 - g1 + 2 * d2))
        else:
            pos = x1 - (x1 - x2) * ((g1 + d2 - d1) / (g1 - g2 + 2 * d2))
        if math.isfinite(pos):
            return min(max(pos, lo), hi)
    return (lo + hi) / 2.0


# relative size of a loss change treated as rounding noise
F_ROUNDING = 64 * np.finfo(np.float64).eps


def sufficient_decrease(f: float, t: float, gtd: float, f0: float, gtd0: float, c1: float) -> bool:
    """Armijo test, with the approximate (derivative) form once f is flat to rounding.

    Close to a minimum the Armijo decrease falls below the rounding error of f
    itself; then ``gtd <= (2 c1 - 1) gtd0``, exact for quadratics, stands in for it
    (Hager and Zhang's approximate Wolfe condition).  The computed loss may then
    rise by at most ``F_ROUNDING`` relative.
    """
    if f <= f0 + c1 * t * gtd0:
        return True
    return abs(f - f0) <= F_ROUNDING * abs(f0) and gtd <= (2 * c1 - 1) * gtd0


@dataclass
class _Point:
    t: float
    f: float
    g: np.ndarray
    aux: object
    gtd: float


def strong_wolfe(fun, x: np.ndarray, d: np.ndarray, t: float, f0: float, g0: np.ndarray,
                 c1: float = 1e-4, c2: float = 0.9, max_ls: int = 25):
    """Bracketing/zoom line search for the strong Wolfe conditions.

    ``fun(x) -> (f, g, aux)``.  Returns ``(point, n_evals)`` where ``point`` is
    None when no step satisfying both conditions was found within ``max_ls``
    evaluations.
    """
    gtd0 = float(g0 @ d)
    evals = 0

    def probe(step):
        nonlocal evals
        evals += 1
        f, g, aux = fun(x + step * d)
        return _Point(step, f, g, aux, float(g @ d))

    def armijo(p):
        return sufficient_decrease(p.f, p.t, p.gtd, f0, gtd0, c1)

    def wolfe(p):
        return armijo(p) and abs(p.gtd) <= -c2 * gtd0

    prev = _Point(0.0, f0, g0, None, gtd0)
    bracket = None
    while evals < max_ls:
        cur = probe(t)
        if not (math.isfinite(cur.f) and np.all(np.isfinite(cur.g))):
            bracket = (prev, cur)
            cur.f = math.inf
            break
        if not armijo(cur) or (evals > 1 and cur.f > prev.f):
            bracket = (prev, cur)
            break
        if abs(cur.gtd) <= -c2 * gtd0:
            return cur, evals
        if cur.gtd >= 0:
            bracket = (cur, prev)
            break
        step = _cubic_interpolate(prev.t, prev.f, prev.gtd, cur.t, cur.f, cur.gtd,
                                  lo=t + 0.01 * (t - prev.t), hi=t * 10)
        prev, t = cur, step
    if bracket is None:
        return None, evals

    # zoom: lo keeps the lowest Armijo-satisfying value, hi the other end
    lo, hi = bracket
    while evals < max_ls:
        if abs(hi.t - lo.t) * max(1.0, float(np.abs(d).max())) < 1e-16:
            break
        if math.isfinite(hi.f):
            step = _cubic_interpolate(lo.t, lo.f, lo.gtd, hi.t, hi.f, hi.gtd)
        else:
            step = (lo.t + hi.t) / 2
        # keep trial points away from the bracket ends
        a, b = min(lo.t, hi.t), max(lo.t, hi.t)
        eps = 0.1 * (b - a)
        if min(b - step, step - a) < eps:
            step = b - eps if b - step < step - a else a + eps
        cur = probe(step)
        if not math.isfinite(cur.f) or not np.all(np.isfinite(cur.g)):
            cur.f = math.inf
            hi = cur
            continue
        if not armijo(cur) or cur.f > lo.f:
            hi = cur
        else:
            if abs(cur.gtd) <= -c2 * gtd0:
                return cur, evals
            if cur.gtd * (hi.t - lo.t) >= 0:
                hi = lo
            lo = cur
    if lo.t > 0 and wolfe(lo):
        return lo, evals
    return None, evals


# -- L-BFGS --------------------------------------------------------------------

class Lbfgs:
    """Stateful L-BFGS driver; one call to :meth:`step` is one iteration."""

    def __init__(self, fun, theta: np.ndarray, config: LbfgsConfig = LbfgsConfig(),
                 start: tuple[float, np.ndarray, object] | None = None):
        self.fun = fun
        self.config = config
        self.theta = np.array(theta, dtype=np.float64)
        self.s: list[np.ndarray] = []
        self.y: list[np.ndarray] = []
        self.rho: list[float] = []
        self.n_evals = 0
        if start is None:
            start = fun(self.theta)
            self.n_evals += 1
        self.f, self.g, self.aux = start
        self.iterations = 0

    def direction(self, g: np.ndarray) -> np.ndarray:
        q = -g.copy()
        alpha = [0.0] * len(self.s)
        for i in range(len(self.s) - 1, -1, -1):
            alpha[i] = self.rho[i] * float(self.s[i] @ q)
            q -= alpha[i] * self.y[i]
        if self.s:
            q *= float(self.s[-1] @ self.y[-1]) / float(self.y[-1] @ self.y[-1])
        for i in range(len(self.s)):
            beta = self.rho[i] * float(self.y[i] @ q)
            q += (alpha[i] - beta) * self.s[i]
        return q

    def reset_memory(self) -> None:
        self.s.clear()
        self.y.clear()
        self.rho.clear()

    def step(self) -> str | None:
        """Advance one iteration; return a stop reason or None.

        Stop reasons: ``"grad_tol"`` (converged, parameters unchanged) and
        ``"line_search_failure"``.
        """
        cfg = self.config
        if not np.all(np.isfinite(self.g)):
            raise NumericalError("non-finite gradient in L-BFGS")
        if float(np.abs(self.g).max(initial=0.0)) <= cfg.grad_tol:
            return "grad_tol"
        for attempt in range(2):
            if self.s:
                d = self.direction(self.g)
                t0 = cfg.lr
                if float(self.g @ d) >= 0:
                    self.reset_memory()
                    continue
            else:
                d = -self.g
                t0 = min(1.0, 1.0 / float(np.abs(self.g).sum())) * cfg.lr
            pt, ne = strong_wolfe(self.fun, self.theta, d, t0, self.f, self.g,
                                  cfg.c1, cfg.c2, cfg.max_ls)
            self.n_evals += ne
            if pt is not None:
                break
            if not self.s:
                return "line_search_failure"
            # stale curvature pairs can spoil the direction: retry as steepest descent
            self.reset_memory()
        else:
            return "line_search_failure"
        gtd0 = float(self.g @ d)
        assert sufficient_decrease(pt.f, pt.t, pt.gtd, self.f, gtd0, cfg.c1), "Armijo condition violated"
        assert abs(pt.gtd) <= -cfg.c2 * gtd0, "curvature condition violated"
        s = pt.t * d
        y = pt.g - self.g
        ys = float(y @ s)
        if ys > 1e-10 * float(np.linalg.norm(s) * np.linalg.norm(y)):
            self.s.append(s)
            self.y.append(y)
            self.rho.append(1.0 / ys)
            if len(self.s) > cfg.history:
                del self.s[0], self.y[0], self.rho[0]
        self.theta = self.theta + s
        self.f, self.g, self.aux = pt.f, pt.g, pt.aux
        self.iterations += 1
        return None


@dataclass
class LbfgsHistory:
    loss: list[float]
    stop: str
    iterations: int
    n_evals: int


def lbfgs_run(theta: np.ndarray, fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
              config: LbfgsConfig = LbfgsConfig()) -> tuple[np.ndarray, LbfgsHistory]:
    """Minimize ``fun`` (returning loss and gradient) from ``theta``."""
    def wrapped(x):
        f, g = fun(x)
        return float(f), np.asarray(g, dtype=np.float64), None

    opt = Lbfgs(wrapped, theta, config)
    losses = [opt.f]
    stop = "max_iters"
    for _ in range(config.max_iters):
        reason = opt.step()
        if reason is not None:
            stop = reason
            break
        losses.append(opt.f)
    return opt.theta, LbfgsHistory(losses, stop, opt.iterations, opt.n_evals)


# -- plateau rule and stages ----------------------------------------------------

class PlateauDetector:
    """Fires once the epoch-mean loss changed by less than ``rel_change``
    (relative to the previous epoch) for ``consecutive`` epoch pairs in a row."""

    def __init__(self, rule: PlateauRule = PlateauRule()):
        self.rule = rule
        self.reset()

    def reset(self) -> None:
        self._buf: list[float] = []
        self._prev: float | None = None
        self._streak = 0
        self.epoch_means: list[float] = []

    def update(self, loss: float) -> bool:
        self._buf.append(loss)
        if len(self._buf) < self.rule.epoch_len:
            return False
        mean = math.fsum(self._buf) / len(self._buf)
        self._buf = []
        self.epoch_means.append(mean)
        if self._prev is not None:
            rel = abs(mean - self._prev) / max(self._prev, 1e-30)
            self._streak = self._streak + 1 if rel < self.rule.rel_change else 0
        self._prev = mean
        return self._streak >= self.rule.consecutive


@dataclass
class StageTrace:
    name: str = ""
    iteration: list[int] = field(default_factory=list)
    loss: list[float] = field(default_factory=list)
    mean_abs_gray_error: list[float] = field(default_factory=list)
    optimizer: list[str] = field(default_factory=list)
    stop_cause: StopCause | None = None
    phase_causes: dict = field(default_factory=dict)
    n_evals: int = 0
    best_gray_error: float = math.inf

    @property
    def steps(self) -> int:
        """Optimizer iterations taken (the initial evaluation is not a step)."""
        return sum(1 for o in self.optimizer if o != "init")

    def record(self, it: int, loss: float, err: float, opt: str) -> None:
        self.iteration.append(it)
        self.loss.append(loss)
        self.mean_abs_gray_error.append(err)
        self.optimizer.append(opt)

    def to_csv(self, header: bool = True) -> str:
        out = io.StringIO()
        if header:
            out.write("iter,loss,mean_abs_gray_error,stage,optimizer\n")
        for it, l, e, o in zip(self.iteration, self.loss, self.mean_abs_gray_error, self.optimizer):
            out.write(f"{it},{l!r},{e!r},{self.name},{o}\n")
        return out.getvalue()


class _StopStage(Exception):
    def __init__(self, cause: StopCause):
        self.cause = cause


def run_stage(theta: np.ndarray, objective: StageObjective, config: StageConfig,
              monitor: Callable[[StageTrace], None] | None = None,
              name: str = "") -> tuple[np.ndarray, StageTrace]:
    """Run Adam then L-BFGS on ``objective`` and return the best parameters seen.

    "Best" is the lowest mean absolute gray error; numerical failures end the
    stage early and still return the best-so-far parameters.
    """
    trace = StageTrace(name=name)
    best = {"err": math.inf, "theta": np.array(theta, dtype=np.float64)}
    count = {"it": 0}

    def note(x, f, err, opt):
        trace.record(count["it"], f, err, opt)
        if err < best["err"]:
            best["err"], best["theta"] = err, np.array(x, dtype=np.float64)
        if monitor is not None:
            monitor(trace)

    def evaluate(x):
        trace.n_evals += 1
        f, g, err = objective(x)
        if not (math.isfinite(f) and np.all(np.isfinite(g))):
            raise NumericalError("non-finite loss or gradient")
        return f, g, err

    x = np.array(theta, dtype=np.float64)
    try:
        f, g, err = evaluate(x)
        note(x, f, err, "init")
        if err <= config.stop_mean_gray_error:
            raise _StopStage(StopCause.gray_error_threshold)

        def after_step(xn, fn, errn, opt, detector):
            count["it"] += 1
            note(xn, fn, errn, opt)
            if errn <= config.stop_mean_gray_error:
                raise _StopStage(StopCause.gray_error_threshold)
            if detector.update(fn):
                return StopCause.plateau
            if count["it"] >= config.max_iters:
                raise _StopStage(StopCause.max_iters)
            return None

        # Adam phase
        cause = StopCause.max_iters
        if config.adam.max_iters > 0:
            state = AdamState.zeros(x.size)
            det = PlateauDetector(config.plateau)
            for _ in range(config.adam.max_iters):
                state, x = adam_step(state, x, g, config.adam)
                f, g, err = evaluate(x)
                c = after_step(x, f, err, "adam", det)
                if c is not None:
                    cause = c
                    break
            trace.phase_causes["adam"] = cause

        # L-BFGS phase
        if config.lbfgs.max_iters > 0:
            cause = StopCause.max_iters
            def evaluate_ls(xt):
                # an overlong trial step must shrink the step, not end the stage
                try:
                    return evaluate(xt)
                except (NumericalError, FloatingPointError):
                    return math.inf, np.full_like(xt, np.nan), math.inf

            opt = Lbfgs(evaluate_ls, x, config.lbfgs, start=(f, g, err))
            det = PlateauDetector(config.plateau)
            for _ in range(config.lbfgs.max_iters):
                reason = opt.step()
                if reason == "grad_tol":
                    cause = StopCause.plateau
                    break
                if reason == "line_search_failure":
                    cause = StopCause.line_search_failure
                    break
                c = after_step(opt.theta, opt.f, opt.aux, "lbfgs", det)
                if c is not None:
                    cause = c
                    break
            trace.phase_causes["lbfgs"] = cause
        trace.stop_cause = cause
    except _StopStage as stop:
        trace.stop_cause = stop.cause
    except (NumericalError, FloatingPointError):
        trace.stop_cause = StopCause.numerical_error
    trace.best_gray_error = best["err"]
    return best["theta"], trace
