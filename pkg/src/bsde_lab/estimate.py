"""Empirical checks of the a priori estimate on solved fields."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DomainError, RegressionError
from .regression import RegressionConfig, StepRegressor, multi_indices
from .report import VerificationReport
from .scenario import GeneratorSpec
from .solver import NOISE_SE, SolutionField
from .special_functions import CriticalParams, apriori_constant_C, log_phi, psi, E

BINS = RegressionConfig(kind="bins", n_bins=20)


def field_regression(field: SolutionField) -> RegressionConfig:
    """The estimator the field was solved with, falling back to 20 bins."""
    cfg = field.meta.get("regression_config")
    return BINS if cfg is None else RegressionConfig.from_dict(cfg)


@dataclass(eq=False)
class BarField:
    ybar: np.ndarray  # (M, N+1), >= 0
    zbar: np.ndarray  # (M, N, d)
    beta: float
    zbar_meta: str = "zbar_k = exp(beta t_k) sgn(y_k) z_k with sgn(y) = 1 if y > 0 else -1"


@dataclass(eq=False)
class StoppingField:
    tau: np.ndarray  # (M,) grid indices in [anchor, N]
    anchor_index: int


def _g0_abs(gen: GeneratorSpec, t: float, m: int, d: int) -> np.ndarray:
    if gen.f_bound is not None:
        return np.full(m, float(gen.f_bound(t)))
    return np.abs(gen.g0(t, m, d))


def accumulated_g0(field: SolutionField, gen: GeneratorSpec, beta: float = 0.0) -> np.ndarray:
    """Left-endpoint sums of exp(beta t_j)|g(t_j,0,0)| dt_j, shape (M, N+1)."""
    grid = field.grid
    m, d = field.n_paths, field.z.shape[2]
    acc = np.zeros((m, grid.n_steps + 1))
    for j in range(grid.n_steps):
        t = float(grid.times[j])
        acc[:, j + 1] = acc[:, j] + math.exp(beta * t) * _g0_abs(gen, t, m, d) * grid.dt[j]
    return acc


def bar_transform(field: SolutionField, gen: GeneratorSpec, beta: Optional[float] = None) -> BarField:
    """Ybar_k = exp(beta t_k)|y_k| + sum_{j<k} exp(beta t_j)|g(t_j,0,0)| dt_j.

    ``beta`` defaults to the generator's constant.  For generators carrying
    an ``f_bound`` that bound replaces |g(t,0,0)|.
    """
    b = gen.beta if beta is None else float(beta)
    w = np.exp(b * field.grid.times)
    ybar = w[None, :] * np.abs(field.y) + accumulated_g0(field, gen, b)
    sgn = np.where(field.y[:, :-1] > 0, 1.0, -1.0)
    zbar = (w[None, :-1] * sgn)[:, :, None] * field.z
    return BarField(ybar, zbar, b)


def _log_phi_x(t_anchor, s, x, params):
    lv = log_phi(t_anchor, s, x, params)
    le = np.log(x + E)
    v = np.sqrt(2.0 * le)
    a = params.gamma * np.sqrt(s)
    return lv + np.log(a + v) - le - np.log(v)


def localization_times(field: SolutionField, bar: BarField, anchor_index: int, n_level: float,
                       params: CriticalParams) -> StoppingField:
    """First grid index s >= anchor where sum_{anchor<=r<s} phi_x^2 |zbar_r|^2 dt_r >= n_level."""
    grid = field.grid
    n = grid.n_steps
    if not 1 <= anchor_index <= n:
        raise DomainError(f"anchor_index must lie in [1, {n}]")
    m = field.n_paths
    t_a = float(grid.times[anchor_index])
    cum = np.zeros(m)
    tau = np.full(m, n, dtype=np.intp)
    alive = np.ones(m, dtype=bool)
    with np.errstate(over="ignore", divide="ignore"):
        for s in range(anchor_index, n + 1):
            hit = alive & (cum >= n_level)
            tau[hit] = s
            alive &= ~hit
            if s == n or not alive.any():
                break
            t_s = float(grid.times[s])
            lx = _log_phi_x(t_a, t_s, bar.ybar[:, s], params)
            zz = np.sum(bar.zbar[:, s, :] ** 2, axis=1)
            cum = cum + np.exp(2.0 * lx) * zz * grid.dt[s]
    return StoppingField(tau, anchor_index)


def _log_v(field, bar, anchor_index, params):
    grid = field.grid
    t_a = float(grid.times[anchor_index])
    ks = np.arange(anchor_index, grid.n_steps + 1)
    return ks, np.stack([log_phi(t_a, float(grid.times[k]), bar.ybar[:, k], params) for k in ks], axis=1)


def supermartingale_test(field: SolutionField, gen: GeneratorSpec, anchor_index: int, params: CriticalParams,
                         reg: Optional[RegressionConfig] = None, n_level: float = math.inf,
                         max_violation_rate: float = 0.0, band: float = NOISE_SE) -> VerificationReport:
    """Discrete check that V_k = phi(t_k, Ybar_k; t_anchor) has nonnegative drift.

    At each step k >= anchor, over paths not yet stopped, E_k[V_{k+1} - V_k]
    is regressed on B_{t_k}; a violation is a fitted value below -band
    standard errors.  Increments are handled on a per-step common scale so
    large V stays finite.  ``reg`` defaults to the estimator the field was
    solved with: the discrete property only holds relative to the
    conditional expectation the solver actually used.
    """
    if not ({"H1", "one_sided"} & gen.class_tags):
        raise DomainError(f"generator {gen.name!r} is neither H1 nor one_sided")
    ens = field.ensemble
    if ens is None:
        raise DomainError("field carries no ensemble; regression states unavailable")
    reg = field_regression(field) if reg is None else reg
    bar = bar_transform(field, gen, beta=params.beta)
    stop = localization_times(field, bar, anchor_index, n_level, params)
    ks, lv = _log_v(field, bar, anchor_index, params)
    n_viol = n_tot = 0
    worst = math.inf
    details = []
    for col, k in enumerate(ks[:-1]):
        alive = stop.tau > k
        if alive.sum() < 4 * max(reg.n_bins if reg.kind == "bins" else len(multi_indices(ens.dim, reg.degree)), 3):
            continue
        c = float(max(lv[alive, col].max(), lv[alive, col + 1].max()))
        inc = np.exp(lv[alive, col + 1] - c) - np.exp(lv[alive, col] - c)
        try:
            fit = StepRegressor(ens.state(int(k))[alive], float(field.grid.times[k]), reg, step=int(k)).fit(inc)
        except RegressionError as exc:
            details.append({"step": int(k), "error": str(exc)})
            n_viol += int(alive.sum())
            n_tot += int(alive.sum())
            worst = -math.inf
            continue
        floor = 1e-13 * float(np.max(np.abs(np.exp(lv[alive, col] - c))))
        se = np.maximum(fit.se, floor)
        norm = fit.values / se
        bad = fit.values < -band * se
        n_viol += int(bad.sum())
        n_tot += int(alive.sum())
        i = int(np.argmin(norm))
        worst = min(worst, float(norm[i]))
        details.append({"step": int(k), "time": float(field.grid.times[k]), "alive": int(alive.sum()),
                        "min_normalized_drift": float(norm[i]), "violations": int(bad.sum()),
                        "mean_drift_scaled": float(np.mean(fit.values))})
    rate = n_viol / max(n_tot, 1)
    return VerificationReport(
        check_name=f"supermartingale[{gen.name}, anchor={anchor_index}]",
        passed=rate <= max_violation_rate and n_tot > 0, worst_margin=worst, violation_rate=rate,
        noise_band=band, seed=field.meta.get("seed"), details=details)


def stopped_means(field: SolutionField, gen: GeneratorSpec, stop: StoppingField, params: CriticalParams):
    """E[V_{tau ^ k}] and its standard error for k from the anchor to N."""
    bar = bar_transform(field, gen, beta=params.beta)
    ks, lv = _log_v(field, bar, stop.anchor_index, params)
    m = field.n_paths
    means, ses = [], []
    for col, k in enumerate(ks):
        idx = np.minimum(stop.tau, k) - stop.anchor_index
        vals = np.exp(lv[np.arange(m), idx])
        means.append(float(vals.mean()))
        ses.append(float(vals.std(ddof=1) / math.sqrt(m)))
    return ks, np.array(means), np.array(ses)


def check_apriori_bound(field: SolutionField, gen: GeneratorSpec, xi, params: CriticalParams,
                        reg: Optional[RegressionConfig] = None, max_violation_rate: float = 0.01,
                        band: float = NOISE_SE) -> VerificationReport:
    """psi(|Y_k|, g sqrt t_k) <= C E_k[psi(|xi| + sum |g0| dt, g sqrt T)] + C at every grid time."""
    ens = field.ensemble
    grid = field.grid
    reg = field_regression(field) if reg is None else reg
    C = apriori_constant_C(params)
    mu_T = params.gamma * math.sqrt(grid.horizon)
    acc = accumulated_g0(field, gen)[:, -1]
    w = psi(np.abs(np.asarray(xi, dtype=float)) + acc, mu_T)
    n_viol = n_tot = 0
    tight = 0.0
    details = []
    for k in range(grid.n_steps + 1):
        t = float(grid.times[k])
        lhs = psi(np.abs(field.y[:, k]), params.gamma * math.sqrt(t))
        if k == grid.n_steps:
            cond, se = w, np.zeros_like(w)
        else:
            fit = StepRegressor(ens.state(k), t, reg, step=k).fit(w)
            cond, se = fit.values, fit.se
        rhs = C * cond + C
        bad = lhs > rhs + band * C * se
        n_viol += int(bad.sum())
        n_tot += lhs.size
        ratio = float(np.max(lhs / rhs)) if np.all(rhs > 0) else math.inf
        tight = max(tight, ratio)
        details.append({"step": k, "time": t, "violations": int(bad.sum()), "max_ratio": ratio})
    rate = n_viol / n_tot
    return VerificationReport(
        check_name=f"apriori_bound[{gen.name}]", passed=rate <= max_violation_rate,
        worst_margin=1.0 - tight, violation_rate=rate, noise_band=band, seed=field.meta.get("seed"),
        details=[{"C": C, "tightness": tight}] + details)


def hitting_times(abs_y: np.ndarray, level: float) -> np.ndarray:
    hit = abs_y >= level
    first = np.argmax(hit, axis=1)
    return np.where(hit.any(axis=1), first, abs_y.shape[1] - 1)


def class_d_diagnostic(field: SolutionField, params: CriticalParams, thresholds: Sequence[float],
                       levels: Optional[Sequence[float]] = None, fraction: float = 0.5) -> VerificationReport:
    """Tail curve c -> sup_tau E[psi(|Y_tau|, g sqrt tau) 1{psi > c}] over a surrogate family.

    The family is every deterministic grid time plus the hitting times of
    |Y| at ``levels`` (default: 50/90/99% quantiles of |Y|).  PASS when the
    curve is non-increasing and its last value is at most ``fraction`` of
    the c = 0 value.
    """
    th = np.asarray(thresholds, dtype=float)
    if th.size == 0 or np.any(th <= 0) or np.any(np.diff(th) <= 0):
        raise DomainError("thresholds must be positive and increasing")
    grid = field.grid
    m = field.n_paths
    abs_y = np.abs(field.y)
    mus = params.gamma * np.sqrt(grid.times)
    x = psi(abs_y, mus[None, :])
    if levels is None:
        levels = [float(q) for q in np.quantile(abs_y, [0.5, 0.9, 0.99])]
    family = [("t", k, np.full(m, k)) for k in range(grid.n_steps + 1)]
    family += [("hit", float(lv), hitting_times(abs_y, lv)) for lv in levels]
    cs = np.concatenate([[0.0], th])

    def curve(members):
        vals, arg = [], []
        for c in cs:
            best, who = -math.inf, None
            for kind, label, tau in members:
                xt = x[np.arange(m), tau]
                v = float(np.mean(np.where(xt > c, xt, 0.0)))
                if v > best:
                    best, who = v, f"{kind}:{label}"
            vals.append(best)
            arg.append(who)
        return np.array(vals), arg

    full, arg = curve(family)
    det, _ = curve(family[: grid.n_steps + 1])
    monotone = bool(np.all(np.diff(full) <= 0))
    ok = monotone and full[-1] <= fraction * full[0]
    details = [{"threshold": float(c), "tail": float(v), "argmax": a, "deterministic_tail": float(dv)}
               for c, v, a, dv in zip(cs, full, arg, det)]
    return VerificationReport(
        check_name="class_d_surrogate", passed=ok, worst_margin=float(fraction * full[0] - full[-1]),
        violation_rate=0.0 if monotone else 1.0, noise_band=0.0, seed=field.meta.get("seed"), details=details)
