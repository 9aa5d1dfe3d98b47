"""Machinery for comparing two solutions of the same equation.

Linearised coefficients of the difference equation, the geometric
3/4-cascade of subintervals, the exponential-square moment check, the
pathwise majorant of |dY| at hitting times, and cross-method experiments.
"""
from __future__ import annotations

import csv
import io
import math
import warnings
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigError, DomainError
from .report import VerificationReport
from .scenario import GeneratorSpec, PathEnsemble, TerminalSpec, TimeGrid, eval_terminal
from .solver import NOISE_SE, SolutionField, SolverConfig
from .special_functions import CriticalParams, exp_moment_bound, psi, young_log_margin

GUARD = 1e-12
CASCADE_RATIO = Fraction(3, 4)


@dataclass(eq=False)
class LinearizedCoeffs:
    u: np.ndarray  # (M, N)
    v: np.ndarray  # (M, N, d)
    residual: np.ndarray  # (M, N) |dg - (u dY + v.dZ)|
    eta: float

    @property
    def max_residual(self) -> float:
        return float(np.max(self.residual)) if self.residual.size else 0.0


def _quotient(num, den, scale, eta):
    guard = eta * scale
    safe = np.where(np.abs(den) > guard, den, 1.0)
    return np.where(np.abs(den) > guard, num / safe, 0.0)


def linearize(gen: GeneratorSpec, field1: SolutionField, field2: SolutionField, eta: float = GUARD,
              clip: bool = True) -> LinearizedCoeffs:
    """u dY + v.dZ = g(Y1, Z1) - g(Y2, Z2) by difference quotients.

    u uses (g(Y1,Z1) - g(Y2,Z1)) / dY.  v sweeps the z-coordinates one at a
    time from Z1 to Z2.  A quotient whose denominator is below
    eta * (1 + |a| + |b|) is set to 0.  For Lipschitz generators the
    quotients are clipped to [-beta, beta] and [-gamma, gamma], which only
    removes rounding excess.
    """
    if not eta > 0:
        raise DomainError("guard eta must be positive")
    if field1.grid != field2.grid or field1.y.shape != field2.y.shape or field1.z.shape != field2.z.shape:
        raise DomainError("fields must share grid and ensemble shape")
    lip = clip and "H2" in gen.class_tags
    grid = field1.grid
    m, n, d = field1.z.shape
    u = np.zeros((m, n))
    v = np.zeros((m, n, d))
    res = np.zeros((m, n))
    for k in range(n):
        t = float(grid.times[k])
        y1, y2 = field1.y[:, k], field2.y[:, k]
        z1, z2 = field1.z[:, k, :], field2.z[:, k, :]
        g11 = np.asarray(gen(t, y1, z1), dtype=float)
        g21 = np.asarray(gen(t, y2, z1), dtype=float)
        uk = _quotient(g11 - g21, y1 - y2, 1.0 + np.abs(y1) + np.abs(y2), eta)
        if lip:
            uk = np.clip(uk, -gen.beta, gen.beta)
        zc = z1.copy()
        g_prev = g21
        for i in range(d):
            zc[:, i] = z2[:, i]
            g_next = np.asarray(gen(t, y2, zc), dtype=float)
            vi = _quotient(g_prev - g_next, z1[:, i] - z2[:, i], 1.0 + np.abs(z1[:, i]) + np.abs(z2[:, i]), eta)
            if lip:
                vi = np.clip(vi, -gen.gamma, gen.gamma)
            v[:, k, i] = vi
            g_prev = g_next
        u[:, k] = uk
        res[:, k] = np.abs(g11 - g_prev - (uk * (y1 - y2) + np.sum(v[:, k, :] * (z1 - z2), axis=1)))
    return LinearizedCoeffs(u, v, res, eta)


@dataclass(frozen=True)
class SubintervalCascade:
    """[T (3/4)^{k+1}, T (3/4)^k] for k < depth, in exact arithmetic."""

    horizon: Fraction
    cutoff: Fraction
    intervals: tuple

    @property
    def depth(self) -> int:
        return len(self.intervals)

    @property
    def tail(self) -> tuple:
        return (Fraction(0), self.intervals[-1][0])

    def float_intervals(self) -> list:
        return [(float(a), float(b)) for a, b in self.intervals]


def subinterval_cascade(T: float, cutoff: Optional[float] = None) -> SubintervalCascade:
    """Geometric cascade kept while the left endpoint is at least ``cutoff`` (default T/100).

    ``T`` and ``cutoff`` may be floats (converted exactly) or Fractions.
    """
    horizon = Fraction(T)
    cut = horizon / 100 if cutoff is None else Fraction(cutoff)
    if not (horizon > 0 and 0 < cut < horizon):
        raise DomainError("need 0 < cutoff < T")
    out = []
    right = horizon
    while True:
        left = right * CASCADE_RATIO
        if left < cut:
            break
        out.append((left, right))
        right = left
    if not out:
        raise DomainError(f"cutoff {float(cut)} leaves no interval (first left endpoint is {float(horizon * CASCADE_RATIO)})")
    return SubintervalCascade(horizon, cut, tuple(out))


def depth_cutoff(T: float, depth: int) -> Fraction:
    """Cutoff producing exactly ``depth`` intervals."""
    return Fraction(T) * CASCADE_RATIO ** depth


def window(grid: TimeGrid, left: float, right: float) -> tuple[int, int]:
    """First and last grid indices inside [left, right]."""
    a = grid.index_at_or_after(float(left))
    b = grid.index_at_or_after(float(right))
    if b > grid.n_steps or not math.isclose(float(grid.times[b]), float(right), rel_tol=1e-12, abs_tol=1e-12):
        b -= 1
    if a > b:
        raise DomainError(f"interval [{float(left)}, {float(right)}] contains no grid point")
    return a, b


def stochastic_integral(q, ensemble: PathEnsemble, start: int, stop=None) -> np.ndarray:
    """sum_{start <= k < stop} q_k . dB_k per path; ``stop`` may be an index array."""
    inc = ensemble.increments
    m, n, d = inc.shape
    if isinstance(q, LinearizedCoeffs):
        q = q.v
    q = np.asarray(q, dtype=float)
    if q.ndim == 0:
        q = np.full((m, n, d), float(q))
    terms = np.sum(q * inc, axis=2)
    csum = np.concatenate([np.zeros((m, 1)), np.cumsum(terms, axis=1)], axis=1)
    stop = n if stop is None else stop
    stop = np.broadcast_to(np.asarray(stop), (m,))
    return csum[np.arange(m), stop] - csum[:, start]


def girsanov_moment_check(q, ensemble: PathEnsemble, t_index: int, lam: float, params: CriticalParams,
                          band: float = NOISE_SE) -> VerificationReport:
    """E[exp(lam |sum_{k >= t_index} q_k . dB_k|^2)] against 1/sqrt(1 - 2 lam gamma^2 (T - t)).

    PASS when the estimate minus ``band`` standard errors does not exceed
    the bound.  Warns when the relative standard error is above 50%.
    """
    grid = ensemble.grid
    t = float(grid.times[t_index])
    bound = exp_moment_bound(lam, t, params)
    qa = q.v if isinstance(q, LinearizedCoeffs) else np.asarray(q, dtype=float)
    if np.any(np.abs(qa) > params.gamma * (1 + 1e-9) + 1e-12) and qa.ndim < 3:
        raise DomainError("|q| must not exceed gamma")
    if qa.ndim == 3 and np.any(np.sqrt(np.sum(qa ** 2, axis=2)) > params.gamma * (1 + 1e-9) + 1e-12):
        raise DomainError("|q| must not exceed gamma")
    integral = stochastic_integral(qa, ensemble, t_index)
    with np.errstate(over="ignore"):
        sample = np.exp(lam * integral ** 2)
    m = sample.size
    est = float(np.mean(sample))
    se = float(np.std(sample, ddof=1) / math.sqrt(m)) if m > 1 else math.inf
    rel = se / est if est > 0 else math.inf
    heavy = rel > 0.5
    if heavy:
        warnings.warn(f"exp-square moment estimate has relative standard error {rel:.2f}", RuntimeWarning)
    finite_var = 4.0 * lam * params.gamma ** 2 * (params.horizon - t) < 1.0
    return VerificationReport(
        check_name=f"exp_square_moment[t={t:g}, lambda={lam:g}]", passed=est - band * se <= bound,
        worst_margin=(bound - est) / se if se > 0 else (math.inf if est <= bound else -math.inf),
        violation_rate=0.0, noise_band=band, seed=ensemble.seed,
        details=[{"estimate": est, "se": se, "bound": bound, "relative_se": rel, "heavy_tail_warning": heavy,
                  "finite_variance": finite_var, "matches_bound": abs(est - bound) <= band * se}])


def hitting_index(dy: np.ndarray, dz2dt: np.ndarray, a: int, b: int, level: float) -> np.ndarray:
    """First k in [a, b] with |dY_k| + sum_{a<=j<k} |dZ_j|^2 dt_j >= level, else b."""
    m = dy.shape[0]
    acc = np.zeros(m)
    out = np.full(m, b, dtype=np.intp)
    open_ = np.ones(m, dtype=bool)
    for k in range(a, b + 1):
        hit = open_ & (np.abs(dy[:, k]) + acc >= level)
        out[hit] = k
        open_ &= ~hit
        if k < b:
            acc = acc + dz2dt[:, k]
    return out


def _admissible(left: float, right: float):
    if not (left > 0 and right > left):
        raise ConfigError(f"interval [{left}, {right}] must satisfy 0 < left < right")
    # lambda = 1/(gamma^2 left) needs 2 (right - left) / left <= 2/3 for the sqrt(3) bound
    if left < 0.75 * right * (1 - 1e-12):
        raise ConfigError(f"interval [{left}, {right}] has left/right = {left / right:.4f} < 3/4; "
                          "the exp-square moment bound is not available there")


def delta_bound_audit(coeffs: LinearizedCoeffs, field1: SolutionField, field2: SolutionField, interval,
                      params: CriticalParams, n_level=(1.0, 4.0, 16.0, 64.0, math.inf),
                      tolerance: Optional[float] = None, gen: Optional[GeneratorSpec] = None) -> VerificationReport:
    """Majorant e^{beta T} E[exp(int v dB) |dY_sigma|] at hitting times sigma_n on one interval.

    The interval's right endpoint is the local horizon and its left endpoint
    the anchor t.  Per sample, the split
    exp(I)|dY| <= exp(I^2 / (2 gamma^2 t)) + exp(2 gamma^2 t) psi(|dY|, gamma sqrt t)
    is checked, together with the exp-square moment against sqrt(3) and the
    psi term against the sum of psi(|Y^i|).  PASS when every split holds and the
    majorant at the largest level is within ``tolerance`` (default: the
    majorant of :func:`noise_model` at the local horizon, with the
    discretization term when ``gen`` is given).
    """
    left, right = float(interval[0]), float(interval[1])
    _admissible(left, right)
    grid = field1.grid
    ens = field1.ensemble
    if ens is None:
        raise DomainError("field1 must carry its ensemble")
    a, b = window(grid, left, right)
    t = float(grid.times[a])
    local_T = float(grid.times[b])
    g2t = params.gamma ** 2 * t
    mu = params.gamma * math.sqrt(t)
    T = params.horizon
    dy = field1.y - field2.y
    dz2dt = np.sum((field1.z - field2.z) ** 2, axis=2) * grid.dt[None, :]
    levels = sorted(float(x) for x in np.atleast_1d(n_level))
    rows = []
    m = dy.shape[0]
    split_bad = 0
    psi_bad = 0
    noise_b = float(noise_model(field1, field2, gen)[b])
    for lv in levels:
        sig = hitting_index(dy, dz2dt, a, b, lv)
        integral = stochastic_integral(coeffs, ens, a, sig)
        dys = np.abs(dy[np.arange(m), sig])
        with np.errstate(over="ignore"):
            pathwise = np.exp(integral) * dys
        majorant = math.exp(params.beta * T) * float(np.mean(pathwise))
        margin = young_log_margin(integral, dys, mu)
        split_bad += int(np.sum(margin < -1e-12))
        with np.errstate(over="ignore"):
            sq_moment = float(np.mean(np.exp(integral ** 2 / g2t)))
        sig_t = grid.times[sig]
        psi_lhs = math.exp(2 * g2t) * psi(dys, mu)
        y1s = np.abs(field1.y[np.arange(m), sig])
        y2s = np.abs(field2.y[np.arange(m), sig])
        mus = params.gamma * np.sqrt(sig_t)
        psi_rhs = (math.exp(2 * params.gamma ** 2 * T) * psi(2.0, params.gamma * math.sqrt(T)) / 2
                   * (psi(y1s, mus) + psi(y2s, mus)))
        psi_bad += int(np.sum(psi_lhs > psi_rhs * (1 + 1e-12) + 1e-300))
        rows.append({"level": lv, "majorant": majorant, "mean_sigma": float(np.mean(sig_t)),
                     "frac_reached_horizon": float(np.mean(sig == b)), "sq_moment": sq_moment,
                     "sq_moment_bound": exp_moment_bound(1.0 / g2t, t, CriticalParams(params.gamma, params.beta, local_T))})
        last_integral = integral
    if tolerance is None:
        tolerance = math.exp(params.beta * T) * float(np.mean(np.exp(last_integral))) * noise_b
    final = rows[-1]["majorant"]
    ok = split_bad == 0 and psi_bad == 0 and final <= tolerance
    return VerificationReport(
        check_name=f"delta_majorant[{left:.6g}, {right:.6g}]", passed=ok, worst_margin=tolerance - final,
        violation_rate=(split_bad + psi_bad) / (2 * m * len(levels)), noise_band=NOISE_SE,
        seed=field1.meta.get("seed"),
        details=[{"anchor_time": t, "local_horizon": local_T, "tolerance": tolerance, "split_violations": split_bad,
                  "psi_violations": psi_bad, "lambda_reading": "local horizon = interval right endpoint"}] + rows)


def discretization_allowance(gen: GeneratorSpec, field1: SolutionField) -> float:
    """dt_max * T * (beta + gamma) * max_k mean|g(t_k, Y_k, Z_k)|.

    Two first-order schemes evaluate g at points that differ by about
    |g| dt per step; through the Lipschitz constant this accumulates to the
    bound above over the horizon.
    """
    grid = field1.grid
    g_abs = max(float(np.mean(np.abs(gen(float(grid.times[k]), field1.y[:, k], field1.z[:, k, :]))))
                for k in range(grid.n_steps))
    return float(np.max(grid.dt)) * grid.horizon * (gen.beta + gen.gamma) * g_abs


def noise_model(field1: SolutionField, field2: SolutionField, gen: Optional[GeneratorSpec] = None) -> np.ndarray:
    """Per-step allowance for mean|dY|: NOISE_SE * hypot of both Y error scales, plus discretization."""
    se1 = np.zeros(field1.grid.n_steps + 1) if field1.y_se is None else field1.y_se
    se2 = np.zeros(field2.grid.n_steps + 1) if field2.y_se is None else field2.y_se
    out = NOISE_SE * np.hypot(se1, se2)
    if gen is not None:
        out[:-1] += discretization_allowance(gen, field1)
    return out


@dataclass(eq=False)
class UniquenessResult:
    report: VerificationReport
    fields: tuple
    cascade: SubintervalCascade
    discrepancy: np.ndarray  # mean |dY| per grid step
    noise: np.ndarray
    rows: list  # per-interval records


def uniqueness_experiment(gen: GeneratorSpec, terminal: TerminalSpec, ensemble: PathEnsemble,
                          configs: Sequence[SolverConfig], cascade: Optional[SubintervalCascade] = None,
                          abs_tol: float = 0.0, terminal2: Optional[TerminalSpec] = None) -> UniquenessResult:
    """Solve twice with different solver configs and compare per cascade interval.

    An interval passes when mean|dY_k| <= noise_k + abs_tol at each of its
    grid times, with noise_k from :func:`noise_model`.  The tail [0, left_last] is bounded by extrapolation from the
    cutoff: discrepancy there may exceed its value at the cutoff by at most
    the largest observed step-to-step change rate times the tail length.
    ``terminal2`` replaces the second terminal value (negative control).
    """
    if len(configs) != 2 or configs[0] == configs[1]:
        raise ConfigError("need two distinct solver configs")
    if not ({"H2", "monotone"} & gen.class_tags):
        raise DomainError(f"generator {gen.name!r} is neither H2 nor monotone")
    grid = ensemble.grid
    cascade = cascade or subinterval_cascade(grid.horizon)
    xi1 = eval_terminal(terminal, ensemble)
    xi2 = xi1 if terminal2 is None else eval_terminal(terminal2, ensemble)
    f1 = configs[0].solve(gen, xi1, ensemble)
    f2 = configs[1].solve(gen, xi2, ensemble)
    disc = np.mean(np.abs(f1.y - f2.y), axis=0)
    noise = noise_model(f1, f2, gen)
    allow = noise + abs_tol
    rows = []
    ok = True
    worst = math.inf
    rate = np.max(np.abs(np.diff(disc)) / grid.dt)
    for i, (left, right) in enumerate(cascade.float_intervals()):
        a, b = window(grid, left, right)
        seg = slice(a, b + 1)
        passed = bool(np.all(disc[seg] <= allow[seg]))
        ok &= passed
        worst = min(worst, float(np.min(allow[seg] - disc[seg])))
        rows.append({"interval_index": i, "left": left, "right": right, "sup_mean_abs_dY": float(np.max(disc[seg])),
                     "noise_model": float(np.max(allow[seg])), "pass": passed})
    a_last, _ = window(grid, *cascade.float_intervals()[-1])
    t_cut = float(grid.times[a_last])
    tail_bound = float(disc[a_last] + allow[a_last] + rate * t_cut)
    tail_sup = float(np.max(disc[: a_last + 1]))
    tail_ok = tail_sup <= tail_bound
    ok &= tail_ok
    rows.append({"interval_index": len(cascade.intervals), "left": 0.0, "right": t_cut, "sup_mean_abs_dY": tail_sup,
                 "noise_model": tail_bound, "pass": tail_ok, "tail": True})
    report = VerificationReport(
        check_name=f"uniqueness[{gen.name}, {terminal.name}, {configs[0].method} vs {configs[1].method}]",
        passed=bool(ok), worst_margin=worst, violation_rate=float(np.mean(disc > allow)),
        noise_band=NOISE_SE, seed=ensemble.seed, details=rows)
    return UniquenessResult(report, (f1, f2), cascade, disc, noise, rows)


def discrepancy_csv(rows: Sequence[dict]) -> str:
    """CSV with columns interval_index, left, right, sup_mean_abs_dY, noise_model."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["interval_index", "left", "right", "sup_mean_abs_dY", "noise_model"])
    for r in rows:
        w.writerow([r["interval_index"], repr(float(r["left"])), repr(float(r["right"])),
                    repr(float(r["sup_mean_abs_dY"])), repr(float(r["noise_model"]))])
    return buf.getvalue()
