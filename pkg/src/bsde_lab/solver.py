"""Backward Monte Carlo solvers and the double-truncation scheme.

Two independent discretisations are provided: a nested backward Euler
recursion (``solve_backward_euler``) and a non-nested Picard fixed point
(``picard_solve``).  Both estimate conditional expectations by regression
on the current Brownian state.
"""
from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np

from .errors import ConfigError, ConvergenceError, NonFiniteError, RegressionError
from .regression import RegressionConfig, StepRegressor
from .scenario import GeneratorSpec, PathEnsemble, TimeGrid

NOISE_SE = 3.0


@dataclass(eq=False)
class SolutionField:
    """Discrete (Y, Z) on grid x paths.

    ``y_se[k]`` is the solver's own error scale for Y at step k: the RMS
    regression standard error, accumulated backward for nested schemes.
    """

    grid: TimeGrid
    y: np.ndarray  # (M, N+1)
    z: np.ndarray  # (M, N, d)
    meta: dict
    ensemble: Optional[PathEnsemble] = None
    y_se: Optional[np.ndarray] = None

    @property
    def n_paths(self) -> int:
        return self.y.shape[0]

    @property
    def y0(self) -> float:
        return float(np.mean(self.y[:, 0]))

    def noise_band(self, k: int, other: "SolutionField | None" = None) -> float:
        se = 0.0 if self.y_se is None else float(self.y_se[k])
        if other is not None and other.y_se is not None:
            se = math.hypot(se, float(other.y_se[k]))
        return NOISE_SE * se


def _meta(gen, reg, method, extra=None, ensemble=None):
    meta = {"generator": gen.name, "method": method, "basis_degree": reg.degree,
            "regression": reg.kind, "ridge": reg.ridge, "regression_config": reg.as_dict(), "truncation": None,
            "seed": None if ensemble is None else ensemble.seed}
    if extra:
        meta.update(extra)
    return meta


def _check_inputs(xi, ensemble):
    xi = np.asarray(xi, dtype=float)
    if xi.shape != (ensemble.n_paths,):
        raise ConfigError(f"terminal has shape {xi.shape}, ensemble has {ensemble.n_paths} paths")
    bad = np.flatnonzero(~np.isfinite(xi))
    if bad.size:
        raise NonFiniteError(f"terminal value not finite on path {bad[0]}", index=int(bad[0]))
    return xi


def _finite_or_raise(arr, what, step):
    bad = np.flatnonzero(~np.isfinite(np.reshape(arr, (arr.shape[0], -1)).sum(axis=1)))
    if bad.size:
        raise NonFiniteError(f"{what} became non-finite at step {step} (path {bad[0]})", index=int(bad[0]))


def _implicit_step(gen, t, c, z, dt, iters=50, tol=1e-13):
    """Solve y = c + g(t, y, z) dt pathwise by Newton with a secant slope."""
    y = c + np.asarray(gen(t, c, z)) * dt
    for _ in range(iters):
        f = y - c - np.asarray(gen(t, y, z)) * dt
        h = 1e-7 * (1.0 + np.abs(y))
        slope = 1.0 - (np.asarray(gen(t, y + h, z)) - np.asarray(gen(t, y - h, z))) / (2 * h) * dt
        slope = np.where(np.abs(slope) < 1e-3, 1.0, slope)
        step = f / slope
        y = y - step
        if np.max(np.abs(step) / (1.0 + np.abs(y))) < tol:
            break
    return y


def solve_backward_euler(gen: GeneratorSpec, xi, ensemble: PathEnsemble, reg: RegressionConfig = RegressionConfig(),
                         implicit: bool = False, meta: Optional[dict] = None) -> SolutionField:
    """Y_N = xi, Z_k = E_k[(Y_{k+1} - E_k Y_{k+1}) dB_k] / dt, Y_k = E_k Y_{k+1} + g dt.

    The generator is evaluated at (t_k, E_k Y_{k+1}, Z_k) unless ``implicit``,
    in which case Y_k solves Y_k = E_k Y_{k+1} + g(t_k, Y_k, Z_k) dt.
    """
    xi = _check_inputs(xi, ensemble)
    grid = ensemble.grid
    n, m, d = grid.n_steps, ensemble.n_paths, ensemble.dim
    dts = grid.dt
    y = np.empty((m, n + 1))
    z = np.empty((m, n, d))
    y_se = np.zeros(n + 1)
    y[:, n] = xi
    acc = 0.0
    for k in range(n - 1, -1, -1):
        t, dt = float(grid.times[k]), float(dts[k])
        rg = StepRegressor(ensemble.state(k), t, reg, step=k)
        fy = rg.fit(y[:, k + 1])
        db = ensemble.increments[:, k, :]
        fz = rg.fit((y[:, k + 1] - fy.values)[:, None] * db / dt)
        z[:, k, :] = fz.values
        if implicit:
            y[:, k] = _implicit_step(gen, t, fy.values, fz.values, dt)
        else:
            y[:, k] = fy.values + np.asarray(gen(t, fy.values, fz.values)) * dt
        _finite_or_raise(y[:, k], "Y", k)
        _finite_or_raise(z[:, k, :], "Z", k)
        local = math.sqrt(float(np.mean(fy.se ** 2)) + (gen.gamma * dt) ** 2 * float(np.mean(np.sum(fz.se ** 2, axis=1))))
        acc = math.hypot(acc, local)
        y_se[k] = acc
    return SolutionField(grid, y, z, _meta(gen, reg, "implicit_euler" if implicit else "euler", meta, ensemble),
                         ensemble, y_se)


def picard_solve(gen: GeneratorSpec, xi, ensemble: PathEnsemble, reg: RegressionConfig = RegressionConfig(),
                 max_iter: int = 100, tol: float = 1e-8, meta: Optional[dict] = None) -> SolutionField:
    """Fixed point of (Y, Z) -> non-nested regression of xi + sum of frozen g dt.

    With S_k = xi + sum_{i>k} g(t_i, Y_i, Z_i) dt_i the update is
    Y_k = E_k S_k + g(t_k, Y_k, Z_k) dt_k and Z_k = E_k[(S_k - E_k S_k) dB_k] / dt_k.
    Iteration starts from the g = 0 field and stops once the sup-norm change
    of (Y, Z) is at most ``tol``.
    """
    if "H2" not in gen.class_tags:
        raise ConfigError(f"picard_solve needs a Lipschitz (H2) generator, {gen.name!r} is not tagged H2")
    xi = _check_inputs(xi, ensemble)
    grid = ensemble.grid
    n, m, d = grid.n_steps, ensemble.n_paths, ensemble.dim
    dts = grid.dt
    regs = [StepRegressor(ensemble.state(k), float(grid.times[k]), reg, step=k) for k in range(n)]

    def sweep(g_vals):
        y_new = np.empty((m, n + 1))
        z_new = np.empty((m, n, d))
        se = np.zeros(n + 1)
        y_new[:, n] = xi
        s = xi.copy()
        for k in range(n - 1, -1, -1):
            fs = regs[k].fit(s)
            fz = regs[k].fit((s - fs.values)[:, None] * ensemble.increments[:, k, :] / dts[k])
            gk = 0.0 if g_vals is None else g_vals[:, k] * dts[k]
            y_new[:, k] = fs.values + gk
            z_new[:, k, :] = fz.values
            se[k] = math.sqrt(float(np.mean(fs.se ** 2)))
            if g_vals is not None:
                s = s + g_vals[:, k] * dts[k]
        return y_new, z_new, se

    y, z, se = sweep(None)
    residual = math.inf
    for it in range(1, max_iter + 1):
        g_vals = np.empty((m, n))
        for k in range(n):
            g_vals[:, k] = gen(float(grid.times[k]), y[:, k], z[:, k, :])
        _finite_or_raise(g_vals, "generator", it)
        y_next, z_next, se = sweep(g_vals)
        residual = max(float(np.max(np.abs(y_next - y))), float(np.max(np.abs(z_next - z))))
        y, z = y_next, z_next
        if residual <= tol:
            out_meta = _meta(gen, reg, "picard", meta, ensemble)
            out_meta.update(iterations=it, residual=residual)
            return SolutionField(grid, y, z, out_meta, ensemble, se)
    raise ConvergenceError(f"picard iteration did not reach tol={tol} in {max_iter} iterations "
                           f"(last change {residual:.3g})", iterations=max_iter, residual=residual)


# --- truncation ------------------------------------------------------------

def truncate_terminal(xi, n: float, p: float) -> np.ndarray:
    """xi^+ ^ n - xi^- ^ p, elementwise."""
    if n < 1 or p < 1:
        raise ValueError("truncation levels must be >= 1")
    xi = np.asarray(xi, dtype=float)
    return np.minimum(np.maximum(xi, 0.0), n) - np.minimum(np.maximum(-xi, 0.0), p)


def truncate_generator(spec: GeneratorSpec, n: float, p: float) -> GeneratorSpec:
    """g(t,y,z) - g(t,0,0) + (g^+(t,0,0) ^ n - g^-(t,0,0) ^ p)."""
    if n < 1 or p < 1:
        raise ValueError("truncation levels must be >= 1")
    base = spec.evaluate

    def evaluate(t, y, z):
        y = np.asarray(y, dtype=float)
        z = np.asarray(z, dtype=float)
        g0 = np.asarray(base(t, np.zeros_like(y), np.zeros_like(z)), dtype=float)
        return np.asarray(base(t, y, z)) - g0 + truncate_terminal(g0, n, p)

    # f_bound and h_growth stay valid: truncation only shrinks |g(t,0,0)|
    return replace(spec, name=f"{spec.name}^({n:g},{p:g})", evaluate=evaluate)


def doubling_levels(max_level: int) -> list[int]:
    out, v = [], 1
    while v < max_level:
        out.append(v)
        v *= 2
    out.append(int(max_level))
    return out


@dataclass
class MonotoneResult:
    """Outcome of the truncation sweep over (n, p)."""

    n_levels: list
    p_levels: list
    fields: dict  # (n, p) -> SolutionField
    errors: dict  # (n, p) -> message
    y0: np.ndarray  # (len(n_levels), len(p_levels)); nan where a solve failed
    y0_band: np.ndarray  # 3-SE band of each Y0 entry
    limit: Optional[np.ndarray]  # inf_p sup_n Y^{n,p}, shape (M, N+1)
    n_violation_rate: float  # pathwise, any grid time
    p_violation_rate: float
    y0_n_monotone: bool
    y0_p_antitone: bool
    n_gaps: list = field(default_factory=list)  # |Y0^{n_{i+1},p_max} - Y0^{n_i,p_max}|
    diagonal_gaps: list = field(default_factory=list)  # along n = p
    index_note: str = ("comparison read as: nondecreasing in n at fixed p, non-increasing in p at fixed n "
                       "(the second index of the source statement is taken to be p)")

    @property
    def cauchy(self) -> bool:
        gaps = self.diagonal_gaps
        return all(b <= a for a, b in zip(gaps, gaps[1:]))


def monotone_approximation(gen: GeneratorSpec, xi, ensemble: PathEnsemble,
                           reg: RegressionConfig = RegressionConfig(), n_max: int = 32, p_max: int = 32,
                           n_levels=None, p_levels=None, method: str = "euler", workers: int = 1,
                           keep_fields: bool = False,
                           on_field: Optional[Callable[[tuple, SolutionField], None]] = None) -> MonotoneResult:
    """Solve BSDE(xi^{n,p}, g^{n,p}) over doubling levels up to (n_max, p_max).

    Fields are visited one p-level at a time so only two rows of Y arrays
    are alive at once; ``on_field`` sees every solved member and
    ``keep_fields`` retains them all (memory heavy for large ensembles).
    """
    if n_max < 1 or p_max < 1:
        raise ValueError("n_max and p_max must be >= 1")
    xi = np.asarray(xi, dtype=float)
    ns = list(n_levels) if n_levels is not None else doubling_levels(n_max)
    ps = list(p_levels) if p_levels is not None else doubling_levels(p_max)
    cfg = SolverConfig(method, reg)

    def one(np_pair):
        n, p = np_pair
        try:
            f = cfg.solve(truncate_generator(gen, n, p), truncate_terminal(xi, n, p), ensemble,
                          meta={"truncation": [n, p]})
            return np_pair, f, None
        except (RegressionError, NonFiniteError, ConvergenceError, ConfigError) as exc:
            return np_pair, None, f"{type(exc).__name__}: {exc}"

    fields, errors = {}, {}
    y0 = np.full((len(ns), len(ps)), np.nan)
    band = np.full_like(y0, np.nan)
    n_viol = n_tot = p_viol = p_tot = 0
    prev_row: dict = {}
    limit = None
    complete = True
    for j, p in enumerate(ps):
        pairs = [(n, p) for n in ns]
        if workers > 1:
            with ThreadPoolExecutor(max_workers=workers) as pool:
                results = list(pool.map(one, pairs))
        else:
            results = [one(pr) for pr in pairs]
        row = {}
        for (n, _), f, err in results:
            if f is None:
                errors[(n, p)] = err
                complete = False
                continue
            if on_field is not None:
                on_field((n, p), f)
            if keep_fields:
                fields[(n, p)] = f
            i = ns.index(n)
            y0[i, j] = f.y0
            band[i, j] = f.noise_band(0)
            row[n] = (f.y, f.y_se)
        for a, b in zip(ns, ns[1:]):
            if a in row and b in row:
                bnd = NOISE_SE * np.hypot(row[a][1], row[b][1])[None, :]
                n_viol += int(np.sum(row[b][0] < row[a][0] - bnd))
                n_tot += row[a][0].size
        for n in ns:
            if n in row and n in prev_row:
                bnd = NOISE_SE * np.hypot(prev_row[n][1], row[n][1])[None, :]
                p_viol += int(np.sum(row[n][0] > prev_row[n][0] + bnd))
                p_tot += row[n][0].size
        if complete:
            sup_n = np.max(np.stack([row[n][0] for n in ns]), axis=0)
            limit = sup_n if limit is None else np.minimum(limit, sup_n)
        prev_row = row

    def ordered(vals, bands, increasing):
        ok = True
        for u in range(len(vals) - 1):
            if np.isnan(vals[u]) or np.isnan(vals[u + 1]):
                continue
            tol = math.hypot(bands[u], bands[u + 1])
            diff = vals[u + 1] - vals[u]
            ok &= diff >= -tol if increasing else diff <= tol
        return bool(ok)

    n_mono = all(ordered(y0[:, j], band[:, j], True) for j in range(len(ps)))
    p_anti = all(ordered(y0[i, :], band[i, :], False) for i in range(len(ns)))
    n_gaps = [abs(float(y0[i + 1, -1] - y0[i, -1])) for i in range(len(ns) - 1)]
    diag = min(len(ns), len(ps))
    d_gaps = [abs(float(y0[i + 1, i + 1] - y0[i, i])) for i in range(diag - 1)]
    return MonotoneResult(ns, ps, fields, errors, y0, band, limit if complete else None,
                          n_viol / max(n_tot, 1), p_viol / max(p_tot, 1), n_mono, p_anti, n_gaps, d_gaps)


# --- export ------------------------------------------------------------------

def field_to_csv(field_: SolutionField, path, max_paths: Optional[int] = None) -> None:
    """Columns step_index, time, path_id, y, z_1..z_d (z empty at the last step)."""
    m = field_.n_paths if max_paths is None else min(max_paths, field_.n_paths)
    n = field_.grid.n_steps
    d = field_.z.shape[2]
    buf = io.StringIO(newline="")
    w = csv.writer(buf, lineterminator="\r\n")
    w.writerow(["step_index", "time", "path_id", "y"] + [f"z_{j + 1}" for j in range(d)])
    times = field_.grid.times
    for k in range(n + 1):
        for i in range(m):
            zs = [repr(float(v)) for v in field_.z[i, k]] if k < n else [""] * d
            w.writerow([k, repr(float(times[k])), i, repr(float(field_.y[i, k]))] + zs)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())


def field_metadata(field_: SolutionField, cfg_hash: str) -> str:
    meta = dict(field_.meta)
    meta.update(config_hash=cfg_hash, n_paths=field_.n_paths, n_steps=field_.grid.n_steps,
                horizon=field_.grid.horizon, dim=int(field_.z.shape[2]), y0=field_.y0)
    return json.dumps(meta, indent=2, sort_keys=True, default=str)


SOLVER_METHODS = ("euler", "implicit", "picard")


@dataclass(frozen=True)
class SolverConfig:
    """A solver choice: method plus regression estimator."""

    method: str = "euler"
    reg: RegressionConfig = RegressionConfig()
    max_iter: int = 100
    tol: float = 1e-8

    def __post_init__(self):
        if self.method not in SOLVER_METHODS:
            raise ConfigError(f"unknown solver method {self.method!r}; expected one of {SOLVER_METHODS}")

    def solve(self, gen: GeneratorSpec, xi, ensemble: PathEnsemble, meta: Optional[dict] = None) -> SolutionField:
        if self.method == "picard":
            return picard_solve(gen, xi, ensemble, self.reg, self.max_iter, self.tol, meta)
        return solve_backward_euler(gen, xi, ensemble, self.reg, implicit=self.method == "implicit", meta=meta)
