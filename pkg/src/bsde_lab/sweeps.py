"""Deterministic and random sweeps over the closed-form inequalities."""
from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .report import VerificationReport
from .scenario import PathEnsemble, TimeGrid, simulate_brownian
from .special_functions import (CriticalParams, PhiPoint, growth_constant_K, hjb_residual, log_phi, log_psi,
                                young_log_margin)
from .uniqueness import girsanov_moment_check

HJB_TOL = 1e-10
REL_TOL = 1e-12


def sweep_points(t: float, horizon: float, n_points: int, x_max: float):
    """(s, x) mesh on [t, T] x [0, x_max] with log-spaced x, about n_points in total."""
    side = max(int(round(math.sqrt(n_points))), 2)
    s = np.linspace(t, horizon, side)
    x = np.concatenate([[0.0], np.logspace(-8, math.log10(x_max), side - 1)])
    ss, xx = np.meshgrid(s, x, indexing="ij")
    return ss.ravel(), xx.ravel()


def hjb_sweep(gammas: Sequence[float], anchors: Sequence[float], horizon: float = 1.0, n_points: int = 10_000,
              x_max: float = 1e8, k_scale: float = 1.0) -> VerificationReport:
    """min over the mesh of -(g^2/2) phi_x^2/phi_xx + phi_s, which should be >= -1e-10."""
    worst = math.inf
    bad = total = 0
    details = []
    for g in gammas:
        params = CriticalParams(gamma=g, horizon=horizon)
        for t in anchors:
            s, x = sweep_points(t, horizon, n_points, x_max)
            r = np.asarray(hjb_residual(PhiPoint(np.full_like(s, t), s, x), params, k_scale))
            bad += int(np.sum(r < -HJB_TOL))
            total += r.size
            i = int(np.argmin(r))
            worst = min(worst, float(r[i]))
            details.append({"gamma": g, "anchor": t, "min_residual": float(r[i]), "at_s": float(s[i]),
                            "at_x": float(x[i])})
    name = "hjb_residual" if k_scale == 1.0 else f"hjb_residual[k_scale={k_scale:g}]"
    return VerificationReport(name, passed=bad == 0, worst_margin=worst, violation_rate=bad / total,
                              noise_band=HJB_TOL, details=details)


def sandwich_sweep(gammas: Sequence[float], anchors: Sequence[float], horizon: float = 1.0,
                   n_points: int = 10_000, x_max: float = 1e8) -> VerificationReport:
    """psi(x, g sqrt s) <= phi(s, x; t) <= K psi(x, g sqrt s) + K on the mesh, compared in logs."""
    worst = math.inf
    bad = total = 0
    details = []
    for g in gammas:
        params = CriticalParams(gamma=g, horizon=horizon)
        K = growth_constant_K(params)
        for t in anchors:
            s, x = sweep_points(t, horizon, n_points, x_max)
            lphi = np.asarray(log_phi(t, s, x, params))
            with np.errstate(divide="ignore"):
                lpsi = np.asarray(log_psi(x, g * np.sqrt(s)))
            lower = lphi - lpsi
            upper = math.log(K) + np.logaddexp(lpsi, 0.0) - lphi
            margin = np.minimum(lower, upper)
            bad += int(np.sum(margin < -REL_TOL))
            total += margin.size
            worst = min(worst, float(np.min(margin)))
            details.append({"gamma": g, "anchor": t, "K": K, "min_lower_log_margin": float(np.min(lower)),
                            "min_upper_log_margin": float(np.min(upper))})
    return VerificationReport("sandwich_constants", passed=bad == 0, worst_margin=worst, violation_rate=bad / total,
                              noise_band=REL_TOL, details=details)


def young_sweep(n_samples: int, seeds: Sequence[int]) -> VerificationReport:
    """Random (x, y, mu) with heavy-tailed magnitudes; the log margin must be >= 0."""
    worst = math.inf
    bad = total = 0
    details = []
    for seed in seeds:
        rng = np.random.default_rng(np.random.SeedSequence([int(seed), 2024]))
        x = rng.standard_normal(n_samples) * 10.0 ** rng.uniform(-3, 2, n_samples)
        y = 10.0 ** rng.uniform(-6, 8, n_samples)
        mu = 10.0 ** rng.uniform(-2, 1, n_samples)
        m = np.asarray(young_log_margin(x, y, mu))
        bad += int(np.sum(m < -REL_TOL))
        total += m.size
        worst = min(worst, float(np.min(m)))
        details.append({"seed": int(seed), "min_log_margin": float(np.min(m))})
    return VerificationReport("young_inequality", passed=bad == 0, worst_margin=worst, violation_rate=bad / total,
                              noise_band=REL_TOL, details=details)


def constant_q_moment(gamma: float, horizon: float, lam: float, t: float, n_paths: int, seed: int,
                      n_steps: int = 4) -> VerificationReport:
    """Exp-square moment for q = gamma against its exact Gaussian value."""
    grid = TimeGrid.uniform(horizon, n_steps)
    ens = simulate_brownian(grid, 1, n_paths, seed)
    k = grid.index_at_or_after(t)
    return girsanov_moment_check(gamma, ens, k, lam, CriticalParams(gamma=gamma, horizon=horizon))
