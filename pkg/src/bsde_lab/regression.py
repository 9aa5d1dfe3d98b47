"""Least-squares conditional expectations given the current Brownian state."""
from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Optional

import numpy as np
from numpy.polynomial import hermite_e
from scipy import linalg

from .errors import RegressionError

MAX_CONDITION = 1e12


@dataclass(frozen=True)
class RegressionConfig:
    """Estimator for E[. | B_{t_k}].

    kind="polynomial": probabilists' Hermite polynomials of B_t / sqrt(t) up to
    total degree ``degree``; ``ridge`` is added to the diagonal of the
    sample-averaged normal matrix.  kind="bins": piecewise constant on
    ``n_bins`` quantile bins of the first state coordinate.  ``clip`` caps
    the absolute value of fitted conditional expectations.
    """

    degree: int = 2
    ridge: float = 0.0
    clip: Optional[float] = None
    kind: str = "polynomial"
    n_bins: int = 20

    def __post_init__(self):
        if self.degree < 0 or self.ridge < 0:
            raise ValueError("need degree >= 0 and ridge >= 0")
        if self.kind not in ("polynomial", "bins"):
            raise ValueError(f"unknown regression kind {self.kind!r}")
        if self.clip is not None and not self.clip > 0:
            raise ValueError("clip must be positive")
        if self.n_bins < 1:
            raise ValueError("n_bins must be >= 1")

    def as_dict(self) -> dict:
        return {"degree": self.degree, "ridge": self.ridge, "clip": self.clip, "kind": self.kind,
                "n_bins": self.n_bins}

    @classmethod
    def from_dict(cls, d: dict) -> "RegressionConfig":
        return cls(**d)


def multi_indices(dim: int, degree: int) -> list[tuple[int, ...]]:
    out = []
    for total in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(dim), total):
            idx = [0] * dim
            for c in combo:
                idx[c] += 1
            out.append(tuple(idx))
    return out


def basis_matrix(states: np.ndarray, t: float, degree: int) -> np.ndarray:
    """Hermite basis in the standardised state; constant only when t = 0."""
    states = np.atleast_2d(np.asarray(states, dtype=float))
    m, dim = states.shape
    if t <= 0 or degree == 0:
        return np.ones((m, 1))
    u = states / np.sqrt(t)
    vander = [hermite_e.hermevander(u[:, j], degree) for j in range(dim)]
    cols = []
    for idx in multi_indices(dim, degree):
        col = np.ones(m)
        for j, power in enumerate(idx):
            if power:
                col = col * vander[j][:, power]
        cols.append(col)
    return np.column_stack(cols)


@dataclass
class Fit:
    values: np.ndarray  # (M, r) fitted conditional expectations
    se: np.ndarray  # (M, r) standard error of each fitted value
    resid_var: np.ndarray  # (r,)


class StepRegressor:
    """Factorised estimator for one time step, reusable across targets."""

    def __init__(self, states: np.ndarray, t: float, cfg: RegressionConfig, step: Optional[int] = None):
        self.cfg = cfg
        self.step = step
        states = np.atleast_2d(np.asarray(states, dtype=float))
        self.m = states.shape[0]
        if cfg.kind == "bins":
            self._init_bins(states[:, 0], t)
        else:
            self._init_poly(states, t)

    def _init_poly(self, states, t):
        a = basis_matrix(states, t, self.cfg.degree)
        m, p = a.shape
        if m <= p:
            raise RegressionError(f"{m} samples for {p} basis functions", step=self.step)
        gram = a.T @ a / m + self.cfg.ridge * np.eye(p)
        try:
            cond = np.linalg.cond(gram)
            if not np.isfinite(cond) or cond > MAX_CONDITION:
                raise RegressionError(f"singular normal equations (condition {cond:.3g})", step=self.step)
            self._chol = linalg.cho_factor(gram, lower=True)
        except np.linalg.LinAlgError as exc:
            raise RegressionError(f"singular normal equations: {exc}", step=self.step) from None
        self._a = a
        self._p = p
        ginv = linalg.cho_solve(self._chol, np.eye(p), check_finite=False)
        self._lev = np.sum((a @ ginv) * a, axis=1) / m
        self._bins = None

    def _init_bins(self, x, t):
        n_bins = self.cfg.n_bins if t > 0 else 1
        if n_bins > 1:
            edges = np.quantile(x, np.linspace(0, 1, n_bins + 1)[1:-1])
            label = np.searchsorted(edges, x, side="right")
        else:
            label = np.zeros(x.size, dtype=np.intp)
        counts = np.bincount(label, minlength=n_bins)
        if np.any(counts < 2):
            raise RegressionError("empty or singleton regression bin", step=self.step)
        self._bins = label
        self._counts = counts
        self._p = n_bins

    def fit(self, targets: np.ndarray) -> Fit:
        y = np.asarray(targets, dtype=float)
        squeeze = y.ndim == 1
        if squeeze:
            y = y[:, None]
        if self._bins is not None:
            sums = np.stack([np.bincount(self._bins, weights=y[:, j], minlength=self._p) for j in range(y.shape[1])], 1)
            means = sums / self._counts[:, None]
            values = means[self._bins]
            resid = y - values
            ss = np.stack([np.bincount(self._bins, weights=resid[:, j] ** 2, minlength=self._p)
                           for j in range(y.shape[1])], 1)
            var = ss / (self._counts[:, None] - 1)
            se = np.sqrt(var / self._counts[:, None])[self._bins]
            resid_var = np.sum(ss, axis=0) / (self.m - self._p)
        else:
            coef = linalg.cho_solve(self._chol, self._a.T @ y / self.m, check_finite=False)
            values = self._a @ coef
            resid = y - values
            resid_var = np.sum(resid ** 2, axis=0) / (self.m - self._p)
            se = np.sqrt(self._lev[:, None] * resid_var[None, :])
        if self.cfg.clip is not None:
            values = np.clip(values, -self.cfg.clip, self.cfg.clip)
        if not np.all(np.isfinite(values)):
            raise RegressionError("non-finite regression output", step=self.step)
        if squeeze:
            return Fit(values[:, 0], se[:, 0], resid_var)
        return Fit(values, se, resid_var)


def conditional_expectation(states, t, targets, cfg: RegressionConfig, step=None) -> Fit:
    return StepRegressor(states, t, cfg, step).fit(targets)
