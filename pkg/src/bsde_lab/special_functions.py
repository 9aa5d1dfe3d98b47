"""Closed-form test functions and the scalar inequalities behind the a priori estimate.

Everything here is a pure, vectorised numpy function.  Scalars in give
floats out; arrays broadcast.  Quantities that can leave double range are
also available in log form (``log_psi``, ``log_phi_jet``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from .errors import DomainError, PreconditionError

ArrayLike = Union[float, np.ndarray]

E = math.e
# beyond this exponent a*exp(b) is assembled in log space
LOG_SPACE_THRESHOLD = 700.0
# log-spaced grid used for the supremum of H1 over [1, +inf)
K_GRID_POINTS = 10_000
K_GRID_MAX = 1e12


def _out(x):
    x = np.asarray(x, dtype=float)
    return float(x) if x.ndim == 0 else x


@dataclass(frozen=True)
class CriticalParams:
    """Constants of the linear-growth / Lipschitz assumptions and the horizon."""

    gamma: float
    beta: float = 0.0
    horizon: float = 1.0

    def __post_init__(self):
        if not (self.gamma > 0 and math.isfinite(self.gamma)):
            raise DomainError(f"gamma must be positive, got {self.gamma}")
        if not (self.beta >= 0 and math.isfinite(self.beta)):
            raise DomainError(f"beta must be nonnegative, got {self.beta}")
        if not (self.horizon > 0 and math.isfinite(self.horizon)):
            raise DomainError(f"horizon must be positive, got {self.horizon}")

    @property
    def critical_mu(self) -> float:
        """The threshold parameter gamma * sqrt(T)."""
        return self.gamma * math.sqrt(self.horizon)


@dataclass(frozen=True)
class PhiPoint:
    """Evaluation point (s, x) for the test function anchored at time t.

    Fields may be arrays of a common broadcast shape.
    """

    t: ArrayLike
    s: ArrayLike
    x: ArrayLike

    def validate(self, horizon: float | None = None) -> None:
        t, s, x = (np.asarray(v, dtype=float) for v in (self.t, self.s, self.x))
        if np.any(~np.isfinite(t)) or np.any(~np.isfinite(s)) or np.any(~np.isfinite(x)):
            raise DomainError("PhiPoint entries must be finite")
        if np.any(t <= 0):
            raise DomainError("anchor time t must be positive")
        if np.any(s < t):
            raise DomainError("evaluation time s must satisfy s >= t")
        if np.any(x < 0):
            raise DomainError("state x must be nonnegative")
        if horizon is not None and np.any(s > horizon * (1 + 1e-12)):
            raise DomainError("evaluation time s exceeds the horizon")


@dataclass(frozen=True)
class PhiJet:
    """Value and the three partials (time, state, state-state) of phi."""

    value: ArrayLike
    d_s: ArrayLike
    d_x: ArrayLike
    d_xx: ArrayLike


def psi(x: ArrayLike, mu: ArrayLike) -> ArrayLike:
    """x * exp(mu * sqrt(2 log(1 + x))) for x, mu >= 0."""
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if np.any(x < 0) or np.any(mu < 0):
        raise DomainError("psi requires x >= 0 and mu >= 0")
    expo = mu * np.sqrt(2.0 * np.log1p(x))
    out = x * np.exp(np.minimum(expo, LOG_SPACE_THRESHOLD))
    big = expo > LOG_SPACE_THRESHOLD
    if np.any(big):
        with np.errstate(over="ignore", divide="ignore"):
            out = np.where(big & (x > 0), np.exp(np.log(x) + expo), out)
    return _out(out)


def log_psi(x: ArrayLike, mu: ArrayLike) -> ArrayLike:
    """Natural log of psi; -inf at x = 0."""
    x = np.asarray(x, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if np.any(x < 0) or np.any(mu < 0):
        raise DomainError("psi requires x >= 0 and mu >= 0")
    with np.errstate(divide="ignore"):
        return _out(np.log(x) + mu * np.sqrt(2.0 * np.log1p(x)))


def k_accumulated(t: ArrayLike, s: ArrayLike, params: CriticalParams) -> ArrayLike:
    """Integral over [t, s] of the rate (gamma/2)(gamma + sqrt(2/r))."""
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(t <= 0) or np.any(s < t):
        raise DomainError("k_accumulated requires 0 < t <= s")
    g = params.gamma
    return _out(0.5 * g * g * (s - t) + g * math.sqrt(2.0) * (np.sqrt(s) - np.sqrt(t)))


def _log_jet(p: PhiPoint, params: CriticalParams, k_scale: float = 1.0):
    p.validate()
    t = np.asarray(p.t, dtype=float)
    s = np.asarray(p.s, dtype=float)
    x = np.asarray(p.x, dtype=float)
    g = params.gamma
    xe = x + E
    log_xe = np.log(xe)
    v = np.sqrt(2.0 * log_xe)
    a = g * np.sqrt(s)
    log_val = log_xe + a * v + k_scale * np.asarray(k_accumulated(t, s, params))
    log_dx = log_val + np.log(a + v) - log_xe - np.log(v)
    log_dxx = log_val + np.log(a * (v * v + a * v - 1.0)) - 2.0 * log_xe - 3.0 * np.log(v)
    # time derivative of k_scale * k_accumulated is k_scale * (g/2)(g + sqrt(2/s))
    rate = 0.5 * g * (v / np.sqrt(s)) + k_scale * 0.5 * g * (g + np.sqrt(2.0 / s))
    log_ds = log_val + np.log(rate)
    return log_val, log_ds, log_dx, log_dxx


def log_phi_jet(p: PhiPoint, params: CriticalParams, k_scale: float = 1.0) -> PhiJet:
    """Logs of every entry of :func:`phi_jet` (all entries are positive)."""
    lv, ls, lx, lxx = _log_jet(p, params, k_scale)
    return PhiJet(_out(lv), _out(ls), _out(lx), _out(lxx))


def phi_jet(p: PhiPoint, params: CriticalParams, k_scale: float = 1.0) -> PhiJet:
    """Test function phi(s, x; t) and its partials phi_s, phi_x, phi_xx.

    ``k_scale`` rescales the accumulated rate; 1.0 is the genuine function,
    anything else is a deliberately faulty variant for negative controls.
    """
    lv, ls, lx, lxx = _log_jet(p, params, k_scale)
    with np.errstate(over="ignore"):
        return PhiJet(_out(np.exp(lv)), _out(np.exp(ls)), _out(np.exp(lx)), _out(np.exp(lxx)))


def log_phi(t: ArrayLike, s: ArrayLike, x: ArrayLike, params: CriticalParams) -> ArrayLike:
    x = np.asarray(x, dtype=float)
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    if np.any(x < 0) or np.any(t <= 0) or np.any(s < t):
        raise DomainError("log_phi requires 0 < t <= s and x >= 0")
    log_xe = np.log(x + E)
    return _out(log_xe + params.gamma * np.sqrt(2.0 * s * log_xe) + np.asarray(k_accumulated(t, s, params)))


def hjb_residual(p: PhiPoint, params: CriticalParams, k_scale: float = 1.0) -> ArrayLike:
    """-(gamma^2/2) phi_x^2 / phi_xx + phi_s, assembled from the jet.

    The combination is formed relative to phi and rescaled at the end, so
    large states do not turn it into inf - inf.
    """
    lv, ls, lx, lxx = _log_jet(p, params, k_scale)
    g2 = params.gamma ** 2
    rel = -0.5 * g2 * np.exp(2.0 * lx - lxx - lv) + np.exp(ls - lv)
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.where(rel == 0, 0.0, rel * np.exp(lv))
    return _out(out)


def drift_residual(p: PhiPoint, z_norm: ArrayLike, params: CriticalParams, k_scale: float = 1.0) -> ArrayLike:
    """-gamma phi_x |z| + phi_xx |z|^2 / 2 + phi_s."""
    z = np.asarray(z_norm, dtype=float)
    if np.any(z < 0):
        raise DomainError("z_norm must be nonnegative")
    lv, ls, lx, lxx = _log_jet(p, params, k_scale)
    g = params.gamma
    rel = -g * np.exp(lx - lv) * z + 0.5 * np.exp(lxx - lv) * z * z + np.exp(ls - lv)
    with np.errstate(over="ignore", invalid="ignore"):
        out = np.where(rel == 0, 0.0, rel * np.exp(lv))
    return _out(out)


def drift_minimizer(p: PhiPoint, params: CriticalParams) -> ArrayLike:
    """The |z| minimising :func:`drift_residual`: gamma phi_x / phi_xx."""
    _, _, lx, lxx = _log_jet(p, params)
    return _out(params.gamma * np.exp(lx - lxx))


# --- comparison constants between psi and phi ----------------------------

def _h1(x: np.ndarray, params: CriticalParams) -> np.ndarray:
    g, T = params.gamma, params.horizon
    # sqrt(2 log(x+e)) - sqrt(2 log(x+1)) without cancellation
    la, lb = np.log(x + E), np.log1p(x)
    diff = 2.0 * np.log1p((E - 1.0) / (x + 1.0)) / (np.sqrt(2.0 * la) + np.sqrt(2.0 * lb))
    return (x + E) / x * np.exp(g * math.sqrt(T) * diff + 0.5 * g * g * T + g * math.sqrt(2.0 * T))


def _h2(params: CriticalParams) -> float:
    g, T = params.gamma, params.horizon
    return (E + 1.0) * math.exp(g * math.sqrt(2.0 * T * math.log1p(E)) + 0.5 * g * g * T + g * math.sqrt(2.0 * T))


def _k_from(gamma: float, horizon: float) -> float:
    if gamma == 0:
        # H1 reduces to (x+e)/x, maximal at x = 1; H2 reduces to e + 1
        return 1.0 + E
    params = CriticalParams(gamma=gamma, horizon=horizon)
    grid = np.logspace(0.0, math.log10(K_GRID_MAX), K_GRID_POINTS)
    h1_sup = float(np.max(_h1(grid, params)))
    limit = math.exp(0.5 * gamma * gamma * horizon + gamma * math.sqrt(2.0 * horizon))
    return max(h1_sup, limit, _h2(params))


def growth_constant_K(params: CriticalParams | None = None, *, gamma: float | None = None,
                      horizon: float | None = None) -> float:
    """Constant K with psi(x, g sqrt(s)) <= phi(s, x; t) <= K psi(x, g sqrt(s)) + K.

    ``gamma=0`` is accepted through the keyword form as the degenerate
    limit (``CriticalParams`` itself insists on gamma > 0).
    """
    if params is not None:
        return _k_from(params.gamma, params.horizon)
    if gamma is None or horizon is None:
        raise TypeError("pass either params or both gamma and horizon")
    if gamma < 0 or horizon <= 0:
        raise DomainError("need gamma >= 0 and horizon > 0")
    return _k_from(float(gamma), float(horizon))


def apriori_constant_C(params: CriticalParams | None = None, *, gamma: float | None = None,
                       beta: float = 0.0, horizon: float | None = None) -> float:
    """Constant in the a priori bound psi(|Y_t|, g sqrt t) <= C E_t[psi(...)] + C.

    C = K * max(psi(e^{beta T}, g sqrt T), 1) * max(psi(2, g sqrt T) / 2, 1).
    """
    if params is not None:
        gamma, beta, horizon = params.gamma, params.beta, params.horizon
    if gamma is None or horizon is None:
        raise TypeError("pass either params or gamma and horizon")
    if beta < 0:
        raise DomainError("beta must be nonnegative")
    K = growth_constant_K(gamma=gamma, horizon=horizon)
    mu = gamma * math.sqrt(horizon)
    scale = max(psi(math.exp(beta * horizon), mu), 1.0)
    split = max(0.5 * psi(2.0, mu), 1.0)
    return K * scale * split


# --- the two inequalities used for the uniqueness argument ---------------

def young_terms(x: ArrayLike, y: ArrayLike, mu: ArrayLike):
    """Logs of exp(x^2/2mu^2), exp(2mu^2) psi(y, mu) and exp(x) y."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    mu = np.asarray(mu, dtype=float)
    if np.any(y < 0) or np.any(mu <= 0):
        raise DomainError("young_gap requires y >= 0 and mu > 0")
    la = x * x / (2.0 * mu * mu)
    lb = 2.0 * mu * mu + np.asarray(log_psi(y, mu))
    with np.errstate(divide="ignore"):
        lc = x + np.log(y)
    return la, lb, lc


def young_gap(x: ArrayLike, y: ArrayLike, mu: ArrayLike) -> ArrayLike:
    """exp(x^2/(2mu^2)) + exp(2mu^2) psi(y, mu) - exp(x) y  (nonnegative).

    When an exponent passes the overflow threshold the gap is assembled as
    exp(m) * (sum of exp(term - m)), with m the largest log term, and so
    saturates to +/-inf instead of producing nan.
    """
    la, lb, lc = young_terms(x, y, mu)
    m = np.maximum(np.maximum(la, lb), lc)
    with np.errstate(over="ignore", invalid="ignore"):
        scaled = np.exp(la - m) + np.exp(lb - m) - np.exp(lc - m)
        out = np.where(m > LOG_SPACE_THRESHOLD,
                       np.where(scaled == 0, 0.0, np.sign(scaled) * np.exp(np.log(np.abs(scaled) + 1e-300) + m)),
                       np.exp(la) + np.exp(lb) - np.exp(lc))
    return _out(out)


def young_log_margin(x: ArrayLike, y: ArrayLike, mu: ArrayLike) -> ArrayLike:
    """log(exp(x^2/2mu^2) + exp(2mu^2) psi(y, mu)) - log(exp(x) y); >= 0 iff the gap is."""
    la, lb, lc = young_terms(x, y, mu)
    return _out(np.logaddexp(la, lb) - lc)


def exp_moment_bound(lam: float, t: float, params: CriticalParams) -> float:
    """1 / sqrt(1 - 2 lam gamma^2 (T - t)), valid for 0 <= lam < 1/(2 gamma^2 (T - t))."""
    T = params.horizon
    if not (0.0 <= t <= T):
        raise DomainError(f"t must lie in [0, T], got {t}")
    if lam < 0:
        raise PreconditionError("lambda must be nonnegative")
    q = 2.0 * lam * params.gamma ** 2 * (T - t)
    if q >= 1.0:
        raise PreconditionError(
            f"lambda={lam} violates lambda < 1/(2 gamma^2 (T - t)) = {1.0 / (2 * params.gamma ** 2 * (T - t))}")
    return 1.0 / math.sqrt(1.0 - q)
