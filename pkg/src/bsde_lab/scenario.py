"""Simulation inputs: time grids, Brownian ensembles, generators and terminal values."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Callable, Iterator, Optional

import numpy as np

from .errors import ConfigError, DomainError, NonFiniteError, ResourceError
from .report import VerificationReport

TAGS = frozenset({"H1", "H2", "one_sided", "monotone"})
DEFAULT_MEMORY_BUDGET = 2 * 1024 ** 3  # bytes for the increment array


@dataclass(frozen=True, eq=False)
class TimeGrid:
    times: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.times, dtype=float)
        if t.ndim != 1 or t.size < 2:
            raise DomainError("a time grid needs at least two points")
        if t[0] != 0.0:
            raise DomainError("time grid must start at 0")
        if np.any(np.diff(t) <= 0):
            raise DomainError("time grid must be strictly increasing")
        t = t.copy()
        t.setflags(write=False)
        object.__setattr__(self, "times", t)

    @classmethod
    def uniform(cls, horizon: float, n_steps: int) -> "TimeGrid":
        if horizon <= 0 or n_steps < 1:
            raise DomainError("need horizon > 0 and n_steps >= 1")
        t = np.linspace(0.0, horizon, n_steps + 1)
        t[-1] = horizon
        return cls(t)

    @property
    def horizon(self) -> float:
        return float(self.times[-1])

    @property
    def n_steps(self) -> int:
        return self.times.size - 1

    @property
    def dt(self) -> np.ndarray:
        return np.diff(self.times)

    def index_of(self, t: float) -> int:
        """Grid index nearest to time t."""
        return int(np.argmin(np.abs(self.times - t)))

    def index_at_or_after(self, t: float) -> int:
        """Smallest index k with times[k] >= t (up to a relative 1e-12 slack)."""
        slack = 1e-12 * max(1.0, self.horizon)
        return int(np.searchsorted(self.times, t - slack, side="left"))

    def __eq__(self, other):
        return isinstance(other, TimeGrid) and np.array_equal(self.times, other.times)

    def __hash__(self):
        return hash(self.times.tobytes())


@dataclass(frozen=True, eq=False)
class PathEnsemble:
    """M Brownian paths with d components on a grid; increments are read-only."""

    grid: TimeGrid
    dim: int
    n_paths: int
    increments: np.ndarray
    seed: int
    shard_count: int = 1
    _paths: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def paths(self) -> np.ndarray:
        """B at every grid time, shape (M, N+1, d), B_0 = 0."""
        if self._paths is None:
            b = np.zeros((self.n_paths, self.grid.n_steps + 1, self.dim))
            np.cumsum(self.increments, axis=1, out=b[:, 1:, :])
            b.setflags(write=False)
            object.__setattr__(self, "_paths", b)
        return self._paths

    def state(self, k: int) -> np.ndarray:
        return self.paths[:, k, :]

    @property
    def terminal(self) -> np.ndarray:
        return self.paths[:, -1, :]


def _shard_sizes(n_paths: int, shard_count: int) -> list[int]:
    base, rem = divmod(n_paths, shard_count)
    return [base + (1 if j < rem else 0) for j in range(shard_count)]


def shard_generator(seed: int, shard: int) -> np.random.Generator:
    """Counter-based (Philox) stream addressed by (seed, shard)."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(shard)])))


def iter_brownian_shards(grid: TimeGrid, dim: int, n_paths: int, seed: int,
                         shard_count: int = 1) -> Iterator[tuple[slice, np.ndarray]]:
    """Streaming mode: yield (path slice, increments) one shard at a time."""
    sq = np.sqrt(grid.dt)[None, :, None]
    start = 0
    for j, m in enumerate(_shard_sizes(n_paths, shard_count)):
        rng = shard_generator(seed, j)
        inc = rng.standard_normal((m, grid.n_steps, dim)) * sq
        yield slice(start, start + m), inc
        start += m


def simulate_brownian(grid: TimeGrid, dim: int, n_paths: int, seed: int, shard_count: int = 1,
                      memory_budget: int = DEFAULT_MEMORY_BUDGET) -> PathEnsemble:
    if dim < 1 or n_paths < 1:
        raise DomainError("need dim >= 1 and n_paths >= 1")
    if shard_count < 1 or shard_count > n_paths:
        raise DomainError("shard_count must lie in [1, n_paths]")
    if seed < 0 or seed >= 2 ** 64:
        raise DomainError("seed must be a 64-bit unsigned integer")
    # increments plus the cumulative path array
    need = 8 * n_paths * dim * (2 * grid.n_steps + 1)
    if need > memory_budget:
        raise ResourceError(
            f"ensemble needs {need} bytes over budget {memory_budget}; use iter_brownian_shards")
    inc = np.empty((n_paths, grid.n_steps, dim))
    for sl, block in iter_brownian_shards(grid, dim, n_paths, seed, shard_count):
        inc[sl] = block
    inc.setflags(write=False)
    return PathEnsemble(grid, dim, n_paths, inc, int(seed), int(shard_count))


# --- generators -------------------------------------------------------------

Evaluate = Callable[[float, np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class GeneratorSpec:
    """Driver g(t, y, z) with declared structural class and constants.

    ``evaluate`` is vectorised: y has shape (M,), z has shape (M, d).
    """

    name: str
    class_tags: frozenset
    beta: float
    gamma: float
    evaluate: Evaluate
    f_bound: Optional[Callable[[float], float]] = None
    h_growth: Optional[Callable[[np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        object.__setattr__(self, "class_tags", frozenset(self.class_tags))
        unknown = self.class_tags - TAGS
        if unknown:
            raise ConfigError(f"unknown class tags {sorted(unknown)}")
        if self.beta < 0 or not self.gamma > 0:
            raise ConfigError("generator needs beta >= 0 and gamma > 0")

    def __call__(self, t, y, z):
        return self.evaluate(t, y, z)

    def g0(self, t: float, n_paths: int, dim: int) -> np.ndarray:
        return np.asarray(self.evaluate(t, np.zeros(n_paths), np.zeros((n_paths, dim))), dtype=float)


def _znorm(z):
    return np.sqrt(np.sum(np.asarray(z) ** 2, axis=-1))


def zero_generator(beta=1.0, gamma=1.0) -> GeneratorSpec:
    return GeneratorSpec("zero", {"H1", "H2", "one_sided", "monotone"}, beta, gamma,
                         lambda t, y, z: np.zeros(np.shape(y)))


def linear_y(beta=1.0, gamma=1.0) -> GeneratorSpec:
    return GeneratorSpec("linear_y", {"H1", "H2", "one_sided", "monotone"}, beta, gamma,
                         lambda t, y, z: -beta * np.asarray(y, dtype=float))


def abs_z(beta=0.0, gamma=1.0) -> GeneratorSpec:
    return GeneratorSpec("abs_z", {"H1", "H2", "one_sided", "monotone"}, beta, gamma,
                         lambda t, y, z: gamma * _znorm(z))


def lipschitz_mixed(beta=1.0, gamma=1.0) -> GeneratorSpec:
    return GeneratorSpec("lipschitz_mixed", {"H1", "H2"}, beta, gamma,
                         lambda t, y, z: beta * np.sin(y) + gamma * _znorm(z))


def one_sided_cubic(beta=0.0, gamma=1.0) -> GeneratorSpec:
    return GeneratorSpec("one_sided_cubic", {"one_sided"}, beta, gamma,
                         lambda t, y, z: -np.asarray(y, dtype=float) ** 3 + gamma * _znorm(z),
                         f_bound=lambda t: 0.0, h_growth=lambda r: np.asarray(r) ** 3)


def monotone_nonlip(beta=1.0, gamma=1.0) -> GeneratorSpec:
    # -beta sign(y) sqrt|y| is decreasing in y but not Lipschitz at 0
    return GeneratorSpec("monotone_nonlip", {"one_sided", "monotone"}, beta, gamma,
                         lambda t, y, z: -beta * np.sign(y) * np.sqrt(np.abs(y)) + gamma * _znorm(z),
                         f_bound=lambda t: 0.0, h_growth=lambda r: beta * np.sqrt(np.asarray(r)))


_BUILTINS = {
    "zero": zero_generator,
    "linear_y": linear_y,
    "abs_z": abs_z,
    "lipschitz_mixed": lipschitz_mixed,
    "one_sided_cubic": one_sided_cubic,
    "monotone_nonlip": monotone_nonlip,
}


def builtin_generators(beta: float = 1.0, gamma: float = 1.0) -> list[GeneratorSpec]:
    return [make(beta=beta, gamma=gamma) for make in _BUILTINS.values()]


def get_generator(name: str, beta: float = 1.0, gamma: float = 1.0) -> GeneratorSpec:
    try:
        return _BUILTINS[name](beta=beta, gamma=gamma)
    except KeyError:
        raise ConfigError(f"unknown generator {name!r}; known: {sorted(_BUILTINS)}") from None


def scaled_z_generator(factor: float, gamma: float) -> GeneratorSpec:
    """g = factor * gamma |z|, declared with constant factor * gamma."""
    return GeneratorSpec(f"abs_z_x{factor:g}", {"H1", "H2", "one_sided", "monotone"}, 0.0, factor * gamma,
                         lambda t, y, z: factor * gamma * _znorm(z))


# --- assumption audits ----------------------------------------------------

def _heavy(rng, shape, lo=-3.0, hi=3.0):
    return rng.standard_cauchy(shape) * 10.0 ** rng.uniform(lo, hi, shape)


def _margin(rhs, lhs):
    return (rhs - lhs) / (1.0 + np.abs(rhs) + np.abs(lhs))


AUDIT_TOL = 1e-12


def verify_assumptions(spec: GeneratorSpec, n_samples: int, seed: int, horizon: float = 1.0,
                       dim: int = 1, chunk: int = 10_000) -> VerificationReport:
    """Sample (t, y, z) from a heavy-tailed proposal and audit each declared tag.

    Margins are normalised, (rhs - lhs) / (1 + |rhs| + |lhs|); a tag passes
    when its worst margin is >= -1e-12.
    """
    if n_samples < 1:
        raise DomainError("n_samples must be >= 1")
    rng = shard_generator(seed, 0)
    worst = {tag: math.inf for tag in spec.class_tags}
    at = {tag: None for tag in spec.class_tags}
    b, g = spec.beta, spec.gamma
    done = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while done < n_samples:
            m = min(chunk, n_samples - done)
            # one time per chunk keeps evaluation vectorised
            tt = float(rng.uniform(0.0, horizon))
            y1, y2 = _heavy(rng, m), _heavy(rng, m)
            z1, z2 = _heavy(rng, (m, dim)), _heavy(rng, (m, dim))
            g11 = spec(tt, y1, z1)
            g0 = spec.g0(tt, m, dim)
            f = np.full(m, spec.f_bound(tt)) if spec.f_bound is not None else np.abs(g0)
            checks = {}
            if "H1" in spec.class_tags:
                checks["H1"] = _margin(np.abs(g0) + b * np.abs(y1) + g * _znorm(z1), np.abs(g11))
            if "H2" in spec.class_tags:
                checks["H2"] = _margin(b * np.abs(y1 - y2) + g * _znorm(z1 - z2), np.abs(g11 - spec(tt, y2, z2)))
            if "one_sided" in spec.class_tags:
                h = spec.h_growth(np.abs(y1)) if spec.h_growth is not None else b * np.abs(y1)
                sgn = np.where(y1 > 0, 1.0, -1.0)
                lhs1 = sgn * g11
                m1 = _margin(f + b * np.abs(y1) + g * _znorm(z1), lhs1)
                m2 = _margin(f + h + g * _znorm(z1), np.abs(g11))
                checks["one_sided"] = np.minimum(m1, m2)
            if "monotone" in spec.class_tags:
                gy2 = spec(tt, y2, z1)
                sgn = np.sign(y1 - y2)
                m1 = _margin(b * np.abs(y1 - y2), sgn * (g11 - gy2))
                m2 = _margin(g * _znorm(z1 - z2), np.abs(g11 - spec(tt, y1, z2)))
                checks["monotone"] = np.minimum(m1, m2)
            for tag, marg in checks.items():
                marg = np.where(np.isnan(marg), -np.inf, marg)
                i = int(np.argmin(marg))
                if marg[i] < worst[tag]:
                    worst[tag] = float(marg[i])
                    at[tag] = {"t": tt, "y1": float(y1[i]), "y2": float(y2[i]),
                               "z1": z1[i].tolist(), "z2": z2[i].tolist()}
            done += m
    details = [{"tag": tag, "worst_margin": worst[tag], "pass": worst[tag] >= -AUDIT_TOL, "witness": at[tag]}
               for tag in sorted(worst)]
    overall = min(worst.values()) if worst else 0.0
    n_fail = sum(not d["pass"] for d in details)
    return VerificationReport(
        check_name=f"assumptions[{spec.name}]", passed=n_fail == 0, worst_margin=overall,
        violation_rate=n_fail / max(len(details), 1), noise_band=AUDIT_TOL, seed=seed, details=details)


# --- terminal values ----------------------------------------------------------

TerminalEval = Callable[[np.ndarray, np.ndarray], np.ndarray]


@dataclass(frozen=True)
class TerminalSpec:
    """Terminal value xi as a function of (B_T, full path array).

    ``mean`` is the closed-form E[xi] when one is known.
    """

    name: str
    evaluate: TerminalEval
    integrability_tag: str
    mean: Optional[float] = None
    params: dict = field(default_factory=dict)


def constant_terminal(c: float) -> TerminalSpec:
    return TerminalSpec("constant", lambda bT, paths: np.full(bT.shape[0], float(c)), "bounded",
                        mean=float(c), params={"c": float(c)})


def brownian_terminal(scale: float = 1.0, shift: float = 0.0) -> TerminalSpec:
    return TerminalSpec("brownian", lambda bT, paths: scale * bT[:, 0] + shift, "Lp(inf)",
                        mean=float(shift), params={"scale": float(scale), "shift": float(shift)})


def bounded_terminal(amplitude: float = 1.0, shift: float = 0.0) -> TerminalSpec:
    """amplitude * sin(B_T) + shift."""
    return TerminalSpec("bounded", lambda bT, paths: amplitude * np.sin(bT[:, 0]) + shift, "bounded",
                        params={"amplitude": float(amplitude), "shift": float(shift)})


def critical_terminal_family(epsilon: float, grid: TimeGrid, shift: float = 0.0) -> TerminalSpec:
    """xi = exp(B_T^2 / (2T(1+eps))) + shift on the first Brownian component.

    xi lies in L^p exactly for p < 1 + eps while psi(xi, mu) is integrable
    for every mu; E[xi] = sqrt((1+eps)/eps) (plus ``shift``).
    """
    if not epsilon > 0:
        raise DomainError("epsilon must be positive")
    T = grid.horizon
    a = 1.0 / (2.0 * T * (1.0 + epsilon))

    def evaluate(bT, paths):
        return np.exp(a * bT[:, 0] ** 2) + shift

    return TerminalSpec("critical", evaluate, f"critical({epsilon:g})",
                        mean=math.sqrt((1.0 + epsilon) / epsilon) + shift,
                        params={"epsilon": float(epsilon), "shift": float(shift)})


def make_terminal(name: str, params: dict, grid: TimeGrid) -> TerminalSpec:
    params = dict(params or {})
    try:
        if name == "constant":
            return constant_terminal(**params)
        if name == "brownian":
            return brownian_terminal(**params)
        if name == "bounded":
            return bounded_terminal(**params)
        if name == "critical":
            return critical_terminal_family(grid=grid, **params)
    except TypeError as exc:
        raise ConfigError(f"bad parameters for terminal {name!r}: {exc}") from None
    raise ConfigError(f"unknown terminal {name!r}")


def eval_terminal(spec: TerminalSpec, ensemble: PathEnsemble) -> np.ndarray:
    with np.errstate(over="ignore", invalid="ignore"):
        xi = np.asarray(spec.evaluate(ensemble.terminal, ensemble.paths), dtype=float)
    if xi.shape != (ensemble.n_paths,):
        raise DomainError(f"terminal {spec.name!r} returned shape {xi.shape}, expected ({ensemble.n_paths},)")
    bad = np.flatnonzero(~np.isfinite(xi))
    if bad.size:
        raise NonFiniteError(f"terminal {spec.name!r} is not finite on path {bad[0]}", index=int(bad[0]))
    return xi
