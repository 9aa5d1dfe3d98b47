import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bsde_lab.errors import ConfigError, DomainError, NonFiniteError, ResourceError
from bsde_lab.scenario import (GeneratorSpec, TerminalSpec, TimeGrid, brownian_terminal, builtin_generators,
                               constant_terminal, critical_terminal_family, eval_terminal, get_generator,
                               iter_brownian_shards, make_terminal, scaled_z_generator, simulate_brownian,
                               verify_assumptions)
from bsde_lab.special_functions import psi


def test_grid_invariants():
    g = TimeGrid.uniform(2.0, 7)
    assert g.times[0] == 0.0 and g.times[-1] == 2.0
    assert np.all(np.diff(g.times) > 0)
    assert g.n_steps == 7
    with pytest.raises(DomainError):
        TimeGrid(np.array([0.0, 0.5, 0.5, 1.0]))
    with pytest.raises(DomainError):
        TimeGrid(np.array([0.1, 1.0]))


def test_nonuniform_grid_accepted():
    g = TimeGrid(np.array([0.0, 0.1, 0.5, 1.0]))
    assert g.dt.tolist() == pytest.approx([0.1, 0.4, 0.5])
    assert g.index_at_or_after(0.3) == 2


def test_brownian_mean_single_step():
    m = 1_000_000
    ens = simulate_brownian(TimeGrid.uniform(1.0, 1), 1, m, seed=1)
    bT = ens.terminal[:, 0]
    assert abs(bT.mean()) <= 4 / math.sqrt(m)
    assert abs(np.mean(bT ** 2) - 1.0) <= 5 / math.sqrt(m)


def test_increment_variance_per_step():
    m = 1_000_000
    ens = simulate_brownian(TimeGrid(np.array([0.0, 0.1, 0.5, 0.6, 1.0])), 1, m, seed=2, shard_count=4)
    var = ens.increments[:, :, 0].var(axis=0)
    assert np.all(np.abs(var / ens.grid.dt - 1) <= 5 / math.sqrt(m))


def test_disjoint_increments_uncorrelated(small_ensemble):
    inc = small_ensemble.increments[:, :, 0]
    c = np.corrcoef(inc.T)
    off = c[~np.eye(c.shape[0], dtype=bool)]
    assert np.max(np.abs(off)) <= 5 / math.sqrt(inc.shape[0])


def test_determinism_and_shards():
    g = TimeGrid.uniform(1.0, 5)
    a = simulate_brownian(g, 2, 1000, seed=42, shard_count=3)
    b = simulate_brownian(g, 2, 1000, seed=42, shard_count=3)
    assert np.array_equal(a.increments, b.increments)
    c = simulate_brownian(g, 2, 1000, seed=42, shard_count=1)
    assert not np.array_equal(a.increments, c.increments)
    d = simulate_brownian(g, 2, 1000, seed=43, shard_count=3)
    assert not np.array_equal(a.increments, d.increments)


def test_streaming_matches_full():
    g = TimeGrid.uniform(1.0, 4)
    full = simulate_brownian(g, 1, 900, seed=9, shard_count=3)
    parts = np.concatenate([inc for _, inc in iter_brownian_shards(g, 1, 900, 9, 3)])
    assert np.array_equal(full.increments, parts)


def test_memory_budget():
    with pytest.raises(ResourceError):
        simulate_brownian(TimeGrid.uniform(1.0, 100), 1, 10_000, seed=0, memory_budget=1000)


def test_ensemble_is_read_only(tiny_ensemble):
    with pytest.raises(ValueError):
        tiny_ensemble.increments[0, 0, 0] = 1.0
    assert np.all(tiny_ensemble.paths[:, 0, :] == 0)


# --- generators -----------------------------------------------------------------

def test_builtin_library():
    names = {g.name for g in builtin_generators()}
    assert {"zero", "linear_y", "abs_z", "lipschitz_mixed", "one_sided_cubic", "monotone_nonlip"} <= names
    rng = np.random.default_rng(0)
    y, z = rng.normal(size=5), rng.normal(size=(5, 3))
    assert np.all(get_generator("zero")(0.3, y, z) == 0)
    assert get_generator("abs_z", gamma=1.0)(0.0, np.zeros(1), np.array([[2.0]]))[0] == 2.0
    assert get_generator("abs_z", gamma=1.0)(0.0, np.zeros(1), np.array([[0.0, -2.0]]))[0] == 2.0


def test_generator_rejects_bad_constants():
    with pytest.raises(ConfigError):
        get_generator("abs_z", gamma=0.0)
    with pytest.raises(ConfigError):
        GeneratorSpec("x", {"H3"}, 0.0, 1.0, lambda t, y, z: y)
    with pytest.raises(ConfigError):
        get_generator("nope")


@pytest.mark.parametrize("spec", builtin_generators(beta=0.7, gamma=1.3), ids=lambda s: s.name)
def test_builtins_pass_their_audits(spec):
    rep = verify_assumptions(spec, 1_000_000, seed=4, dim=2)
    assert rep.passed, rep.details
    assert rep.worst_margin >= -1e-12


def test_one_sided_cubic_inequality_sampled():
    spec = get_generator("one_sided_cubic", beta=0.0, gamma=1.0)
    rng = np.random.default_rng(8)
    y = rng.standard_cauchy(100_000)
    z = rng.standard_cauchy((100_000, 1))
    g = spec(0.5, y, z)
    sgn = np.where(y > 0, 1.0, -1.0)
    assert np.all(sgn * g <= spec.f_bound(0.5) + np.abs(z[:, 0]) + 1e-12 * (1 + np.abs(g)))


def test_quadratic_generator_fails_growth_audit():
    sq = GeneratorSpec("z_squared", {"H1"}, 0.0, 1.0, lambda t, y, z: np.sum(np.asarray(z) ** 2, axis=-1))
    rep = verify_assumptions(sq, 10_000, seed=1)
    assert not rep.passed
    assert rep.worst_margin < 0
    assert rep.details[0]["witness"] is not None


def test_overstated_factor_fails():
    g = scaled_z_generator(3.0, 0.5)
    understated = GeneratorSpec("understated", {"H1", "H2"}, 0.0, 0.5, g.evaluate)
    assert not verify_assumptions(understated, 10_000, seed=2).passed
    assert verify_assumptions(g, 10_000, seed=2).passed


def test_audit_is_deterministic():
    spec = get_generator("lipschitz_mixed")
    a = verify_assumptions(spec, 20_000, seed=3)
    b = verify_assumptions(spec, 20_000, seed=3)
    assert a.to_json() == b.to_json()


# --- terminals -------------------------------------------------------------------

def test_constant_and_brownian_terminals(tiny_ensemble):
    assert np.all(eval_terminal(constant_terminal(2.5), tiny_ensemble) == 2.5)
    assert np.array_equal(eval_terminal(brownian_terminal(), tiny_ensemble), tiny_ensemble.terminal[:, 0])


def test_critical_terminal_bounded_below(tiny_ensemble):
    xi = eval_terminal(critical_terminal_family(1.0, tiny_ensemble.grid), tiny_ensemble)
    assert np.all(xi >= 1.0)


def test_critical_mean_closed_form():
    # Gaussian integral: E exp(a B_T^2) = 1 / sqrt(1 - 2 a T) with a = 1/(2T(1+eps))
    for eps, T in ((1.0, 1.0), (0.5, 2.0), (3.0, 0.3)):
        spec = critical_terminal_family(eps, TimeGrid.uniform(T, 1))
        a = 1 / (2 * T * (1 + eps))
        assert spec.mean == pytest.approx(1 / math.sqrt(1 - 2 * a * T), rel=1e-14)
        assert spec.mean == pytest.approx(math.sqrt((1 + eps) / eps), rel=1e-14)


def test_critical_mean_monte_carlo():
    ens = simulate_brownian(TimeGrid.uniform(1.0, 1), 1, 1_000_000, seed=17)
    spec = critical_terminal_family(1.0, ens.grid)
    assert abs(eval_terminal(spec, ens).mean() / spec.mean - 1) <= 0.10


def test_critical_high_moment_does_not_stabilise():
    grid = TimeGrid.uniform(1.0, 1)
    spec = critical_terminal_family(1.0, grid)
    moments = []
    for m in (10_000, 100_000, 1_000_000):
        ens = simulate_brownian(grid, 1, m, seed=23)
        moments.append(float(np.mean(eval_terminal(spec, ens) ** 2.5)))
    # the 2.5-th moment is infinite: sample values keep climbing with M
    assert moments[0] < moments[1] < moments[2]
    assert moments[2] > 2 * moments[0]


def test_critical_psi_moment_stable_across_seeds():
    grid = TimeGrid.uniform(1.0, 1)
    spec = critical_terminal_family(1.0, grid)
    vals = []
    for seed in range(10):
        ens = simulate_brownian(grid, 1, 1_000_000, seed=100 + seed)
        vals.append(float(np.mean(psi(eval_terminal(spec, ens), 0.5))))
    vals = np.array(vals)
    assert np.max(np.abs(vals / vals.mean() - 1)) <= 0.20


def test_critical_rejects_nonpositive_epsilon():
    with pytest.raises(DomainError):
        critical_terminal_family(0.0, TimeGrid.uniform(1.0, 2))


def test_make_terminal():
    g = TimeGrid.uniform(1.0, 2)
    assert make_terminal("critical", {"epsilon": 2.0}, g).integrability_tag == "critical(2)"
    with pytest.raises(ConfigError):
        make_terminal("critical", {"eps": 1.0}, g)
    with pytest.raises(ConfigError):
        make_terminal("weird", {}, g)


def test_non_finite_terminal(tiny_ensemble):
    bad = TerminalSpec("bad", lambda bT, paths: np.where(bT[:, 0] > 0, np.inf, 0.0), "bounded")
    with pytest.raises(NonFiniteError) as info:
        eval_terminal(bad, tiny_ensemble)
    assert tiny_ensemble.terminal[info.value.index, 0] > 0


@given(st.integers(1, 50), st.integers(1, 4), st.integers(0, 2 ** 63))
def test_simulate_deterministic_property(n_paths, n_steps, seed):
    g = TimeGrid.uniform(1.0, n_steps)
    shards = 1 + seed % n_paths
    a = simulate_brownian(g, 1, n_paths, seed, shard_count=min(shards, 4))
    b = simulate_brownian(g, 1, n_paths, seed, shard_count=min(shards, 4))
    assert a.increments.tobytes() == b.increments.tobytes()
