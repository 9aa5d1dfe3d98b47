import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from bsde_lab.errors import ConfigError, ConvergenceError
from bsde_lab.regression import RegressionConfig
from bsde_lab.scenario import GeneratorSpec, TimeGrid, abs_z, get_generator, simulate_brownian
from bsde_lab.solver import (SolverConfig, doubling_levels, field_metadata, field_to_csv, monotone_approximation,
                             picard_solve, solve_backward_euler, truncate_generator, truncate_terminal)

REG1 = RegressionConfig(degree=1)


def test_constant_terminal_zero_generator(small_ensemble):
    f = solve_backward_euler(get_generator("zero"), np.full(small_ensemble.n_paths, 2.0), small_ensemble)
    assert np.max(np.abs(f.y - 2.0)) <= 1e-10
    assert np.max(np.abs(f.z)) <= 1e-10


def test_terminal_consistency(small_ensemble):
    xi = np.sin(small_ensemble.terminal[:, 0])
    for cfg in (SolverConfig("euler"), SolverConfig("implicit"), SolverConfig("picard")):
        f = cfg.solve(get_generator("lipschitz_mixed", 0.5, 0.5), xi, small_ensemble)
        assert np.array_equal(f.y[:, -1], xi)


def test_bit_reproducible(small_ensemble):
    xi = small_ensemble.terminal[:, 0]
    a = solve_backward_euler(abs_z(gamma=0.5), xi, small_ensemble)
    b = solve_backward_euler(abs_z(gamma=0.5), xi.copy(), small_ensemble)
    assert a.y.tobytes() == b.y.tobytes() and a.z.tobytes() == b.z.tobytes()


def test_martingale_oracle_small(small_ensemble):
    f = solve_backward_euler(get_generator("zero"), small_ensemble.terminal[:, 0], small_ensemble, REG1)
    b = small_ensemble.paths[:, :, 0]
    assert np.sqrt(np.mean((f.y - b) ** 2)) <= 5e-2
    assert abs(np.mean(f.z) - 1.0) <= 5e-2


def test_abs_z_closed_form_small(small_ensemble):
    g = 0.5
    f = solve_backward_euler(abs_z(gamma=g), small_ensemble.terminal[:, 0], small_ensemble, REG1)
    assert abs(f.y0 - g) <= 5e-2


def test_superposition_for_zero_generator(small_ensemble):
    b = small_ensemble.terminal[:, 0]
    x1, x2 = b, b ** 2
    zero = get_generator("zero")
    f1 = solve_backward_euler(zero, x1, small_ensemble)
    f2 = solve_backward_euler(zero, x2, small_ensemble)
    f3 = solve_backward_euler(zero, x1 + x2, small_ensemble)
    assert np.max(np.abs(f3.y - f1.y - f2.y)) <= 1e-8


def test_comparison_property(small_ensemble):
    b = small_ensemble.terminal[:, 0]
    gen = get_generator("lipschitz_mixed", 0.5, 0.5)
    lo = solve_backward_euler(gen, np.sin(b), small_ensemble)
    hi = solve_backward_euler(gen, np.sin(b) + 0.2 * b ** 2, small_ensemble)
    band = 3 * np.hypot(lo.y_se, hi.y_se)[None, :]
    assert np.mean(lo.y > hi.y + band) <= 0.01


def test_implicit_matches_explicit_on_linear(small_ensemble):
    c, beta = 1.0, 0.5
    xi = np.full(small_ensemble.n_paths, c)
    n = small_ensemble.grid.n_steps
    dt = 1.0 / n
    ex = solve_backward_euler(get_generator("linear_y", beta), xi, small_ensemble)
    im = solve_backward_euler(get_generator("linear_y", beta), xi, small_ensemble, implicit=True)
    assert ex.y0 == pytest.approx(c * (1 - beta * dt) ** n, rel=1e-10)
    assert im.y0 == pytest.approx(c / (1 + beta * dt) ** n, rel=1e-8)


def test_picard_zero_generator_one_iteration(small_ensemble):
    xi = small_ensemble.terminal[:, 0] ** 2
    f = picard_solve(get_generator("zero"), xi, small_ensemble)
    assert f.meta["iterations"] == 1
    ref = solve_backward_euler(get_generator("zero"), xi, small_ensemble)
    assert abs(f.y0 - ref.y0) <= 3 * math.hypot(f.y_se[0], ref.y_se[0]) + 1e-12


def test_picard_linear_oracle(small_ensemble):
    c, beta = 2.0, 0.7
    f = picard_solve(get_generator("linear_y", beta), np.full(small_ensemble.n_paths, c), small_ensemble)
    assert abs(f.y0 - c * math.exp(-beta)) <= 5e-2


def test_picard_agrees_with_euler(small_ensemble):
    gen = get_generator("lipschitz_mixed", 0.5, 0.5)
    xi = np.sin(small_ensemble.terminal[:, 0])
    e = solve_backward_euler(gen, xi, small_ensemble)
    p = picard_solve(gen, xi, small_ensemble)
    disc = np.mean(np.abs(e.y - p.y), axis=0)
    band = 3 * np.hypot(e.y_se, p.y_se) + 1.0 / 20 * 1.0 * 1.0
    assert np.all(disc <= 2 * band)


def test_picard_needs_lipschitz(small_ensemble):
    with pytest.raises(ConfigError):
        picard_solve(get_generator("one_sided_cubic"), np.zeros(small_ensemble.n_paths), small_ensemble)


def test_picard_reports_nonconvergence(small_ensemble):
    with pytest.raises(ConvergenceError) as info:
        picard_solve(abs_z(gamma=1.0), small_ensemble.terminal[:, 0], small_ensemble, max_iter=1)
    assert info.value.iterations == 1 and info.value.residual > 0


def test_solver_config_validation():
    with pytest.raises(ConfigError):
        SolverConfig("explicit-rk4")


def test_shape_mismatch(small_ensemble):
    with pytest.raises(ConfigError):
        solve_backward_euler(abs_z(), np.zeros(3), small_ensemble)


# --- truncation ------------------------------------------------------------------

def test_truncate_terminal_examples():
    assert truncate_terminal(5.0, 3, 7) == 3.0
    assert truncate_terminal(-4.0, 3, 2) == -2.0
    assert truncate_terminal(0.0, 4, 9) == 0.0


@given(st.floats(-1e6, 1e6), st.integers(1, 100), st.integers(1, 100))
def test_truncate_terminal_bounds(x, n, p):
    v = truncate_terminal(x, n, p)
    assert -p <= v <= n
    if -p <= x <= n:
        assert v == x


@given(st.floats(-1e3, 1e3), st.integers(1, 50), st.integers(1, 50), st.integers(1, 50))
def test_truncate_terminal_ordering(x, n, p, extra):
    assert truncate_terminal(x, n, p) <= truncate_terminal(x, n + extra, p)
    assert truncate_terminal(x, n, p + extra) <= truncate_terminal(x, n, p)


def _shifted(c):
    return GeneratorSpec("shifted", {"H1", "H2"}, 1.0, 1.0,
                         lambda t, y, z: c + np.sin(np.asarray(y)) + np.abs(np.asarray(z)[..., 0]))


def test_truncate_generator_examples():
    y, z = np.zeros(4), np.zeros((4, 1))
    assert np.all(truncate_generator(_shifted(5.0), 3, 7)(0.1, y, z) == 3.0)
    assert np.all(truncate_generator(_shifted(-5.0), 3, 2)(0.1, y, z) == -2.0)
    g = get_generator("abs_z")
    rng = np.random.default_rng(0)
    yy, zz = rng.normal(size=50), rng.normal(size=(50, 1))
    assert np.array_equal(truncate_generator(g, 2, 2)(0.3, yy, zz), g(0.3, yy, zz))
    assert truncate_generator(g, 2, 2).class_tags == g.class_tags


def test_truncate_generator_difference_audit():
    rng = np.random.default_rng(1)
    n = 100_000
    y1, y2 = rng.standard_cauchy(n), rng.standard_cauchy(n)
    z1, z2 = rng.standard_cauchy((n, 1)), rng.standard_cauchy((n, 1))
    g = _shifted(17.0)
    tg = truncate_generator(g, 4, 4)
    lhs = tg(0.2, y1, z1) - tg(0.2, y2, z2)
    rhs = g(0.2, y1, z1) - g(0.2, y2, z2)
    assert np.allclose(lhs, rhs, rtol=1e-12, atol=1e-9)


def test_doubling_levels():
    assert doubling_levels(32) == [1, 2, 4, 8, 16, 32]
    assert doubling_levels(5) == [1, 2, 4, 5]
    assert doubling_levels(1) == [1]


def test_monotone_bounded_terminal_inactive(tiny_ensemble):
    xi = np.sin(tiny_ensemble.terminal[:, 0])
    gen = get_generator("lipschitz_mixed", 0.3, 0.3)
    res = monotone_approximation(gen, xi, tiny_ensemble, n_max=4, p_max=4, keep_fields=True)
    plain = solve_backward_euler(gen, xi, tiny_ensemble)
    for f in res.fields.values():
        assert np.array_equal(f.y, plain.y)
    assert np.array_equal(res.limit, plain.y)


def test_monotone_nonnegative_terminal_independent_of_p(tiny_ensemble):
    xi = np.exp(tiny_ensemble.terminal[:, 0])
    res = monotone_approximation(abs_z(gamma=0.5), xi, tiny_ensemble, n_max=8, p_max=8, keep_fields=True)
    for n in res.n_levels:
        ys = [res.fields[(n, p)].y for p in res.p_levels]
        assert all(np.array_equal(ys[0], y) for y in ys[1:])
    assert res.y0_n_monotone and res.y0_p_antitone
    assert "p" in res.index_note


def test_monotone_signed_terminal_orders(small_ensemble):
    b = small_ensemble.terminal[:, 0]
    xi = 3 * b
    res = monotone_approximation(abs_z(gamma=0.5), xi, small_ensemble, n_max=4, p_max=4)
    assert res.y0_n_monotone and res.y0_p_antitone
    assert 0 <= res.n_violation_rate <= 1 and 0 <= res.p_violation_rate <= 1
    assert np.all(np.diff(res.y0, axis=0) >= -1e-9)
    assert np.all(np.diff(res.y0, axis=1) <= 1e-9)


def test_monotone_bins_preserve_pathwise_order(small_ensemble):
    # bin averages of ordered targets stay ordered, so only Z can break the order
    xi = 3 * small_ensemble.terminal[:, 0]
    res = monotone_approximation(get_generator("zero"), xi, small_ensemble,
                                 RegressionConfig(kind="bins", n_bins=20), n_max=4, p_max=4)
    assert res.n_violation_rate == 0 and res.p_violation_rate == 0
    assert res.limit.shape == (small_ensemble.n_paths, small_ensemble.grid.n_steps + 1)


def test_monotone_on_field_callback(tiny_ensemble):
    seen = []
    monotone_approximation(abs_z(), tiny_ensemble.terminal[:, 0], tiny_ensemble, n_max=2, p_max=2,
                           on_field=lambda key, f: seen.append((key, f.meta["truncation"])))
    assert [k for k, _ in seen] == [(1, 1), (2, 1), (1, 2), (2, 2)]
    assert all(list(k) == t for k, t in seen)


# --- export -------------------------------------------------------------------

def test_csv_export(tmp_path, tiny_ensemble):
    f = solve_backward_euler(abs_z(), tiny_ensemble.terminal[:, 0], tiny_ensemble)
    p = tmp_path / "f.csv"
    field_to_csv(f, p, max_paths=3)
    raw = p.read_bytes()
    lines = raw.decode("utf-8").split("\r\n")
    assert lines[0] == "step_index,time,path_id,y,z_1"
    assert len(lines) == 1 + 3 * (tiny_ensemble.grid.n_steps + 1) + 1 and lines[-1] == ""
    first = lines[1].split(",")
    assert int(first[0]) == 0 and float(first[3]) == f.y[0, 0]
    assert lines[-2].endswith(",")  # no Z at the terminal step
    meta = field_metadata(f, "abc")
    assert '"config_hash": "abc"' in meta
