import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra import numpy as hnp

from bsde_lab.errors import DomainError
from bsde_lab.estimate import (BINS, bar_transform, check_apriori_bound, class_d_diagnostic, field_regression,
                               hitting_times, localization_times, stopped_means, supermartingale_test)
from bsde_lab.scenario import (GeneratorSpec, TimeGrid, abs_z, critical_terminal_family, eval_terminal,
                               get_generator, scaled_z_generator)
from bsde_lab.solver import SolutionField, solve_backward_euler
from bsde_lab.special_functions import CriticalParams, psi

P = CriticalParams(0.5, 0.5, 1.0)


def const_gen(c, beta=0.0):
    return GeneratorSpec("const", {"H1", "H2"}, beta, 1.0, lambda t, y, z: np.full(np.shape(y), float(c)))


def bare_field(y, n_steps=None, d=1, z=None):
    m, n1 = y.shape
    grid = TimeGrid.uniform(1.0, n1 - 1)
    z = np.zeros((m, n1 - 1, d)) if z is None else z
    return SolutionField(grid, y, z, {"seed": None})


# --- bar transform -------------------------------------------------------------

def test_bar_identity_without_drift():
    y = np.random.default_rng(0).normal(size=(7, 6))
    bar = bar_transform(bare_field(y), get_generator("zero"), beta=0.0)
    assert np.array_equal(bar.ybar, np.abs(y))


def test_bar_riemann_sum_of_one():
    f = bare_field(np.zeros((3, 11)))
    bar = bar_transform(f, const_gen(1.0), beta=0.0)
    assert np.allclose(bar.ybar, f.grid.times[None, :], atol=1e-14)


def test_bar_exponential_quadrature():
    n = 200
    f = bare_field(np.zeros((2, n + 1)))
    bar = bar_transform(f, const_gen(1.0, beta=1.0))
    exact = np.exp(f.grid.times) - 1
    left = np.concatenate([[0.0], np.cumsum(np.exp(f.grid.times[:-1]) / n)])
    assert np.allclose(bar.ybar[0], left, rtol=1e-13)
    assert np.max(np.abs(bar.ybar[0] - exact)) <= math.e / n


def test_bar_sign_convention():
    y = np.array([[1.0, -1.0, 0.0]])
    z = np.ones((1, 2, 1))
    bar = bar_transform(bare_field(y, z=z), get_generator("zero"), beta=0.0)
    assert bar.zbar[0, :, 0].tolist() == [1.0, -1.0]
    assert "sgn" in bar.zbar_meta


@given(hnp.arrays(float, (4, 6), elements=st.floats(-1e3, 1e3)), st.floats(0, 3), st.floats(-5, 5))
def test_bar_two_sided_bound(y, beta, c):
    f = bare_field(y)
    bar = bar_transform(f, const_gen(c, beta=beta))
    acc = np.concatenate([[0.0], np.cumsum(np.full(5, abs(c)) / 5)])
    assert np.all(bar.ybar >= np.abs(y) - 1e-12)
    upper = math.exp(beta * 1.0) * (np.abs(y) + acc[None, :])
    assert np.all(bar.ybar <= upper * (1 + 1e-12) + 1e-12)


def test_bar_uses_one_sided_bound():
    gen = get_generator("one_sided_cubic", beta=0.0)
    f = bare_field(np.ones((2, 5)))
    assert np.array_equal(bar_transform(f, gen).ybar, np.ones((2, 5)))


# --- localization ----------------------------------------------------------------

@pytest.fixture(scope="module")
def abs_field(small_ensemble):
    gen = abs_z(gamma=0.5)
    return gen, solve_backward_euler(gen, small_ensemble.terminal[:, 0], small_ensemble, BINS)


def test_localization_extremes(abs_field):
    gen, f = abs_field
    bar = bar_transform(f, gen, P.beta)
    n = f.grid.n_steps
    assert np.all(localization_times(f, bar, 3, 0.0, P).tau == 3)
    assert np.all(localization_times(f, bar, 3, math.inf, P).tau == n)


def test_localization_zero_z():
    y = np.ones((5, 9))
    f = bare_field(y)
    bar = bar_transform(f, get_generator("zero"), 0.0)
    assert np.all(localization_times(f, bar, 1, 1e-9, P).tau == 8)


@given(st.integers(1, 20), st.floats(1e-3, 1e6))
def test_localization_window(abs_field, anchor, level):
    gen, f = abs_field
    bar = bar_transform(f, gen, P.beta)
    tau = localization_times(f, bar, anchor, level, P).tau
    assert np.all(tau >= anchor) and np.all(tau <= f.grid.n_steps)


def test_localization_anchor_range(abs_field):
    gen, f = abs_field
    bar = bar_transform(f, gen, P.beta)
    for bad in (0, f.grid.n_steps + 1):
        with pytest.raises(DomainError):
            localization_times(f, bar, bad, 1.0, P)


def test_optional_stopping_means_nondecreasing(abs_field):
    gen, f = abs_field
    bar = bar_transform(f, gen, P.beta)
    for level in (1.0, 100.0, math.inf):
        stop = localization_times(f, bar, 1, level, P)
        _, means, ses = stopped_means(f, gen, stop, P)
        assert np.all(np.diff(means) >= -3 * np.hypot(ses[1:], ses[:-1]))


# --- supermartingale test -------------------------------------------------------

def test_supermartingale_deterministic_constant(small_ensemble):
    gen = get_generator("zero", beta=0.0, gamma=0.5)
    f = solve_backward_euler(gen, np.full(small_ensemble.n_paths, 1.5), small_ensemble)
    rep = supermartingale_test(f, gen, 1, CriticalParams(0.5))
    assert rep.passed and rep.violation_rate == 0


def test_supermartingale_abs_z(abs_field):
    gen, f = abs_field
    rep = supermartingale_test(f, gen, 1, P)
    assert rep.passed
    assert field_regression(f) == BINS


def test_supermartingale_has_power(small_ensemble):
    # drift 6 gamma |z| against the declared gamma
    bad = scaled_z_generator(6.0, 0.5)
    f = solve_backward_euler(bad, 4 * small_ensemble.terminal[:, 0], small_ensemble, BINS)
    rep = supermartingale_test(f, bad, 1, P)
    assert not rep.passed and rep.violation_rate > 0.05


def test_supermartingale_requires_growth_tag(abs_field):
    _, f = abs_field
    lip_only = GeneratorSpec("lip", {"H2"}, 0.0, 0.5, lambda t, y, z: np.zeros(np.shape(y)))
    with pytest.raises(DomainError):
        supermartingale_test(f, lip_only, 1, P)


# --- a priori bound ----------------------------------------------------------

def test_apriori_trivial(small_ensemble):
    gen = get_generator("zero", gamma=0.5)
    zero = np.zeros(small_ensemble.n_paths)
    f = solve_backward_euler(gen, zero, small_ensemble)
    rep = check_apriori_bound(f, gen, zero, CriticalParams(0.5))
    assert rep.passed and rep.violation_rate == 0
    assert rep.details[0]["tightness"] == 0


def test_apriori_constant_terminal(small_ensemble):
    gen = get_generator("zero", gamma=0.5)
    xi = np.full(small_ensemble.n_paths, 4.0)
    f = solve_backward_euler(gen, xi, small_ensemble)
    rep = check_apriori_bound(f, gen, xi, CriticalParams(0.5))
    assert rep.passed and rep.violation_rate == 0
    assert 0 < rep.details[0]["tightness"] < 1


@pytest.mark.parametrize("name", ["abs_z", "lipschitz_mixed", "linear_y"])
def test_apriori_square_integrable_scenarios(small_ensemble, name):
    gen = get_generator(name, 0.5, 0.5)
    xi = small_ensemble.terminal[:, 0] * 2
    f = solve_backward_euler(gen, xi, small_ensemble)
    assert check_apriori_bound(f, gen, xi, P).passed


def test_apriori_critical_small(small_ensemble):
    gen = abs_z(gamma=0.5)
    xi = eval_terminal(critical_terminal_family(1.0, small_ensemble.grid), small_ensemble)
    f = solve_backward_euler(gen, xi, small_ensemble, BINS)
    rep = check_apriori_bound(f, gen, xi, CriticalParams(0.5))
    assert rep.violation_rate <= 0.01


# --- class (D) surrogate ---------------------------------------------------------

def test_hitting_times():
    a = np.array([[0.0, 1.0, 3.0], [0.0, 0.5, 0.5]])
    assert hitting_times(a, 1.0).tolist() == [1, 2]


def test_class_d_bounded_field():
    y = np.random.default_rng(1).uniform(-1, 1, size=(500, 11))
    f = bare_field(y)
    params = CriticalParams(0.5)
    cap = psi(1.0, 0.5)
    rep = class_d_diagnostic(f, params, [cap * 1.01, cap * 10])
    tails = [d["tail"] for d in rep.details]
    assert tails[1] == tails[2] == 0.0
    assert rep.passed


def test_class_d_critical_decay(small_ensemble):
    gen = get_generator("zero", gamma=0.5)
    xi = eval_terminal(critical_terminal_family(1.0, small_ensemble.grid), small_ensemble)
    f = solve_backward_euler(gen, xi, small_ensemble, BINS)
    rep = class_d_diagnostic(f, CriticalParams(0.5), [2.0, 10.0, 100.0])
    tails = [d["tail"] for d in rep.details]
    assert all(b < a for a, b in zip(tails, tails[1:]))
    assert rep.passed


def test_class_d_subfamily_dominated(abs_field):
    _, f = abs_field
    rep = class_d_diagnostic(f, P, [0.5, 2.0])
    for d in rep.details:
        assert d["deterministic_tail"] <= d["tail"]


def test_class_d_monotone_paths_subfamily_equal():
    # |Y| nondecreasing in t: the terminal time dominates every stopping time
    y = np.cumsum(np.abs(np.random.default_rng(2).normal(size=(300, 9))), axis=1)
    rep = class_d_diagnostic(bare_field(y), CriticalParams(0.5), [1.0, 5.0])
    for d in rep.details:
        assert d["deterministic_tail"] == d["tail"]


def test_class_d_thresholds_validated(abs_field):
    _, f = abs_field
    for bad in ([], [2.0, 1.0], [0.0, 1.0]):
        with pytest.raises(DomainError):
            class_d_diagnostic(f, P, bad)
