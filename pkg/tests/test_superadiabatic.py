import math

import numpy as np
import pytest

from superad.model import CapabilityError, DiabaticModel, potential_matrix, theta_derivative
from superad.spectral import Grid1D
from superad.superadiabatic import (
    NAMES,
    UnsupportedModelError,
    ab_tables,
    coefficient_tables,
    coupling_leading_poles,
    coupling_symbol,
    hamiltonian_symbol,
    projection_defect,
    projection_symbol,
)

SWEEP = (-math.pi / 3, math.pi / 2, 0.5)
EPS = [1 / 10, 1 / 20, 1 / 40]


@pytest.fixture(scope="module")
def model():
    return DiabaticModel.sech(*SWEEP)


@pytest.fixture(scope="module")
def grid():
    return Grid1D(-24.0, 24.0, 256, 0.1)


@pytest.fixture(scope="module")
def table(model, grid):
    return coefficient_tables(model, 8, grid=grid)


@pytest.fixture(scope="module")
def samples():
    return np.linspace(-6, 6, 241)


def test_ab_start_values(model, samples):
    ab = ab_tables(model, 3)
    assert np.array_equal(ab.a[0](samples), np.full_like(samples, 0.5))
    assert not np.any(ab.b[0](samples))


def test_ab_unrolled_by_hand(model, samples):
    ab = ab_tables(model, 2)
    d = model.delta
    tp = model.theta_prime(samples)
    t2 = np.array([theta_derivative(model, q, 1) for q in samples])
    assert np.allclose(ab.a[1](samples), 0, atol=1e-15)
    assert np.allclose(ab.b[1](samples), -d * tp, atol=1e-14)
    assert np.allclose(ab.a[2](samples), -d * tp**2, atol=1e-14)
    assert np.allclose(ab.b[2](samples), -d * t2, atol=1e-14)


def test_ab_capability(model):
    with pytest.raises(CapabilityError):
        ab_tables(model, 17)


def test_coefficient_capability(model):
    with pytest.raises(CapabilityError):
        coefficient_tables(model, 13)


def test_first_coefficient_at_crossing(model):
    tab = coefficient_tables(model, 2)
    y10 = tab.sample("y", 1, 0, np.array([0.0]))[0]
    assert y10 == pytest.approx(1j * math.pi / 12, abs=1e-14)
    for name in ("x", "z", "w"):
        assert tab.is_structural_zero(name, 1, 0)
    assert tab.is_structural_zero("y", 1, 1)


def test_second_level_x_is_half_theta_second_derivative(model, samples):
    tab = coefficient_tables(model, 2)
    t2 = np.array([theta_derivative(model, q, 1) for q in samples])
    assert np.allclose(tab.sample("x", 2, 0, samples), t2 / 2, atol=1e-14)
    assert tab.sample("x", 2, 0, np.array([0.0]))[0] == pytest.approx(0, abs=1e-15)


def test_zero_patterns_up_to_level_eight(model):
    tab = coefficient_tables(model, 8)
    q = np.linspace(-20, 20, 801)
    for name, n, m in tab.entries():
        if n == 0:
            continue
        sup = np.max(np.abs(tab.sample(name, n, m, q)))
        parity_zero = (name == "y") == (n % 2 == 0)
        allowed = m % 4 == (2 if name == "w" else 0)
        if parity_zero or not allowed:
            assert sup <= 1e-13, (name, n, m)


def test_reality_split(model):
    tab = coefficient_tables(model, 8)
    q = np.linspace(-20, 20, 801)
    for name, n, m in tab.entries():
        v = tab.sample(name, n, m, q)
        part = v.real if name == "y" else v.imag
        assert np.max(np.abs(part)) <= 1e-12


def test_grid_backend_agrees_with_exact(model, grid, table):
    exact = coefficient_tables(model, 8)
    for name, n, m in exact.entries():
        ref = exact.sample(name, n, m, grid.x)
        scale = max(1.0, np.max(np.abs(ref)))
        assert np.max(np.abs(table.sample(name, n, m) - ref)) <= 1e-8 * scale, (name, n, m)


def test_coefficients_decay_at_the_boundary(table, grid):
    for name, n, m in table.entries():
        if n > 0:
            v = table.sample(name, n, m)
            assert max(abs(v[0]), abs(v[-1])) <= 1e-10


def test_first_coupling_is_the_adiabatic_coupling(model, table, grid):
    k1 = coupling_symbol(table, 1)
    target = 1j * model.theta_prime(grid.x) / 2
    assert set(k1.kappa_plus.coeffs) == {1}
    assert np.allclose(k1.kappa_plus.values(1), target, atol=1e-13)
    assert np.allclose(k1.kappa_minus.values(1), target, atol=1e-13)


def test_second_coupling(model, table, grid):
    t2 = np.array([theta_derivative(model, q, 1) for q in grid.x])
    k2 = coupling_symbol(table, 2)
    assert np.allclose(k2.kappa_plus.values(2), -t2 / 2, atol=1e-12)
    assert np.allclose(k2.kappa_minus.values(2), t2 / 2, atol=1e-12)


@pytest.mark.parametrize("n", range(1, 9))
def test_coupling_sum_and_difference(model, table, grid, n):
    k = coupling_symbol(table, n)
    rho = model.rho(grid.x)
    for p in (0.7, 2.0):
        tot = k.kappa_plus.evaluate(p) + k.kappa_minus.evaluate(p)
        diff = k.kappa_plus.evaluate(p) - k.kappa_minus.evaluate(p)
        y = sum(table.sample("y", n, m) * p ** (n - m) for m in range(n + 1))
        x = sum(table.sample("x", n, m) * p ** (n - m) for m in range(n + 1))
        assert np.allclose(tot, -4 * rho * y, atol=1e-13 * max(1, np.max(np.abs(tot))))
        assert np.allclose(diff, -4 * rho * x, atol=1e-13 * max(1, np.max(np.abs(diff))))


def test_coupling_rejects_levels_outside_table(table):
    with pytest.raises(ValueError):
        coupling_symbol(table, 9)


@pytest.mark.parametrize("n", range(2, 11))
def test_leading_poles_have_fixed_phase(model, grid, n):
    v = coupling_leading_poles(model, n, grid).values(n)
    # Real for even n and purely imaginary for odd n (conjugate pole pair).
    part = v.imag if n % 2 == 0 else v.real
    assert np.max(np.abs(part)) <= 1e-13 * max(1.0, np.max(np.abs(v)))


def test_leading_pole_growth_ratio(model):
    g = Grid1D(-24.0, 24.0, 4096, 0.1)
    tau_c = model.tau_c
    sups = {n: np.max(np.abs(coupling_leading_poles(model, n, g).values(n))) for n in range(5, 12)}
    # Single-step ratios alternate with parity (even n vanish at q = 0), so the
    # trend is measured over two steps.
    for n in range(6, 11):
        trend = math.sqrt(sups[n + 1] / sups[n - 1])
        assert trend == pytest.approx(math.sqrt(n * (n - 1)) / tau_c, rel=0.15)
    swing = [abs(sups[n + 1] / sups[n] * tau_c / n - 1) for n in range(6, 11)]
    assert swing[-1] < swing[0] < 0.25


def test_leading_poles_approach_the_recursion(model, table, grid):
    devs = []
    for n in range(4, 9):
        top = coupling_symbol(table, n).kappa_plus.values(n)
        lead = coupling_leading_poles(model, n, grid).values(n)
        devs.append(np.max(np.abs(top - lead)) / np.max(np.abs(top)))
    assert all(b < a for a, b in zip(devs, devs[1:]))


def test_leading_poles_need_constant_gap(grid):
    x = grid.x
    m = DiabaticModel.tabulated(x, -0.5 / np.cosh(x), 0.5 + 0.1 / np.cosh(x), q_c=1.0, gamma=0.3)
    with pytest.raises(UnsupportedModelError):
        coupling_leading_poles(m, 3, grid)


def test_adiabatic_projection(model, table, grid):
    pi0 = projection_symbol(table, 0).terms[0]
    assert set(pi0.coeffs) == {0}
    p = pi0.values(0)
    assert np.allclose(p[0, 0] + p[1, 1], 1, atol=1e-14)
    sq = np.einsum("ijn,jkn->ikn", p, p)
    assert np.allclose(sq, p, atol=1e-13)
    assert np.allclose(p, (np.eye(2)[..., None] + potential_matrix(model, grid.x) / model.delta) / 2, atol=1e-13)


def test_projection_trace_is_twice_w(table):
    proj = projection_symbol(table, 6)
    for j in range(1, 7):
        for power in proj.terms[j].coeffs:
            c = proj.terms[j].values(power)
            tr = c[0, 0] + c[1, 1]
            w = table.sample("w", j, j - power)
            assert np.allclose(tr, 2 * w, atol=1e-12)


def test_n0_defect_anchor_and_idempotent_leading_term(model, table, grid):
    rep = projection_defect(model, projection_symbol(table, 0), EPS, table=table)
    assert rep.anchor_error <= 1e-10
    assert rep.projection_orders[0] <= 1e-15


@pytest.mark.parametrize("n", range(6))
def test_defect_orders(model, table, n):
    rep = projection_defect(model, projection_symbol(table, n), EPS, table=table)
    assert rep.projection_exponent >= n + 0.8
    assert rep.commutator_exponent >= n + 0.8
    if n == 3:
        assert rep.commutator_exponent >= 3.8


def test_defect_needs_two_to_five_epsilons(model, table):
    proj = projection_symbol(table, 1)
    with pytest.raises(ValueError):
        projection_defect(model, proj, [0.1], table=table)
    with pytest.raises(ValueError):
        projection_defect(model, proj, [0.1, 0.09, 0.08, 0.07, 0.06, 0.05], table=table)


def test_hamiltonian_symbol(model, grid):
    h = hamiltonian_symbol(model, grid, 2)
    assert set(h.coeffs) == {0, 2}
    assert np.allclose(h.values(2)[0, 0], 0.5)
    assert np.allclose(h.values(2)[0, 1], 0)


def test_mutation_breaks_the_pattern(model):
    tab = coefficient_tables(model, 8, _mutation="offpattern")
    q = np.linspace(-20, 20, 801)
    worst = 0.0
    for name, n, m in tab.entries():
        if n and m % 4 != (2 if name == "w" else 0):
            worst = max(worst, np.max(np.abs(tab.sample(name, n, m, q))))
    assert worst > 1e-6


def test_names_order():
    assert NAMES == ("x", "y", "z", "w")
