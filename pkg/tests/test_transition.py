import math
import warnings
from types import SimpleNamespace

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from superad.dynamics import GAUSSIAN, SEXTIC, PacketSpec
from superad.model import DiabaticModel
from superad.spectral import Grid1D, GridFunction
from superad.transition import (
    HistoryCurve,
    HistoryGrid,
    TransitionParams,
    error_function_rate,
    formula_transmitted,
    formula_two_branch,
    history_error_function_model,
    history_final_amplitude,
    history_perturbative,
    history_setup,
    lz_large_momentum,
    lz_probability,
    lz_ratio,
    momentum_shift_predictor,
    optimal_representation,
    relative_l2_error,
    v_of_k,
    v_of_k_array,
)

SWEEP = (-math.pi / 3, math.pi / 2, 0.5)
HIST = (-math.pi / 3, 2 * math.pi / 5, 3 / 32)
HIST_PACKET = dict(p0=2.5, epsilon=0.02923, sigma2=2.0)


@pytest.fixture(scope="module")
def sweep_model():
    return DiabaticModel.sech(*SWEEP)


@pytest.fixture(scope="module")
def hist_model():
    return DiabaticModel.sech(*HIST)


@pytest.fixture(scope="module")
def hist_spec():
    return PacketSpec(GAUSSIAN, **HIST_PACKET)


def test_v_of_k_examples():
    assert v_of_k(3.0, 0.0) == 3.0
    assert v_of_k(2.5, 3 / 32) == pytest.approx(math.sqrt(5.875), rel=1e-15)
    assert v_of_k(2.5, 3 / 32) == pytest.approx(2.42384, abs=1e-5)
    assert v_of_k(0.5, 0.5) is None
    assert v_of_k(-3.0, 0.5) == -math.sqrt(7.0)


@given(st.floats(-10, 10), st.floats(0, 3))
def test_v_of_k_vectorized_matches_scalar(k, delta):
    s = v_of_k(k, delta)
    a = v_of_k_array(np.array([k]), delta)[0]
    if k * k - 4 * delta > 0:
        assert a == s
    else:
        assert math.isnan(a)


def test_gapless_limit_doubles_the_packet():
    g = Grid1D(-20.0, 20.0, 1024, 0.1)
    spec = PacketSpec(GAUSSIAN, 3.0, 0.1)
    params = TransitionParams(0.1, 0.0, 1.0, 1 / 3)
    res = formula_transmitted(spec.psi_hat, params, grid=g)
    pos = g.k > 0
    assert np.allclose(res.psi_minus_hat[pos], 2 * math.sin(math.pi / 6) * spec.psi_hat(g.k[pos]), atol=1e-14)


# Norms of the closed formula from adaptive quadrature of its modulus squared.
QUAD_NORMS = [
    (5.0, 0.1, 0.14166394781463618, 1e-12),
    (2.0, 0.1, 0.014002952680364918, 1e-12),
    (2.0, 0.2, 0.1157538386142702, 1e-7),
    (5.0, 0.02, 5.859227170933637e-05, 1e-12),
]


@pytest.mark.parametrize("p0, eps, expected, tol", QUAD_NORMS)
def test_formula_norms_match_quadrature(sweep_model, p0, eps, expected, tol):
    g = Grid1D(-40.0, 40.0, 8192, eps)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = formula_transmitted(PacketSpec(GAUSSIAN, p0, eps).psi_hat, TransitionParams.from_model(sweep_model, eps), grid=g)
    assert res.l2_norm == pytest.approx(expected, rel=tol)


def test_formula_norm_against_published_magnitudes(sweep_model):
    # The published norms are for the numerical solution; the formula may
    # differ from them by the published relative error (< 0.025, 0.03 and
    # "order 1e-3") plus the rounding of the quoted value.
    cases = [(5.0, 0.1, 0.138, 0.025, 5e-4), (2.0, 0.1, 0.014, 5e-3, 5e-4), (2.0, 0.2, 0.11, 0.03, 5e-3)]
    for p0, eps, quoted, rel, rounding in cases:
        g = Grid1D(-40.0, 40.0, 8192, eps)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            norm = formula_transmitted(PacketSpec(GAUSSIAN, p0, eps).psi_hat,
                                       TransitionParams.from_model(sweep_model, eps), grid=g).l2_norm
        assert abs(norm - quoted) <= rel * norm + rounding


def test_formula_support_and_grid_input(sweep_model):
    eps = 0.1
    g = Grid1D(-40.0, 40.0, 4096, eps)
    spec = PacketSpec(GAUSSIAN, 5.0, eps)
    params = TransitionParams.from_model(sweep_model, eps)
    res = formula_transmitted(spec.psi_hat, params, grid=g)
    assert np.all(res.psi_minus_hat[g.k**2 <= 4 * sweep_model.delta] == 0)
    # Same result from samples on the grid (band-limited interpolation).
    sampled = formula_transmitted(GridFunction(g, spec.psi_hat(g.k), {"space": "k"}), params)
    assert relative_l2_error(sampled.psi_minus_hat, res.psi_minus_hat, g.dk) <= 1e-10
    assert res.peak_k > math.sqrt(25 + 2)


def test_formula_time_phase(sweep_model):
    eps = 0.1
    g = Grid1D(-40.0, 40.0, 4096, eps)
    spec = PacketSpec(GAUSSIAN, 5.0, eps)
    a = formula_transmitted(spec.psi_hat, TransitionParams.from_model(sweep_model, eps), grid=g)
    b = formula_transmitted(spec.psi_hat, TransitionParams.from_model(sweep_model, eps, 0.7), grid=g)
    ph = np.exp(-1j * 0.7 / eps * (g.k**2 / 2 - 0.5))
    assert np.allclose(b.psi_minus_hat, a.psi_minus_hat * ph, atol=1e-14)


def test_edge_weight_warns(sweep_model):
    g = Grid1D(-40.0, 40.0, 4096, 0.2)
    with pytest.warns(UserWarning):
        res = formula_transmitted(PacketSpec(GAUSSIAN, 1.0, 0.2).psi_hat, TransitionParams.from_model(sweep_model, 0.2), grid=g)
    assert "accuracy_warning" in res.meta


def test_second_branch_is_negligible(sweep_model):
    eps = 0.1
    g = Grid1D(-40.0, 40.0, 4096, eps)
    total, second = formula_two_branch(PacketSpec(GAUSSIAN, 5.0, eps).psi_hat, TransitionParams.from_model(sweep_model, eps), grid=g)
    assert second.l2_norm <= 1e-8 * total.l2_norm


def test_optimal_representation_published_values(hist_model):
    opt = optimal_representation(2.5, 2.0, hist_model, 0.02923)
    assert opt.eta_star == pytest.approx(2.57, abs=0.01)
    assert opt.k_star == pytest.approx(2.64, abs=0.01)
    assert opt.n_star == pytest.approx(3.04, abs=0.01)


def test_optimal_representation_solves_the_system(hist_model):
    opt = optimal_representation(2.5, 2.0, hist_model, 0.02923)
    eta, k, d, qc = opt.eta_star, opt.k_star, hist_model.delta, hist_model.q_c
    assert k * k - eta * eta == pytest.approx(4 * d, abs=1e-12)
    assert eta == pytest.approx(k * (1 - (eta - 2.5) / (2.0 * qc)), abs=1e-10)
    assert opt.n_star == pytest.approx(2 * d * qc / (0.02923 * k), abs=1e-10)
    assert opt.iterations <= 50


def test_optimal_representation_gapless_limit():
    gapless = SimpleNamespace(delta=1e-14, q_c=1.25)
    opt = optimal_representation(2.5, 2.0, gapless, 0.02923)
    assert opt.eta_star == pytest.approx(2.5, abs=1e-10)
    assert opt.k_star == pytest.approx(opt.eta_star, abs=1e-10)
    assert opt.n_star < 1e-10


def test_landau_zener_values(sweep_model):
    assert lz_large_momentum(5.0, sweep_model, 1 / 50) == pytest.approx(math.exp(-10.0), rel=1e-14)
    assert math.exp(-10.0) == pytest.approx(4.54e-5, rel=1e-3)
    assert lz_probability(5.0, SimpleNamespace(delta=0.0, q_c=1.0), 0.02) == 1.0
    assert abs(lz_ratio(20.0, sweep_model, 1 / 50) - 1) <= 0.02
    ratios = [abs(lz_ratio(p, sweep_model, 1 / 50) - 1) for p in (5.0, 10.0, 20.0, 40.0)]
    assert ratios == sorted(ratios, reverse=True)


def test_error_function_model_shape(hist_model, hist_spec):
    A, _ = error_function_rate(hist_spec, hist_model, hist_spec.epsilon)
    eps = hist_spec.epsilon
    assert A > 0
    assert history_error_function_model(hist_spec, hist_model, eps, [0.0], 2.0)[0] == pytest.approx(1.0, abs=1e-15)
    t_left = -10 * math.sqrt(2 * eps / A)
    assert history_error_function_model(hist_spec, hist_model, eps, [t_left])[0] <= 1e-6
    assert history_error_function_model(hist_spec, hist_model, eps, [-t_left])[0] == pytest.approx(1.0, abs=1e-6)


def test_momentum_shift_without_coupling_range():
    spec = PacketSpec(GAUSSIAN, 5.0, 0.02)
    flat = SimpleNamespace(q_c=0.0, delta=0.5)
    assert momentum_shift_predictor(spec, flat) == pytest.approx(math.sqrt(27.0), abs=1e-8)


def test_momentum_shift_vanishes_for_stiff_packets(sweep_model):
    stiff = PacketSpec(GAUSSIAN, 5.0, 0.02, sigma2=1e-4)
    assert momentum_shift_predictor(stiff, sweep_model) == pytest.approx(math.sqrt(27.0), rel=1e-4)
    loose = PacketSpec(GAUSSIAN, 5.0, 0.02, sigma2=2.0)
    assert momentum_shift_predictor(loose, sweep_model) > momentum_shift_predictor(stiff, sweep_model)


def test_sextic_peak_matches_formula(sweep_model):
    eps = 1 / 50
    spec = PacketSpec(SEXTIC, 5.0, eps)
    g = Grid1D(-80.0, 80.0, 32768, eps)
    res = formula_transmitted(spec.psi_hat, TransitionParams.from_model(sweep_model, eps), grid=g)
    k_peak = momentum_shift_predictor(spec, sweep_model)
    assert k_peak > math.sqrt(27.0)
    assert abs(res.peak_k - k_peak) <= g.dk


def test_history_curve_requires_increasing_times():
    with pytest.raises(ValueError):
        HistoryCurve(1, [0.0, 0.0], [1.0, 1.0])


def test_history_curve_overshoot():
    c = HistoryCurve(1, np.arange(20.0), np.r_[np.zeros(5), 1.2, np.ones(14)])
    assert c.plateau == 1.0
    assert c.overshoot() == pytest.approx(0.2)


@pytest.fixture(scope="module")
def history_n3(hist_model, hist_spec):
    return history_perturbative(hist_spec, hist_model, 3)


def test_history_starts_empty_and_plateaus(history_n3):
    norms = history_n3.norms
    final = norms[-1]
    assert norms[0] <= 1e-3 * final
    tail = norms[int(0.9 * len(norms)):]
    assert (tail.max() - tail.min()) <= 5e-3 * final


def test_history_limit_matches_formula(hist_model, hist_spec):
    pert = history_final_amplitude(hist_spec, hist_model, 3)
    ref = formula_transmitted(hist_spec.psi_hat, TransitionParams.from_model(hist_model, hist_spec.epsilon, pert.meta["t"]), k=pert.k)
    assert relative_l2_error(pert.psi_minus_hat, ref.psi_minus_hat, pert.dk) <= 1e-3


def test_error_function_overlay(hist_model, hist_spec, history_n3):
    plateau = history_n3.plateau
    model = history_error_function_model(hist_spec, hist_model, hist_spec.epsilon, history_n3.times, plateau)
    assert np.max(np.abs(model - history_n3.norms)) <= 0.1 * plateau


def test_non_integer_order_is_allowed(hist_model, hist_spec):
    t, hg = history_setup(hist_spec, hist_model, 3)
    a = history_perturbative(hist_spec, hist_model, 3.04, t, hg)
    b = history_perturbative(hist_spec, hist_model, 3, t, hg)
    assert a.plateau == pytest.approx(b.plateau, rel=1e-2)


def test_history_grid_covers_the_packet(hist_model, hist_spec):
    hg = HistoryGrid.for_packet(hist_spec, hist_model)
    assert hg.eta[0] < 2.5 < hg.eta[-1]
    assert hg.k[-1] > math.sqrt(hg.eta[-1] ** 2 + 4 * hist_model.delta)
