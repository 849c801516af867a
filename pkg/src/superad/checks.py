"""Invariant suites run by ``superad verify``.

Each suite returns a list of ``{"check", "passed", "value", "tol"}`` records.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf

from .dynamics import (
    PacketSpec,
    ProjectionOperator,
    StrangPropagator,
    adiabatic_components,
    prepare_incoming,
    superadiabatic_components,
)
from .model import DiabaticModel, derived_params, potential_matrix, u0_matrix
from .spectral import (
    MOMENTUM_KERNEL,
    POSITION_SPACE,
    Grid1D,
    GridFunction,
    PolyPSymbol,
    derivative_values,
    moyal_term,
    weyl_apply,
)
from .superadiabatic import (
    NAMES,
    coefficient_tables,
    coupling_leading_poles,
    coupling_symbol,
    projection_defect,
    projection_symbol,
)
from .transition import (
    TransitionParams,
    formula_transmitted,
    formula_two_branch,
    history_final_amplitude,
    lz_large_momentum,
    lz_probability,
    lz_ratio,
    optimal_representation,
    relative_l2_error,
)

SWEEP_MODEL = (-math.pi / 3, math.pi / 2, 0.5)
HISTORY_MODEL = (-math.pi / 3, 2 * math.pi / 5, 3 / 32)
HISTORY_PACKET = (2.5, 0.02923, 2.0)


def _item(name, value, tol, passed=None):
    value = float(value)
    ok = value <= tol if passed is None else bool(passed)
    return {"check": name, "passed": ok, "value": value, "tol": tol}


def _fit_slope(eps, res):
    return float(np.polyfit(np.log(eps), np.log(res), 1)[0])


def _periodic_derivative(grid, f):
    """Spectral derivative of a function with different limits at the two ends.

    A smooth error-function step joining the end values is removed first and
    its exact derivative added back.
    """
    width = grid.length / 10
    x = grid.x
    jump = f[-1] - f[0]
    step = f[0] + jump * 0.5 * (1 + erf(x / width))
    dstep = jump * np.exp(-((x / width) ** 2)) / (width * math.sqrt(math.pi))
    return derivative_values(grid, f - step, 1) + dstep


def model_suite():
    m = DiabaticModel.sech(*SWEEP_MODEL)
    g = Grid1D(-20.0, 20.0, 1024, 0.1)
    q = g.x
    u, v = u0_matrix(m, q), potential_matrix(m, q)
    d = np.einsum("ijn,jkn,kln->iln", u, v, u)
    rho = m.rho(q)
    diag_err = max(np.max(np.abs(d[0, 1])), np.max(np.abs(d[1, 0])),
                   np.max(np.abs(d[0, 0] - rho)), np.max(np.abs(d[1, 1] + rho)))
    th, tp = m.theta(q), m.theta_prime(q)
    sx = np.array([[np.sin(th), -np.cos(th)], [-np.cos(th), -np.sin(th)]])
    sz = np.array([[np.cos(th), np.sin(th)], [np.sin(th), -np.cos(th)]])
    inner = slice(g.n_points // 10, g.n_points - g.n_points // 10)
    dsx = np.array([[_periodic_derivative(g, sx[i, j]) for j in range(2)] for i in range(2)])
    dsz = np.array([[_periodic_derivative(g, sz[i, j]) for j in range(2)] for i in range(2)])
    pauli_err = max(np.max(np.abs((dsx - tp * sz)[..., inner])), np.max(np.abs((dsz + tp * sx)[..., inner])))
    q1, g1, _ = derived_params(*SWEEP_MODEL)
    q2, g2, _ = derived_params(*HISTORY_MODEL)
    param_err = max(abs(q1 - 1), abs(g1 - 1 / 3) * 3, abs(q2 - 1.25) / 1.25, abs(g2 - 5 / 12) * 12 / 5)
    return [
        _item("u0 diagonalizes V", diag_err, 1e-12),
        _item("adiabatic Pauli derivatives", pauli_err, 1e-8),
        _item("derived parameters exact", param_err, 1e-15),
    ]


def _bump(grid, rng):
    c = rng.uniform(-2, 2)
    w = rng.uniform(0.5, 1.5)
    return np.exp(-((grid.x - c) ** 2) / (2 * w * w)) * (1 + 0.3 * rng.standard_normal())


def _packet(grid, rng):
    x0, p0 = rng.uniform(-1, 1), rng.uniform(-1, 1)
    eps = grid.epsilon
    return np.exp(-((grid.x - x0) ** 2) / (2 * 0.5) + 1j * p0 * grid.x / eps)


def spectral_suite(seed=7):
    rng = np.random.default_rng(seed)
    g = Grid1D(-16.0, 16.0, 1024, 0.1)
    worst = 0.0
    for m in range(7):
        sym = PolyPSymbol(g, {m: _bump(g, rng)})
        psi = GridFunction(g, _packet(g, rng))
        a = weyl_apply(sym, psi, POSITION_SPACE).values
        b = weyl_apply(sym, psi, MOMENTUM_KERNEL).values
        worst = max(worst, float(np.linalg.norm(a - b) / np.linalg.norm(a)))
    f = _packet(g, rng) * (1 + 0.5j * rng.standard_normal())
    planch = abs(g.norm(f) - g.norm(g.forward(f), "k")) / g.norm(f)
    items = [_item("Weyl forms agree for m <= 6", worst, 1e-8), _item("Plancherel", planch, 1e-12)]
    items += _moyal_items()
    return items


def _moyal_residual(eps, power):
    """Composition defect of the Moyal series truncated after the eps^2 term."""
    g = Grid1D(-16.0, 16.0, 2048, eps)
    x = g.x
    A = PolyPSymbol(g, {power: np.exp(-(x**2) / 2)})
    B = PolyPSymbol(g, {power: 1 / np.cosh(x)})
    comp = moyal_term(A, B, 0)
    for j in (1, 2):
        comp = comp + moyal_term(A, B, j).scale(eps**j)
    psi = GridFunction(g, np.exp(-((x - 0.3) ** 2) / 2 + 1j * 0.7 * x / eps))
    lhs = weyl_apply(A, weyl_apply(B, psi))
    rhs = weyl_apply(comp, psi)
    return g.norm(lhs.values - rhs.values) / g.norm(lhs.values)


def _moyal_items():
    eps = [1 / 10, 1 / 20, 1 / 40]
    linear = max(_moyal_residual(e, 1) for e in eps)
    quad = [_moyal_residual(e, 2) for e in eps]
    slope = _fit_slope(eps, quad)
    return [
        # For symbols linear in p the series stops at eps^2: the truncation is exact.
        _item("Moyal composition exact for p*g # p*h", linear, 1e-10),
        # Genuine eps^3 remainder; the eps^4 correction pulls a three-point fit a little below 3.
        _item("Moyal truncation order for p^2*g # p^2*h", slope, 2.9, passed=slope >= 2.9),
    ]


def zero_structure_suite(mutation=False, n_max=8):
    m = DiabaticModel.sech(*SWEEP_MODEL)
    tab = coefficient_tables(m, n_max, _mutation="offpattern" if mutation else None)
    q = np.linspace(-20, 20, 801)
    rec = mzero = real_err = 0.0
    for (name, n, k) in tab.entries():
        if n == 0:
            continue
        v = tab.sample(name, n, k, q)
        sup = float(np.max(np.abs(v)))
        if (name == "y") == (n % 2 == 0):
            rec = max(rec, sup)
        allowed = k % 4 == (2 if name == "w" else 0)
        if not allowed:
            mzero = max(mzero, sup)
        part = v.real if name == "y" else v.imag
        real_err = max(real_err, float(np.max(np.abs(part))))
    return [
        _item("parity zeros", rec, 1e-13),
        _item("mod-4 zeros", mzero, 1e-13),
        _item("reality split", real_err, 1e-12),
    ]


def superadiabatic_suite():
    m = DiabaticModel.sech(*SWEEP_MODEL)
    g = Grid1D(-24.0, 24.0, 256, 0.1)
    tab = coefficient_tables(m, 8, grid=g)
    k1 = coupling_symbol(tab, 1)
    target = 1j * m.theta_prime(g.x) / 2
    k1_err = max(np.max(np.abs(k1.kappa_plus.values(1) - target)), np.max(np.abs(k1.kappa_minus.values(1) - target)))
    items = [_item("kappa_1 is the adiabatic coupling", k1_err, 1e-13)]
    eps = [1 / 10, 1 / 20, 1 / 40]
    worst_margin = math.inf
    for n in range(6):
        rep = projection_defect(m, projection_symbol(tab, n, grid=g), eps, table=tab)
        worst_margin = min(worst_margin, rep.projection_exponent - (n + 0.8), rep.commutator_exponent - (n + 0.8))
        if n == 0:
            items.append(_item("commutator anchor at n=0", rep.anchor_error, 1e-10))
    items.append(_item("defect exponents >= n + 0.8 (margin)", worst_margin, 0.0, passed=worst_margin >= 0))
    edge = 0.0
    for (name, n, k) in tab.entries():
        v = tab.sample(name, n, k, np.array([g.x_min, g.x_max]))
        if n > 0:
            edge = max(edge, float(np.max(np.abs(v))))
    items.append(_item("coefficients decay at the boundary", edge, 1e-10))
    devs = []
    for n in range(4, 9):
        top = coupling_symbol(tab, n).kappa_plus.values(n)
        lead = coupling_leading_poles(m, n, g).values(n)
        devs.append(float(np.max(np.abs(top - lead)) / np.max(np.abs(top))))
    mono = all(b < a for a, b in zip(devs, devs[1:]))
    items.append(_item("leading-pole deviation decreases for n=4..8", devs[-1], devs[0], passed=mono))
    return items


def dynamics_suite():
    m = DiabaticModel.sech(*SWEEP_MODEL)
    eps = 0.1
    spec = PacketSpec("gaussian", 3.0, eps)
    g = Grid1D(-20.0, 20.0, 2048, eps)
    t0 = -2.0
    st = prepare_incoming(spec, m, g, t0)
    n0 = st.norm()
    base = 0.01
    steps = int(round(4.0 / base))
    out = {}
    for f in (1, 2, 8):
        prop = StrangPropagator(m, g, base / f)
        out[f] = prop.evolve(st, steps * f)
    drift = abs(out[8].norm() - n0)

    def err(a, b):
        return math.hypot(g.norm(a.up - b.up), g.norm(a.down - b.down))

    ratio = err(out[1], out[8]) / err(out[2], out[8])
    plus, minus = adiabatic_components(out[1], m)
    proj = projection_symbol(coefficient_tables(m, 1, grid=g), 0, grid=g)
    split = superadiabatic_components(out[1], proj, eps)
    u = u0_matrix(m, g.x)
    ref_up, ref_down = u[0, 0] * plus, u[1, 0] * plus
    n0_err = max(np.max(np.abs(split.upper.up - ref_up)), np.max(np.abs(split.upper.down - ref_down)))
    return [
        _item("unitarity drift", drift, 1e-10),
        _item("Strang Richardson ratio", ratio, 4.4, passed=3.6 <= ratio <= 4.4),
        _item("n=0 projection equals U0 splitting", n0_err, 1e-12),
    ]


def transition_suite():
    m = DiabaticModel.sech(*SWEEP_MODEL)
    eps = 0.1
    g = Grid1D(-40.0, 40.0, 4096, eps)
    spec = PacketSpec("gaussian", 5.0, eps)
    params = TransitionParams.from_model(m, eps)
    res = formula_transmitted(spec.psi_hat, params, grid=g)
    outside = float(np.max(np.abs(res.psi_minus_hat[g.k**2 <= 4 * m.delta])))
    total, second = formula_two_branch(spec.psi_hat, params, grid=g)
    branch = second.l2_norm / total.l2_norm
    lz = abs(lz_large_momentum(5.0, m, 1 / 50) - math.exp(-10.0))
    ratio = abs(lz_ratio(20.0, m, 1 / 50) - 1)
    hm = DiabaticModel.sech(*HISTORY_MODEL)
    p0, heps, s2 = HISTORY_PACKET
    opt = optimal_representation(p0, s2, hm, heps)
    eta, k, n = opt.eta_star, opt.k_star, opt.n_star
    resid = max(abs(k * k - eta * eta - 4 * hm.delta),
                abs(eta - k * (1 - (eta - p0) / (s2 * hm.q_c))),
                abs(n - 2 * hm.delta * hm.q_c / (heps * k)))
    hspec = PacketSpec("gaussian", p0, heps, s2)
    pert = history_final_amplitude(hspec, hm, 3)
    ref = formula_transmitted(hspec.psi_hat, TransitionParams.from_model(hm, heps, pert.meta["t"]), k=pert.k)
    chain = relative_l2_error(pert.psi_minus_hat, ref.psi_minus_hat, pert.dk)
    return [
        _item("formula vanishes for k^2 <= 4 delta", outside, 0.0, passed=outside == 0.0),
        _item("second branch negligible", branch, 1e-8),
        _item("large-momentum Landau-Zener value", lz, 1e-15),
        _item("Landau-Zener ratio at p0=20", ratio, 0.02),
        _item("optimal representation residual", resid, 1e-10),
        _item("perturbative history meets formula (n=3)", chain, 1e-3),
    ]


SUITES = {
    "model": model_suite,
    "spectral": spectral_suite,
    "zero_structure": zero_structure_suite,
    "superadiabatic": superadiabatic_suite,
    "dynamics": dynamics_suite,
    "transition": transition_suite,
}
