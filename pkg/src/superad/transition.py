"""Closed-form and perturbative predictions for the transmitted packet.

All formulas assume constant adiabatic levels +-delta and the sech-type
coupling with nearest pole pair at +-i q_c and residue coefficient gamma.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.optimize import minimize_scalar
from scipy.special import erf

from .dynamics import PacketSpec
from .model import universal_prefactor
from .spectral import Grid1D, GridFunction, band_limited_interpolate

CLOSED_FORMULA = "closed_formula"
PERTURBATIVE = "perturbative"
NUMERIC = "numeric"


MISSED_MASS_TOL = 1e-3


class SolverFailure(RuntimeError):
    pass


class HistoryAccuracyError(ValueError):
    pass


class SearchError(ValueError):
    pass


@dataclass(frozen=True)
class TransitionParams:
    epsilon: float
    delta: float
    q_c: float
    gamma: float
    t_report: float = 0.0

    @classmethod
    def from_model(cls, model, epsilon, t_report=0.0):
        return cls(epsilon, model.delta, model.q_c, model.gamma, t_report)


@dataclass
class TransitionResult:
    """Transmitted lower-band packet on a momentum grid (FFT order for Grid1D)."""

    k: np.ndarray
    psi_minus_hat: np.ndarray
    method: str
    grid: Optional[Grid1D] = None
    meta: dict = field(default_factory=dict)

    @property
    def dk(self):
        return self.grid.dk if self.grid is not None else float(self.k[1] - self.k[0])

    @property
    def l2_norm(self):
        return float(np.sqrt(self.dk * np.sum(np.abs(self.psi_minus_hat) ** 2)))

    @property
    def peak_k(self):
        return float(self.k[np.argmax(np.abs(self.psi_minus_hat))])

    def as_grid_function(self):
        return GridFunction(self.grid, self.psi_minus_hat, dict(self.meta))


def relative_l2_error(approx, reference, dk):
    num = np.sqrt(dk * np.sum(np.abs(approx - reference) ** 2))
    den = np.sqrt(dk * np.sum(np.abs(reference) ** 2))
    return float(num / den)


def v_of_k(k, delta):
    """Incoming momentum sgn(k) sqrt(k^2 - 4 delta), or None outside the support."""
    disc = k * k - 4 * delta
    if disc <= 0 and not (delta == 0 and k != 0):
        return None
    return math.copysign(math.sqrt(max(disc, 0.0)), k)


def v_of_k_array(k, delta):
    """Vectorized v(k); NaN where k^2 <= 4 delta."""
    k = np.asarray(k, float)
    disc = k * k - 4 * delta
    out = np.full(k.shape, np.nan)
    ok = disc > 0
    out[ok] = np.sign(k[ok]) * np.sqrt(disc[ok])
    return out


PsiSource = Union[GridFunction, Callable]


def _incoming_evaluator(psi_plus_hat, rel_tol=1e-17):
    """Callable evaluating psi_hat_(+,0) at arbitrary momenta."""
    if callable(psi_plus_hat) and not isinstance(psi_plus_hat, GridFunction):
        return psi_plus_hat, None
    grid = psi_plus_hat.grid
    f_hat = psi_plus_hat.values
    f = grid.inverse(f_hat)
    # Only grid points where the packet lives contribute to the trigonometric sum.
    keep = np.abs(f) > rel_tol * np.max(np.abs(f))
    sub_x = grid.x[keep]
    sub_f = f[keep]
    c = grid.dx / math.sqrt(2 * math.pi * grid.epsilon)
    eps = grid.epsilon

    def evaluate(kappa):
        kappa = np.asarray(kappa, float)
        out = np.empty(kappa.shape, complex)
        flat, res = kappa.ravel(), out.ravel()
        chunk = max(1, 2**22 // max(len(sub_x), 1))
        for i in range(0, len(flat), chunk):
            kk = flat[i : i + chunk, None]
            res[i : i + chunk] = c * (np.exp(-1j * kk * sub_x[None, :] / eps) @ sub_f)
        return out

    return evaluate, grid


def formula_transmitted(psi_plus_hat_at_crossing, params, k=None, indicator=True, grid=None):
    """Closed-form transmitted packet

        psi_hat_-(k, t) = sgn(k) sin(pi g/2) exp(-(i/eps) t (k^2/2 - delta))
                          exp(-(q_c/eps)|k - v(k)|) (1 + k/v(k)) psi_hat_(+,0)(v(k))

    The incoming packet is either a GridFunction in momentum space (evaluated
    off-grid by band-limited interpolation) or a callable.  ``indicator=False``
    extends the formula to k^2 <= 4 delta by using |k^2 - 4 delta|.
    """
    evaluate, src_grid = _incoming_evaluator(psi_plus_hat_at_crossing)
    grid = grid or src_grid
    if k is None:
        if grid is None:
            raise ValueError("need a momentum grid when the packet is given as a callable")
        k = grid.k
    k = np.asarray(k, float)
    eps, delta, q_c = params.epsilon, params.delta, params.q_c
    if indicator:
        v = v_of_k_array(k, delta)
    else:
        v = np.sign(k) * np.sqrt(np.abs(k * k - 4 * delta))
    ok = np.isfinite(v) & (v != 0)
    out = np.zeros(k.shape, complex)
    kk, vv = k[ok], v[ok]
    # skip momenta whose preimage carries no weight before interpolating
    amp = np.exp(-(q_c / eps) * np.abs(kk - vv))
    vals = np.zeros(kk.shape, complex)
    mask = amp > 1e-300
    vals[mask] = evaluate(vv[mask])
    phase = np.exp(-1j / eps * params.t_report * (kk**2 / 2 - delta))
    pref = math.sin(math.pi * params.gamma / 2)
    out[ok] = np.sign(kk) * pref * phase * amp * (1 + kk / vv) * vals
    meta = {"indicator": indicator}
    _edge_check(k, out, evaluate, delta, meta)
    return TransitionResult(k, out, CLOSED_FORMULA, grid, meta)


def _edge_check(k, out, evaluate, delta, meta):
    """Warn when the incoming packet reaches momenta near the support edge."""
    edge = 2 * math.sqrt(delta)
    probe = np.linspace(-edge, edge, 41)
    inc = np.abs(evaluate(probe))
    meta["edge_weight"] = float(np.max(inc)) if len(inc) else 0.0
    if meta["edge_weight"] > 1e-8:
        meta["accuracy_warning"] = "incoming packet has weight near |k| = 2 sqrt(delta)"
        warnings.warn(meta["accuracy_warning"], stacklevel=3)


def formula_two_branch(psi_plus_hat_at_crossing, params, k=None, grid=None):
    """Both branches of the stationary-phase form (evaluation at +v and -v).

    Returns (total, second_branch) as TransitionResults; for a right-moving
    packet the second branch is negligible.
    """
    evaluate, src_grid = _incoming_evaluator(psi_plus_hat_at_crossing)
    grid = grid or src_grid
    k = grid.k if k is None else np.asarray(k, float)
    eps, delta, q_c = params.epsilon, params.delta, params.q_c
    disc = k * k - 4 * delta
    ok = disc > 0
    kk = k[ok]
    r = np.sqrt(disc[ok])
    pref = math.pi * params.gamma * universal_prefactor(params.gamma) / 2
    phase = np.exp(-1j / eps * params.t_report * (kk**2 / 2 - delta))
    first = np.zeros(k.shape, complex)
    second = np.zeros(k.shape, complex)
    first[ok] = pref * phase * (1 + kk / r) * np.exp(-(q_c / eps) * np.abs(kk - r)) * evaluate(r)
    second[ok] = pref * phase * (kk / r - 1) * np.exp(-(q_c / eps) * np.abs(kk + r)) * evaluate(-r)
    return (
        TransitionResult(k, first + second, CLOSED_FORMULA, grid, {"branches": 2}),
        TransitionResult(k, second, CLOSED_FORMULA, grid, {"branch": "second"}),
    )


@dataclass
class HistoryCurve:
    n: float
    times: np.ndarray
    norms: np.ndarray
    model_prediction: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, float)
        self.norms = np.asarray(self.norms, float)
        if np.any(np.diff(self.times) <= 0):
            raise ValueError("history times must be strictly increasing")

    @property
    def samples(self):
        return list(zip(self.times.tolist(), self.norms.tolist()))

    @property
    def plateau(self):
        tail = max(1, len(self.norms) // 10)
        return float(np.mean(self.norms[-tail:]))

    def overshoot(self):
        """Largest excess of the curve over its final plateau, relative to the plateau."""
        return float(np.max(self.norms) / self.plateau - 1.0)


@dataclass
class HistoryGrid:
    k: np.ndarray
    eta: np.ndarray

    @classmethod
    def for_packet(cls, spec, model, dk=None, span=8.0):
        eps = spec.epsilon
        w = spec.momentum_width()
        lo, hi = spec.p0 - span * w, spec.p0 + span * w
        lo = max(lo, 1e-6)
        dk = dk or min(eps / (10 * model.q_c), w / 10)
        eta = np.arange(lo, hi + dk, dk)
        k_hi = math.sqrt(hi**2 + 4 * model.delta) + 4 * eps / model.q_c
        k_lo = max(lo - 4 * eps / model.q_c, 0.0)
        k = np.arange(k_lo, k_hi + dk, dk)
        return cls(k, eta)


def default_history_times(spec, model, ds=None, extent=None):
    """Symmetric sample times for the perturbative history.

    The window spans 12 crossing times q_c/p0 on each side.  The kernel
    confines |k - eta| to about 10 eps/q_c, which bounds the oscillation
    frequency of the s-integrand; the step resolves it and the packet's
    stationary-phase width sqrt(eps) with at least 20 points each.
    """
    eps = spec.epsilon
    extent = extent or 12 * model.q_c / spec.p0
    k_hi = math.sqrt((spec.p0 + 8 * spec.momentum_width()) ** 2 + 4 * model.delta)
    omega = (2 * k_hi * 10 * eps / model.q_c + 4 * model.delta) / (2 * eps)
    ds = ds or min(math.sqrt(eps) / 20, 2 * math.pi / (20 * omega))
    n = int(math.ceil(2 * extent / ds)) + 1
    return np.linspace(-extent, extent, n)


def history_setup(spec, model, n):
    """Default (t_grid, hgrid) for the n-th history.

    For n = 0 the kink of the kernel at eta = k is not softened by the
    (k^2 - eta^2)^n factor and the integrand decays slowly in s; this needs
    a longer window and a finer momentum grid (the grid spacing sets the
    time of spurious rephasing of the discretized eta-sum).
    """
    if n < 0.5:
        extent = 24 * model.q_c / spec.p0 * 4
        hgrid = HistoryGrid.for_packet(spec, model, dk=spec.epsilon / (40 * model.q_c))
    else:
        extent = 12 * model.q_c / spec.p0
        hgrid = HistoryGrid.for_packet(spec, model)
    return default_history_times(spec, model, extent=extent), hgrid


def history_perturbative(spec, model, n, t_grid=None, hgrid=None, chunk=2048, return_amplitudes=False):
    """First-order perturbative transition history in the n-th representation.

    psi_hat_(-,n)(k,t) = (g alpha_lim/(4 eps)) exp(-(i/eps) t (k^2/2 - delta))
        int_{t_min}^t ds int d eta (eta + k) ((k^2 - eta^2)/(4 delta))^n
        exp(-(q_c/eps)|k - eta|) exp((i s/(2 eps))(k^2 - eta^2 - 4 delta)) psi_hat_(+,0)(eta)

    The s-dependence factorizes, so the eta-sum is a single matrix product
    for all sample times.  Real n uses the principal power on k^2 > eta^2
    and zero elsewhere.
    """
    if n < 0:
        raise ValueError("n must be nonnegative")
    eps, delta, q_c = spec.epsilon, model.delta, model.q_c
    default_t, default_h = history_setup(spec, model, n)
    t_grid = default_t if t_grid is None else np.asarray(t_grid, float)
    hgrid = hgrid or default_h
    k, eta = hgrid.k, hgrid.eta
    deta = float(eta[1] - eta[0])
    dk = float(k[1] - k[0])
    psi0 = spec.psi_hat(eta)
    diff = k[:, None] ** 2 - eta[None, :] ** 2
    if float(n).is_integer():
        power = (diff / (4 * delta)) ** int(n)
    else:
        power = np.where(diff > 0, np.abs(diff / (4 * delta)) ** n, 0.0)
    kern = (eta[None, :] + k[:, None]) * power * np.exp(-(q_c / eps) * np.abs(k[:, None] - eta[None, :]))
    kern = kern * (deta * psi0)[None, :]
    # integrand(k, s) = exp(i s (k^2 - 4 delta)/(2 eps)) * sum_eta kern exp(-i s eta^2/(2 eps))
    norms = np.zeros(len(t_grid))
    amp = np.zeros((len(k), len(t_grid)), complex) if return_amplitudes else None
    acc = np.zeros(len(k), complex)
    prev = None
    pref = model.gamma * universal_prefactor(model.gamma) / (4 * eps)
    start_level = None
    peak_level = 0.0
    for c0 in range(0, len(t_grid), chunk):
        s = t_grid[c0 : c0 + chunk]
        E = np.exp(-1j * s[None, :] * eta[:, None] ** 2 / (2 * eps))
        integ = (kern @ E) * np.exp(1j * s[None, :] * (k[:, None] ** 2 - 4 * delta) / (2 * eps))
        level = np.sqrt(dk * np.sum(np.abs(integ) ** 2, axis=0))
        if start_level is None:
            start_level = float(level[0])
        peak_level = max(peak_level, float(np.max(level)))
        for i in range(integ.shape[1]):
            cur = integ[:, i]
            if prev is not None:
                ds = s[i] - (t_grid[c0 + i - 1])
                acc = acc + 0.5 * ds * (prev + cur)
            prev = cur
            norms[c0 + i] = abs(pref) * math.sqrt(dk * float(np.sum(np.abs(acc) ** 2)))
            if amp is not None:
                amp[:, c0 + i] = acc
    # The leading-pole kernel decays algebraically in s while oscillating at
    # about 2 delta/eps, so the mass lost before t_min is |integrand|/frequency.
    missed = abs(pref) * start_level * eps / (2 * delta)
    if missed > MISSED_MASS_TOL * norms[-1]:
        raise HistoryAccuracyError(
            f"integrand at t_min={t_grid[0]:.3g} still carries {missed / norms[-1]:.2e} "
            "of the final norm; start earlier"
        )
    curve = HistoryCurve(n, t_grid, norms, meta={"method": PERTURBATIVE, "k": k, "eta": eta})
    if return_amplitudes:
        phase = np.exp(-1j / eps * t_grid[None, :] * (k[:, None] ** 2 / 2 - delta))
        curve.meta["amplitudes"] = pref * phase * amp
    return curve


def history_final_amplitude(spec, model, n, t_grid=None, hgrid=None):
    """psi_hat_(-,n)(k, t_end) on the history momentum grid, as a TransitionResult."""
    t_grid = default_history_times(spec, model) if t_grid is None else t_grid
    hgrid = hgrid or HistoryGrid.for_packet(spec, model)
    curve = history_perturbative(spec, model, n, [t_grid[0], *t_grid[1:]], hgrid, return_amplitudes=True)
    vals = curve.meta["amplitudes"][:, -1]
    return TransitionResult(hgrid.k, vals, f"{PERTURBATIVE}({n})", None, {"t": float(t_grid[-1])})


@dataclass(frozen=True)
class OptimalRepresentation:
    eta_star: float
    k_star: float
    n_star: float
    iterations: int
    hessian: tuple


def optimal_representation(p0, sigma2, model, epsilon, tol=1e-12, max_iter=50):
    """Stationary pair (eta*, k*) of the transition exponent and n* = 2 delta q_c/(eps k*).

    Newton iteration on eta for eta = k (1 - (eta - p0)/(sigma2 q_c)) with
    k = sqrt(eta^2 + 4 delta).
    """
    delta, q_c = model.delta, model.q_c
    c = sigma2 * q_c
    eta = float(p0)
    for it in range(1, max_iter + 1):
        k = math.sqrt(eta * eta + 4 * delta)
        g = eta - k * (1 - (eta - p0) / c)
        dg = 1 - (eta / k) * (1 - (eta - p0) / c) + k / c
        if dg == 0 or not math.isfinite(dg):
            raise SolverFailure(f"degenerate Newton derivative at eta={eta}")
        step = g / dg
        eta -= step
        if not math.isfinite(eta):
            raise SolverFailure("Newton iteration diverged")
        if abs(step) <= tol * max(1.0, abs(eta)):
            break
    else:
        raise SolverFailure(f"Newton iteration did not converge in {max_iter} steps (last step {step:.3e})")
    k = math.sqrt(eta * eta + 4 * delta)
    n_star = 2 * delta * q_c / (epsilon * k)
    hess = _exponent_hessian(eta, k, n_star, epsilon, delta, sigma2)
    det = hess[0][0] * hess[1][1] - hess[0][1] ** 2
    if delta > 0 and not (hess[0][0] > 0 and det > 0):
        raise SolverFailure(f"stationary point is not a minimum: hessian={hess}")
    return OptimalRepresentation(eta, k, n_star, it, hess)


def _exponent_hessian(eta, k, n, eps, delta, sigma2):
    """Hessian of M(k, eta) in (k, eta) at a point with k^2 - eta^2 = 4 delta."""
    if delta == 0:
        return ((0.0, 0.0), (0.0, 1 / sigma2))
    d2 = (k * k - eta * eta) ** 2
    m_kk = 2 * n * eps * (k * k + eta * eta) / d2
    m_ke = -4 * n * eps * k * eta / d2
    m_ee = 2 * n * eps * (k * k + eta * eta) / d2 + 1 / sigma2
    return ((m_kk, m_ke), (m_ke, m_ee))


def error_function_rate(spec, model, epsilon):
    """A = eta*^2 / M_eta_eta at the optimal representation (real since s* = 0)."""
    opt = optimal_representation(spec.p0, spec.sigma2, model, epsilon)
    m_ee = opt.hessian[1][1]
    return opt.eta_star**2 / m_ee, opt


def history_error_function_model(spec, model, epsilon, times, plateau=1.0):
    """Error-function history plateau (1 + erf(t sqrt(A/(2 eps))))/2."""
    A, _ = error_function_rate(spec, model, epsilon)
    times = np.asarray(times, float)
    return plateau * 0.5 * (1 + erf(times * np.sqrt(A / (2 * epsilon))))


def lz_probability(p0, model, epsilon):
    """exp(-(q_c/eps)(sqrt(p0^2 + 4 delta) - p0))."""
    return math.exp(-(model.q_c / epsilon) * (math.sqrt(p0 * p0 + 4 * model.delta) - p0))


def lz_large_momentum(p0, model, epsilon):
    """Large-p0 simplification exp(-tau_c/(p0 eps))."""
    return math.exp(-model.tau_c / (p0 * epsilon))


def lz_ratio(p0, model, epsilon):
    return lz_probability(p0, model, epsilon) / lz_large_momentum(p0, model, epsilon)


def momentum_shift_predictor(spec, model, epsilon=None, bracket_width=None, samples=801):
    """Peak momentum of the transmitted packet from the exponent alone.

    Minimizes q_c (sqrt(v^2 + 4 delta) - v) + M(v) over v by golden-section
    search and returns sqrt(v*^2 + 4 delta).
    """
    q_c, delta = model.q_c, model.delta
    width = bracket_width or max(3.0, 10 * spec.momentum_width())
    lo, hi = max(spec.p0 - width, 1e-9), spec.p0 + width

    def objective(v):
        return q_c * (math.sqrt(v * v + 4 * delta) - v) + float(spec.log_modulus(v))

    vs = np.linspace(lo, hi, samples)
    vals = np.array([objective(v) for v in vs])
    interior = (vals[1:-1] < vals[:-2]) & (vals[1:-1] <= vals[2:])
    if int(np.sum(interior)) != 1:
        raise SearchError("exponent is not unimodal on the search interval")
    i = int(np.argmax(interior)) + 1
    res = minimize_scalar(objective, bracket=(vs[i - 1], vs[i], vs[i + 1]), method="golden", tol=1e-10)
    v_star = float(res.x)
    k_peak = math.sqrt(v_star**2 + 4 * delta)
    # M is minimal at the packet centre for both supported shapes.
    k_energy = math.sqrt(spec.p0**2 + 4 * delta)
    if q_c > 0 and delta > 0 and not k_peak > k_energy:
        raise SearchError("predicted peak is not shifted above the energy-conservation value")
    return k_peak
