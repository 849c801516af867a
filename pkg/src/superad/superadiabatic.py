"""Superadiabatic projection symbols and coupling functions.

The projection of order n is pi^(n) = sum_j eps^j pi_j with

    pi_j = x_j sigma_x(q) + i y_j sigma_y(q) + z_j sigma_z(q) + w_j 1,

and each coefficient is a polynomial in p, x_n(p, q) = sum_m p^(n-m) x_n^m(q).
The per-power recursion determines all x_n^m ... w_n^m from theta', rho and
the derivative tables a_n, b_n of V.

Two backends evaluate the recursion.  ``"exact"`` works symbolically in the
(sech, tanh) algebra and is available for the sech family; ``"grid"`` uses
spectral differentiation and decaying antiderivatives on a periodic grid and
accepts any smooth rho.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import CapabilityError, SechPoly, exp_i_theta_stack
from .spectral import (
    Grid1D,
    PolyPSymbol,
    antiderivative_values,
    derivative_values,
    moyal_term,
)

AB_N_MAX = 16
COEFF_N_MAX = 12
NAMES = ("x", "y", "z", "w")
ROUNDOFF_FLOOR = 1e-12


class RecursionAccuracyError(ValueError):
    pass


class DefectFitError(ValueError):
    pass


class UnsupportedModelError(ValueError):
    pass


class _ExactBackend:
    name = "exact"

    def __init__(self, model):
        if model.kind != "sech":
            raise UnsupportedModelError("exact backend needs the sech family")
        self.alpha = model.alpha
        self.rho = SechPoly.constant(model.alpha, model.delta)
        self.inv_two_rho = 1.0 / (2.0 * model.delta)
        self.theta_prime = model.theta_prime_poly()

    def zero(self):
        return SechPoly(self.alpha)

    def const(self, v):
        return SechPoly.constant(self.alpha, v)

    def d(self, f):
        return f.derivative()

    def integrate(self, f, label):
        try:
            return f.antiderivative(tol=1e-10)
        except ValueError as exc:
            raise RecursionAccuracyError(f"{label}: {exc}") from exc

    def over_two_rho(self, f):
        return f * self.inv_two_rho

    def is_zero(self, f):
        return f.is_zero()


class _GridBackend:
    name = "grid"

    def __init__(self, model, grid, cutoff=None):
        self.grid = grid
        self.cutoff = cutoff
        x = grid.x
        self.rho = model.rho(x).astype(complex)
        self.inv_two_rho = 1.0 / (2.0 * self.rho)
        self.theta_prime = model.theta_prime(x).astype(complex)
        self.n = grid.n_points

    def zero(self):
        return np.zeros(self.n, complex)

    def const(self, v):
        return np.full(self.n, v, complex)

    def d(self, f):
        if not np.any(f):
            return np.zeros_like(f)
        return derivative_values(self.grid, f, 1, self.cutoff)

    def integrate(self, f, label):
        if not np.any(f):
            return np.zeros_like(f)
        scale = float(np.max(np.abs(f)))
        edge = max(float(np.max(np.abs(f[:4]))), float(np.max(np.abs(f[-4:]))))
        if edge > 1e-12 * max(scale, 1e-300) and edge > 1e-300:
            raise RecursionAccuracyError(f"{label}: integrand does not decay at the boundary")
        out, total = antiderivative_values(self.grid, f, check=False)
        if abs(total) > 1e-9 * max(float(np.max(np.abs(out))), 1e-300):
            raise RecursionAccuracyError(f"{label}: antiderivative does not vanish at +infinity")
        return out

    def over_two_rho(self, f):
        return f * self.inv_two_rho

    def is_zero(self, f):
        return not np.any(f)


def _backend(model, backend, grid, cutoff):
    if backend == "exact":
        return _ExactBackend(model)
    if backend == "grid":
        if grid is None:
            raise ValueError("grid backend needs a grid")
        return _GridBackend(model, grid, cutoff)
    raise ValueError(f"unknown backend {backend!r}")


@dataclass
class ABTable:
    """Derivatives of V in the adiabatic Pauli basis: d^n V = a_n sigma_z + b_n sigma_x."""

    n_max: int
    a: list
    b: list
    backend: str = "exact"


def _ab(be, n_max):
    a = [be.rho if be.name == "exact" else be.rho.copy()]
    b = [be.zero()]
    for _ in range(n_max):
        an, bn = a[-1], b[-1]
        a.append(be.d(an) + be.theta_prime * bn)
        b.append(be.d(bn) - be.theta_prime * an)
    return a, b


def ab_tables(model, n_max, backend="exact", grid=None, cutoff=None):
    if n_max > AB_N_MAX:
        raise CapabilityError(f"n_max={n_max} exceeds {AB_N_MAX}")
    be = _backend(model, backend, grid, cutoff)
    a, b = _ab(be, n_max)
    return ABTable(n_max, a, b, be.name)


@dataclass
class CoefficientTable:
    """Recursion output: coefficient functions x_n^m ... w_n^m (of p^(n-m)).

    Level 0 holds the adiabatic projection pi_0 = (1 + sigma_z)/2.
    """

    n_max: int
    model: object
    backend: str
    funcs: dict
    grid: Grid1D = None
    ab: ABTable = None
    meta: dict = field(default_factory=dict)

    def get(self, name, n, m):
        return self.funcs.get((name, n, m))

    def sample(self, name, n, m, q=None):
        """Coefficient values on the table grid (or at q for the exact backend)."""
        f = self.funcs[(name, n, m)]
        if self.backend == "exact":
            return f(self.grid.x if q is None else q)
        if q is not None:
            raise ValueError("grid tables can only be sampled on their own grid")
        return f

    def stack(self, name, n, m, order, q=None):
        """Values and q-derivatives 0..order of one coefficient."""
        f = self.funcs[(name, n, m)]
        if self.backend == "exact":
            return f.derivative_stack(self.grid.x if q is None else q, order)
        if q is not None:
            raise ValueError("grid tables can only be sampled on their own grid")
        return np.array([derivative_values(self.grid, f, r) if r else f for r in range(order + 1)])

    def is_structural_zero(self, name, n, m):
        f = self.funcs[(name, n, m)]
        return f.is_zero() if self.backend == "exact" else not np.any(f)

    def entries(self):
        return sorted(self.funcs)


def coefficient_tables(model, n_max, backend="exact", grid=None, cutoff=None, _mutation=None):
    """Run the per-power recursion up to level n_max.

    ``_mutation`` is a test hook that deliberately corrupts the recursion.
    """
    if n_max > COEFF_N_MAX:
        raise CapabilityError(f"n_max={n_max} exceeds {COEFF_N_MAX}")
    if n_max < 1:
        raise ValueError("n_max must be at least 1")
    be = _backend(model, backend, grid, cutoff)
    a, b = _ab(be, n_max + 1)
    F = {}
    zero = be.zero()

    def get(name, n, m):
        if n < 0 or m < 0 or m > n:
            return zero
        return F.get((name, n, m), zero)

    for m in range(2):
        for name in NAMES:
            F[(name, 1, m)] = be.zero()
    F[("y", 1, 0)] = be.over_two_rho(be.theta_prime * (-0.5j))  # -i theta'/(4 rho)
    F[("z", 0, 0)] = be.const(0.5)
    F[("w", 0, 0)] = be.const(0.5)
    F[("x", 0, 0)] = be.zero()
    F[("y", 0, 0)] = be.zero()

    def jsum(n, m, pairs):
        """sum_j (2i)^-j C(n+1-m+j, j) * combination of level n+1-j, power m-2j."""
        acc = zero
        for j in range(1, m // 2 + 1):
            if j >= len(a):
                break
            c = (2j) ** (-j) * math.comb(n + 1 - m + j, j)
            term = zero
            for coef_name, (ab, name) in pairs:
                g = get(name, n + 1 - j, m - 2 * j)
                if be.is_zero(g):
                    continue
                h = (a if ab == "a" else b)[j]
                term = term + (h * g) * coef_name
            acc = acc + term * c
        return acc

    def even_level(n):
        # z_n^m and w_n^m from the vanishing of the diagonal part of F_(n+1)
        for m in range(n + 1):
            s = jsum(n, m, [(1.0, ("b", "y")), (1.0, ("a", "w"))])
            dz = -be.theta_prime * get("x", n, m) + s * 2j
            F[("z", n, m)] = be.integrate(dz, f"z[{n}][{m}]")
            s = jsum(n, m, [(1.0, ("a", "z")), (1.0, ("b", "x"))])
            F[("w", n, m)] = be.integrate(s * 2j, f"w[{n}][{m}]")
            F[("y", n, m)] = be.zero()

    def odd_level(n):
        for name in ("x", "z", "w"):
            for m in range(n + 1):
                F[(name, n, m)] = be.zero()

    for n in range(1, n_max):
        if n % 2 == 1:
            # x_(n+1)^m
            for m in range(n + 2):
                s = jsum(n, m, [(1.0, ("b", "z")), (-1.0, ("a", "x"))])
                inner = be.d(get("y", n, m)) * (-1j) - s * 2.0
                F[("x", n + 1, m)] = be.over_two_rho(inner) * (-1.0)
            even_level(n + 1)
        else:
            for m in range(n + 2):
                s = jsum(n, m, [(-1.0, ("a", "y")), (1.0, ("b", "w"))])
                inner = (be.d(get("x", n, m)) - be.theta_prime * get("z", n, m)) * (-1j) - s * 2.0
                F[("y", n + 1, m)] = be.over_two_rho(inner) * (-1.0)
            odd_level(n + 1)
        if _mutation == "offpattern" and n == 2:
            # plant a nonzero entry where the zero pattern forbids one
            F[("w", 2, 1)] = F[("z", 2, 0)] * 1.0
    return CoefficientTable(n_max, model, be.name, F, grid, ABTable(n_max + 1, a, b, be.name))


def _coeff_value(table, name, n, m, q):
    if table.backend == "exact":
        return table.sample(name, n, m, q)
    return table.sample(name, n, m)


@dataclass
class CouplingSymbol:
    n: int
    kappa_plus: PolyPSymbol
    kappa_minus: PolyPSymbol


def coupling_symbol(table, n, grid=None):
    """kappa_n^(+-) = -2 rho (y_n +- x_n), assembled per power of p."""
    if n > table.n_max or n < 1:
        raise ValueError(f"n={n} outside the table range 1..{table.n_max}")
    grid = grid or table.grid
    q = grid.x
    rho = table.model.rho(q)
    plus, minus = {}, {}
    for m in range(n + 1):
        y = _coeff_value(table, "y", n, m, q)
        x = _coeff_value(table, "x", n, m, q)
        if not np.any(y) and not np.any(x):
            continue
        plus[n - m] = -2 * rho * (y + x)
        minus[n - m] = -2 * rho * (y - x)
    return CouplingSymbol(n, PolyPSymbol(grid, plus), PolyPSymbol(grid, minus))


def coupling_leading_poles(model, n, grid, sign=+1):
    """Leading-pole form of the top coefficient kappa_n^(0,+-).

    kappa = -alpha_lim rho (-i)^n (+-1)^(n+1) (n-1)!
            * (i g/(tau - i tau_c)^n - i g/(tau + i tau_c)^n),   tau = 2 delta q

    The phase convention matches the recursion output (real for even n,
    purely imaginary for odd n).
    """
    if not model.constant_rho:
        raise UnsupportedModelError("closed pole form needs constant rho")
    if n < 2:
        raise ValueError("n must be at least 2")
    if model.q_c is None or model.gamma is None:
        raise ValueError("model has no pole data")
    q = grid.x
    tau = 2 * model.delta * q
    tc = model.tau_c
    g = model.gamma
    bracket = 1j * g / (tau - 1j * tc) ** n - 1j * g / (tau + 1j * tc) ** n
    s = 1 if sign > 0 else -1
    pref = -model.alpha_lim * model.delta * (-1j) ** n * s ** (n + 1) * math.factorial(n - 1)
    return PolyPSymbol(grid, {n: pref * bracket})


def _sigma_stacks(model, q, order, grid=None):
    """Derivative stacks of the q-dependent Pauli matrices sigma_x, sigma_y, sigma_z."""
    if model.kind == "sech":
        e = exp_i_theta_stack(model, q, order)
    else:
        if grid is None:
            raise ValueError("tabulated models need a grid for sigma derivatives")
        th = model.theta(q)
        tp = model.theta_prime(q)
        u = [1j * derivative_values(grid, tp, i) for i in range(order)]
        e = [np.exp(1j * th)]
        for j in range(1, order + 1):
            e.append(sum(math.comb(j - 1, i) * u[i] * e[j - 1 - i] for i in range(j)))
        e = np.array(e)
    c, s = e.real, e.imag
    zero = np.zeros_like(c)
    sx = np.array([[s, -c], [-c, -s]]).transpose(2, 0, 1, 3)
    sz = np.array([[c, s], [s, -c]]).transpose(2, 0, 1, 3)
    sy = np.zeros((order + 1, 2, 2, len(q)), complex)
    sy[0, 0, 1] = 1j
    sy[0, 1, 0] = -1j
    return sx.astype(complex), sy, sz.astype(complex)


def _leibniz(f, g):
    """Derivative stack of f*g from stacks f (D+1, N) and g (D+1, ..., N)."""
    order = min(f.shape[0], g.shape[0]) - 1
    out = np.zeros((order + 1,) + g.shape[1:], complex)
    extra = (None,) * (g.ndim - 2)
    for r in range(order + 1):
        for i in range(r + 1):
            out[r] = out[r] + math.comb(r, i) * f[i][extra + (slice(None),)] * g[r - i]
    return out


@dataclass
class ProjectionSymbol:
    """pi^(n) kept as its list of eps-orders pi_0..pi_n (matrix PolyPSymbols)."""

    n: int
    terms: list

    @property
    def grid(self):
        return self.terms[0].grid

    def total(self, epsilon):
        out = PolyPSymbol.zero(self.grid, matrix=True)
        for j, t in enumerate(self.terms):
            out = out + t.scale(epsilon**j)
        return out


def projection_symbol(table, n, grid=None, deriv_order=None):
    """Assemble pi_0..pi_n in the diabatic frame, with exact derivative stacks."""
    if n > table.n_max:
        raise ValueError(f"n={n} exceeds table n_max={table.n_max}")
    grid = grid or table.grid
    if table.backend == "grid" and grid != table.grid:
        raise ValueError("grid tables can only be assembled on their own grid")
    q = grid.x
    order = n + 2 if deriv_order is None else deriv_order
    sx, sy, sz = _sigma_stacks(table.model, q, order, grid)
    eye = np.zeros_like(sz)
    eye[0, 0, 0] = 1.0
    eye[0, 1, 1] = 1.0
    basis = {"x": sx, "y": 1j * sy, "z": sz, "w": eye}
    terms = []
    for j in range(n + 1):
        coeffs = {}
        for m in range(j + 1):
            acc = None
            for name in NAMES:
                if (name, j, m) not in table.funcs or table.is_structural_zero(name, j, m):
                    continue
                st = table.stack(name, j, m, order, q if table.backend == "exact" else None)
                piece = _leibniz(st, basis[name])
                acc = piece if acc is None else acc + piece
            if acc is not None:
                coeffs[j - m] = acc
        terms.append(PolyPSymbol(grid, coeffs, matrix=True))
    return ProjectionSymbol(n, terms)


def hamiltonian_symbol(model, grid, order):
    """H(p, q) = p^2/2 + V(q) with exact derivative stacks of V."""
    q = grid.x
    sx, _, sz = _sigma_stacks(model, q, order, grid)
    if model.constant_rho:
        v = model.delta * sz
    else:
        rho = model.rho(q)
        rstack = np.array([derivative_values(grid, rho, r) for r in range(order + 1)])
        v = _leibniz(rstack, sz)
    kin = np.zeros((1, 2, 2, len(q)), complex)
    kin[0, 0, 0] = 0.5
    kin[0, 1, 1] = 0.5
    return PolyPSymbol(grid, {0: v, 2: kin}, matrix=True)


@dataclass
class DefectReport:
    n: int
    epsilons: list
    projection_orders: list
    commutator_orders: list
    projection_residuals: list
    commutator_residuals: list
    projection_exponent: float
    commutator_exponent: float
    f_consistency_error: float = float("nan")
    anchor_error: float = float("nan")


def _sup(sym, p_samples):
    return max(float(np.max(np.abs(sym.evaluate(p)))) for p in p_samples) if sym.coeffs else 0.0


def _sum_syms(grid, syms):
    out = PolyPSymbol.zero(grid, matrix=True)
    for s in syms:
        out = out + s
    return out


def projection_defect(model, projection, epsilons, p_samples=(0.5, 1.0, 2.0, 3.0), table=None):
    """Moyal defects of pi^(n): idempotency and commutation with H.

    Both residuals are truncated at eps-order n+1 and their size is fitted
    against eps on a log-log scale.
    """
    if not 2 <= len(epsilons) <= 5:
        raise ValueError("need between 2 and 5 epsilon values")
    n = projection.n
    grid = projection.grid
    terms = projection.terms
    H = hamiltonian_symbol(model, grid, n + 2)
    proj_orders, comm_orders = [], []
    for r in range(n + 2):
        pieces = []
        for j in range(min(r, n) + 1):
            for l in range(min(r - j, n) + 1):
                i = r - j - l
                pieces.append(moyal_term(terms[j], terms[l], i))
        if r <= n:
            pieces.append(terms[r].scale(-1.0))
        proj_orders.append(_sum_syms(grid, pieces))
        pieces = []
        for j in range(min(r, n) + 1):
            i = r - j
            pieces.append(moyal_term(H, terms[j], i))
            pieces.append(moyal_term(terms[j], H, i).scale(-1.0))
        comm_orders.append(_sum_syms(grid, pieces))

    def residual(orders, eps):
        return _sup(_sum_syms(grid, [o.scale(eps**r) for r, o in enumerate(orders)]), p_samples)

    pr = [residual(proj_orders, e) for e in epsilons]
    cr = [residual(comm_orders, e) for e in epsilons]

    def fit(res):
        res = np.asarray(res)
        # a residual at roundoff level means the defect vanishes identically
        if np.max(res) <= ROUNDOFF_FLOOR:
            return float("inf")
        order = np.argsort(epsilons)
        if np.any(np.diff(res[order]) < 0):
            raise DefectFitError(f"residuals not monotone in epsilon: {res}")
        return float(np.polyfit(np.log(epsilons), np.log(res), 1)[0])

    report = DefectReport(
        n,
        list(epsilons),
        [_sup(o, p_samples) for o in proj_orders],
        [_sup(o, p_samples) for o in comm_orders],
        pr,
        cr,
        fit(pr),
        fit(cr),
    )
    if n == 0:
        th1 = model.theta_prime(grid.x)
        sx, _, _ = _sigma_stacks(model, grid.x, 0, grid)
        expected = PolyPSymbol(grid, {1: 0.5j * th1 * sx[0]}, matrix=True)
        diff = comm_orders[1] + expected.scale(-1.0)
        report.anchor_error = _sup(diff, p_samples)
    if table is not None and table.n_max >= n + 1:
        report.f_consistency_error = _f_consistency(model, table, comm_orders[n + 1], n + 1, p_samples)
    return report


def _f_consistency(model, table, F, level, p_samples):
    """Compare the off-diagonals of U0 F U0 with kappa^(+-) of the next level.

    With the commutator convention anchored by [H, pi_0]_1 = (p/i) d/dq pi_0,
    the upper entry is kappa^+ and the lower entry is kappa^-; the diagonal
    vanishes.
    """
    from .model import u0_matrix

    grid = F.grid
    q = grid.x
    u = u0_matrix(model, q).astype(complex)
    kappa = coupling_symbol(table, level, grid)
    worst = 0.0
    scale = 0.0
    for p in p_samples:
        rot = np.einsum("ijn,jkn,kln->iln", u, F.evaluate(p), u)
        exp = np.zeros_like(rot)
        exp[0, 1] = kappa.kappa_plus.evaluate(p)
        exp[1, 0] = kappa.kappa_minus.evaluate(p)
        worst = max(worst, float(np.max(np.abs(rot - exp))))
        scale = max(scale, float(np.max(np.abs(exp))))
    return worst / max(scale, 1e-300)
