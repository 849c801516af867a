"""Diabatic two-level potentials and their adiabatic diagonalization.

The potential is the traceless symmetric matrix

    V(q) = rho(q) [[cos theta(q), sin theta(q)], [sin theta(q), -cos theta(q)]]

The workhorse family is the sech coupling, theta'(q) = (c/2) sech(alpha q),
with constant rho = delta.  For that family every q-derivative of every
quantity built from theta' is a polynomial in S = sech(alpha q) and
T = tanh(alpha q), which :class:`SechPoly` represents exactly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

K_MAX_DEFAULT = 64


class InvalidModelError(ValueError):
    """Raised for model parameters outside the admissible range."""


class CapabilityError(ValueError):
    """Raised when a request exceeds a configured capability limit."""


class SechPoly:
    """Function of the form P(S) + T Q(S) with S = sech(alpha q), T = tanh(alpha q).

    Coefficients are complex numpy arrays indexed by the power of S.  The
    identity T**2 = 1 - S**2 keeps the representation closed under products
    and q-derivatives.
    """

    __slots__ = ("alpha", "p", "t")

    def __init__(self, alpha, p=None, t=None):
        self.alpha = float(alpha)
        self.p = _trim(np.zeros(1, complex) if p is None else np.asarray(p, complex))
        self.t = _trim(np.zeros(1, complex) if t is None else np.asarray(t, complex))

    @classmethod
    def constant(cls, alpha, value):
        return cls(alpha, [value])

    @classmethod
    def sech(cls, alpha, scale=1.0):
        return cls(alpha, [0.0, scale])

    def copy(self):
        return SechPoly(self.alpha, self.p.copy(), self.t.copy())

    def __add__(self, other):
        if not isinstance(other, SechPoly):
            other = SechPoly.constant(self.alpha, other)
        return SechPoly(self.alpha, _padd(self.p, other.p), _padd(self.t, other.t))

    __radd__ = __add__

    def __neg__(self):
        return SechPoly(self.alpha, -self.p, -self.t)

    def __sub__(self, other):
        return self + (-other)

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if not isinstance(other, SechPoly):
            return SechPoly(self.alpha, self.p * other, self.t * other)
        pp = np.convolve(self.p, other.p)
        tt = np.convolve(self.t, other.t)
        # T^2 = 1 - S^2
        p = _padd(_padd(pp, tt), -np.concatenate([[0, 0], tt]))
        t = _padd(np.convolve(self.p, other.t), np.convolve(self.t, other.p))
        return SechPoly(self.alpha, p, t)

    __rmul__ = __mul__

    def __truediv__(self, scalar):
        return SechPoly(self.alpha, self.p / scalar, self.t / scalar)

    def is_zero(self, tol=0.0):
        return bool(np.all(np.abs(self.p) <= tol) and np.all(np.abs(self.t) <= tol))

    def derivative(self):
        a = self.alpha
        kp = np.arange(len(self.p))
        kt = np.arange(len(self.t))
        # d/dq S^k = -k a T S^k ;  d/dq T S^k = (k+1) a S^(k+2) - k a S^k
        t = -a * kp * self.p
        p = np.zeros(len(self.t) + 2, complex)
        p[2:] += a * (kt + 1) * self.t
        p[: len(self.t)] -= a * kt * self.t
        return SechPoly(a, p, t)

    def antiderivative(self, tol=1e-12):
        """Antiderivative vanishing at q -> -infinity.

        Only odd integrands T Q(S) with Q(0) = 0 have a closed form here;
        anything else raises ``ValueError``.
        """
        scale = max(1.0, float(np.max(np.abs(self.p))), float(np.max(np.abs(self.t))))
        if np.any(np.abs(self.p) > tol * scale):
            raise ValueError("integrand has an even part; no closed antiderivative")
        if abs(self.t[0]) > tol * scale:
            raise ValueError("integrand does not decay at infinity")
        k = np.arange(1, len(self.t))
        p = np.zeros(len(self.t), complex)
        p[1:] = -self.t[1:] / (k * self.alpha)
        return SechPoly(self.alpha, p)

    def __call__(self, q):
        q = np.asarray(q, float)
        s = 1.0 / np.cosh(self.alpha * q)
        tq = np.tanh(self.alpha * q)
        return np.polynomial.polynomial.polyval(s, self.p) + tq * np.polynomial.polynomial.polyval(s, self.t)

    def derivative_stack(self, q, order):
        """Values of the function and its first ``order`` derivatives at ``q``."""
        out = []
        f = self
        for _ in range(order + 1):
            out.append(f(q))
            f = f.derivative()
        return np.array(out)

    def __repr__(self):
        return f"SechPoly(alpha={self.alpha}, p={self.p}, t={self.t})"


def _trim(c):
    c = np.atleast_1d(c)
    nz = np.nonzero(c)[0]
    if len(nz) == 0:
        return np.zeros(1, complex)
    return c[: nz[-1] + 1].astype(complex)


def _padd(a, b):
    n = max(len(a), len(b))
    out = np.zeros(n, complex)
    out[: len(a)] += a
    out[: len(b)] += b
    return out


@dataclass(frozen=True)
class DiabaticModel:
    """A diabatic potential with constant eigenvalues +-delta.

    Use :meth:`sech` for the closed-form family.  Tabulated models carry
    sampled theta' and rho and must be given their pole data explicitly.
    """

    kind: str
    delta: float
    c: float = 0.0
    alpha: float = 1.0
    q_c: Optional[float] = None
    gamma: Optional[float] = None
    x_samples: Optional[np.ndarray] = field(default=None, repr=False)
    theta_prime_samples: Optional[np.ndarray] = field(default=None, repr=False)
    rho_samples: Optional[np.ndarray] = field(default=None, repr=False)
    k_max: int = K_MAX_DEFAULT

    @classmethod
    def sech(cls, c, alpha, delta, k_max=K_MAX_DEFAULT):
        if not alpha > 0:
            raise InvalidModelError(f"alpha must be positive, got {alpha}")
        if not delta > 0:
            raise InvalidModelError(f"delta must be positive, got {delta}")
        q_c, gamma, _ = derived_params(c, alpha, delta)
        return cls("sech", float(delta), float(c), float(alpha), q_c, gamma, k_max=k_max)

    @classmethod
    def tabulated(cls, x, theta_prime, rho, q_c=None, gamma=None):
        x = np.asarray(x, float)
        rho = np.asarray(rho, float)
        if np.any(rho <= 0):
            raise InvalidModelError("rho must stay positive (gap condition)")
        return cls(
            "tabulated",
            float(rho.min()),
            q_c=q_c,
            gamma=gamma,
            x_samples=x,
            theta_prime_samples=np.asarray(theta_prime, float),
            rho_samples=rho,
        )

    @property
    def tau_c(self):
        if self.q_c is None:
            raise InvalidModelError("pole data not available for this model")
        return 2.0 * self.delta * self.q_c

    @property
    def constant_rho(self):
        return self.kind == "sech" or bool(np.ptp(self.rho_samples) == 0.0)

    @property
    def alpha_lim(self):
        """Limit of the universal prefactor sin(pi g/2)/(pi g/2)."""
        return universal_prefactor(self.gamma)

    def theta_prime_poly(self):
        if self.kind != "sech":
            raise CapabilityError("closed-form derivatives only exist for the sech family")
        return SechPoly.sech(self.alpha, self.c / 2.0)

    def theta(self, q):
        q = np.asarray(q, float)
        if self.kind == "sech":
            return (self.c / self.alpha) * np.arctan(np.tanh(self.alpha * q / 2.0))
        # trapezoid quadrature of theta', anchored at theta(0) = 0
        xs, tp = self.x_samples, self.theta_prime_samples
        cum = np.concatenate([[0.0], np.cumsum(0.5 * (tp[1:] + tp[:-1]) * np.diff(xs))])
        return np.interp(q, xs, cum) - np.interp(0.0, xs, cum)

    def theta_prime(self, q):
        if self.kind == "sech":
            return (self.c / 2.0) / np.cosh(self.alpha * np.asarray(q, float))
        return np.interp(q, self.x_samples, self.theta_prime_samples)

    def rho(self, q):
        q = np.asarray(q, float)
        if self.kind == "sech":
            return np.full(q.shape, self.delta)
        return np.interp(q, self.x_samples, self.rho_samples)


def universal_prefactor(gamma):
    x = math.pi * gamma / 2.0
    return 1.0 if x == 0 else math.sin(x) / x


def derived_params(c, alpha, delta):
    """Pole data (q_c, gamma, tau_c) of the sech coupling (c/2) sech(alpha q).

    The poles nearest the real axis sit at +-i pi/(2 alpha) with residue
    coefficient gamma = -c/(2 alpha).
    """
    if not alpha > 0 or not delta > 0:
        raise InvalidModelError("alpha and delta must be positive")
    q_c = math.pi / (2.0 * alpha)
    gamma = -c / (2.0 * alpha)
    if gamma == 0:
        gamma = 0.0
    return q_c, gamma, 2.0 * delta * q_c


def theta_derivative(model, q, k):
    """k-th derivative of theta' at q, exact for the sech family."""
    if k < 0:
        raise ValueError("derivative order must be nonnegative")
    if k > model.k_max:
        raise CapabilityError(f"derivative order {k} exceeds k_max={model.k_max}")
    f = model.theta_prime_poly()
    for _ in range(k):
        f = f.derivative()
    out = f(q)
    return out.real if np.ndim(out) else float(out.real)


def potential_matrix(model, q):
    """V(q) as an array of shape (2, 2) + q.shape."""
    th = model.theta(q)
    r = model.rho(q)
    return np.array(
        [[r * np.cos(th), r * np.sin(th)], [r * np.sin(th), -r * np.cos(th)]], dtype=complex
    )


@dataclass(frozen=True)
class AdiabaticFrame:
    u0: np.ndarray
    sigma_x_q: np.ndarray
    sigma_y_q: np.ndarray
    sigma_z_q: np.ndarray


def u0_matrix(model, q):
    h = model.theta(q) / 2.0
    c, s = np.cos(h), np.sin(h)
    return np.array([[c, s], [s, -c]])


def adiabatic_frame(model, q):
    """U0 and the Pauli matrices transformed to the adiabatic basis at q."""
    th = model.theta(q)
    c, s = np.cos(th), np.sin(th)
    zero = np.zeros_like(th)
    sx = np.array([[s, -c], [-c, -s]], dtype=complex)
    sy = np.array([[zero, 1j + zero], [-1j + zero, zero]], dtype=complex)
    sz = np.array([[c, s], [s, -c]], dtype=complex)
    return AdiabaticFrame(u0_matrix(model, q), sx, sy, sz)


def exp_i_theta_stack(model, q, order):
    """Derivatives 0..order of exp(i theta(q)) via the Bell-polynomial recursion."""
    q = np.asarray(q, float)
    e = [np.exp(1j * model.theta(q))]
    if order == 0:
        return np.array(e)
    tp = model.theta_prime_poly()
    u = []  # u[i] = d^(i+1)/dq^(i+1) (i theta)
    f = tp
    for _ in range(order):
        u.append(1j * f(q))
        f = f.derivative()
    for j in range(1, order + 1):
        acc = np.zeros_like(e[0])
        for i in range(j):
            acc = acc + math.comb(j - 1, i) * u[i] * e[j - 1 - i]
        e.append(acc)
    return np.array(e)


def to_adiabatic(model, x, psi_up, psi_down):
    """Apply U0(x) pointwise; U0 is involutive so this also maps back."""
    u = u0_matrix(model, x)
    return u[0, 0] * psi_up + u[0, 1] * psi_down, u[1, 0] * psi_up + u[1, 1] * psi_down
