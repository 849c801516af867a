"""Periodic grids, the epsilon-scaled Fourier transform and symbol calculus.

Conventions: the scaled transform is

    f_hat(k) = (2 pi eps)^(-1/2) * int exp(-i k x / eps) f(x) dx,

so that -i eps d/dx acts as multiplication by k.  Momentum arrays are kept in
FFT order; use ``np.fft.fftshift`` for display.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.fft as sfft

from .model import CapabilityError

MAX_MOYAL_ORDER = 8
MAX_DERIVATIVE_ORDER = 12


class GridMismatchError(ValueError):
    pass


class DecayError(ValueError):
    """Input does not decay at the grid boundaries."""


@dataclass(frozen=True)
class Grid1D:
    x_min: float
    x_max: float
    n_points: int
    epsilon: float

    def __post_init__(self):
        n = self.n_points
        if n < 2 or n & (n - 1):
            raise ValueError(f"n_points must be a power of two, got {n}")
        if not self.x_max > self.x_min:
            raise ValueError("x_max must exceed x_min")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")

    @property
    def length(self):
        return self.x_max - self.x_min

    @property
    def dx(self):
        return self.length / self.n_points

    @property
    def dk(self):
        return 2 * math.pi * self.epsilon / self.length

    @property
    def x(self):
        return self.x_min + self.dx * np.arange(self.n_points)

    @property
    def k(self):
        """Scaled momenta in FFT order."""
        return self.dk * np.fft.fftfreq(self.n_points, 1.0 / self.n_points)

    @property
    def k_max(self):
        return self.dk * self.n_points / 2

    @property
    def wavenumber(self):
        """Unscaled wavenumbers k/eps, the symbol of -i d/dx."""
        return self.k / self.epsilon

    def with_epsilon(self, epsilon):
        return Grid1D(self.x_min, self.x_max, self.n_points, epsilon)

    def _phase(self):
        return np.exp(-1j * self.k * self.x_min / self.epsilon)

    def forward(self, values):
        """Scaled Fourier transform of raw samples (last axis)."""
        c = self.dx / math.sqrt(2 * math.pi * self.epsilon)
        return c * self._phase() * sfft.fft(values, axis=-1)

    def inverse(self, values):
        c = self.dk * self.n_points / math.sqrt(2 * math.pi * self.epsilon)
        return c * sfft.ifft(values / self._phase(), axis=-1)

    def norm(self, values, space="x"):
        w = self.dx if space == "x" else self.dk
        return float(np.sqrt(w * np.sum(np.abs(values) ** 2)))


@dataclass
class GridFunction:
    grid: Grid1D
    values: np.ndarray
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values)
        if self.values.shape[-1] != self.grid.n_points:
            raise GridMismatchError("sample count does not match the grid")

    def norm(self, space="x"):
        return self.grid.norm(self.values, space)

    def _check(self, other):
        if isinstance(other, GridFunction):
            if other.grid != self.grid:
                raise GridMismatchError("operands live on different grids")
            return other.values
        return other

    def __add__(self, other):
        return GridFunction(self.grid, self.values + self._check(other))

    def __sub__(self, other):
        return GridFunction(self.grid, self.values - self._check(other))

    def __mul__(self, other):
        return GridFunction(self.grid, self.values * self._check(other))

    __rmul__ = __mul__


def _same_grid(f, grid):
    if grid is not None and f.grid != grid:
        raise GridMismatchError("operands live on different grids")


def scaled_fourier(f: GridFunction) -> GridFunction:
    return GridFunction(f.grid, f.grid.forward(f.values))


def inverse_scaled_fourier(f_hat: GridFunction) -> GridFunction:
    return GridFunction(f_hat.grid, f_hat.grid.inverse(f_hat.values))


def _boundary_level(values, width=4):
    scale = max(float(np.max(np.abs(values))), 1e-300)
    edge = max(float(np.max(np.abs(values[..., :width]))), float(np.max(np.abs(values[..., -width:]))))
    return edge / scale


def derivative_values(grid, values, order, cutoff=None):
    """Spectral q-derivative of raw samples along the last axis.

    ``cutoff`` optionally zeroes wavenumbers above it, which keeps repeated
    differentiation from amplifying round-off.
    """
    if order == 0:
        return np.array(values, copy=True)
    xi = grid.wavenumber
    mult = (1j * xi) ** order
    if order % 2 == 1:
        mult[grid.n_points // 2] = 0.0
    if cutoff is not None:
        mult = np.where(np.abs(xi) > cutoff, 0.0, mult)
    out = sfft.ifft(mult * sfft.fft(values, axis=-1), axis=-1)
    if np.isrealobj(values):
        out = out.real
    return out


def spectral_derivative(f: GridFunction, order: int, cutoff=None) -> GridFunction:
    """d^order f / dq^order via multiplication by (i k/eps)^order."""
    if order < 0 or order > MAX_DERIVATIVE_ORDER:
        raise ValueError(f"derivative order must lie in [0, {MAX_DERIVATIVE_ORDER}]")
    meta = {}
    level = _boundary_level(f.values)
    if order > 0 and level > 1e-13:
        meta["accuracy_warning"] = f"boundary level {level:.2e} exceeds 1e-13"
    return GridFunction(f.grid, derivative_values(f.grid, f.values, order, cutoff), meta)


def antiderivative_values(grid, values, check=True):
    if check and _boundary_level(values) > 1e-12 and np.max(np.abs(values)) > 0:
        raise DecayError("integrand does not decay at the grid boundaries")
    n = grid.n_points
    total = grid.dx * np.sum(values, axis=-1)  # trapezoid rule for a periodic integrand
    mean = total / grid.length
    periodic = values - mean[..., None] if np.ndim(values) > 1 else values - mean
    xi = grid.wavenumber
    inv = np.zeros(n, complex)
    nz = xi != 0
    inv[nz] = 1.0 / (1j * xi[nz])
    inv[n // 2] = 0.0
    prim = sfft.ifft(inv * sfft.fft(periodic, axis=-1), axis=-1)
    if np.isrealobj(values):
        prim = prim.real
    x = grid.x - grid.x_min
    lin = mean[..., None] * x if np.ndim(values) > 1 else mean * x
    out = prim + lin
    return out - out[..., :1], total


def antiderivative_decaying(f: GridFunction) -> GridFunction:
    """Antiderivative with F(x_min) = 0 for an integrand decaying at both ends."""
    values, total = antiderivative_values(f.grid, f.values)
    meta = {"limit_at_x_max": total}
    if np.any(np.abs(total) > 1e-12 * max(1.0, float(np.max(np.abs(f.values))))):
        meta["nonzero_total"] = True
    return GridFunction(f.grid, values, meta)


class PolyPSymbol:
    """Phase-space symbol sum_m p^m g_m(q), scalar or 2x2-matrix valued.

    Each coefficient is stored as a stack of q-derivatives with shape
    ``(D + 1,) + value_shape + (N,)``.  Entry 0 holds the values; entries
    1..D hold exact derivatives when the caller can supply them.  Derivatives
    beyond D fall back to spectral differentiation of the values.
    """

    def __init__(self, grid, coeffs, matrix=False):
        self.grid = grid
        self.matrix = matrix
        self.coeffs = {}
        for power, arr in coeffs.items():
            arr = np.asarray(arr, complex)
            if arr.ndim == (3 if matrix else 1):
                arr = arr[None]
            if arr.shape[-1] != grid.n_points:
                raise GridMismatchError("coefficient length does not match the grid")
            self.coeffs[int(power)] = arr

    @property
    def degree(self):
        return max(self.coeffs) if self.coeffs else 0

    @property
    def value_shape(self):
        return (2, 2) if self.matrix else ()

    def available_order(self, power):
        return self.coeffs[power].shape[0] - 1

    def q_derivative(self, power, order):
        stack = self.coeffs[power]
        if order < stack.shape[0]:
            return stack[order]
        top = stack.shape[0] - 1
        return derivative_values(self.grid, stack[top], order - top)

    def values(self, power):
        return self.coeffs[power][0]

    def evaluate(self, p):
        """Symbol at momentum p (scalar) on the grid."""
        out = np.zeros(self.value_shape + (self.grid.n_points,), complex)
        for power, stack in self.coeffs.items():
            out = out + (p**power) * stack[0]
        return out

    def __add__(self, other):
        if self.grid != other.grid:
            raise GridMismatchError("operands live on different grids")
        out = {k: v[:1].copy() for k, v in self.coeffs.items()}
        for k, v in other.coeffs.items():
            out[k] = out[k] + v[:1] if k in out else v[:1].copy()
        return PolyPSymbol(self.grid, out, self.matrix or other.matrix)

    def scale(self, factor):
        return PolyPSymbol(self.grid, {k: factor * v for k, v in self.coeffs.items()}, self.matrix)

    @classmethod
    def zero(cls, grid, matrix=False):
        return cls(grid, {}, matrix)


def _falling(n, k):
    return math.perm(n, k) if k <= n else 0


def _product(a, b, matrix):
    if matrix:
        return np.einsum("ijn,jkn->ikn", a, b)
    return a * b


def _lift(sym, matrix):
    """Promote a scalar coefficient to a multiple of the identity matrix."""
    if sym.matrix or not matrix:
        return sym
    eye = np.eye(2)[..., None]
    return PolyPSymbol(sym.grid, {k: v[:, None, None, :] * eye for k, v in sym.coeffs.items()}, True)


def moyal_term(A: PolyPSymbol, B: PolyPSymbol, j: int) -> PolyPSymbol:
    """Coefficient of eps^j in the Moyal product A # B.

    (A#B)_j = (2i)^-j sum_{a+b=j} (-1)^a / (a! b!) (d_q^a d_p^b A)(d_p^a d_q^b B)
    """
    if j < 0 or j > MAX_MOYAL_ORDER:
        raise CapabilityError(f"Moyal order must lie in [0, {MAX_MOYAL_ORDER}]")
    if A.grid != B.grid:
        raise GridMismatchError("operands live on different grids")
    matrix = A.matrix or B.matrix
    A, B = _lift(A, matrix), _lift(B, matrix)
    out = {}
    pref = (2j) ** (-j)
    for a in range(j + 1):
        b = j - a
        w = pref * (-1) ** a / (math.factorial(a) * math.factorial(b))
        for pa in A.coeffs:
            fa = _falling(pa, b)
            if fa == 0:
                continue
            da = A.q_derivative(pa, a)
            for pb in B.coeffs:
                fb = _falling(pb, a)
                if fb == 0:
                    continue
                db = B.q_derivative(pb, b)
                power = (pa - b) + (pb - a)
                term = (w * fa * fb) * _product(da, db, matrix)
                out[power] = out[power] + term if power in out else term
    return PolyPSymbol(A.grid, out, matrix)


MOMENTUM_KERNEL = "momentum"
POSITION_SPACE = "position"


def _linear_convolve_k(grid, g_hat, h_hat):
    """dk * sum_eta g_hat(k - eta) h_hat(eta), zero-padded to 2N."""
    n = grid.n_points
    gs = np.fft.fftshift(g_hat)
    hs = np.fft.fftshift(h_hat)
    m = 2 * n
    conv = sfft.ifft(sfft.fft(gs, m) * sfft.fft(hs, m))
    # index i of gs, hs corresponds to integer frequency i - n/2; the full
    # linear convolution index s corresponds to frequency s - n
    sel = conv[n // 2 : n // 2 + n]
    return grid.dk * np.fft.ifftshift(sel)


def weyl_apply(symbol: PolyPSymbol, psi: GridFunction, form=POSITION_SPACE) -> GridFunction:
    """Apply the Weyl quantization of a scalar polynomial symbol to psi."""
    if symbol.matrix:
        raise ValueError("weyl_apply takes scalar symbols; apply matrix symbols entry-wise")
    if symbol.grid != psi.grid:
        raise GridMismatchError("symbol and wave function live on different grids")
    grid = psi.grid
    eps = grid.epsilon
    if form == POSITION_SPACE:
        psi_hat = grid.forward(psi.values)
        k = grid.k
        top = symbol.degree
        dpsi = [grid.inverse(psi_hat * k**r) for r in range(top + 1)]  # (-i eps d)^r psi
        out = np.zeros(grid.n_points, complex)
        for m in symbol.coeffs:
            for j in range(m + 1):
                g = symbol.q_derivative(m, j)
                out += math.comb(m, j) * 2.0**-j * (-1j * eps) ** j * g * dpsi[m - j]
        return GridFunction(grid, out)
    if form == MOMENTUM_KERNEL:
        psi_hat = grid.forward(psi.values)
        k = grid.k
        out_hat = np.zeros(grid.n_points, complex)
        for m in symbol.coeffs:
            g_hat = grid.forward(symbol.values(m))
            # ((eta + k)/2)^m = 2^-m sum_l C(m,l) k^(m-l) eta^l
            for l in range(m + 1):
                conv = _linear_convolve_k(grid, g_hat, psi_hat * k**l)
                out_hat += 2.0**-m * math.comb(m, l) * k ** (m - l) * conv
        out_hat /= math.sqrt(2 * math.pi * eps)
        return GridFunction(grid, grid.inverse(out_hat))
    raise ValueError(f"unknown Weyl form {form!r}")


def band_limited_interpolate(grid, f_hat, points):
    """Evaluate a momentum-space function at arbitrary momenta.

    Uses the trigonometric interpolant implied by the grid: f_hat is the
    scaled transform of samples f(x_n), so f_hat(kappa) is a finite sum over
    the grid points.
    """
    f = grid.inverse(f_hat)
    points = np.asarray(points, float)
    out = np.empty(points.shape, complex)
    flat = points.ravel()
    res = out.ravel()
    x = grid.x
    c = grid.dx / math.sqrt(2 * math.pi * grid.epsilon)
    chunk = max(1, 2**22 // grid.n_points)
    for i in range(0, len(flat), chunk):
        kk = flat[i : i + chunk, None]
        res[i : i + chunk] = c * (np.exp(-1j * kk * x[None, :] / grid.epsilon) @ f)
    return out


def warn_if_unresolved(grid, occupied_k_max):
    if grid.k_max < 1.5 * occupied_k_max:
        warnings.warn(
            f"grid resolves |k| <= {grid.k_max:.3g}, less than 1.5 x occupied {occupied_k_max:.3g}",
            stacklevel=2,
        )
