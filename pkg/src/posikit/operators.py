"""Discrete spatial operators and the linear solvers behind the prediction step.

Three operator kinds are provided, all in the sign convention of
``u_t + L u = 0`` (so every kind is the *positive* direction: for the heat
part ``L = -laplacian``):

* ``laplacian``                 -- L u = -Delta u.  Periodic axes use exact
  Fourier differentiation, Dirichlet/Neumann axes use the second-difference
  stencil of the lumped linear-element form (zero ghost / mirrored ghost).
* ``div-coeff-grad``            -- L u = -div(c grad u) with nodal c >= 0.
  On fully periodic grids this is assembled pseudo-spectrally from the
  antisymmetric Fourier derivative (Nyquist mode dropped, the standard
  convention for odd derivatives), which makes the operator exactly
  symmetric positive semidefinite in the grid inner product and makes the
  c == 1 case agree with the spectral Laplacian mode by mode.  On grids with
  Dirichlet/Neumann axes it is the edge-difference form with arithmetic-mean
  edge coefficients.
* ``div-coeff-grad-laplacian``  -- L u = +div(c grad (Delta u)), the
  fourth-order thin-film operator; periodic grids only.

All kinds annihilate constants in the adjoint sense: ``[L v, 1] = 0`` for
periodic/Neumann grids, and the telescoped edge flux against the all-ones
extension vanishes on Dirichlet grids.  Shifted systems ``(sigma I + L) u = b``
solve exactly in one transform pass for constant coefficients; variable
coefficients use conjugate gradients (SPD kinds) or BiCGStab (fourth-order
kind) preconditioned by the constant-coefficient operator at the mean
coefficient.

Operators are immutable; ``apply``/``solve`` are pure functions of their
inputs and may run concurrently on distinct fields.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.fft as sfft

from .grid import DIRICHLET, NEUMANN, PERIODIC, Grid

LAPLACIAN = "laplacian"
DIV_COEFF_GRAD = "div-coeff-grad"
DIV_COEFF_GRAD_LAPLACIAN = "div-coeff-grad-laplacian"

DEFAULT_TOL = 1e-10
DEFAULT_MAXIT = 500


class SolverError(RuntimeError):
    """Linear solve failed to converge; carries the :class:`SolverReport`."""

    def __init__(self, message, report=None, iterate=None):
        super().__init__(message)
        self.report = report
        self.iterate = iterate


@dataclass(frozen=True)
class SolverReport:
    iterations: int
    residual: float
    converged: bool


def _sl(u: np.ndarray, ax: int, s: slice) -> np.ndarray:
    idx = [slice(None)] * u.ndim
    idx[ax] = s
    return u[tuple(idx)]


# -- transform symbols --------------------------------------------------------


@lru_cache(maxsize=None)
def _axis_symbol_laplacian(g: Grid, ax: int) -> np.ndarray:
    """Eigenvalues of the per-axis -d2/dx2 in the solve basis."""
    n, h, bc = g.counts[ax], g.spacings[ax], g.bcs[ax]
    if bc == PERIODIC:
        k = 2.0 * np.pi * np.fft.fftfreq(n, d=h)
        return k * k
    j = np.arange(1, n) if bc == DIRICHLET else np.arange(0, n + 1)
    return (2.0 - 2.0 * np.cos(np.pi * j / n)) / h**2


@lru_cache(maxsize=None)
def _axis_symbol_div(g: Grid, ax: int) -> np.ndarray:
    """Per-axis symbol of the c == 1 divergence form in the solve basis."""
    n, h, bc = g.counts[ax], g.spacings[ax], g.bcs[ax]
    if g.fully_periodic:
        k = 2.0 * np.pi * np.fft.fftfreq(n, d=h)
        s = k * k
        if n % 2 == 0:
            s[n // 2] = 0.0  # antisymmetric derivative drops the Nyquist mode
        return s
    if bc == PERIODIC:
        # mixed grid: the edge stencil wraps around, FD symbol in FFT basis
        j = np.arange(n)
        return (2.0 - 2.0 * np.cos(2.0 * np.pi * j / n)) / h**2
    j = np.arange(1, n) if bc == DIRICHLET else np.arange(0, n + 1)
    return (2.0 - 2.0 * np.cos(np.pi * j / n)) / h**2


def _outer_sum(symbols) -> np.ndarray:
    if len(symbols) == 1:
        return symbols[0].copy()
    return symbols[0][:, None] + symbols[1][None, :]


def _interior_slices(g: Grid):
    return tuple(slice(1, -1) if bc == DIRICHLET else slice(None)
                 for bc in g.bcs)


def _forward(g: Grid, v: np.ndarray) -> np.ndarray:
    for ax, bc in enumerate(g.bcs):
        if bc == PERIODIC:
            v = np.fft.fft(v, axis=ax)
        elif bc == DIRICHLET:
            v = sfft.dst(v, type=1, axis=ax)
        else:
            v = sfft.dct(v, type=1, axis=ax)
    return v


def _backward(g: Grid, v: np.ndarray) -> np.ndarray:
    for ax in reversed(range(g.dim)):
        bc = g.bcs[ax]
        if bc == PERIODIC:
            v = np.fft.ifft(v, axis=ax)
        elif bc == DIRICHLET:
            v = sfft.idst(v, type=1, axis=ax)
        else:
            v = sfft.idct(v, type=1, axis=ax)
    return v


def _diag_solve(g: Grid, rhs: np.ndarray, denom: np.ndarray) -> np.ndarray:
    """Solve a constant-coefficient system diagonalized by the grid transforms."""
    sl = _interior_slices(g)
    v = _forward(g, rhs[sl])
    v = v / denom
    v = _backward(g, v)
    if np.iscomplexobj(v):
        v = v.real
    if g.all_active:
        return np.ascontiguousarray(v)
    out = np.zeros(g.shape)
    out[sl] = v
    return out


# -- apply: Laplacian ---------------------------------------------------------


def _axis_laplacian(u: np.ndarray, g: Grid, ax: int) -> np.ndarray:
    n, h, bc = g.counts[ax], g.spacings[ax], g.bcs[ax]
    if bc == PERIODIC:
        k = 2.0 * np.pi * np.fft.fftfreq(n, d=h)
        shape = [1] * u.ndim
        shape[ax] = n
        return np.fft.ifft(-(k * k).reshape(shape) * np.fft.fft(u, axis=ax),
                           axis=ax).real
    out = np.zeros_like(u, dtype=float)
    mid = (_sl(u, ax, slice(0, -2)) - 2.0 * _sl(u, ax, slice(1, -1))
           + _sl(u, ax, slice(2, None))) / h**2
    idx = [slice(None)] * u.ndim
    idx[ax] = slice(1, -1)
    out[tuple(idx)] = mid
    if bc == NEUMANN:
        # mirrored ghosts at both ends
        lo, hi = [slice(None)] * u.ndim, [slice(None)] * u.ndim
        lo[ax], hi[ax] = 0, 1
        out[tuple(lo)] = 2.0 * (u[tuple(hi)] - u[tuple(lo)]) / h**2
        lo[ax], hi[ax] = -1, -2
        out[tuple(lo)] = 2.0 * (u[tuple(hi)] - u[tuple(lo)]) / h**2
    return out


def apply_laplacian(u: np.ndarray, g: Grid) -> np.ndarray:
    """Discrete Laplacian of ``u`` (the actual Laplacian, not its negative)."""
    u = g.check_field(u)
    out = _axis_laplacian(u, g, 0)
    for ax in range(1, g.dim):
        out += _axis_laplacian(u, g, ax)
    return out


# -- apply: divergence form ---------------------------------------------------


def _spectral_deriv(u: np.ndarray, g: Grid, ax: int) -> np.ndarray:
    """Antisymmetric Fourier first derivative (Nyquist mode dropped)."""
    n, h = g.counts[ax], g.spacings[ax]
    k = 2.0 * np.pi * np.fft.fftfreq(n, d=h)
    if n % 2 == 0:
        k = k.copy()
        k[n // 2] = 0.0
    shape = [1] * u.ndim
    shape[ax] = n
    return np.fft.ifft(1j * k.reshape(shape) * np.fft.fft(u, axis=ax),
                       axis=ax).real


def _edge_div_axis(c: np.ndarray, u: np.ndarray, g: Grid, ax: int) -> np.ndarray:
    h, bc = g.spacings[ax], g.bcs[ax]
    if bc == PERIODIC:
        un = np.roll(u, -1, axis=ax)
        cn = np.roll(c, -1, axis=ax)
        flux = 0.5 * (c + cn) * (un - u)          # edge (i, i+1 mod n)
        net = np.roll(flux, 1, axis=ax) - flux
    else:
        du = _sl(u, ax, slice(1, None)) - _sl(u, ax, slice(0, -1))
        ce = 0.5 * (_sl(c, ax, slice(1, None)) + _sl(c, ax, slice(0, -1)))
        flux = ce * du                             # edges 0..n-1 along ax
        net = np.zeros_like(u, dtype=float)
        idx = [slice(None)] * u.ndim
        idx[ax] = slice(0, -1)
        net[tuple(idx)] -= flux
        idx[ax] = slice(1, None)
        net[tuple(idx)] += flux
    # divide by h * axis weight (transverse weights cancel); excluded rows
    # carry weight 0 and are masked by the caller
    aw = _axis_weights(g, ax)
    wax = np.where(aw > 0, aw, 1.0)
    if u.ndim > 1:
        shape = [1] * u.ndim
        shape[ax] = g.shape[ax]
        wax = wax.reshape(shape)
    return net / (h * wax)


@lru_cache(maxsize=None)
def _axis_weights(g: Grid, ax: int) -> np.ndarray:
    n, h, bc = g.counts[ax], g.spacings[ax], g.bcs[ax]
    if bc == PERIODIC:
        return np.full(n, h)
    w = np.full(n + 1, h)
    if bc == DIRICHLET:
        w[0] = w[-1] = 0.0
    else:
        w[0] = w[-1] = 0.5 * h
    return w


def _div_form(c: np.ndarray, u: np.ndarray, g: Grid) -> np.ndarray:
    """Unvalidated divergence form, +<-div(c grad u)>; sign-indefinite c allowed."""
    if g.fully_periodic:
        out = np.zeros_like(u, dtype=float)
        for ax in range(g.dim):
            out -= _spectral_deriv(c * _spectral_deriv(u, g, ax), g, ax)
        return out
    out = _edge_div_axis(c, u, g, 0)
    for ax in range(1, g.dim):
        out += _edge_div_axis(c, u, g, ax)
    if not g.all_active:
        out *= g.active
    return out


def apply_div_coeff_grad(c: np.ndarray, u: np.ndarray, g: Grid) -> np.ndarray:
    """Apply L u = -div(c grad u) in divided (per-weight) form; needs c >= 0."""
    c = g.check_field(c)
    u = g.check_field(u)
    if np.any(c < 0):
        raise ValueError("div-coeff-grad coefficient must be nonnegative")
    return _div_form(c, u, g)


def transport_div_form(c: np.ndarray, u: np.ndarray, g: Grid) -> np.ndarray:
    """Divergence form +<-div(c grad u)> without the sign gate on c.

    Intended for explicit transport terms (e.g. drift fluxes), whose
    coefficient is a solution extrapolation and may dip negative; the
    conservation and symmetry structure of the assembly is unchanged.
    """
    return _div_form(g.check_field(c), g.check_field(u), g)


def apply_lubrication(c: np.ndarray, u: np.ndarray, g: Grid) -> np.ndarray:
    """Apply L u = +div(c grad (Delta u)); periodic grids only, c >= 0."""
    if not g.fully_periodic:
        raise ValueError("the fourth-order operator requires a periodic grid")
    c = g.check_field(c)
    u = g.check_field(u)
    if np.any(c < 0):
        raise ValueError("fourth-order coefficient must be nonnegative")
    return -_div_form(c, apply_laplacian(u, g), g)


# -- operator handles ---------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Operator:
    """Immutable handle for L in ``u_t + L u = 0``."""

    grid: Grid
    kind: str
    coeff: np.ndarray | None = None

    @classmethod
    def laplacian(cls, g: Grid) -> "Operator":
        return cls(grid=g, kind=LAPLACIAN)

    @classmethod
    def div_coeff_grad(cls, g: Grid, c: np.ndarray) -> "Operator":
        c = g.check_field(np.asarray(c, dtype=float))
        if np.any(c < 0):
            raise ValueError("div-coeff-grad coefficient must be nonnegative")
        return cls(grid=g, kind=DIV_COEFF_GRAD, coeff=c)

    @classmethod
    def lubrication(cls, g: Grid, c: np.ndarray) -> "Operator":
        if not g.fully_periodic:
            raise ValueError("the fourth-order operator requires a periodic grid")
        c = g.check_field(np.asarray(c, dtype=float))
        if np.any(c < 0):
            raise ValueError("fourth-order coefficient must be nonnegative")
        return cls(grid=g, kind=DIV_COEFF_GRAD_LAPLACIAN, coeff=c)

    def apply(self, u: np.ndarray) -> np.ndarray:
        g = self.grid
        if self.kind == LAPLACIAN:
            out = -apply_laplacian(u, g)
            if not g.all_active:
                out *= g.active
            return out
        if self.kind == DIV_COEFF_GRAD:
            return _div_form(self.coeff, g.check_field(u), g)
        return -_div_form(self.coeff, apply_laplacian(g.check_field(u), g), g)

    def quad(self, u: np.ndarray) -> float:
        """The bilinear form <L u, u> in the grid inner product."""
        return self.grid.inner(self.apply(u), u)

    def mean_coeff(self) -> float:
        if self.coeff is None:
            return 1.0
        return float(np.mean(self.coeff[self.grid.active]))


def _denom_second_order(g: Grid, sigma: float, cbar: float, kind: str) -> np.ndarray:
    if kind == LAPLACIAN:
        syms = [_axis_symbol_laplacian(g, ax) for ax in range(g.dim)]
    else:
        syms = [_axis_symbol_div(g, ax) for ax in range(g.dim)]
    return sigma + cbar * _outer_sum(syms)


def _denom_fourth_order(g: Grid, sigma: float, cbar: float) -> np.ndarray:
    s_div = _outer_sum([_axis_symbol_div(g, ax) for ax in range(g.dim)])
    s_lap = _outer_sum([_axis_symbol_laplacian(g, ax) for ax in range(g.dim)])
    return sigma + cbar * s_div * s_lap


# -- Krylov kernels -----------------------------------------------------------


def _wdot(w: np.ndarray, a: np.ndarray, b: np.ndarray) -> float:
    return float(np.sum(w * a * b))


def _pcg(matvec, precond, b, w, tol, maxit, x0=None):
    """Preconditioned conjugate gradients in the weighted inner product;
    convergence judged on the true residual, restarting the recursion if the
    recursive residual has drifted."""
    bnorm = np.sqrt(_wdot(w, b, b))
    if bnorm == 0.0:
        return np.zeros_like(b), SolverReport(0, 0.0, True)
    x = np.zeros_like(b) if x0 is None else x0.astype(float).copy()
    total = 0
    relres = np.inf
    while total < maxit:
        r = b - matvec(x)
        relres = np.sqrt(_wdot(w, r, r)) / bnorm
        if relres <= tol:
            return x, SolverReport(total, relres, True)
        z = precond(r)
        p = z.copy()
        rz = _wdot(w, r, z)
        while total < maxit:
            total += 1
            Ap = matvec(p)
            alpha = rz / _wdot(w, p, Ap)
            x += alpha * p
            r -= alpha * Ap
            if np.sqrt(_wdot(w, r, r)) <= 0.5 * tol * bnorm:
                break
            z = precond(r)
            rz_new = _wdot(w, r, z)
            p = z + (rz_new / rz) * p
            rz = rz_new
    res = b - matvec(x)
    relres = np.sqrt(_wdot(w, res, res)) / bnorm
    return x, SolverReport(total, relres, bool(relres <= tol))


def _pbicgstab(matvec, precond, b, w, tol, maxit, x0=None):
    """Restarted preconditioned BiCGStab; convergence judged on the true
    residual, with the recursive residual as the cheap inner gate."""
    bnorm = np.sqrt(_wdot(w, b, b))
    if bnorm == 0.0:
        return np.zeros_like(b), SolverReport(0, 0.0, True)
    x = np.zeros_like(b) if x0 is None else x0.astype(float).copy()
    total = 0
    relres = np.inf
    while total < maxit:
        r = b - matvec(x)
        relres = np.sqrt(_wdot(w, r, r)) / bnorm
        if relres <= tol:
            return x, SolverReport(total, relres, True)
        rhat = r.copy()
        rho = alpha = omega = 1.0
        v = np.zeros_like(b)
        p = np.zeros_like(b)
        used = 0
        while total < maxit:
            rho_new = _wdot(w, rhat, r)
            if rho_new == 0.0 or omega == 0.0:
                break  # breakdown: restart with a fresh shadow residual
            total += 1
            used += 1
            beta = (rho_new / rho) * (alpha / omega)
            rho = rho_new
            p = r + beta * (p - omega * v)
            phat = precond(p)
            v = matvec(phat)
            alpha = rho / _wdot(w, rhat, v)
            s = r - alpha * v
            if np.sqrt(_wdot(w, s, s)) <= 0.5 * tol * bnorm:
                x += alpha * phat
                break
            shat = precond(s)
            t = matvec(shat)
            omega = _wdot(w, t, s) / _wdot(w, t, t)
            x += alpha * phat + omega * shat
            r = s - omega * t
            if np.sqrt(_wdot(w, r, r)) <= 0.5 * tol * bnorm:
                break
        if used == 0:
            break  # immediate breakdown, no progress possible
    res = b - matvec(x)
    relres = np.sqrt(_wdot(w, res, res)) / bnorm
    return x, SolverReport(total, relres, bool(relres <= tol))


# -- shifted solves -----------------------------------------------------------


def _is_constant(c: np.ndarray, g: Grid) -> bool:
    vals = c[g.active]
    return bool(vals.max() == vals.min())


def solve_shifted(sigma: float, op: Operator, rhs: np.ndarray,
                  tol: float = DEFAULT_TOL, maxit: int = DEFAULT_MAXIT,
                  x0: np.ndarray | None = None):
    """Solve (sigma I + L) u = rhs for the SPD kinds.

    Constant-coefficient systems solve exactly in one transform pass
    (iterations = 0, residual reported as 0).  Variable coefficients use
    conjugate gradients in the weighted inner product, preconditioned by the
    constant-coefficient operator at the mean coefficient.
    """
    if sigma <= 0:
        raise ValueError("shift sigma must be positive")
    if op.kind == DIV_COEFF_GRAD_LAPLACIAN:
        raise ValueError("use solve_lubrication_shifted for the fourth-order kind")
    g = op.grid
    rhs = g.check_field(rhs)
    if op.kind == LAPLACIAN:
        denom = _denom_second_order(g, sigma, 1.0, LAPLACIAN)
        return _diag_solve(g, rhs, denom), SolverReport(0, 0.0, True)
    if _is_constant(op.coeff, g):
        cval = float(op.coeff[g.active][0]) if g.active.any() else 0.0
        denom = _denom_second_order(g, sigma, cval, DIV_COEFF_GRAD)
        return _diag_solve(g, rhs, denom), SolverReport(0, 0.0, True)
    denom = _denom_second_order(g, sigma, op.mean_coeff(), DIV_COEFF_GRAD)
    matvec = lambda v: sigma * v + op.apply(v)
    precond = lambda r: _diag_solve(g, r, denom)
    u, report = _pcg(matvec, precond, rhs, g.weights, tol, maxit, x0=x0)
    return u, report


def solve_lubrication_shifted(sigma: float, c: np.ndarray, rhs: np.ndarray,
                              g: Grid, tol: float = DEFAULT_TOL,
                              maxit: int = DEFAULT_MAXIT,
                              x0: np.ndarray | None = None):
    """Solve (sigma I + div(c grad Delta)) u = rhs on a periodic grid.

    The system is nonsymmetric for variable c, so BiCGStab is used,
    preconditioned by the constant-coefficient fourth-order operator at the
    mean coefficient (inverted by Fourier diagonalization).
    """
    if sigma <= 0:
        raise ValueError("shift sigma must be positive")
    op = Operator.lubrication(g, c)
    rhs = g.check_field(rhs)
    if _is_constant(op.coeff, g):
        denom = _denom_fourth_order(g, sigma, float(op.coeff.flat[0]))
        return _diag_solve(g, rhs, denom), SolverReport(0, 0.0, True)
    denom = _denom_fourth_order(g, sigma, op.mean_coeff())
    matvec = lambda v: sigma * v + op.apply(v)
    precond = lambda r: _diag_solve(g, r, denom)
    u, report = _pbicgstab(matvec, precond, rhs, g.weights, tol, maxit, x0=x0)
    return u, report


def solve_operator(sigma: float, op: Operator, rhs: np.ndarray,
                   tol: float = DEFAULT_TOL, maxit: int = DEFAULT_MAXIT,
                   x0: np.ndarray | None = None):
    """Dispatch a shifted solve to the right method for the operator kind."""
    if op.kind == DIV_COEFF_GRAD_LAPLACIAN:
        return solve_lubrication_shifted(sigma, op.coeff, rhs, op.grid,
                                         tol=tol, maxit=maxit, x0=x0)
    return solve_shifted(sigma, op, rhs, tol=tol, maxit=maxit, x0=x0)


def solve_conservative_poisson(g: Grid, rhs: np.ndarray, scale: float) -> np.ndarray:
    """Solve scale * (-Delta) phi = rhs with the zero-weighted-mean gauge.

    Requires a grid without essential boundaries (all periodic/Neumann axes),
    where the operator annihilates constants; the zero mode of the right side
    is projected out, so the caller should check compatibility beforehand.
    """
    if any(bc == DIRICHLET for bc in g.bcs):
        raise ValueError("conservative Poisson solve needs periodic/Neumann axes")
    if scale <= 0:
        raise ValueError("scale must be positive")
    denom = _denom_second_order(g, 0.0, scale, LAPLACIAN)
    v = _forward(g, rhs)
    zero = (0,) * g.dim
    denom = denom.copy()
    denom[zero] = 1.0
    v = v / denom
    v[zero] = 0.0
    v = _backward(g, v)
    if np.iscomplexobj(v):
        v = v.real
    return np.ascontiguousarray(v)
