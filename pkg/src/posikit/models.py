"""The four concrete PDE drivers.

Each single-field model supplies the pieces the stepper needs per step: an
operator handle (possibly rebuilt from lagged solution history), an explicit
source, initial data, and, where available, a reference solution.  The
electrodiffusion system couples two species through a potential and ships
with its own step/run drivers.

Models are immutable configuration plus pure assembly functions and are safe
to share between runs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .grid import DIRICHLET, NEUMANN, PERIODIC, build_grid
from .operators import (Operator, solve_conservative_poisson,
                        transport_div_form)
from .stepper import (History, StepDiagnostics, StepOptions, bdf_tableau,
                      correct_mass_conserving, predict)

_STAR_FLOOR = 1e-14


def extrapolate_star(un: np.ndarray, unm1: np.ndarray) -> np.ndarray:
    """Positivity-preserving two-level extrapolation.

    Rising nodes extrapolate linearly (2 u^n - u^{n-1}); falling nodes use the
    harmonic form 1/(2/u^n - 1/u^{n-1}), which stays positive.  Nodes at or
    below 1e-14 return 0, the continuous limit of the harmonic branch.
    """
    un = np.asarray(un, dtype=float)
    unm1 = np.asarray(unm1, dtype=float)
    if np.any(un < 0) or np.any(unm1 < 0):
        raise ValueError("extrapolation requires nonnegative history")
    linear = 2.0 * un - unm1
    denom = 2.0 / np.maximum(un, _STAR_FLOOR) - 1.0 / np.maximum(unm1, _STAR_FLOOR)
    harmonic = 1.0 / denom
    star = np.where(un >= unm1, linear, harmonic)
    return np.where(un <= _STAR_FLOOR, 0.0, star)


def _clamped_star(hist: History, k: int) -> np.ndarray:
    """History extrapolation for lagged coefficients, floored at zero.

    The uncorrected baseline variant keeps solver-level negative noise in its
    history; the lagged coefficient must stay nonnegative for the operator to
    be well posed, so history levels are floored before extrapolating.  For
    corrected variants the floor is a no-op.
    """
    u0 = np.maximum(hist.us[0], 0.0)
    if k >= 2 and len(hist.us) >= 2:
        return extrapolate_star(u0, np.maximum(hist.us[1], 0.0))
    return u0


# -- phase-field relaxation on the periodic square ------------------------------

_EXTRAP_COEFFS = {1: (1.0,), 2: (2.0, -1.0), 3: (3.0, -3.0, 1.0),
                  4: (4.0, -6.0, 4.0, -1.0)}


@dataclass
class AllenCahnModel:
    """u_t - Delta u + (1/eps2) u(u-1)(u-1/2) = 0 on [0, 2pi)^2, periodic.

    The double-well reaction is treated explicitly at an order-matched
    extrapolation of the history; the Laplacian is implicit.  Solutions of
    the continuous problem stay in [0, 1]; only the lower bound is enforced,
    the maximum is recorded by the run diagnostics.
    """

    eps2: float = 0.001
    n: int = 32

    def __post_init__(self):
        if self.eps2 <= 0:
            raise ValueError("interface parameter must be positive")
        self.grid = build_grid(((0.0, 2.0 * np.pi), (0.0, 2.0 * np.pi)),
                               (self.n, self.n), PERIODIC)
        self._op = Operator.laplacian(self.grid)

    def initial_state(self) -> np.ndarray:
        X, Y = self.grid.coords()
        eps = np.sqrt(self.eps2)
        r = np.sqrt((X - np.pi) ** 2 + (Y - np.pi) ** 2)
        return 0.5 * (1.0 + np.tanh((1.0 - r) / (np.sqrt(2.0) * eps)))

    def operator(self, hist: History, k: int) -> Operator:
        return self._op

    def explicit_source(self, hist: History, k: int) -> np.ndarray:
        coeffs = _EXTRAP_COEFFS[min(k, len(hist.us))]
        star = coeffs[0] * hist.us[0]
        for c, u in zip(coeffs[1:], hist.us[1:]):
            star = star + c * u
        return -(1.0 / self.eps2) * star * (star - 1.0) * (star - 0.5)


# -- degenerate diffusion with a moving interface -------------------------------


def barenblatt(x, t: float, m: float, C: float = 1.0):
    """Compactly supported self-similar diffusion profile.

    ``x`` is a coordinate array (1D) or a tuple of coordinate arrays; the
    radial argument is the squared distance from the origin.  Requires m > 1.
    """
    if m <= 1:
        raise ValueError("the self-similar profile needs m > 1")
    if isinstance(x, (tuple, list)):
        r2 = sum(np.asarray(xi, dtype=float) ** 2 for xi in x)
    else:
        r2 = np.asarray(x, dtype=float) ** 2
    alpha = 1.0 / (m + 1.0)
    t0 = t + 1.0
    core = C - alpha * (m - 1.0) / (2.0 * m) * r2 / t0 ** (2.0 * alpha)
    return t0 ** (-alpha) * np.maximum(core, 0.0) ** (1.0 / (m - 1.0))


def pme_operator(hist: History, m: float, k: int = 2) -> Operator:
    """Lagged diffusion handle with coefficient m * star^(m-1) >= 0."""
    star = _clamped_star(hist, k)
    if m == 1:
        c = np.ones(hist.grid.shape)
    else:
        c = m * star ** (m - 1.0)
    return Operator.div_coeff_grad(hist.grid, c)


@dataclass
class PorousMediumModel:
    """u_t = Delta(u^m) on (-5, 5)^d with homogeneous Dirichlet boundaries."""

    m: float = 2.0
    n: int = 128
    dim: int = 1
    C: float = 1.0
    mass_mode: bool = False

    def __post_init__(self):
        if self.m < 1:
            raise ValueError("exponent must be at least 1")
        extents = ((-5.0, 5.0),) * self.dim
        self.grid = build_grid(extents, (self.n,) * self.dim, DIRICHLET)

    def initial_state(self) -> np.ndarray:
        return self.exact(0.0)

    def exact(self, t: float) -> np.ndarray:
        coords = self.grid.coords()
        x = coords[0] if self.dim == 1 else coords
        u = barenblatt(x, t, self.m, self.C)
        return np.where(self.grid.active, u, 0.0)

    def operator(self, hist: History, k: int) -> Operator:
        return pme_operator(hist, self.m, k)

    def explicit_source(self, hist: History, k: int) -> Optional[np.ndarray]:
        return None


# -- electrodiffusion of two ion species ---------------------------------------


@dataclass
class PnpModel:
    """Two-species drift-diffusion coupled to a potential, Neumann box (-1,1)^2.

    Both concentrations must stay nonnegative and conserve their individual
    mass, so each carries its own nodal and scalar multiplier pair; the
    potential solves a pure-Neumann Poisson problem whose compatibility needs
    the two masses to match, and is gauged to weighted mean zero.
    """

    eps_debye: float = 0.1
    n: int = 64

    def __post_init__(self):
        if self.eps_debye <= 0:
            raise ValueError("Debye ratio must be positive")
        self.grid = build_grid(((-1.0, 1.0), (-1.0, 1.0)),
                               (self.n, self.n), NEUMANN)
        self._lap = Operator.laplacian(self.grid)

    def initial_state(self) -> tuple[np.ndarray, np.ndarray]:
        X, Y = self.grid.coords()
        disc = (X**2 + Y**2 <= 0.25).astype(float)
        return disc, disc.copy()

    def potential(self, p: np.ndarray, nfield: np.ndarray) -> np.ndarray:
        """Solve eps^2 (-Delta) phi = p - n with the mean-zero gauge."""
        g = self.grid
        rho = p - nfield
        if abs(g.mass(rho)) > 1e-8 * max(1.0, g.mass(p)):
            raise ValueError("species masses differ; potential solve is "
                             "incompatible")
        return solve_conservative_poisson(g, rho, self.eps_debye**2)


@dataclass
class PnpState:
    hist_p: History
    hist_n: History
    phis: list  # newest first, at most two levels
    target_p: float
    target_n: float


def pnp_start(model: PnpModel) -> PnpState:
    p0, n0 = model.initial_state()
    phi0 = model.potential(p0, n0)
    g = model.grid
    return PnpState(History.start(g, p0), History.start(g, n0), [phi0],
                    target_p=g.mass(p0), target_n=g.mass(n0))


def pnp_step(state: PnpState, model: PnpModel, opts: StepOptions):
    """Advance both species and the potential by one step.

    The species predictions are decoupled constant-coefficient solves: the
    drift divergence is assembled explicitly at the linear extrapolations
    p*, n*, phi* and moved to the right side.  Each species then runs the
    mass-conserving positivity correction with its own multiplier pair, and
    the potential is recomputed from the corrected concentrations.

    Returns (p, lam_p, xi_p, n, lam_n, xi_n, phi) plus the per-species
    diagnostics.
    """
    g = model.grid
    hp, hn = state.hist_p, state.hist_n
    k_eff = min(opts.k, hp.nstep + 1)
    tab = bdf_tableau(k_eff)
    if k_eff >= 2 and len(state.phis) >= 2:
        p_star = 2.0 * hp.us[0] - hp.us[1]
        n_star = 2.0 * hn.us[0] - hn.us[1]
        phi_star = 2.0 * state.phis[0] - state.phis[1]
    else:
        p_star, n_star, phi_star = hp.us[0], hn.us[0], state.phis[0]

    src_p = -transport_div_form(p_star, phi_star, g)
    src_n = transport_div_form(n_star, phi_star, g)

    diags = []
    results = []
    for hist, src, target in ((hp, src_p, state.target_p),
                              (hn, src_n, state.target_n)):
        u_tilde, report = predict(hist, tab, model._lap, opts.dt,
                                  mass_mode=True, source=src,
                                  solver_tol=opts.solver_tol,
                                  solver_maxit=opts.solver_maxit)
        out = correct_mass_conserving(u_tilde, hist, tab, opts.dt, target,
                                      eps_lb=0.0, secant_tol=opts.secant_tol,
                                      secant_maxit=opts.secant_maxit)
        act = g.active
        diags.append(StepDiagnostics(
            step=hist.nstep + 1, t=hist.t + opts.dt, mass=g.mass(out.u_next),
            min_u=float(out.u_next[act].min()),
            max_u=float(out.u_next[act].max()), norm_u=g.norm(out.u_next),
            xi=out.xi_next, secant_iterations=out.secant_iterations,
            active_count=out.active_count,
            solver_iterations=report.iterations,
            solver_residual=report.residual, op_quad=float("nan")))
        hist.push(out.u_next, out.lambda_next, out.xi_next, opts.dt)
        results.append(out)

    phi = model.potential(hp.us[0], hn.us[0])
    state.phis.insert(0, phi)
    del state.phis[2:]
    out_p, out_n = results
    return (out_p.u_next, out_p.lambda_next, out_p.xi_next,
            out_n.u_next, out_n.lambda_next, out_n.xi_next, phi), diags


@dataclass
class PnpRunResult:
    state: PnpState
    diagnostics_p: list
    diagnostics_n: list


def run_pnp(model: PnpModel, opts: StepOptions, n_steps: int,
            on_step=None) -> PnpRunResult:
    state = pnp_start(model)
    dp, dn = [], []
    for _ in range(n_steps):
        _, (diag_p, diag_n) = pnp_step(state, model, opts)
        dp.append(diag_p)
        dn.append(diag_n)
        if on_step is not None:
            on_step(state, diag_p, diag_n)
    return PnpRunResult(state, dp, dn)


# -- thin-film (fourth-order) flow ----------------------------------------------

MODE_FLOOR = "floor"
MODE_REG_ETA = "reg_eta"


def lubrication_f_eta(u: np.ndarray, rho: float, eta: float) -> np.ndarray:
    """Mobility regularization u^4 f(u) / (eta f(u) + u^4) with f(u) = u^rho.

    Continuous at zero with value 0; reduces to f for eta = 0.
    """
    u = np.asarray(u, dtype=float)
    pos = u > 0
    up = np.where(pos, u, 1.0)
    f = up**rho
    out = up**4 * f / (eta * f + up**4)
    return np.where(pos, out, 0.0)


@dataclass
class LubricationModel:
    """u_t + div(f(u) grad Delta u) = 0 with f(u) = u^rho, periodic domain.

    Exactly one regularization is active: either the mobility is replaced by
    its eta-regularized form (mode ``reg_eta``, lower bound 0), or the
    solution is kept above a positive floor eps_lb by the multiplier (mode
    ``floor``, plain mobility).
    """

    rho: float = 0.5
    mode: str = MODE_FLOOR
    eps_lb: float = 1e-2
    eta: float = 0.0
    n: int = 256
    dim: int = 1

    def __post_init__(self):
        if self.mode == MODE_FLOOR:
            if self.eps_lb <= 0:
                raise ValueError("floor mode needs a positive lower bound")
            if self.eta != 0:
                raise ValueError("floor mode does not take eta")
        elif self.mode == MODE_REG_ETA:
            if self.eta <= 0:
                raise ValueError("reg_eta mode needs a positive eta")
            self.eps_lb = 0.0
        else:
            raise ValueError(f"unknown regularization mode {self.mode!r}")
        if self.dim == 1:
            self.grid = build_grid((-1.0, 1.0), self.n, PERIODIC)
        else:
            self.grid = build_grid(((-np.pi, np.pi), (-np.pi, np.pi)),
                                   (self.n, self.n), PERIODIC)

    def initial_state(self) -> np.ndarray:
        if self.dim == 1:
            x = self.grid.axes[0]
            return 0.8 - np.cos(np.pi * x) + 0.25 * np.cos(2.0 * np.pi * x)
        X, Y = self.grid.coords()
        return np.where(X**2 + Y**2 <= 0.25,
                        (X - 0.5) ** 2 * (Y - 0.5) ** 2, 0.0)

    def mobility(self, star: np.ndarray) -> np.ndarray:
        if self.mode == MODE_REG_ETA:
            return lubrication_f_eta(star, self.rho, self.eta)
        return star**self.rho

    def operator(self, hist: History, k: int) -> Operator:
        star = _clamped_star(hist, k)
        return Operator.lubrication(self.grid, self.mobility(star))

    def explicit_source(self, hist: History, k: int) -> Optional[np.ndarray]:
        return None
