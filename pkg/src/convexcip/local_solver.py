"""Steps 2 and 3: adjoint-state refinement of the coefficient from the
time-domain misfit, and re-optimisation on a reduced interval."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numba
import numpy as np

from .forward import (
    CFLError,
    CoefficientProfile,
    IncidentWave,
    SpaceTimeGrid,
    TimeTraces,
    _leapfrog,
    check_cfl,
    incident_acceleration,
)
from .optim import ConvergenceReport, OptimizerConfig, lbfgs


@dataclass(frozen=True)
class MisfitConfig:
    """Settings of the time-domain misfit.

    ``per_sample`` makes ``alpha`` weigh the penalty against the data
    residual counted in time samples (trapezoid weights 1/2, 1, ..., 1, 1/2)
    rather than in seconds, the way a sampled-data least-squares code
    would.  The functional itself stays in physical units, so the penalty
    weight becomes ``alpha * dt``; with ``per_sample=False`` it is ``alpha``.
    """

    alpha: float = 1e-3
    epsilon: float = 0.2
    b: float = 0.4
    grid: SpaceTimeGrid = field(default_factory=lambda: SpaceTimeGrid(0.0, 0.5, 0.005, 2.0, 0.001))
    incident: IncidentWave = field(default_factory=IncidentWave)
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    per_sample: bool = True

    def __post_init__(self):
        if self.alpha < 0:
            raise ValueError("alpha must be nonnegative")
        if not self.epsilon > 0:
            raise ValueError("epsilon must be positive")
        if abs(self.grid.x_left) > 1e-12:
            raise ValueError("the local problem lives on (0, g); grid must start at x = 0")

    @property
    def penalty_weight(self) -> float:
        return self.alpha * self.grid.dt if self.per_sample else self.alpha

    @property
    def n_inside(self) -> int:
        """Number of grid nodes strictly inside (0, b)."""
        return int(round(self.b / self.grid.dx)) - 1


def _values(c, cfg: MisfitConfig) -> np.ndarray:
    if isinstance(c, CoefficientProfile):
        c = c.on(cfg.grid.x).values
    c = np.asarray(c, dtype=float)
    if c.shape != (cfg.grid.nx,):
        raise ValueError(f"expected {cfg.grid.nx} coefficient values on (0, g), got {c.shape}")
    return c


class LocalProblem:
    """Neumann-driven forward problem on ``(0, g)`` with its discrete adjoint.

    The forward data term is ``0.5 sum_n w_n (u(0, t_n) - p1_n)^2`` with
    trapezoid weights ``w_n``; the gradient is the exact derivative of this
    discrete misfit, obtained by marching the adjoint field backwards in
    time.
    """

    def __init__(self, traces: TimeTraces, cfg: MisfitConfig | None = None):
        self.cfg = cfg or MisfitConfig()
        grid = self.cfg.grid
        if traces.p1.shape != (grid.nt,):
            raise ValueError("trace length does not match the time grid")
        inc = self.cfg.incident
        self.traces = traces
        self.accel = incident_acceleration(grid, inc)
        self.u_inc0 = inc(0.0, grid.t)
        self.flux = traces.p2 - inc.dx(0.0, grid.t)
        w = np.full(grid.nt, grid.dt)
        w[0] = w[-1] = 0.5 * grid.dt
        self.tweights = w

    def forward(self, c) -> np.ndarray:
        c = _values(c, self.cfg)
        grid = self.cfg.grid
        check_cfl(c, grid.dx, grid.dt)
        return _leapfrog(c, self.accel, grid.dx, grid.dt, True, self.flux)

    def trace(self, c) -> np.ndarray:
        return self.u_inc0 + self.forward(c)[:, 0]

    def data_misfit(self, c) -> float:
        r = self.trace(c) - self.traces.p1
        return 0.5 * float(np.sum(self.tweights * r * r))

    def adjoint(self, c, residual) -> np.ndarray:
        """Adjoint field ``eta[n, i]`` for the boundary residual ``p1 - u(0, t)``.

        ``eta[n]`` multiplies the update that produces time level ``n + 1``,
        so the last slice is identically zero.
        """
        c = _values(c, self.cfg)
        grid = self.cfg.grid
        check_cfl(c, grid.dx, grid.dt)
        seed = -self.tweights * np.asarray(residual, dtype=float)
        return _adjoint_sweep(c, grid.dx, grid.dt, seed)

    def data_gradient(self, c) -> tuple[float, np.ndarray]:
        """Misfit and its derivative with respect to every node value of ``c``."""
        c = _values(c, self.cfg)
        grid = self.cfg.grid
        us = self.forward(c)
        r = self.u_inc0 + us[:, 0] - self.traces.p1
        val = 0.5 * float(np.sum(self.tweights * r * r))
        eta = _adjoint_sweep(c, grid.dx, grid.dt, self.tweights * r)
        grad = _coefficient_gradient(c, us, eta, self.accel, self.flux, grid.dx, grid.dt)
        return val, grad


@numba.njit(cache=True)
def _adjoint_sweep(c, dx, dt, seed):
    """Reverse-mode sweep through ``_leapfrog`` (Neumann left, Mur right).

    ``seed[n]`` is the derivative of the misfit with respect to ``u[n, 0]``.
    """
    nt = seed.size
    nx = c.size
    g = nx - 1
    r = dt * dt / (dx * dx)
    kappa = (dt - dx) / (dt + dx)
    ubar = np.zeros((nt, nx))
    eta = np.zeros((nt, nx))
    for n in range(nt):
        ubar[n, 0] = seed[n]
    for n in range(nt - 2, 0, -1):
        # u[n+1] is final: all of its consumers (later steps) are processed
        lam = ubar[n + 1].copy()
        # Mur node: u[n+1,g] = u[n,g-1] + kappa (u[n+1,g-1] - u[n,g])
        lg = lam[g]
        ubar[n, g - 1] += lg
        lam[g - 1] += kappa * lg
        ubar[n, g] -= kappa * lg
        lam[g] = 0.0
        for i in range(g):
            li = lam[i]
            if li == 0.0:
                continue
            ri = r / c[i]
            ubar[n, i] += (2.0 - 2.0 * ri) * li
            ubar[n - 1, i] -= li
            ubar[n, i + 1] += ri * li
            if i > 0:
                ubar[n, i - 1] += ri * li
            else:
                ubar[n, 1] += ri * li
        for i in range(nx):
            eta[n, i] = lam[i]
    return eta


@numba.njit(cache=True)
def _coefficient_gradient(c, u, eta, accel, flux, dx, dt):
    """``dM/dc_i = -sum_n eta[n, i] dt^2 / c_i^2 (u_xx + a)`` at interior and left nodes."""
    nt, nx = u.shape
    g = nx - 1
    grad = np.zeros(nx)
    inv_dx2 = 1.0 / (dx * dx)
    for n in range(1, nt - 1):
        for i in range(g):
            e = eta[n, i]
            if e == 0.0:
                continue
            if i > 0:
                lap = (u[n, i + 1] - 2.0 * u[n, i] + u[n, i - 1]) * inv_dx2
            else:
                ghost = u[n, 1] - 2.0 * dx * flux[n]
                lap = (u[n, 1] - 2.0 * u[n, 0] + ghost) * inv_dx2
            grad[i] -= e * dt * dt * (lap + accel[n, i]) / (c[i] * c[i])
    return grad


def h1_penalty(d, dx: float) -> tuple[float, np.ndarray]:
    """Squared discrete H1 norm ``dx sum d_i^2 + sum (d_{i+1} - d_i)^2 / dx`` and its gradient."""
    d = np.asarray(d, dtype=float)
    diff = np.diff(d)
    val = dx * float(np.sum(d * d)) + float(np.sum(diff * diff)) / dx
    grad = 2.0 * dx * d
    grad[:-1] -= 2.0 * diff / dx
    grad[1:] += 2.0 * diff / dx
    return val, grad


class MisfitFunctional:
    """``M(c) = data misfit + 0.5 w ||c - c_ref||^2_{H1(0, b)}`` over nodes in ``(0, b1)``,
    with ``w = cfg.penalty_weight``."""

    def __init__(self, traces: TimeTraces, c_ref, cfg: MisfitConfig | None = None, b1: float | None = None):
        self.cfg = cfg or MisfitConfig()
        self.problem = LocalProblem(traces, self.cfg)
        self.c_ref = _values(c_ref, self.cfg)
        dx = self.cfg.grid.dx
        self.nb = int(round(self.cfg.b / dx))  # index of x = b
        n_free = self.cfg.n_inside if b1 is None else int(np.ceil(b1 / dx - 1e-9)) - 1
        self.free = np.arange(1, 1 + max(n_free, 0))

    def embed(self, x, base) -> np.ndarray:
        c = np.array(base, dtype=float)
        c[self.free] = x
        return c

    def full_value_and_grad(self, c):
        c = _values(c, self.cfg)
        val, grad = self.problem.data_gradient(c)
        if self.cfg.alpha > 0:
            sl = slice(0, self.nb + 1)
            pen, pgrad = h1_penalty(c[sl] - self.c_ref[sl], self.cfg.grid.dx)
            val += 0.5 * self.cfg.penalty_weight * pen
            grad[sl] += 0.5 * self.cfg.penalty_weight * pgrad
        return val, grad

    def value(self, c) -> float:
        c = _values(c, self.cfg)
        val = self.problem.data_misfit(c)
        if self.cfg.alpha > 0:
            sl = slice(0, self.nb + 1)
            val += 0.5 * self.cfg.penalty_weight * h1_penalty(c[sl] - self.c_ref[sl], self.cfg.grid.dx)[0]
        return val


def forward_neumann(c, p2, grid: SpaceTimeGrid | None = None, incident: IncidentWave | None = None) -> np.ndarray:
    """Total field trace ``u(0, t)`` of the Neumann-driven problem on ``(0, g)``."""
    cfg = MisfitConfig(grid=grid) if grid is not None else MisfitConfig()
    if incident is not None:
        cfg = MisfitConfig(grid=cfg.grid, incident=incident)
    t = cfg.grid.t
    traces = TimeTraces(t, np.zeros_like(t), np.asarray(p2, dtype=float), cfg.grid.dt)
    return LocalProblem(traces, cfg).trace(c)


def misfit(c, traces: TimeTraces, c_ref, cfg: MisfitConfig | None = None) -> float:
    return MisfitFunctional(traces, c_ref, cfg).value(c)


def misfit_gradient(c, traces: TimeTraces, c_ref, cfg: MisfitConfig | None = None) -> np.ndarray:
    """Gradient on the ``dx`` grid of ``(0, g)``; zero outside ``(0, b)``."""
    fun = MisfitFunctional(traces, c_ref, cfg)
    _, grad = fun.full_value_and_grad(c)
    out = np.zeros_like(grad)
    out[fun.free] = grad[fun.free]
    return out


def adjoint_solve(c, residual, cfg: MisfitConfig | None = None) -> np.ndarray:
    cfg = cfg or MisfitConfig()
    t = cfg.grid.t
    dummy = TimeTraces(t, np.zeros_like(t), np.zeros_like(t), cfg.grid.dt)
    return LocalProblem(dummy, cfg).adjoint(c, residual)


@dataclass
class LocalResult:
    profile: CoefficientProfile
    report: ConvergenceReport
    b1: float | None = None
    b1_flagged: bool = False
    warnings: list = field(default_factory=list)


def _run(fun: MisfitFunctional, c_init, cfg: MisfitConfig) -> LocalResult:
    base = _values(c_init, cfg).copy()
    base[fun.nb:] = 1.0
    base[0] = 1.0
    notes = []
    low = [False]

    def f(x):
        c = fun.embed(x, base)
        if np.min(c) < 0.05:
            low[0] = True
        try:
            val, grad = fun.full_value_and_grad(c)
        except CFLError:
            # rejected by the line search
            return np.inf, np.zeros_like(x)
        return val, grad[fun.free]

    x0 = base[fun.free]
    x, report = lbfgs(f, x0, cfg.optimizer)
    c = fun.embed(x, base)
    if low[0]:
        msg = "an iterate dropped below c = 0.05"
        notes.append(msg)
        warnings.warn(msg, RuntimeWarning, stacklevel=3)
    return LocalResult(CoefficientProfile(cfg.grid.x, c), report, warnings=notes)


def minimize_local(c_init, traces: TimeTraces, c_ref, cfg: MisfitConfig | None = None) -> LocalResult:
    cfg = cfg or MisfitConfig()
    return _run(MisfitFunctional(traces, c_ref, cfg), c_init, cfg)


def reduce_interval(profile: CoefficientProfile, epsilon: float, b: float) -> tuple[float, bool]:
    """Smallest node ``x`` in ``(0, b)`` with ``|c(x) - 1| <= eps`` after some
    earlier node in ``(0, x)`` exceeded ``eps``.  Returns ``(b1, flagged)``;
    ``flagged`` means no such node exists and ``b`` is returned."""
    x = profile.x
    dev = np.abs(profile.values - 1.0)
    seen = False
    for xi, di in zip(x, dev):
        if xi <= 0 or xi >= b:
            continue
        if seen and di <= epsilon:
            return round(float(xi), 12), False
        seen = seen or di > epsilon
    return float(b), True


def step3_refine(c_local1, traces: TimeTraces, c_ref, cfg: MisfitConfig | None = None) -> LocalResult:
    """Re-optimise on ``(0, b1)`` with ``c = 1`` frozen on ``[b1, b)``."""
    cfg = cfg or MisfitConfig()
    prof = c_local1 if isinstance(c_local1, CoefficientProfile) else CoefficientProfile(cfg.grid.x, c_local1)
    b1, flagged = reduce_interval(prof, cfg.epsilon, cfg.b)
    init = _values(prof, cfg).copy()
    if not flagged:
        init[cfg.grid.x >= b1 - 1e-12] = 1.0
    fun = MisfitFunctional(traces, c_ref, cfg, b1=None if flagged else b1)
    res = _run(fun, init, cfg)
    res.b1, res.b1_flagged = b1, flagged
    return res
