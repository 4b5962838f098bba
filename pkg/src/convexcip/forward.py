"""Finite-difference simulation of the 1-d scattered wave.

The total field ``u = u_i + u_s`` solves ``c u_tt = u_xx`` with a
right-going incident pulse ``u_i(x, t) = f(t - |x - x0|)``.  The scattered
part satisfies ``c u_s,tt - u_s,xx = (1 - c) u_i,tt`` on ``(k, g)`` with
first-order absorbing conditions at both ends.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numba
import numpy as np


@dataclass(frozen=True)
class Waveform:
    """``f(t) = A (t - delay) exp(-omega^2 (t - delay)^2)`` with ``A = sqrt(2) omega e^{1/2}``."""

    omega: float = 30.0
    delay: float = 0.2

    @property
    def amplitude(self) -> float:
        return np.sqrt(2.0) * self.omega * np.exp(0.5)

    def __call__(self, t):
        u = np.asarray(t, dtype=float) - self.delay
        return self.amplitude * u * np.exp(-self.omega**2 * u**2)

    def d1(self, t):
        u = np.asarray(t, dtype=float) - self.delay
        w2 = self.omega**2
        return self.amplitude * np.exp(-w2 * u**2) * (1.0 - 2.0 * w2 * u**2)

    def d2(self, t):
        u = np.asarray(t, dtype=float) - self.delay
        w2 = self.omega**2
        return self.amplitude * np.exp(-w2 * u**2) * (-2.0 * w2 * u) * (3.0 - 2.0 * w2 * u**2)


def source_waveform(t, waveform: Waveform | None = None):
    return (waveform or Waveform())(t)


@dataclass(frozen=True)
class IncidentWave:
    waveform: Waveform = field(default_factory=Waveform)
    x0: float = -0.2

    def _arg(self, x, t):
        x, t = np.broadcast_arrays(np.asarray(x, dtype=float), np.asarray(t, dtype=float))
        dist = np.abs(x - self.x0)
        return t - dist, t >= dist, np.sign(x - self.x0)

    def __call__(self, x, t):
        tau, on, _ = self._arg(x, t)
        return np.where(on, self.waveform(tau), 0.0)

    def dt2(self, x, t):
        tau, on, _ = self._arg(x, t)
        return np.where(on, self.waveform.d2(tau), 0.0)

    def dx(self, x, t):
        tau, on, sgn = self._arg(x, t)
        return np.where(on, -sgn * self.waveform.d1(tau), 0.0)

    def onset(self, x, widths: float = 4.0) -> float:
        """Time before which the pulse is below ``exp(-widths^2)`` of its scale at ``x``."""
        return abs(x - self.x0) + self.waveform.delay - widths / self.waveform.omega


def incident_wave(x, t, incident: IncidentWave | None = None):
    return (incident or IncidentWave())(x, t)


@dataclass(frozen=True)
class SpaceTimeGrid:
    x_left: float = -0.2
    x_right: float = 0.5
    dx: float = 0.005
    t_final: float = 2.0
    dt: float = 0.001

    def __post_init__(self):
        if not self.x_left < self.x_right:
            raise ValueError("x_left must be below x_right")
        if not (self.dx > 0 and self.dt > 0 and self.t_final > 0):
            raise ValueError("dx, dt and t_final must be positive")
        for span, step, name in ((self.x_right - self.x_left, self.dx, "x"), (self.t_final, self.dt, "t")):
            n = span / step
            if abs(n - round(n)) > 1e-9 * max(1.0, n):
                raise ValueError(f"{name} extent is not an integer number of steps")

    @property
    def nx(self) -> int:
        return int(round((self.x_right - self.x_left) / self.dx)) + 1

    @property
    def nt(self) -> int:
        return int(round(self.t_final / self.dt)) + 1

    @property
    def x(self) -> np.ndarray:
        return self.x_left + self.dx * np.arange(self.nx)

    @property
    def t(self) -> np.ndarray:
        return self.dt * np.arange(self.nt)

    def index_of(self, x: float) -> int:
        i = (x - self.x_left) / self.dx
        if abs(i - round(i)) > 1e-6:
            raise ValueError(f"x={x} is not a grid node")
        return int(round(i))

    def restrict(self, x_left: float) -> "SpaceTimeGrid":
        return SpaceTimeGrid(x_left, self.x_right, self.dx, self.t_final, self.dt)


@dataclass(frozen=True)
class CoefficientProfile:
    """Grid function ``c(x)``; equals 1 outside the inclusion interval."""

    x: np.ndarray
    values: np.ndarray

    def __post_init__(self):
        x = np.asarray(self.x, dtype=float)
        v = np.asarray(self.values, dtype=float)
        if x.shape != v.shape:
            raise ValueError("profile nodes and values differ in shape")
        if not np.all(np.isfinite(v)):
            raise ValueError("profile contains non-finite values")
        object.__setattr__(self, "x", x)
        object.__setattr__(self, "values", v)

    @classmethod
    def homogeneous(cls, x) -> "CoefficientProfile":
        x = np.asarray(x, dtype=float)
        return cls(x, np.ones_like(x))

    @classmethod
    def from_function(cls, x, func) -> "CoefficientProfile":
        x = np.asarray(x, dtype=float)
        return cls(x, np.asarray(func(x), dtype=float) * np.ones_like(x))

    def on(self, x) -> "CoefficientProfile":
        """Linear interpolation onto new nodes, 1 outside the known range."""
        x = np.asarray(x, dtype=float)
        return CoefficientProfile(x, np.interp(x, self.x, self.values, left=1.0, right=1.0))


class CFLError(ValueError):
    pass


def check_cfl(c, dx: float, dt: float) -> None:
    cmin = float(np.min(c))
    if cmin <= 0:
        raise CFLError(f"coefficient must be positive for time stepping, min c = {cmin:g}")
    ratio = dt / (dx * np.sqrt(cmin))
    if ratio > 1.0:
        raise CFLError(f"CFL violated: dt / (dx sqrt(min c)) = {ratio:.4f} > 1")


@numba.njit(cache=True)
def _leapfrog(c, accel, dx, dt, neumann, left_flux):
    """March ``c u_tt - u_xx = (1 - c) accel``.

    Left end: Mur condition when ``neumann`` is false, otherwise a ghost node
    with ``(u_1 - u_{-1}) / (2 dx) = left_flux[n]``.  Right end: Mur.
    """
    nt, nx = accel.shape
    u = np.zeros((nt, nx))
    r = dt * dt / (dx * dx)
    kappa = (dt - dx) / (dt + dx)
    g = nx - 1
    for n in range(1, nt - 1):
        un = u[n]
        um = u[n - 1]
        up = u[n + 1]
        for i in range(1, g):
            lap = un[i + 1] - 2.0 * un[i] + un[i - 1]
            up[i] = 2.0 * un[i] - um[i] + (r * lap + dt * dt * (1.0 - c[i]) * accel[n, i]) / c[i]
        if neumann:
            ghost = un[1] - 2.0 * dx * left_flux[n]
            lap = un[1] - 2.0 * un[0] + ghost
            up[0] = 2.0 * un[0] - um[0] + (r * lap + dt * dt * (1.0 - c[0]) * accel[n, 0]) / c[0]
        else:
            up[0] = un[1] + kappa * (up[1] - un[0])
        up[g] = un[g - 1] + kappa * (up[g - 1] - un[g])
    return u


def _profile_values(profile, grid: SpaceTimeGrid) -> np.ndarray:
    if isinstance(profile, CoefficientProfile):
        if profile.x.shape != (grid.nx,) or not np.allclose(profile.x, grid.x, atol=1e-12):
            profile = profile.on(grid.x)
        return profile.values
    c = np.asarray(profile, dtype=float)
    if c.shape != (grid.nx,):
        raise ValueError(f"profile has {c.size} values, grid has {grid.nx} nodes")
    return c


def incident_acceleration(grid: SpaceTimeGrid, incident: IncidentWave) -> np.ndarray:
    return incident.dt2(grid.x[None, :], grid.t[:, None])


def solve_scattered(profile, grid: SpaceTimeGrid | None = None, incident: IncidentWave | None = None) -> np.ndarray:
    """Scattered field ``u_s[n, i]`` at ``(t_n, x_i)`` on the full interval ``(k, g)``."""
    grid = grid or SpaceTimeGrid()
    incident = incident or IncidentWave()
    c = _profile_values(profile, grid)
    check_cfl(c, grid.dx, grid.dt)
    accel = incident_acceleration(grid, incident)
    return _leapfrog(c, accel, grid.dx, grid.dt, False, np.zeros(grid.nt))


@dataclass(frozen=True)
class TimeTraces:
    """``p1(t) = u(0, t)`` and ``p2(t) = u_x(0, t)`` sampled every ``dt``."""

    t: np.ndarray
    p1: np.ndarray
    p2: np.ndarray
    dt: float
    meta: dict = field(default_factory=dict)


def extract_traces(
    field_s: np.ndarray, grid: SpaceTimeGrid | None = None, incident: IncidentWave | None = None
) -> TimeTraces:
    """Total-field traces at ``x = 0``.

    The scattered part of ``p2`` is the centred difference across ``x = 0``,
    which is the same stencil the Neumann-driven solver uses for its ghost
    node, so both solvers agree to rounding on noiseless data.
    """
    grid = grid or SpaceTimeGrid()
    incident = incident or IncidentWave()
    i0 = grid.index_of(0.0)
    t = grid.t
    p1 = incident(0.0, t) + field_s[:, i0]
    p2 = incident.dx(0.0, t) + (field_s[:, i0 + 1] - field_s[:, i0 - 1]) / (2.0 * grid.dx)
    meta = {"dx": grid.dx, "dt": grid.dt, "T": grid.t_final, "noise_level": 0.0, "seed": None}
    return TimeTraces(t, p1, p2, grid.dt, meta)


def simulate(profile, grid: SpaceTimeGrid | None = None, incident: IncidentWave | None = None) -> TimeTraces:
    grid = grid or SpaceTimeGrid()
    return extract_traces(solve_scattered(profile, grid, incident), grid, incident)


def add_noise(traces: TimeTraces, level: float, seed=None) -> TimeTraces:
    """Independent Gaussian noise on each series with ``||noise|| = level ||series||``.

    ``seed`` may be an int or a ``numpy.random.Generator``; noise is drawn
    for ``p1`` first, then ``p2``.
    """
    if level < 0:
        raise ValueError(f"noise level must be nonnegative, got {level}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    out = []
    for series in (traces.p1, traces.p2):
        e = rng.standard_normal(series.shape)
        norm = np.linalg.norm(e)
        out.append(series + e * (level * np.linalg.norm(series) / norm))
    meta = dict(traces.meta, noise_level=float(level), seed=None if isinstance(seed, np.random.Generator) else seed,
                noise_applied_to="p1,p2")
    return TimeTraces(traces.t, out[0], out[1], traces.dt, meta)
