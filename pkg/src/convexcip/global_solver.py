"""Step 1: minimise the Carleman-weighted discrete functional over the
Laguerre coefficients ``q_j^i`` and recover the coefficient from them.

Two representations share this code.  With plain boundary data the unknown
is the expansion of ``q`` itself and the residual is the second difference
plus the quadratic tensor term.  When the boundary data carry a background
position ``x0`` the unknown is the departure from ``(x - x0)/s^2`` and the
residual gains the linear term ``A (q^{i+1} - q^i) / h``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .basis import LaguerreBasis, PseudoFrequencyGrid
from .forward import CoefficientProfile
from .optim import ConvergenceReport, OptimizerConfig, lbfgs
from .transform import SpectralBoundaryData


@dataclass(frozen=True)
class CarlemanWeight:
    lam: float = 3.0

    def __call__(self, x):
        return np.exp(-self.lam * np.asarray(x, dtype=float))


@dataclass(frozen=True)
class SpatialGrid:
    """Uniform grid ``x_i = i h`` on ``[0, b]``."""

    b: float = 0.4
    h: float = 0.025

    @property
    def M(self) -> int:
        m = (self.b / self.h)
        if abs(m - round(m)) > 1e-9:
            raise ValueError("b / h must be an integer")
        m = int(round(m))
        if m < 4:
            raise ValueError(f"need at least 4 sub-intervals, got M={m}")
        return m

    @property
    def nodes(self) -> np.ndarray:
        return self.h * np.arange(self.M + 1)


@dataclass
class QGrid:
    """Laguerre coefficients ``values[i, j] = q_j(x_i)`` on the h-grid.

    Rows 0, 1 and M are tied to the boundary data; rows 2..M-1 are free.
    """

    values: np.ndarray
    grid: SpatialGrid
    boundary: SpectralBoundaryData
    report: ConvergenceReport | None = field(default=None, repr=False)

    @classmethod
    def from_free(cls, free, grid: SpatialGrid, boundary: SpectralBoundaryData) -> "QGrid":
        n = boundary.order
        M, h = grid.M, grid.h
        free = np.asarray(free, dtype=float).reshape(M - 2, n)
        q = np.empty((M + 1, n))
        q[0] = boundary.phi0
        q[1] = boundary.phi0 + h * boundary.psi0
        q[2:M] = free
        q[M] = q[M - 1] + h * boundary.psib
        return cls(q, grid, boundary)

    @classmethod
    def initial(cls, grid: SpatialGrid, boundary: SpectralBoundaryData) -> "QGrid":
        free = np.tile(boundary.phi0, (grid.M - 2, 1))
        return cls.from_free(free, grid, boundary)

    @property
    def free(self) -> np.ndarray:
        return self.values[2 : self.grid.M].ravel().copy()

    def h2_norm(self) -> float:
        """Discrete H2-type norm; the admissible-set radius is monitored, not enforced."""
        h = self.grid.h
        q = self.values
        d1 = np.diff(q, axis=0) / h
        d2 = np.diff(q, 2, axis=0) / h**2
        return float(np.sqrt(h * (np.sum(q**2) + np.sum(d1**2) + np.sum(d2**2))))


def residuals(q: np.ndarray, tensor: np.ndarray, h: float, coupling=None) -> np.ndarray:
    """All ``J_j^i`` for ``i = 1..M-1``; shape ``(M-1, N)``."""
    d = np.diff(q, axis=0)
    lap = d[1:] - d[:-1]
    quad = np.einsum("jmn,im,in->ij", tensor, d[1:], d[1:])
    out = (lap + quad) / h**2
    if coupling is not None:
        out += d[1:] @ np.asarray(coupling).T / h
    return out


def residual(Q: QGrid, tensor: np.ndarray, j: int, i: int, coupling=None) -> float:
    M = Q.grid.M
    if not 1 <= i <= M - 1:
        raise ValueError(f"spatial index {i} outside 1..{M - 1}")
    if not 0 <= j < tensor.shape[0]:
        raise ValueError(f"Laguerre index {j} outside 0..{tensor.shape[0] - 1}")
    q = Q.values
    h = Q.grid.h
    d = q[i + 1] - q[i]
    lap = q[i + 1, j] - 2 * q[i, j] + q[i - 1, j]
    out = (lap + d @ tensor[j] @ d) / h**2
    if coupling is not None:
        out += np.asarray(coupling)[j] @ d / h
    return float(out)


class CarlemanFunctional:
    """``h sum_j sum_{i=1}^{M-1} (J_j^i)^2 exp(-2 lam x_i)`` over the free rows."""

    def __init__(self, tensor, boundary: SpectralBoundaryData, grid: SpatialGrid, weight: CarlemanWeight, coupling=None):
        self.tensor = np.asarray(tensor, dtype=float)
        self.sym = 0.5 * (self.tensor + self.tensor.transpose(0, 2, 1))
        self.coupling = None if coupling is None else np.asarray(coupling, dtype=float)
        self.boundary = boundary
        self.grid = grid
        self.weight = weight
        x = grid.nodes[1 : grid.M]
        self.w2 = weight(x) ** 2

    def full(self, free) -> np.ndarray:
        return QGrid.from_free(free, self.grid, self.boundary).values

    def value(self, free) -> float:
        r = residuals(self.full(free), self.tensor, self.grid.h, self.coupling)
        return float(self.grid.h * np.sum(self.w2[:, None] * r**2))

    def value_and_grad(self, free):
        h, M = self.grid.h, self.grid.M
        q = self.full(free)
        d = np.diff(q, axis=0)
        r = residuals(q, self.tensor, h, self.coupling)
        val = float(h * np.sum(self.w2[:, None] * r**2))
        # adjoint weights of J^i, i = 1..M-1
        g_r = 2.0 * h * self.w2[:, None] * r
        g_d = np.zeros_like(d)
        g_d[1:] += (g_r + 2.0 * np.einsum("ij,jmn,in->im", g_r, self.sym, d[1:])) / h**2
        if self.coupling is not None:
            g_d[1:] += g_r @ self.coupling / h
        g_d[:-1] -= g_r / h**2
        g_q = np.zeros_like(q)
        g_q[1:] += g_d
        g_q[:-1] -= g_d
        # q^M = q^{M-1} + h psi_b
        g_q[M - 1] += g_q[M]
        return val, g_q[2:M].ravel()


def objective(Q: QGrid, tensor, weight: CarlemanWeight, coupling=None) -> float:
    return CarlemanFunctional(tensor, Q.boundary, Q.grid, weight, coupling).value(Q.free)


def gradient(Q: QGrid, tensor, weight: CarlemanWeight, coupling=None) -> np.ndarray:
    """Gradient with respect to the free rows, shape ``(M-2, N)``."""
    _, g = CarlemanFunctional(tensor, Q.boundary, Q.grid, weight, coupling).value_and_grad(Q.free)
    return g.reshape(Q.grid.M - 2, -1)


def minimize(
    boundary: SpectralBoundaryData,
    tensor,
    weight: CarlemanWeight | None = None,
    grid: SpatialGrid | None = None,
    opts: OptimizerConfig | None = None,
    coupling=None,
) -> QGrid:
    """Quasi-Newton descent from ``q^i = Phi_0`` for every free row.

    ``coupling`` is required when ``boundary`` carries a background
    position, and must be omitted otherwise.
    """
    if (coupling is None) != (boundary.x0 is None):
        raise ValueError("pass the linear coupling exactly when the boundary data are background-subtracted")
    weight = weight or CarlemanWeight()
    grid = grid or SpatialGrid()
    functional = CarlemanFunctional(tensor, boundary, grid, weight, coupling)
    x0 = QGrid.initial(grid, boundary).free
    x, report = lbfgs(functional.value_and_grad, x0, opts)
    result = QGrid.from_free(x, grid, boundary)
    result.report = report
    return result


@dataclass
class RecoveredCoefficient:
    """``c`` on the h-grid with the per-s values it was averaged from."""

    x: np.ndarray
    c: np.ndarray
    per_s: np.ndarray
    spread: float

    @property
    def profile(self) -> CoefficientProfile:
        return CoefficientProfile(self.x, self.c)


def _d1(v, h):
    out = np.empty_like(v)
    out[1:-1] = (v[2:] - v[:-2]) / (2 * h)
    out[0] = (-3 * v[0] + 4 * v[1] - v[2]) / (2 * h)
    out[-1] = (3 * v[-1] - 4 * v[-2] + v[-3]) / (2 * h)
    return out


def _d2(v, h):
    out = np.empty_like(v)
    out[1:-1] = (v[2:] - 2 * v[1:-1] + v[:-2]) / h**2
    out[0] = (2 * v[0] - 5 * v[1] + 4 * v[2] - v[3]) / h**2
    out[-1] = (2 * v[-1] - 5 * v[-2] + 4 * v[-3] - v[-4]) / h**2
    return out


def recover_c(Q: QGrid, basis: LaguerreBasis, sgrid: PseudoFrequencyGrid) -> RecoveredCoefficient:
    """``c = v_xx + s^2 v_x^2`` averaged over the s-grid.

    ``v = -sum_n q_n(x) I_n(s)``, plus ``-(x - x0)/s`` when the
    coefficients are a departure from the background.  Values at ``x = 0``
    and ``x = b`` are set to 1; the spread is taken over interior nodes.
    """
    h = Q.grid.h
    s = sgrid.nodes
    v = -Q.values @ basis.tails(s)  # (M+1, S)
    vx = _d1(v, h)
    vxx = _d2(v, h)
    if Q.boundary.x0 is not None:
        vx = vx - 1.0 / s
    per_s = vxx + s**2 * vx**2
    c = per_s.mean(axis=1)
    spread = float(np.max(per_s[1:-1].std(axis=1)))
    c[0] = c[-1] = 1.0
    return RecoveredCoefficient(Q.grid.nodes, c, per_s, spread)
