"""Limited-memory BFGS with Armijo backtracking.

Both inversion stages use this routine so their convergence reports share
one schema.  Accepted iterates never increase the objective.
"""

from __future__ import annotations

import time
from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class OptimizerConfig:
    tol: float = 1e-8
    max_iter: int = 2000
    memory: int = 10
    armijo: float = 1e-4
    backtrack: float = 0.5
    max_backtracks: int = 40


@dataclass
class ConvergenceReport:
    iterations: int = 0
    evaluations: int = 0
    objective: list = field(default_factory=list)
    grad_norm: float = float("nan")
    converged: bool = False
    flagged: bool = False
    message: str = ""
    wall_time: float = 0.0

    def to_dict(self) -> dict:
        return {
            "iterations": self.iterations,
            "evaluations": self.evaluations,
            "objective": [float(v) for v in self.objective],
            "final_gradient_norm": float(self.grad_norm),
            "converged": self.converged,
            "flagged": self.flagged,
            "message": self.message,
            "wall_time": self.wall_time,
        }


def _two_loop(grad, history, gamma):
    q = grad.copy()
    alphas = []
    for s, y, rho in reversed(history):
        a = rho * np.dot(s, q)
        q -= a * y
        alphas.append(a)
    r = gamma * q
    for (s, y, rho), a in zip(history, reversed(alphas)):
        b = rho * np.dot(y, r)
        r += s * (a - b)
    return -r


def lbfgs(fun, x0, config: OptimizerConfig | None = None, callback=None):
    """Minimise ``fun`` where ``fun(x) -> (value, gradient)``.

    Stops when the gradient sup-norm drops below ``config.tol`` or after
    ``config.max_iter`` iterations.  A failed line search, or a starting
    point where ``fun`` is not finite, ends the run with ``report.flagged``
    set and the best iterate returned.
    """
    cfg = config or OptimizerConfig()
    t0 = time.perf_counter()
    x = np.array(x0, dtype=float)
    f, g = fun(x)
    report = ConvergenceReport(evaluations=1, objective=[float(f)])
    if not np.isfinite(f):
        report.flagged = True
        report.message = "objective not finite at the starting point"
        report.wall_time = time.perf_counter() - t0
        return x, report
    history = deque(maxlen=cfg.memory)
    gamma = None

    while True:
        gnorm = float(np.max(np.abs(g))) if g.size else 0.0
        report.grad_norm = gnorm
        if gnorm < cfg.tol:
            report.converged = True
            report.message = "gradient tolerance reached"
            break
        if report.iterations >= cfg.max_iter:
            report.message = "iteration limit reached"
            break
        if gamma is None:
            direction = -g / max(np.linalg.norm(g), 1e-300)
        else:
            direction = _two_loop(g, history, gamma)
        slope = float(np.dot(g, direction))
        if slope >= 0:
            history.clear()
            gamma = None
            direction = -g / max(np.linalg.norm(g), 1e-300)
            slope = float(np.dot(g, direction))

        step = 1.0
        for _ in range(cfg.max_backtracks):
            x_new = x + step * direction
            f_new, g_new = fun(x_new)
            report.evaluations += 1
            if np.isfinite(f_new) and f_new <= f + cfg.armijo * step * slope:
                break
            step *= cfg.backtrack
        else:
            report.flagged = True
            report.message = "line search failed"
            break

        s = x_new - x
        y = g_new - g
        sy = float(np.dot(s, y))
        if sy > 1e-12 * np.linalg.norm(s) * np.linalg.norm(y):
            history.append((s, y, 1.0 / sy))
            gamma = sy / float(np.dot(y, y))
        x, f, g = x_new, f_new, g_new
        report.iterations += 1
        report.objective.append(float(f))
        if callback is not None:
            callback(x)
        if not step * np.max(np.abs(direction)) > 0:
            report.message = "step underflow"
            break

    report.wall_time = time.perf_counter() - t0
    return x, report
