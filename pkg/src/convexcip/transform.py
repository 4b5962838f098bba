"""Time traces to pseudofrequency boundary data.

Pipeline: Laplace transform on the pseudofrequency grid, normalisation by
the transformed source, ``v = ln(w) / s^2``, ``q = dv/ds``, then Laguerre
projection of ``q(0, s)``, ``q_x(0, s)`` and the absorbing-boundary datum
``q_x(b, s) = 1/s^2``.

With a background source position ``x0`` the homogeneous-medium solution
``q_bg(x, s) = (x - x0)/s^2`` is subtracted before projecting, so the
coefficients describe only the departure from the background.  The
``1/s^2`` behaviour is not well represented by a handful of Laguerre
functions, whereas the departure decays like the reflected wave.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from .basis import LaguerreBasis, PseudoFrequencyGrid, project
from .forward import IncidentWave, TimeTraces, Waveform


class SpectralDataError(ValueError):
    pass


def _trapezoid_weights(n: int, dt: float) -> np.ndarray:
    w = np.full(n, dt)
    w[0] = w[-1] = 0.5 * dt
    return w


def laplace_transform(series, dt: float, sgrid: PseudoFrequencyGrid) -> np.ndarray:
    """``int_0^T g(t) exp(-s t) dt`` by the trapezoid rule, for each grid ``s``."""
    series = np.asarray(series, dtype=float)
    n = series.shape[-1]
    T = (n - 1) * dt
    if T * sgrid.s_min < 8.0:
        warnings.warn(
            f"T * s_min = {T * sgrid.s_min:.3g} < 8: truncation of the Laplace integral is not negligible",
            RuntimeWarning,
            stacklevel=2,
        )
    t = dt * np.arange(n)
    kernel = np.exp(-np.outer(sgrid.nodes, t)) * _trapezoid_weights(n, dt)
    return series @ kernel.T


def fourier_denoise(series, keep: int) -> np.ndarray:
    """Zero every real-FFT bin above index ``keep`` and transform back."""
    series = np.asarray(series, dtype=float)
    n = series.shape[-1]
    if keep < 1:
        raise ValueError("keep must be at least 1")
    if keep > n:
        raise ValueError(f"keep={keep} exceeds the series length {n}")
    spec = np.fft.rfft(series)
    spec[..., keep + 1 :] = 0.0
    return np.fft.irfft(spec, n=n)


def causal_mute(traces: TimeTraces, onset: float) -> TimeTraces:
    """Zero both series before ``onset``, when nothing can have reached ``x = 0`` yet.

    The Laplace kernel weighs early samples most, so noise recorded before
    the first arrival otherwise dominates the large-s data.
    """
    keep = traces.t >= onset
    return TimeTraces(traces.t, traces.p1 * keep, traces.p2 * keep, traces.dt, dict(traces.meta, mute_before=onset))


def derive_p2(traces: TimeTraces, incident: IncidentWave | None = None) -> TimeTraces:
    """Replace ``p2`` by the value implied by ``p1``.

    Left of ``x = 0`` the medium is homogeneous and the scattered wave moves
    left, so ``u^s_x(0, t) = u^s_t(0, t)`` and
    ``p2 = u^i_x(0, t) + d/dt (p1 - u^i(0, t))``.
    """
    incident = incident or IncidentWave()
    t = traces.t
    us = traces.p1 - incident(0.0, t)
    p2 = incident.dx(0.0, t) + np.gradient(us, traces.dt, edge_order=2)
    return TimeTraces(t, traces.p1, p2, traces.dt, dict(traces.meta, p2_source="derived"))


@dataclass(frozen=True)
class SpectralTraces:
    s: np.ndarray
    w0s: np.ndarray
    wx0s: np.ndarray
    fs: np.ndarray


def spectral_traces(traces: TimeTraces, sgrid: PseudoFrequencyGrid, waveform: Waveform | None = None) -> SpectralTraces:
    """``w(0, s)`` and ``w_x(0, s)``: transformed traces over the transformed source."""
    waveform = waveform or Waveform()
    fs = laplace_transform(waveform(traces.t), traces.dt, sgrid)
    if np.any(fs == 0):
        raise SpectralDataError("transformed source vanishes on the pseudofrequency grid")
    w = laplace_transform(traces.p1, traces.dt, sgrid) / fs
    wx = laplace_transform(traces.p2, traces.dt, sgrid) / fs
    return SpectralTraces(sgrid.nodes, w, wx, fs)


def s_derivative(values, step: float) -> np.ndarray:
    """Second-order differences along the last axis, one-sided at both ends."""
    return np.gradient(values, step, axis=-1, edge_order=2)


@dataclass(frozen=True)
class BoundaryFunctions:
    s: np.ndarray
    v: np.ndarray
    vx: np.ndarray
    phi: np.ndarray
    psi: np.ndarray


def compute_vq_boundary(spectral: SpectralTraces, sgrid: PseudoFrequencyGrid) -> BoundaryFunctions:
    """``phi(s) = q(0, s)`` and ``psi(s) = q_x(0, s)`` from ``w`` and ``w_x``."""
    s = sgrid.nodes
    w = np.asarray(spectral.w0s, dtype=float)
    bad = np.flatnonzero(~(w > 0))
    if bad.size:
        raise SpectralDataError(f"w(0, s) is not positive at s = {s[bad[0]]:g}")
    v = np.log(w) / s**2
    vx = spectral.wx0s / (s**2 * w)
    return BoundaryFunctions(s, v, vx, s_derivative(v, sgrid.step), s_derivative(vx, sgrid.step))


def neumann_at_b(sgrid_or_s) -> np.ndarray:
    """``q_x(b, s) = 1/s^2`` for a wave that is outgoing at ``x = b``."""
    s = sgrid_or_s.nodes if isinstance(sgrid_or_s, PseudoFrequencyGrid) else np.asarray(sgrid_or_s, dtype=float)
    return 1.0 / s**2


@dataclass(frozen=True)
class SpectralBoundaryData:
    """Laguerre coefficients of ``Q(0)``, ``Q'(0)`` and ``Q'(b)``.

    ``x0`` is the background source position when the homogeneous solution
    has been subtracted, ``None`` for a plain expansion of ``q``.
    """

    phi0: np.ndarray
    psi0: np.ndarray
    psib: np.ndarray
    s_min: float = 4.0
    x0: float | None = None

    def __post_init__(self):
        arrays = [np.asarray(a, dtype=float) for a in (self.phi0, self.psi0, self.psib)]
        if len({a.shape for a in arrays}) != 1 or arrays[0].ndim != 1:
            raise ValueError("boundary vectors must be 1-d and of equal length")
        if not all(np.all(np.isfinite(a)) for a in arrays):
            raise ValueError("boundary vectors contain non-finite entries")
        for name, a in zip(("phi0", "psi0", "psib"), arrays):
            object.__setattr__(self, name, a)

    @property
    def order(self) -> int:
        return self.phi0.size

    @classmethod
    def zeros(cls, order: int, s_min: float = 4.0, x0: float | None = None) -> "SpectralBoundaryData":
        z = np.zeros(order)
        return cls(z, z, z, s_min, x0)

    def to_json(self) -> str:
        return json.dumps(
            {
                "N": self.order,
                "s_min": self.s_min,
                "x0": self.x0,
                "phi0": self.phi0.tolist(),
                "psi0": self.psi0.tolist(),
                "psib": self.psib.tolist(),
            },
            indent=2,
        )

    @classmethod
    def from_json(cls, text: str) -> "SpectralBoundaryData":
        d = json.loads(text)
        out = cls(np.array(d["phi0"]), np.array(d["psi0"]), np.array(d["psib"]), float(d["s_min"]), d.get("x0"))
        if out.order != d["N"]:
            raise ValueError("boundary data length does not match its N field")
        return out


def background_q(x, s, x0: float):
    """Homogeneous-medium ``q(x, s) = (x - x0)/s^2``."""
    return (np.asarray(x, dtype=float) - x0) / np.asarray(s, dtype=float) ** 2


def project_boundary(
    basis: LaguerreBasis, sgrid: PseudoFrequencyGrid, phi, psi, psib, x0: float | None = None
) -> SpectralBoundaryData:
    phi, psi, psib = (np.asarray(a, dtype=float) for a in (phi, psi, psib))
    if x0 is not None:
        s = sgrid.nodes
        phi = phi - background_q(0.0, s, x0)
        psi = psi - 1.0 / s**2
        psib = psib - 1.0 / s**2
    return SpectralBoundaryData(
        project(basis, sgrid, phi), project(basis, sgrid, psi), project(basis, sgrid, psib), basis.s_min, x0
    )


def boundary_data_from_traces(
    traces: TimeTraces,
    basis: LaguerreBasis,
    sgrid: PseudoFrequencyGrid,
    waveform: Waveform | None = None,
    denoise_keep: int | None = None,
    x0: float | None = -0.2,
):
    """Full Step-1.1 chain; returns ``(SpectralBoundaryData, BoundaryFunctions, SpectralTraces)``.

    ``x0`` selects the background subtraction (``None`` projects ``q`` itself).
    """
    if denoise_keep:
        traces = TimeTraces(
            traces.t,
            fourier_denoise(traces.p1, denoise_keep),
            fourier_denoise(traces.p2, denoise_keep),
            traces.dt,
            traces.meta,
        )
    spectral = spectral_traces(traces, sgrid, waveform)
    bf = compute_vq_boundary(spectral, sgrid)
    data = project_boundary(basis, sgrid, bf.phi, bf.psi, neumann_at_b(sgrid), x0)
    return data, bf, spectral


def spectral_csv_rows(bf: BoundaryFunctions, spectral: SpectralTraces):
    yield ("s", "w", "w_x", "v", "v_x", "phi", "psi")
    for row in zip(bf.s, spectral.w0s, spectral.wx0s, bf.v, bf.vx, bf.phi, bf.psi):
        yield tuple(float(v) for v in row)
