"""Shifted Laguerre functions on (s_min, inf) and the interaction tensor.

The functions are ``f_n(s) = exp(-(s - s_min)/2) * L_n(s - s_min)`` where
``L_n`` is the ordinary Laguerre polynomial.  They form an orthonormal
basis of L2(s_min, inf), which lets the infinite tail integral of the
pseudofrequency expansion be written in closed form.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np

TENSOR_CACHE_VERSION = 2


@dataclass(frozen=True)
class PseudoFrequencyGrid:
    """Uniform grid of pseudofrequencies ``s_min, s_min + step, ..., s_max``."""

    s_min: float = 4.0
    s_max: float = 15.0
    step: float = 0.05

    def __post_init__(self):
        if not self.s_min > 0:
            raise ValueError(f"s_min must be positive, got {self.s_min}")
        if not self.s_max > self.s_min:
            raise ValueError("s_max must exceed s_min")
        if not self.step > 0:
            raise ValueError("step must be positive")
        span = (self.s_max - self.s_min) / self.step
        if abs(span - round(span)) > 1e-9:
            raise ValueError("(s_max - s_min) / step must be an integer")

    @property
    def count(self) -> int:
        return int(round((self.s_max - self.s_min) / self.step)) + 1

    @property
    def nodes(self) -> np.ndarray:
        return self.s_min + self.step * np.arange(self.count)


@dataclass(frozen=True)
class LaguerreBasis:
    order: int = 11
    s_min: float = 4.0

    def __post_init__(self):
        if self.order < 1:
            raise ValueError(f"basis order must be >= 1, got {self.order}")

    def _shift(self, s):
        s = np.asarray(s, dtype=float)
        if np.any(s < self.s_min):
            raise ValueError(f"pseudofrequency below s_min={self.s_min}")
        return s - self.s_min

    def values(self, s) -> np.ndarray:
        """All basis functions at ``s``; shape ``(order,) + np.shape(s)``."""
        return laguerre_functions(self.order, self._shift(s))

    def tails(self, s) -> np.ndarray:
        """All tail integrals ``int_s^inf f_n``; shape ``(order,) + np.shape(s)``."""
        return laguerre_tails(self.order, self._shift(s))


def laguerre_functions(order: int, t) -> np.ndarray:
    """Laguerre functions ``exp(-t/2) L_n(t)`` for ``n < order``.

    The polynomial factor comes from the three-term recurrence; the
    exponential is applied once at the end.
    """
    t = np.asarray(t, dtype=float)
    out = np.empty((order,) + t.shape)
    prev = np.ones_like(t)
    out[0] = prev
    if order > 1:
        cur = 1.0 - t
        out[1] = cur
        for n in range(1, order - 1):
            nxt = ((2 * n + 1 - t) * cur - n * prev) / (n + 1)
            prev, cur = cur, nxt
            out[n + 1] = cur
    return out * np.exp(-0.5 * t)


def laguerre_tails(order: int, t) -> np.ndarray:
    """``int_t^inf exp(-x/2) L_n(x) dx`` for ``n < order``.

    Uses ``(l_n + l_{n-1}) = -2 (l_n - l_{n-1})'`` for the Laguerre
    functions ``l_n``, which gives ``I_n = 2 (l_n - l_{n-1}) - I_{n-1}``
    starting from ``I_0 = 2 l_0``.
    """
    ell = laguerre_functions(order, t)
    tails = np.empty_like(ell)
    tails[0] = 2.0 * ell[0]
    for n in range(1, order):
        tails[n] = 2.0 * (ell[n] - ell[n - 1]) - tails[n - 1]
    return tails


def laguerre_value(n: int, t: float) -> float:
    if n < 0:
        raise ValueError(f"Laguerre index must be nonnegative, got {n}")
    if t < 0:
        raise ValueError(f"Laguerre argument must be nonnegative, got {t}")
    return float(laguerre_functions(n + 1, t)[n])


def basis_value(basis: LaguerreBasis, n: int, s: float) -> float:
    _check_index(basis, n)
    if s < basis.s_min:
        raise ValueError(f"s={s} lies below s_min={basis.s_min}")
    return laguerre_value(n, s - basis.s_min)


def tail_integral(basis: LaguerreBasis, n: int, s: float) -> float:
    _check_index(basis, n)
    if s < basis.s_min:
        raise ValueError(f"s={s} lies below s_min={basis.s_min}")
    return float(laguerre_tails(n + 1, s - basis.s_min)[n])


def _check_index(basis, n):
    if not 0 <= n < basis.order:
        raise ValueError(f"index {n} outside 0..{basis.order - 1}")


def laguerre_poly_coefficients(n: int, exact: bool = False):
    """Power-series coefficients of ``L_n``: ``(-1)^k C(n, k) / k!``.

    With ``exact=True`` the coefficients are :class:`fractions.Fraction`.
    """
    coeffs = [Fraction((-1) ** k * math.comb(n, k), math.factorial(k)) for k in range(n + 1)]
    return coeffs if exact else np.array([float(c) for c in coeffs])


def gram_matrix(order: int) -> np.ndarray:
    """Inner products ``int_0^inf exp(-t) L_n L_m dt`` from exact antiderivatives.

    ``int_0^inf t^k exp(-t) dt = k!``, so each entry is a finite sum over the
    product polynomial's coefficients.  The sum is done in rational
    arithmetic, which avoids the cancellation between large alternating
    terms, and rounded once at the end.
    """
    coeffs = [laguerre_poly_coefficients(n, exact=True) for n in range(order)]
    gram = np.empty((order, order))
    for n in range(order):
        for m in range(n, order):
            total = Fraction(0)
            for i, a in enumerate(coeffs[n]):
                for j, b in enumerate(coeffs[m]):
                    total += a * b * math.factorial(i + j)
            gram[n, m] = gram[m, n] = float(total)
    return gram


def grid_gram(basis: LaguerreBasis, grid: PseudoFrequencyGrid) -> np.ndarray:
    """Trapezoid Gram matrix on the truncated data grid (projection diagnostic)."""
    f = basis.values(grid.nodes)
    return np.trapezoid(f[:, None, :] * f[None, :, :], dx=grid.step, axis=-1)


def project(basis: LaguerreBasis, grid: PseudoFrequencyGrid, samples) -> np.ndarray:
    """Laguerre coefficients ``int g f_n ds`` by trapezoid on ``grid``."""
    samples = np.asarray(samples, dtype=float)
    if samples.shape[-1] != grid.count:
        raise ValueError(
            f"expected {grid.count} samples on the pseudofrequency grid, got {samples.shape[-1]}"
        )
    f = basis.values(grid.nodes)
    return np.trapezoid(samples[..., None, :] * f, dx=grid.step, axis=-1)


def synthesize(basis: LaguerreBasis, coeffs, s) -> np.ndarray | float:
    coeffs = np.asarray(coeffs, dtype=float)
    if coeffs.shape[-1] != basis.order:
        raise ValueError("coefficient vector length must equal the basis order")
    out = np.tensordot(coeffs, basis.values(s), axes=(-1, 0))
    return float(out) if np.ndim(out) == 0 else out


@dataclass(frozen=True)
class QuadratureConfig:
    """Outer-integral quadrature for the tensor: composite Simpson on
    ``[s_min, s_min + span]`` with the given node spacing."""

    span: float = 80.0
    spacing: float = 1e-3

    def intervals(self) -> int:
        if not self.span > 0:
            raise ValueError("tensor quadrature cutoff must lie above s_min")
        if not self.spacing > 0:
            raise ValueError("tensor quadrature spacing must be positive")
        n = int(round(self.span / self.spacing))
        if n < 2:
            raise ValueError("tensor quadrature needs at least two intervals")
        return n + (n % 2)


def _simpson_weights(n_intervals: int, width: float) -> np.ndarray:
    w = np.ones(n_intervals + 1)
    w[1:-1:2] = 4.0
    w[2:-1:2] = 2.0
    return w * (width / n_intervals / 3.0)


def _quadrature(basis: LaguerreBasis, quad: QuadratureConfig):
    n_int = quad.intervals()
    width = n_int * quad.spacing
    t = np.linspace(0.0, width, n_int + 1)
    return basis.s_min + t, _simpson_weights(n_int, width), laguerre_functions(basis.order, t), laguerre_tails(basis.order, t)


def compute_interaction_tensor(
    basis: LaguerreBasis, quad: QuadratureConfig | None = None
) -> np.ndarray:
    """``F[k, m, n]`` coupling the Laguerre modes of the elliptic system.

    ``F_kmn = int 2s f_k I_m I_n ds - int 2s^2 f_k f_m I_n ds`` with exact
    tails ``I_j`` and Simpson quadrature for the outer integrals.
    """
    s, w, f, tails = _quadrature(basis, quad or QuadratureConfig())
    a = f * (2.0 * s * w)
    b = f * (2.0 * s * s * w)
    first = np.einsum("ks,ms,ns->kmn", a, tails, tails, optimize=True)
    second = np.einsum("ks,ms,ns->kmn", b, f, tails, optimize=True)
    return first - second


def compute_linear_coupling(basis: LaguerreBasis, quad: QuadratureConfig | None = None) -> np.ndarray:
    """``A[k, m] = int f_k (2 I_m - 2s f_m) ds``.

    This is the linear part that appears when the expansion is written as
    the homogeneous-medium solution ``(x - x0)/s^2`` plus a Laguerre
    correction: substituting ``q_x = 1/s^2 + p_x`` into the quadratic terms
    leaves ``F(p_x, p_x) + A p_x``.
    """
    s, w, f, tails = _quadrature(basis, quad or QuadratureConfig())
    return np.einsum("ks,ms->km", f * w, 2.0 * tails - 2.0 * s * f, optimize=True)


def quadratic_form(tensor: np.ndarray, a, b=None) -> np.ndarray:
    """``sum_mn F[k, m, n] a_m b_n`` for every ``k``."""
    b = a if b is None else b
    return np.einsum("kmn,m,n->k", tensor, a, b)


def _digest(*arrays) -> str:
    h = hashlib.sha256()
    for a in arrays:
        h.update(a.tobytes())
    return h.hexdigest()


def save_tensor(path, tensor: np.ndarray, basis: LaguerreBasis, quad: QuadratureConfig, coupling=None) -> Path:
    """Write the tensor (and optionally the linear coupling) as ``.npz``.

    The JSON header carries the basis and quadrature parameters and a
    SHA-256 over the stored arrays.  The file is written to a temporary
    name and renamed into place.
    """
    path = Path(path)
    arrays = {"tensor": np.ascontiguousarray(tensor, dtype="<f8")}
    if coupling is not None:
        arrays["coupling"] = np.ascontiguousarray(coupling, dtype="<f8")
    header = {
        "version": TENSOR_CACHE_VERSION,
        "order": basis.order,
        "s_min": basis.s_min,
        "span": quad.span,
        "spacing": quad.spacing,
        "arrays": sorted(arrays),
        "sha256": _digest(*(arrays[k] for k in sorted(arrays))),
    }
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        np.savez(fh, header=np.array(json.dumps(header, sort_keys=True)), **arrays)
    tmp.replace(path)
    return path


def load_operators(path, basis: LaguerreBasis | None = None, quad: QuadratureConfig | None = None):
    """Read a cache file, verify checksum and (optionally) metadata.

    Returns ``(arrays, header)`` where ``arrays`` maps names to arrays.
    """
    with np.load(path) as npz:
        header = json.loads(str(npz["header"]))
        if header.get("version") != TENSOR_CACHE_VERSION:
            raise ValueError(f"unsupported tensor cache version {header.get('version')}")
        arrays = {k: np.ascontiguousarray(npz[k], dtype="<f8") for k in header["arrays"]}
    if _digest(*(arrays[k] for k in sorted(arrays))) != header["sha256"]:
        raise ValueError(f"tensor cache {path} failed its checksum")
    expected = {}
    if basis is not None:
        expected.update(order=basis.order, s_min=basis.s_min)
    if quad is not None:
        expected.update(span=quad.span, spacing=quad.spacing)
    for key, value in expected.items():
        if header[key] != value:
            raise ValueError(f"tensor cache {key}={header[key]} does not match requested {value}")
    return arrays, header


def load_tensor(path, basis: LaguerreBasis | None = None, quad: QuadratureConfig | None = None):
    """Returns ``(tensor, header)``."""
    arrays, header = load_operators(path, basis, quad)
    return arrays["tensor"], header


def tensor_cache_path(cache_dir, basis: LaguerreBasis, quad: QuadratureConfig) -> Path:
    name = f"tensor_N{basis.order}_s{basis.s_min:g}_span{quad.span:g}_h{quad.spacing:g}.npz"
    return Path(cache_dir) / name


def cached_operators(basis: LaguerreBasis, quad: QuadratureConfig | None = None, cache_dir=None):
    """``(F, A)`` computed once per ``(order, s_min, quadrature)`` and reused.

    A cache file that is unreadable, stale or fails its checksum is
    recomputed and overwritten.
    """
    quad = quad or QuadratureConfig()
    if cache_dir is not None:
        path = tensor_cache_path(cache_dir, basis, quad)
        if path.exists():
            try:
                arrays, _ = load_operators(path, basis, quad)
                return arrays["tensor"], arrays["coupling"]
            except (ValueError, KeyError, OSError):
                pass
    tensor = compute_interaction_tensor(basis, quad)
    coupling = compute_linear_coupling(basis, quad)
    if cache_dir is not None:
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        save_tensor(path, tensor, basis, quad, coupling)
    return tensor, coupling


def cached_interaction_tensor(basis: LaguerreBasis, quad: QuadratureConfig | None = None, cache_dir=None):
    """The interaction tensor alone, through the same cache as :func:`cached_operators`."""
    return cached_operators(basis, quad, cache_dir)[0]
