"""Experiment orchestration: configuration, the hybrid and local-only runs,
error metrics and the on-disk report layout."""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import os
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .basis import LaguerreBasis, PseudoFrequencyGrid, QuadratureConfig, cached_operators
from .forward import CoefficientProfile, IncidentWave, SpaceTimeGrid, TimeTraces, Waveform, add_noise, simulate
from .global_solver import CarlemanWeight, SpatialGrid, minimize, recover_c
from .local_solver import LocalResult, MisfitConfig, minimize_local, step3_refine
from .optim import OptimizerConfig
from .transform import boundary_data_from_traces, causal_mute, derive_p2, fourier_denoise, spectral_csv_rows

REPORT_VERSION = 1


@dataclass(frozen=True)
class ExperimentConfig:
    """Every tunable of a run, as a flat set of named keys.

    ``example`` picks a built-in profile (0 is the homogeneous medium);
    ``profile_file`` (CSV with columns ``x, c``) overrides it.  ``c_min``
    is the a priori lower bound of the coefficient; the Step 1 result is
    raised to it before it seeds the time-domain refinement.
    """

    example: int = 1
    profile_file: str | None = None
    k: float = -0.2
    g: float = 0.5
    b: float = 0.4
    x0: float = -0.2
    dx: float = 0.005
    dt: float = 0.001
    T: float = 2.0
    omega: float = 30.0
    s_min: float = 4.0
    s_max: float = 15.0
    ds: float = 0.05
    N: int = 11
    lam: float = 3.0
    h: float = 0.025
    alpha: float = 0.001
    epsilon: float = 0.2
    c_min: float = 0.1
    noise: float = 0.1
    seed: int = 0
    denoise_keep: int = 60
    p2_source: str = "derived"
    tol: float = 1e-8
    max_iter_global: int = 2000
    max_iter_local: int = 2000
    quad_span: float = 80.0
    quad_spacing: float = 1e-3
    tensor_cache: str | None = None
    output_dir: str | None = None

    def __post_init__(self):
        if not self.k < 0 < self.b < self.g:
            raise ValueError("need k < 0 < b < g")
        if not self.k <= self.x0 < 0:
            raise ValueError("the source x0 must lie in [k, 0)")
        if self.noise < 0:
            raise ValueError("noise level must be nonnegative")
        if self.alpha < 0 or self.epsilon <= 0 or self.lam <= 0:
            raise ValueError("need alpha >= 0, epsilon > 0 and lam > 0")
        if not self.c_min > 0:
            raise ValueError("c_min must be positive")
        if self.N < 1 or self.denoise_keep < 1:
            raise ValueError("N and denoise_keep must be positive")
        if self.p2_source not in ("derived", "measured"):
            raise ValueError("p2_source must be 'derived' or 'measured'")

    # grids and sub-configurations

    @property
    def full_grid(self) -> SpaceTimeGrid:
        return SpaceTimeGrid(self.k, self.g, self.dx, self.T, self.dt)

    @property
    def local_grid(self) -> SpaceTimeGrid:
        return SpaceTimeGrid(0.0, self.g, self.dx, self.T, self.dt)

    @property
    def incident(self) -> IncidentWave:
        return IncidentWave(Waveform(self.omega), self.x0)

    @property
    def basis(self) -> LaguerreBasis:
        return LaguerreBasis(self.N, self.s_min)

    @property
    def sgrid(self) -> PseudoFrequencyGrid:
        return PseudoFrequencyGrid(self.s_min, self.s_max, self.ds)

    @property
    def quadrature(self) -> QuadratureConfig:
        return QuadratureConfig(self.quad_span, self.quad_spacing)

    @property
    def spatial_grid(self) -> SpatialGrid:
        return SpatialGrid(self.b, self.h)

    def misfit_config(self) -> MisfitConfig:
        return MisfitConfig(
            alpha=self.alpha,
            epsilon=self.epsilon,
            b=self.b,
            grid=self.local_grid,
            incident=self.incident,
            optimizer=OptimizerConfig(tol=self.tol, max_iter=self.max_iter_local),
        )

    # serialisation

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    @classmethod
    def from_mapping(cls, data: dict) -> "ExperimentConfig":
        names = {f.name: f for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - set(names))
        if unknown:
            raise ValueError(f"unknown config keys: {', '.join(unknown)}")
        return cls(**{k: _coerce(names[k], v) for k, v in data.items()})

    @classmethod
    def load(cls, path, **overrides) -> "ExperimentConfig":
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
        if not isinstance(data, dict):
            raise ValueError(f"{path}: config must be a flat key-value mapping")
        data.update({k: v for k, v in overrides.items() if v is not None})
        return cls.from_mapping(data)


def _coerce(f: dataclasses.Field, value):
    if value is None:
        return None
    kind = f.type if isinstance(f.type, str) else f.type.__name__
    if kind.startswith("int"):
        if isinstance(value, float) and not value.is_integer():
            raise ValueError(f"{f.name} must be an integer, got {value}")
        return int(value)
    if kind.startswith("float"):
        return float(value)
    return str(value)


# profiles


def chi(x, a: float, b: float) -> np.ndarray:
    """Indicator of ``[a, b]``, inclusive at grid nodes."""
    x = np.asarray(x, dtype=float)
    tol = 1e-9
    return ((x >= a - tol) & (x <= b + tol)).astype(float)


_BUILTIN = {
    0: lambda x: np.ones_like(x),
    1: lambda x: 1.0 + 3.0 * chi(x, 0.03, 0.1),
    2: lambda x: 1.0 + 14.0 * chi(x, 0.03, 0.1),
    3: lambda x: 1.0 - 0.5 * chi(x, 0.03, 0.15),
    4: lambda x: 1.0 + 3.0 * np.exp(-((x - 0.1) ** 2) / 0.04**2),
}


def builtin_profile(example: int, x=None) -> CoefficientProfile:
    """Test media on the nodes ``x`` (default: the full forward grid).

    1: ``1 + 3 chi[0.03, 0.1]``, 2: ``1 + 14 chi[0.03, 0.1]``,
    3: ``1 - 0.5 chi[0.03, 0.15]``, 4: ``1 + 3 exp(-(x - 0.1)^2 / 0.04^2)``,
    0: homogeneous.
    """
    if example not in _BUILTIN:
        raise ValueError(f"unknown example {example!r}; choose one of {sorted(_BUILTIN)}")
    x = SpaceTimeGrid().x if x is None else np.asarray(x, dtype=float)
    return CoefficientProfile(x, _BUILTIN[example](x))


def true_profile(config: ExperimentConfig, x) -> CoefficientProfile:
    if config.profile_file:
        data = np.loadtxt(config.profile_file, delimiter=",", skiprows=1, ndmin=2)
        return CoefficientProfile(data[:, 0], data[:, 1]).on(x)
    return builtin_profile(config.example, x)


# metrics


@dataclass(frozen=True)
class Metrics:
    rel_l2: float
    sup: float
    jaccard: float

    def to_dict(self) -> dict:
        return {"rel_l2": self.rel_l2, "sup": self.sup, "jaccard": self.jaccard}


def metrics(c_est, c_true, threshold: float = 0.2, b: float | None = None) -> Metrics:
    """Relative L2 error, sup-norm error and Jaccard index of the sets
    ``{|c - 1| > threshold}``, over nodes in ``[0, b]`` when ``b`` is given.
    Two empty supports count as a perfect match."""
    if isinstance(c_est, CoefficientProfile) and isinstance(c_true, CoefficientProfile):
        if c_est.x.shape != c_true.x.shape or not np.allclose(c_est.x, c_true.x, atol=1e-12):
            raise ValueError("profiles live on different grids")
        x = c_true.x
    else:
        x = None
    est = c_est.values if isinstance(c_est, CoefficientProfile) else np.asarray(c_est, dtype=float)
    tru = c_true.values if isinstance(c_true, CoefficientProfile) else np.asarray(c_true, dtype=float)
    if est.shape != tru.shape:
        raise ValueError(f"grid mismatch: {est.shape} vs {tru.shape}")
    if b is not None:
        if x is None:
            raise ValueError("restricting to [0, b] needs CoefficientProfile inputs")
        keep = (x >= -1e-12) & (x <= b + 1e-12)
        est, tru = est[keep], tru[keep]
    diff = est - tru
    rel = float(np.linalg.norm(diff) / np.linalg.norm(tru))
    sup = float(np.max(np.abs(diff))) if diff.size else 0.0
    a = np.abs(est - 1.0) > threshold
    t = np.abs(tru - 1.0) > threshold
    union = np.count_nonzero(a | t)
    jac = 1.0 if union == 0 else np.count_nonzero(a & t) / union
    return Metrics(rel, sup, float(jac))


# reports


class PipelineError(RuntimeError):
    def __init__(self, stage: str, cause: Exception):
        super().__init__(f"stage '{stage}' failed: {cause}")
        self.stage = stage
        self.cause = cause


@dataclass
class RunReport:
    """Everything a run produced, on the ``dx`` grid of ``[0, g]``.

    Wall-clock timings are kept in ``timings`` but left out of
    :meth:`to_json`, so reports of identical runs are byte-identical.
    """

    mode: str
    config: dict
    x: np.ndarray
    profiles: dict
    metrics: dict
    convergence: dict
    b1: float | None = None
    b1_flagged: bool = False
    flags: list = field(default_factory=list)
    warnings: list = field(default_factory=list)
    global_diagnostics: dict = field(default_factory=dict)
    timings: dict = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        """True when any optimiser run was flagged (line-search failure or an
        infeasible start).  The no-reduction note on ``b1`` is not a failure."""
        return any(rep["flagged"] for rep in self.convergence.values())

    def final_error(self) -> float:
        return self.metrics["c_local2"]["rel_l2"]

    def to_dict(self) -> dict:
        return {
            "report_version": REPORT_VERSION,
            "mode": self.mode,
            "config": self.config,
            "x": [float(v) for v in self.x],
            "profiles": {k: None if v is None else [float(t) for t in v] for k, v in self.profiles.items()},
            "metrics": self.metrics,
            "convergence": self.convergence,
            "b1": self.b1,
            "b1_flagged": self.b1_flagged,
            "flags": list(self.flags),
            "warnings": list(self.warnings),
            "global_diagnostics": self.global_diagnostics,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "RunReport":
        d = json.loads(text)
        return cls(
            mode=d["mode"],
            config=d["config"],
            x=np.array(d["x"]),
            profiles={k: None if v is None else np.array(v) for k, v in d["profiles"].items()},
            metrics=d["metrics"],
            convergence=d["convergence"],
            b1=d["b1"],
            b1_flagged=d["b1_flagged"],
            flags=d["flags"],
            warnings=d["warnings"],
            global_diagnostics=d["global_diagnostics"],
        )


# atomic output


def atomic_write(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    with open(tmp, "w", newline="") as fh:
        fh.write(text)
    tmp.replace(path)
    return path


def csv_text(rows) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    for row in rows:
        writer.writerow(["" if v is None else (repr(float(v)) if isinstance(v, (float, np.floating)) else v) for v in row])
    return buf.getvalue()


def write_traces(out_dir, traces: TimeTraces) -> None:
    """``p1.csv`` and ``p2.csv``: a comment line with the metadata, then ``t, value``."""
    meta = traces.meta
    head = "# " + ", ".join(f"{k}={meta.get(k)}" for k in ("dx", "dt", "T", "seed", "noise_level")) + "\n"
    for name in ("p1", "p2"):
        series = getattr(traces, name)
        atomic_write(Path(out_dir) / f"{name}.csv", head + csv_text([("t", name), *zip(traces.t, series)]))


def read_traces(out_dir) -> TimeTraces:
    cols = []
    for name in ("p1", "p2"):
        cols.append(np.loadtxt(Path(out_dir) / f"{name}.csv", delimiter=",", skiprows=2, ndmin=2))
    t = cols[0][:, 0]
    if t.size < 2:
        raise ValueError("trace files need at least two samples")
    return TimeTraces(t, cols[0][:, 1], cols[1][:, 1], float(t[1] - t[0]))


def write_profile(path, x, c) -> None:
    atomic_write(path, csv_text([("x", "c"), *zip(x, c)]))


def _profiles_csv(x, profiles: dict) -> str:
    names = ["c_true", "c_glob", "c_local1", "c_local2"]
    rows = [("x", *names)]
    for i, xi in enumerate(x):
        rows.append((xi, *(None if profiles.get(n) is None else profiles[n][i] for n in names)))
    return csv_text(rows)


def persist_report(report: RunReport, out_dir) -> None:
    out = Path(out_dir)
    atomic_write(out / "report.json", report.to_json())
    atomic_write(out / "timings.json", json.dumps(report.timings, indent=2, sort_keys=True) + "\n")
    atomic_write(out / "profiles.csv", _profiles_csv(report.x, report.profiles))


# stages


def make_traces(config: ExperimentConfig) -> tuple[TimeTraces, CoefficientProfile]:
    """Synthetic measurements for the configured medium, with seeded noise."""
    grid = config.full_grid
    truth = true_profile(config, grid.x)
    traces = simulate(truth, grid, config.incident)
    if config.noise > 0:
        traces = add_noise(traces, config.noise, config.seed)
    return traces, truth


def preprocess(traces: TimeTraces, config: ExperimentConfig) -> TimeTraces:
    """Clean noisy traces; noiseless traces pass through untouched.

    Both series are Fourier-truncated.  With ``p2_source = "derived"`` the
    recorded ``p2`` is replaced by the one implied by ``p1`` (see
    :func:`derive_p2`).  Finally both are zeroed before the incident onset
    at ``x = 0``.
    """
    if config.noise <= 0:
        return traces
    meta = dict(traces.meta, denoise_keep=config.denoise_keep)
    out = TimeTraces(
        traces.t,
        fourier_denoise(traces.p1, config.denoise_keep),
        fourier_denoise(traces.p2, config.denoise_keep),
        traces.dt,
        meta,
    )
    if config.p2_source == "derived":
        out = derive_p2(out, config.incident)
    return causal_mute(out, config.incident.onset(0.0))


def global_step(traces: TimeTraces, config: ExperimentConfig, out_dir=None):
    """Step 1: boundary data, Carleman minimisation and coefficient recovery.

    Returns ``(recovered, qgrid, boundary)``.
    """
    basis, sgrid = config.basis, config.sgrid
    tensor, coupling = cached_operators(basis, config.quadrature, config.tensor_cache)
    boundary, bf, spectral = boundary_data_from_traces(traces, basis, sgrid, config.incident.waveform, x0=config.x0)
    opts = OptimizerConfig(tol=config.tol, max_iter=config.max_iter_global)
    Q = minimize(boundary, tensor, CarlemanWeight(config.lam), config.spatial_grid, opts, coupling=coupling)
    rec = recover_c(Q, basis, sgrid)
    if out_dir is not None:
        out = Path(out_dir)
        atomic_write(out / "spectral.csv", csv_text(spectral_csv_rows(bf, spectral)))
        atomic_write(out / "boundary.json", boundary.to_json() + "\n")
        header = ("x", *(f"q{j}" for j in range(basis.order)))
        atomic_write(out / "qgrid.csv", csv_text([header, *((xi, *row) for xi, row in zip(Q.grid.nodes, Q.values))]))
        write_profile(out / "c_glob_h.csv", rec.x, rec.c)
    return rec, Q, boundary


def admissible(profile: CoefficientProfile, c_min: float) -> tuple[CoefficientProfile, int]:
    """Raise values below ``c_min``; returns the profile and how many nodes moved."""
    low = profile.values < c_min
    return CoefficientProfile(profile.x, np.maximum(profile.values, c_min)), int(np.count_nonzero(low))


def _stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except PipelineError:
        raise
    except Exception as exc:  # noqa: BLE001 - re-raised with the stage name
        raise PipelineError(name, exc) from exc


def _local_steps(traces, c_init, c_ref, config: ExperimentConfig, timings: dict) -> tuple[LocalResult, LocalResult]:
    cfg = config.misfit_config()
    t0 = time.perf_counter()
    step2 = _stage("step2", minimize_local, c_init, traces, c_ref, cfg)
    timings["step2"] = time.perf_counter() - t0
    t0 = time.perf_counter()
    step3 = _stage("step3", step3_refine, step2.profile, traces, c_ref, cfg)
    timings["step3"] = time.perf_counter() - t0
    return step2, step3


def _report(mode, config, truth, c_glob, step2, step3, extra_conv, diagnostics, timings) -> RunReport:
    x = config.local_grid.x
    profiles = {
        "c_true": truth.values,
        "c_glob": None if c_glob is None else c_glob.values,
        "c_local1": step2.profile.values,
        "c_local2": step3.profile.values,
    }
    mets = {
        name: None if v is None else metrics(CoefficientProfile(x, v), truth, config.epsilon, config.b).to_dict()
        for name, v in profiles.items()
        if name != "c_true"
    }
    conv = dict(extra_conv)
    conv["step2"] = step2.report.to_dict()
    conv["step3"] = step3.report.to_dict()
    flags = []
    for stage, rep in conv.items():
        timings[f"{stage}_optimizer"] = rep.pop("wall_time")
        if rep["flagged"]:
            flags.append(f"{stage}: {rep['message']}")
    if step3.b1_flagged:
        flags.append("step3: no interval reduction (b1 = b)")
    return RunReport(
        mode=mode,
        config=config.to_dict(),
        x=x,
        profiles=profiles,
        metrics=mets,
        convergence=conv,
        b1=step3.b1,
        b1_flagged=step3.b1_flagged,
        flags=flags,
        warnings=[f"step2: {w}" for w in step2.warnings] + [f"step3: {w}" for w in step3.warnings],
        global_diagnostics=diagnostics,
        timings=timings,
    )


def run_hybrid(config: ExperimentConfig, traces: TimeTraces | None = None) -> RunReport:
    """Steps 1-3 on synthetic (or supplied) data; persists outputs when
    ``config.output_dir`` is set."""
    out = config.output_dir
    timings = {}
    t0 = time.perf_counter()
    grid = config.local_grid
    if traces is None:
        traces, _ = _stage("simulate", make_traces, config)
    truth = true_profile(config, grid.x)
    if out is not None:
        write_traces(out, traces)
    timings["simulate"] = time.perf_counter() - t0
    data = _stage("preprocess", preprocess, traces, config)

    t0 = time.perf_counter()
    rec, Q, _ = _stage("global", global_step, data, config, out)
    timings["global"] = time.perf_counter() - t0
    c_glob, clipped = _stage("interpolate", admissible, rec.profile.on(grid.x), config.c_min)

    step2, step3 = _local_steps(data, c_glob, c_glob, config, timings)
    diagnostics = {
        "x_h": [float(v) for v in rec.x],
        "c_glob_h": [float(v) for v in rec.c],
        "per_s_spread": rec.spread,
        "h2_norm": Q.h2_norm(),
    }
    report = _report("hybrid", config, truth, c_glob, step2, step3, {"global": Q.report.to_dict()}, diagnostics, timings)
    if clipped:
        report.warnings.insert(0, f"global: c_glob raised to c_min = {config.c_min:g} at {clipped} nodes")
    if out is not None:
        persist_report(report, out)
    return report


def run_local_only(config: ExperimentConfig, traces: TimeTraces | None = None) -> RunReport:
    """Steps 2-3 from the homogeneous first guess, regularised towards it."""
    out = config.output_dir
    timings = {}
    t0 = time.perf_counter()
    grid = config.local_grid
    if traces is None:
        traces, _ = _stage("simulate", make_traces, config)
    truth = true_profile(config, grid.x)
    if out is not None:
        write_traces(out, traces)
    timings["simulate"] = time.perf_counter() - t0
    data = _stage("preprocess", preprocess, traces, config)
    start = CoefficientProfile.homogeneous(grid.x)
    step2, step3 = _local_steps(data, start, start, config, timings)
    report = _report("local_only", config, truth, None, step2, step3, {}, {}, timings)
    if out is not None:
        persist_report(report, out)
    return report


def compare(config: ExperimentConfig) -> dict:
    """Hybrid and local-only runs on the same data, with their final errors."""
    traces, _ = make_traces(config)
    base = config.output_dir
    hyb = run_hybrid(config.replace(output_dir=None if base is None else str(Path(base) / "hybrid")), traces)
    loc = run_local_only(config.replace(output_dir=None if base is None else str(Path(base) / "local_only")), traces)
    summary = {
        "example": config.example,
        "hybrid": {k: hyb.metrics[k] for k in ("c_glob", "c_local1", "c_local2")},
        "local_only": {k: loc.metrics[k] for k in ("c_local1", "c_local2")},
        "hybrid_final_rel_l2": hyb.final_error(),
        "local_only_final_rel_l2": loc.final_error(),
        "ratio": hyb.final_error() / loc.final_error() if loc.final_error() > 0 else None,
        "flags": [f"hybrid {f}" for f in hyb.flags] + [f"local_only {f}" for f in loc.flags],
    }
    if base is not None:
        atomic_write(Path(base) / "compare.json", json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return {"summary": summary, "hybrid": hyb, "local_only": loc}
