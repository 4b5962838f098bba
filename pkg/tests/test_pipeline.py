import json

import numpy as np
import pytest

from convexcip.forward import CoefficientProfile
from convexcip.pipeline import (
    ExperimentConfig,
    PipelineError,
    RunReport,
    builtin_profile,
    chi,
    compare,
    admissible,
    make_traces,
    metrics,
    preprocess,
    read_traces,
    run_hybrid,
    run_local_only,
    write_traces,
)

X = ExperimentConfig().local_grid.x


class TestProfiles:
    def test_documented_values(self):
        assert builtin_profile(1, [0.05]).values[0] == 4.0
        assert builtin_profile(3, [0.2]).values[0] == 1.0
        assert builtin_profile(4, [0.1]).values[0] == 4.0
        assert builtin_profile(2, [0.05]).values[0] == 15.0
        assert builtin_profile(3, [0.1]).values[0] == 0.5

    def test_unknown(self):
        with pytest.raises(ValueError):
            builtin_profile(7)

    def test_chi_inclusive_on_grid(self):
        assert chi(X, 0.03, 0.1).sum() == 15
        assert chi([0.03, 0.1, 0.1001], 0.03, 0.1).tolist() == [1.0, 1.0, 0.0]

    def test_default_nodes(self):
        assert builtin_profile(1).x.size == 141


class TestMetrics:
    def test_identity(self):
        p = builtin_profile(1, X)
        m = metrics(p, p)
        assert (m.rel_l2, m.sup, m.jaccard) == (0.0, 0.0, 1.0)

    def test_homogeneous_against_example1(self):
        t = builtin_profile(1, X)
        m = metrics(CoefficientProfile.homogeneous(X), t)
        three_chi = 3 * chi(X, 0.03, 0.1)
        assert m.rel_l2 == pytest.approx(np.linalg.norm(three_chi) / np.linalg.norm(1 + three_chi), rel=1e-14)
        assert m.jaccard == 0.0 and m.sup == 3.0

    def test_jaccard_partial(self):
        t = builtin_profile(1, X)
        est = CoefficientProfile(X, 1 + 3 * chi(X, 0.03, 0.065))
        assert metrics(est, t).jaccard == pytest.approx(8 / 15)

    def test_restriction(self):
        t = builtin_profile(1, X)
        est = t.values.copy()
        est[X > 0.45] = 9.0
        assert metrics(CoefficientProfile(X, est), t, b=0.4).rel_l2 == 0.0

    def test_grid_mismatch(self):
        with pytest.raises(ValueError):
            metrics(np.ones(3), np.ones(4))
        with pytest.raises(ValueError):
            metrics(builtin_profile(1, X), builtin_profile(1, X + 0.001))


class TestConfig:
    def test_yaml(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("example: 3\nalpha: 1.0e-4\nN: 9\n")
        cfg = ExperimentConfig.load(path, noise=0.0)
        assert (cfg.example, cfg.alpha, cfg.N, cfg.noise) == (3, 1e-4, 9, 0.0)

    def test_unknown_key(self, tmp_path):
        with pytest.raises(ValueError, match="lamda"):
            ExperimentConfig.from_mapping({"lamda": 3})

    def test_string_coercion(self):
        cfg = ExperimentConfig.from_mapping({"N": "7", "lam": "2.5", "output_dir": "out"})
        assert cfg.N == 7 and cfg.lam == 2.5 and cfg.output_dir == "out"

    def test_integer_check(self):
        with pytest.raises(ValueError):
            ExperimentConfig.from_mapping({"N": 7.5})

    @pytest.mark.parametrize(
        "kw", [dict(b=0.6), dict(x0=0.1), dict(noise=-1), dict(lam=0), dict(N=0), dict(c_min=0), dict(p2_source="x")]
    )
    def test_validation(self, kw):
        with pytest.raises(ValueError):
            ExperimentConfig(**kw)

    def test_not_a_mapping(self, tmp_path):
        path = tmp_path / "c.yaml"
        path.write_text("- 1\n- 2\n")
        with pytest.raises(ValueError):
            ExperimentConfig.load(path)

    def test_misfit_config(self):
        m = ExperimentConfig(alpha=0.01, max_iter_local=5).misfit_config()
        assert m.alpha == 0.01 and m.optimizer.max_iter == 5 and m.grid.x_left == 0.0


class TestTraceIO:
    def test_round_trip(self, tmp_path):
        traces, _ = make_traces(ExperimentConfig(example=4, noise=0.05, seed=3))
        write_traces(tmp_path, traces)
        back = read_traces(tmp_path)
        assert np.array_equal(back.p1, traces.p1) and np.array_equal(back.p2, traces.p2)
        assert back.dt == traces.dt
        assert (tmp_path / "p1.csv").read_text().startswith("# dx=0.005, dt=0.001, T=2.0, seed=3, noise_level=0.05")

    def test_noise_is_seeded(self):
        a, _ = make_traces(ExperimentConfig(seed=1))
        b, _ = make_traces(ExperimentConfig(seed=1))
        c, _ = make_traces(ExperimentConfig(seed=2))
        assert np.array_equal(a.p1, b.p1) and not np.array_equal(a.p1, c.p1)


class TestPreprocess:
    def test_noiseless_passthrough(self, noiseless):
        traces, _ = make_traces(noiseless)
        assert preprocess(traces, noiseless) is traces

    def test_noisy_chain(self):
        cfg = ExperimentConfig(example=4, noise=0.1)
        clean, _ = make_traces(cfg.replace(noise=0.0))
        noisy, _ = make_traces(cfg)
        out = preprocess(noisy, cfg)
        onset = cfg.incident.onset(0.0)
        assert np.all(out.p1[out.t < onset] == 0) and np.all(out.p2[out.t < onset] == 0)
        assert out.meta["p2_source"] == "derived" and out.meta["denoise_keep"] == 60
        err = lambda a, b: np.linalg.norm(a - b) / np.linalg.norm(b)
        assert err(out.p1, clean.p1) < 0.5 * err(noisy.p1, clean.p1)
        assert err(out.p2, clean.p2) < 0.5 * err(noisy.p2, clean.p2)

    def test_measured_p2_kept(self):
        cfg = ExperimentConfig(example=4, noise=0.1, p2_source="measured")
        noisy, _ = make_traces(cfg)
        assert "p2_source" not in preprocess(noisy, cfg).meta


def test_admissible():
    prof = CoefficientProfile(X[:4], np.array([1.0, -2.0, 0.05, 3.0]))
    out, n = admissible(prof, 0.1)
    assert n == 2 and out.values.tolist() == [1.0, 0.1, 0.1, 3.0]


class TestErrors:
    def test_stage_named(self):
        with pytest.raises(PipelineError) as info:
            run_hybrid(ExperimentConfig(dt=0.01, noise=0.0))
        assert info.value.stage == "simulate"

    def test_custom_profile_file(self, tmp_path, noiseless):
        path = tmp_path / "c.csv"
        path.write_text("x,c\n-0.2,1\n0.5,1\n")
        rep = run_local_only(noiseless.replace(profile_file=str(path), max_iter_local=5))
        assert np.all(rep.profiles["c_true"] == 1.0)


@pytest.fixture(scope="module")
def homogeneous_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("hom")
    cfg = ExperimentConfig(example=0, noise=0.0, output_dir=str(out))
    return run_hybrid(cfg), out


class TestHomogeneousChain:
    def test_all_stages_near_one(self, homogeneous_run):
        rep, _ = homogeneous_run
        for name in ("c_glob", "c_local1", "c_local2"):
            assert np.max(np.abs(rep.profiles[name] - 1.0)) < 0.05, name

    def test_no_reduction_flag(self, homogeneous_run):
        rep, _ = homogeneous_run
        assert rep.b1_flagged and rep.b1 == 0.4
        assert "step3: no interval reduction (b1 = b)" in rep.flags
        assert not rep.failed

    def test_persisted_layout(self, homogeneous_run):
        rep, out = homogeneous_run
        for name in ("p1.csv", "p2.csv", "spectral.csv", "boundary.json", "qgrid.csv", "c_glob_h.csv", "report.json",
                     "timings.json", "profiles.csv"):
            assert (out / name).exists(), name
        assert (out / "report.json").read_text() == rep.to_json()
        assert "wall_time" not in rep.to_json()
        assert set(json.loads((out / "timings.json").read_text())) >= {"global", "step2", "step3"}

    def test_report_round_trip(self, homogeneous_run):
        rep, _ = homogeneous_run
        assert RunReport.from_json(rep.to_json()).to_json() == rep.to_json()

    def test_local_only_trivial(self, noiseless):
        rep = run_local_only(noiseless.replace(example=0))
        assert rep.convergence["step2"]["iterations"] == 0
        assert rep.final_error() == 0.0


@pytest.fixture(scope="module")
def example1_compare(tmp_path_factory):
    out = tmp_path_factory.mktemp("cmp1")
    return compare(ExperimentConfig(example=1, noise=0.0, output_dir=str(out))), out


class TestExample1:
    def test_compare_written(self, example1_compare):
        res, out = example1_compare
        saved = json.loads((out / "compare.json").read_text())
        assert saved["hybrid_final_rel_l2"] == res["hybrid"].final_error()
        assert (out / "hybrid" / "report.json").exists() and (out / "local_only" / "report.json").exists()

    def test_local_improves_on_global(self, example1_compare):
        m = example1_compare[0]["summary"]["hybrid"]
        assert m["c_local1"]["rel_l2"] < m["c_glob"]["rel_l2"]

    @pytest.mark.xfail(strict=True, reason="Step 3 restarts on a reduced interval set by a near-surface dip of the "
                                           "Step 2 profile and loses the inclusion; see the decisions ledger")
    def test_stage_monotonicity(self, example1_compare):
        m = example1_compare[0]["summary"]["hybrid"]
        assert m["c_local2"]["rel_l2"] <= m["c_local1"]["rel_l2"] <= m["c_glob"]["rel_l2"]


def test_noisy_determinism(tmp_path):
    cfg = ExperimentConfig(example=4, noise=0.1, seed=5, output_dir=str(tmp_path))
    a = run_hybrid(cfg)
    first = (tmp_path / "report.json").read_bytes()
    b = run_hybrid(cfg)
    assert a.to_json() == b.to_json()
    assert (tmp_path / "report.json").read_bytes() == first
