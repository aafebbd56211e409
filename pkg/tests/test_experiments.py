import json
import math
from dataclasses import replace

import numpy as np
import pytest

from nsstab.baseflows import BaseFlowSpec, PerturbationSpec
from nsstab.experiments import (
    ExperimentConfig,
    bootstrap_check,
    check_energy_budget_c5,
    check_z_budget_d2,
    dumps,
    gronwall_check,
    i3_i4_relative,
    l4_chain_check,
    report_paths,
    run_experiment,
    summarize_sweep,
    threshold_sweep,
    write_report,
    write_sweep,
)
from nsstab.fields import BoxSpec, PhysicalVectorField, forward_transform
from nsstab.norms import DiagnosticSeries, accumulate_quantities, quantity_history
from nsstab.solver import SolverConfig, set_viscosity_sign

BOX16 = BoxSpec.cube(16)
BOX32 = BoxSpec.cube(32)
PI = math.pi


def config(box=BOX16, nu=0.1, t_end=1.0, base=None, pert=None, **kw):
    solver_kw = {k: kw.pop(k) for k in ("dt", "record_every") if k in kw}
    return ExperimentConfig(
        box=box,
        solver=SolverConfig(nu=nu, t_end=t_end, **solver_kw),
        base=base or BaseFlowSpec(),
        perturbation=pert or PerturbationSpec(case="i", epsilon=1e-3, seed=1),
        **kw,
    )


def field(box, fn):
    X, Y, Z = box.grid()
    comps = [np.broadcast_to(c, box.resolution) for c in fn(X, Y, Z)]
    return forward_transform(PhysicalVectorField(np.stack(comps).astype(float), box))


def zero_field(box):
    return field(box, lambda X, Y, Z: (0.0, 0.0, 0.0))


@pytest.fixture(scope="module")
def case_ii_report():
    return run_experiment(
        config(base=BaseFlowSpec(), pert=PerturbationSpec(case="ii", epsilon=1e-2, bulk_amplitude=1.0, seed=2))
    )


@pytest.fixture(scope="module")
def ripple_report():
    return run_experiment(
        config(
            base=BaseFlowSpec(ripple=0.05),
            pert=PerturbationSpec(case="ii", epsilon=1e-2, bulk_amplitude=1.0, seed=4),
        )
    )


class TestConfig:
    def test_horizon_defaults_to_t_end(self):
        assert config(t_end=2.5).horizon == 2.5

    @pytest.mark.parametrize(
        "kw",
        [
            dict(horizon=2.0),
            dict(horizon=-0.1),
            dict(sweep=(1.0, 0.5)),
            dict(sweep=(1.0, 1.0)),
            dict(sweep=(-1.0, 1.0)),
            dict(snapshot_times=(2.0,)),
        ],
    )
    def test_rejects(self, kw):
        with pytest.raises(ValueError):
            config(**kw)

    def test_round_trip_and_hash(self):
        cfg = config(
            base=BaseFlowSpec(kind="forced_2d", forcing_amplitude=0.2, seed=3),
            pert=PerturbationSpec(case="ii", epsilon=0.1, bulk_amplitude=2.0),
            sweep=(0.0, 0.1, 1.0),
            snapshot_times=(0.5,),
        )
        back = ExperimentConfig.from_dict(json.loads(json.dumps(cfg.to_dict())))
        assert back == cfg and back.config_hash() == cfg.config_hash()

    def test_hash_sees_every_field(self):
        cfg = config()
        assert cfg.with_epsilon(2e-3).config_hash() != cfg.config_hash()
        assert replace(cfg, horizon=0.5).config_hash() != cfg.config_hash()

    def test_with_epsilon_drops_sweep(self):
        cfg = config(sweep=(0.1, 1.0)).with_epsilon(0.1)
        assert cfg.sweep == () and cfg.perturbation.epsilon == 0.1


class TestTrivialCases:
    def test_zero_perturbation(self):
        r = run_experiment(config(pert=PerturbationSpec(case="i", epsilon=0.0)))
        assert not r.aborted
        assert np.all(r.series["u"].column("energy") == 0.0)
        assert r.verdict.stable and r.verdict.measured_A0 == 0.0
        assert r.verdict.gronwall_C is None
        with pytest.raises(ValueError, match="K0 = 0"):
            gronwall_check(r)

    def test_single_viscous_mode_without_base(self):
        # u = a (sin z, 0, 0) decays as exp(-nu t) and carries no interaction terms
        a, nu = 0.3, 0.1
        u0 = field(BOX16, lambda X, Y, Z: (a * np.sin(Z), 0.0, 0.0))
        r = run_experiment(config(nu=nu), w0=zero_field(BOX16), u0=u0)
        s = r.series["u"]
        exact = a**2 * 4 * PI**3 * np.exp(-2 * nu * s.t)
        np.testing.assert_allclose(s.column("energy"), exact, rtol=1e-12)
        for k in range(1, 5):
            assert np.abs(s.column(f"I{k}")).max() < 1e-14
        assert check_energy_budget_c5(r) <= 1e-6
        assert check_z_budget_d2(r) <= 1e-6


class TestBudgets:
    def test_budgets_close(self, case_ii_report):
        assert check_energy_budget_c5(case_ii_report) <= 1e-3
        assert check_z_budget_d2(case_ii_report) <= 1e-3

    def test_consistency_residual(self, case_ii_report):
        assert 0 < case_ii_report.consistency_residual <= 1e-3

    def test_planar_base_kills_i3_i4(self, case_ii_report):
        s = case_ii_report.series["u"]
        assert np.all(s.column("I3") == 0.0) and np.all(s.column("I4") == 0.0)
        assert np.abs(s.column("I1")).max() > 0 and np.abs(s.column("I2")).max() > 0
        assert i3_i4_relative(case_ii_report) == 0.0

    def test_ripple_base_budget_with_all_terms(self, ripple_report):
        # a z-dependent base switches on I3 and I4; the budget only closes with the right signs
        s = ripple_report.series["u"]
        scale = np.abs(s.column("I1")).max()
        assert np.abs(s.column("I3")).max() > 1e-3 * scale
        assert np.abs(s.column("I4")).max() > 1e-3 * scale
        assert check_z_budget_d2(ripple_report) <= 1e-3
        assert check_energy_budget_c5(ripple_report) <= 1e-3
        assert ripple_report.extra_condition[0] > 0 and ripple_report.extra_condition[1] > 0

    def test_residual_shrinks_with_sampling_stride(self):
        pert = PerturbationSpec(case="ii", epsilon=1e-2, bulk_amplitude=1.0, seed=2)
        res = [
            check_energy_budget_c5(run_experiment(config(pert=pert, dt=0.02, record_every=k)))
            for k in (4, 2)
        ]
        assert res[1] < res[0] / 3

    def test_budget_record_fields(self, case_ii_report):
        b = case_ii_report.budgets[len(case_ii_report.budgets) // 2]
        assert b.dissipation >= 0 and b.dissipation_z >= 0
        assert b.dE_dt == pytest.approx(b.dissipation * -1 + b.rhs_c5, rel=1e-2, abs=1e-12)


class TestBootstrap:
    def series(self, Ez, Dz, t):
        s = DiagnosticSeries(meta={"nu": 0.5})
        for ti, e, d in zip(t, Ez, Dz):
            s.append(ti, {"energy": 1.0, "dissipation": 1.0, "energy_z": e, "dissipation_z": d})
        return s

    def test_constant_trajectory(self):
        # J = 1 + sqrt(t); with nu = 0.5 the initial constant is 2, so J0 = 2
        t = np.linspace(0, 1, 11)
        s = self.series(np.ones_like(t), np.ones_like(t), t)
        v = bootstrap_check(accumulate_quantities(s), s)
        assert v.stable  # J(1) = 2 <= 2 J0 = 4
        assert v.measured_A0 == 0.0 and v.condition_holds and v.implication_holds

    def test_growing_trajectory_is_unstable(self):
        t = np.linspace(0, 1, 11)
        Ez = np.exp(6 * t)
        s = self.series(Ez, np.zeros_like(t), t)
        q = accumulate_quantities(s)
        v = bootstrap_check(q, s)
        assert not v.stable
        # A0 is the smallest constant with J <= A I^(1/4) J^(5/4) + J0 at every horizon
        h = quantity_history(s, 0.5)
        A = (h["J"] - q.J0) / (h["I"] ** 0.25 * h["J"] ** 1.25)
        assert v.measured_A0 == pytest.approx(A.max(), rel=1e-12)
        assert v.condition_value == pytest.approx(v.measured_A0 * q.I**0.25 * (2 * q.J0) ** 0.25, rel=1e-12)
        assert v.implication_holds == (not v.condition_holds)

    def test_l_bound_only_for_planar_base(self):
        t = np.linspace(0, 1, 5)
        s = self.series(np.ones_like(t), np.ones_like(t), t)
        q = accumulate_quantities(s)
        assert bootstrap_check(q, s, planar_base=True).L_bound_holds is True
        assert bootstrap_check(q, s, planar_base=False).L_bound_holds is None


class TestGronwall:
    def test_without_base_bound_is_one(self):
        r = run_experiment(
            config(base=BaseFlowSpec(kind="zero", amplitude=0.0), pert=PerturbationSpec(case="i", epsilon=0.5, seed=3))
        )
        C, bound = gronwall_check(r)
        assert bound == 1.0
        assert C <= 1 + 1e-6

    def test_taylor_green_weight_closed_form(self):
        # max |grad w|_F of Taylor-Green is sqrt(2) exp(-2 nu t)
        nu, T = 0.1, 5.0
        r = run_experiment(config(nu=nu, t_end=T))
        G = r.series["u"].get("gronwall_weight")[-1]
        assert G == pytest.approx(math.sqrt(2) * (1 - math.exp(-2 * nu * T)) / (2 * nu), rel=1e-4)
        C, bound = gronwall_check(r)
        assert C <= bound


class TestL4Chain:
    def test_separable_oracle(self):
        # u = exp(-r t) (0, sin x cos z, 0) is an exact decaying solution with r = 2 nu
        nu, T = 0.1, 1.0
        r_ = 2 * nu
        u0 = field(BOX16, lambda X, Y, Z: (0.0, np.sin(X) * np.cos(Z), 0.0))
        rep = run_experiment(config(nu=nu, t_end=T, dt=0.01), w0=zero_field(BOX16), u0=u0)
        res = l4_chain_check(rep)

        l6_pow6 = (5 * PI / 8) ** 2 * 2 * PI
        l4_pow4 = (3 * PI / 4) ** 2 * 2 * PI
        l3l6 = (l6_pow6**0.5 * (1 - math.exp(-3 * r_ * T)) / (3 * r_)) ** (1 / 3)
        l4 = (l4_pow4 * (1 - math.exp(-4 * r_ * T)) / (4 * r_)) ** 0.25
        sup = math.sqrt(2 * PI**3)
        grad_sq = 4 * PI**3 * (1 - math.exp(-2 * r_ * T)) / (2 * r_)
        assert res.l3_l6 == pytest.approx(l3l6, rel=1e-5)
        assert res.l4 == pytest.approx(l4, rel=1e-5)
        assert res.embedding_constant == pytest.approx(l3l6 / (sup ** (1 / 3) * grad_sq ** (1 / 3)), rel=1e-5)
        assert res.interpolation_ratio == pytest.approx(l4 / (l3l6**0.75 * sup**0.25), rel=1e-5)
        assert res.interpolation_ratio <= 1.0

    def test_planar_perturbation_rejected(self):
        r = run_experiment(config(pert=PerturbationSpec(case="ii", epsilon=0.0, bulk_amplitude=1.0)))
        with pytest.raises(ValueError, match="u_z vanishes"):
            l4_chain_check(r)

    def test_constants_stable_under_refinement(self):
        pert = PerturbationSpec(case="i", epsilon=0.1, seed=5, max_mode=4)
        a, b = (l4_chain_check(run_experiment(config(box=box, pert=pert))) for box in (BOX16, BOX32))
        for name in ("embedding_constant", "interpolation_ratio", "l4_constant"):
            x, y = getattr(a, name), getattr(b, name)
            assert abs(x - y) <= 0.1 * abs(y), name


class TestSweeps:
    def test_zero_sweep_is_trivially_stable(self):
        res = threshold_sweep(config(sweep=(0.0,)))
        assert res.stable == [True]
        assert res.largest_stable == 0.0 and res.smallest_unstable is None
        assert res.threshold_estimate is None

    def test_all_stable_is_one_sided(self):
        res = threshold_sweep(config(t_end=0.5, sweep=(1e-3, 1e-2)))
        assert res.largest_stable == 1e-2 and res.smallest_unstable is None

    def test_fabricated_outcomes(self):
        base = run_experiment(config(t_end=0.2))
        eps = [1.0, 2.0, 3.0, 4.0]
        outcome = [True, False, True, False]
        reports = [replace(base, verdict=replace(base.verdict, stable=s)) for s in outcome]
        res = summarize_sweep(config(), eps, reports)
        assert res.largest_stable == 3.0 and res.smallest_unstable == 2.0
        assert res.monotonicity_violations == [3.0]
        assert res.threshold_estimate is None  # bracket inverted by the violation

        res = summarize_sweep(config(), [0.0, 1.0], [reports[0], reports[1]])
        assert res.threshold_estimate == 0.5
        res = summarize_sweep(config(), [1.0, 4.0], [reports[0], reports[1]])
        assert res.threshold_estimate == pytest.approx(2.0)
        assert all(r.verdict.threshold_estimate == pytest.approx(2.0) for r in res.reports)

    def test_all_unstable_is_one_sided(self):
        base = run_experiment(config(t_end=0.2))
        bad = replace(base, verdict=replace(base.verdict, stable=False))
        res = summarize_sweep(config(), [1.0, 2.0], [bad, bad])
        assert res.largest_stable is None and res.smallest_unstable == 1.0

    def test_parallel_matches_serial(self):
        cfg = config(t_end=0.3, sweep=(1e-3, 1e-1))
        serial = threshold_sweep(cfg, threads=1).summary()
        parallel = threshold_sweep(cfg, threads=2).summary()
        assert dumps(serial) == dumps(parallel)

    def test_bulk_amplitude_moves_threshold(self):
        # at 16^3 the case-ii thresholds are about 311, 309 and 302.5 for bulk 0, 1, 5
        grid = (300.0, 305.0, 308.0, 312.0)
        brackets = {}
        for bulk in (0.0, 1.0, 5.0):
            cfg = config(
                t_end=5.0,
                pert=PerturbationSpec(case="ii", epsilon=1.0, bulk_amplitude=bulk, seed=1),
                sweep=grid,
            )
            res = threshold_sweep(cfg)
            assert not res.monotonicity_violations
            brackets[bulk] = (res.largest_stable, res.smallest_unstable)
        assert brackets[0.0] == (308.0, 312.0)
        assert brackets[1.0] == (308.0, 312.0)
        assert brackets[5.0] == (300.0, 305.0)


class TestReports:
    def test_write_refuse_force(self, tmp_path, case_ii_report):
        paths = write_report(case_ii_report, tmp_path)
        assert set(paths) >= {"summary", "budgets", "u", "v", "w"}
        for p in paths.values():
            assert p.exists()
        with pytest.raises(FileExistsError, match="use --force"):
            write_report(case_ii_report, tmp_path)
        write_report(case_ii_report, tmp_path, force=True)
        summary = json.loads(paths["summary"].read_text())
        assert summary["config_hash"] == case_ii_report.config_hash
        assert summary["status"] == "ok"
        back = DiagnosticSeries.from_csv(paths["u"])
        np.testing.assert_array_equal(back.column("energy"), case_ii_report.series["u"].column("energy"))

    def test_summary_reproducible_from_echoed_config(self, case_ii_report):
        summary = case_ii_report.summary()
        again = run_experiment(ExperimentConfig.from_dict(summary["config"]))
        assert dumps(again.summary()) == dumps(summary)

    def test_snapshots(self, tmp_path):
        r = run_experiment(config(t_end=0.5, snapshot_times=(0.0, 0.25)))
        assert [s[0] for s in r.snapshots] == [0.0, 0.25]
        assert r.snapshots[1][1] >= 0.25
        paths = write_report(r, tmp_path)
        assert paths["snapshot@0.25"].exists()
        assert paths["snapshot@0.25"] == report_paths(r, tmp_path)["snapshot@0.25"]

    def test_aborted_run_is_unstable(self, tmp_path):
        set_viscosity_sign(-1.0)
        try:
            r = run_experiment(config(t_end=0.5))
        finally:
            set_viscosity_sign(1.0)
        assert r.aborted and "blow-up" in r.abort_message
        assert r.verdict is not None and not r.verdict.stable
        summary = json.loads(write_report(r, tmp_path)["summary"].read_text())
        assert summary["status"] == "aborted" and summary["verdict"]["stable"] is False

    def test_zero_base_case_ii(self):
        r = run_experiment(
            config(
                base=BaseFlowSpec(kind="zero", amplitude=0.0),
                pert=PerturbationSpec(case="ii", epsilon=1e-2, bulk_amplitude=2.0, seed=1),
            )
        )
        assert r.verdict.stable
        assert r.extra_condition == (0.0, 0.0)
        assert r.series["w"].column("energy").max() == 0.0
        assert r.forcing == {"kind": "zero"}

    def test_sweep_files(self, tmp_path):
        res = threshold_sweep(config(t_end=0.2, sweep=(0.0, 1e-3)))
        path = write_sweep(res, tmp_path)
        data = json.loads(path.read_text())
        assert [m["epsilon"] for m in data["members"]] == [0.0, 1e-3]
        for r in res.reports:
            assert report_paths(r, tmp_path)["summary"].exists()
        with pytest.raises(FileExistsError):
            write_sweep(res, tmp_path)


class TestGolden:
    GOLDEN = __import__("pathlib").Path(__file__).parent / "golden"

    def test_golden_sweep_bracket(self):
        from nsstab.cli import load_config

        golden = json.loads((self.GOLDEN / "sweep_tg_case_i.json").read_text())
        cfg = load_config(self.GOLDEN.parents[1] / "configs" / "tg_sweep_case_i.toml").experiment
        res = threshold_sweep(cfg)
        assert res.largest_stable == golden["bracket"]["largest_stable"] == 80.5
        assert res.smallest_unstable == golden["bracket"]["smallest_unstable"] == 300.0
        # the fine-sweep threshold (about 97.5) lies inside the bracket
        assert res.largest_stable < 97.5 < res.smallest_unstable
        for m, r in zip(golden["members"], res.reports):
            assert r.verdict.measured_A0 == pytest.approx(m["measured_A0"], rel=1e-8)
