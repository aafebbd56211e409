"""Built-in verification battery run by ``nsstab verify``.

Every check is deterministic and short (32^3, horizons of order one), and
returns a :class:`CheckResult` whose ``detail`` string is formatted so that
repeated runs print identical output.
"""
from __future__ import annotations

import math
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .baseflows import BaseFlowSpec, PerturbationSpec, make_base_flow, make_perturbation, philox
from .experiments import (
    ExperimentConfig,
    check_energy_budget_c5,
    check_z_budget_d2,
    gronwall_check,
    i3_i4_relative,
    run_experiment,
)
from .fields import (
    BoxSpec,
    PhysicalVectorField,
    SpectralVectorField,
    forward_transform,
    inner_product,
    inverse_transform,
    leray_project,
    load_snapshot,
    save_snapshot,
    to_physical,
)
from .solver import (
    SolverConfig,
    SolverState,
    energy_identity_residual,
    load_checkpoint,
    march,
    nonlinear_term,
    run,
    save_checkpoint,
)

RESOLUTION = 32


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str


def _box() -> BoxSpec:
    return BoxSpec.cube(RESOLUTION)


def _random_field(box: BoxSpec, seed: int, rms: float = 1.0) -> SpectralVectorField:
    u = make_perturbation(PerturbationSpec(case="i", epsilon=1.0, seed=seed), box)
    return u * (rms * math.sqrt(box.volume))


def _taylor_green(box: BoxSpec) -> SpectralVectorField:
    return make_base_flow(BaseFlowSpec(kind="taylor_green_2d"), box)


def check_round_trip() -> CheckResult:
    box = _box()
    rng = philox(7, 0)
    f = PhysicalVectorField(rng.standard_normal((3,) + box.resolution), box)
    err = float(np.abs(inverse_transform(forward_transform(f)).data - f.data).max())
    return CheckResult("transform round trip", err <= 1e-12, f"max error {err:.1e} <= 1e-12")


def check_snapshot() -> CheckResult:
    box = _box()
    f = inverse_transform(_random_field(box, 3))
    with tempfile.TemporaryDirectory() as tmp:
        path = save_snapshot(Path(tmp) / "snap.npz", f)
        g, _ = load_snapshot(path)
    same = bool(np.array_equal(f.data, g.data)) and g.box == box
    return CheckResult("snapshot round trip", same, "bit-exact" if same else "mismatch")


def check_projection() -> CheckResult:
    box = _box()
    X, Y, Z = box.grid()
    # gradient of sin x cos 2y sin z
    grad = np.stack(
        [
            np.cos(X) * np.cos(2 * Y) * np.sin(Z),
            -2 * np.sin(X) * np.sin(2 * Y) * np.sin(Z),
            np.sin(X) * np.cos(2 * Y) * np.cos(Z),
        ]
    )
    g = forward_transform(PhysicalVectorField(grad, box))
    left = leray_project(g).l2_norm() / g.l2_norm()
    return CheckResult("projection removes gradients", left <= 1e-13, f"residual {left:.1e} <= 1e-13")


def check_taylor_green() -> CheckResult:
    box, nu = _box(), 0.1
    v0 = _taylor_green(box)
    out = {}

    def observer(sample):
        out["v"] = sample.velocity.data.copy()
        return {"energy": sample.v_hat.l2_norm() ** 2}

    run(v0, SolverConfig(nu=nu, t_end=1.0), observer=observer)
    exact = to_physical(v0.coeffs, box) * math.exp(-2 * nu)
    err = math.sqrt(float(np.sum((out["v"] - exact) ** 2)) / float(np.sum(exact**2)))
    return CheckResult("Taylor-Green decay", err <= 1e-8, f"relative error {err:.1e} <= 1e-8")


def check_viscous_mode() -> CheckResult:
    box, nu, amp = _box(), 0.2, 0.5
    X, Y, Z = box.grid()
    data = np.zeros((3,) + box.resolution)
    data[0] = amp * np.sin(Y)
    v0 = forward_transform(PhysicalVectorField(data, box))
    out = {}

    def observer(sample):
        out["vx"] = sample.velocity.data[0].copy()
        return {"energy": sample.v_hat.l2_norm() ** 2}

    run(v0, SolverConfig(nu=nu, t_end=1.0), observer=observer)
    err = float(np.abs(out["vx"] - amp * math.exp(-nu) * np.sin(Y)).max())
    return CheckResult("viscous mode decay", err <= 1e-10, f"max error {err:.1e} <= 1e-10")


def check_skew_symmetry() -> CheckResult:
    box = _box()
    worst = 0.0
    for seed in range(10):
        v = _random_field(box, 100 + seed, rms=1.0 + seed)
        n = nonlinear_term(v)
        worst = max(worst, abs(inner_product(n, v)) / (n.l2_norm() * v.l2_norm()))
    return CheckResult("trilinear skew-symmetry", worst <= 1e-11, f"max relative {worst:.1e} <= 1e-11")


def check_energy_identity() -> CheckResult:
    box, nu = _box(), 0.05
    series = run(_random_field(box, 11, rms=0.5), SolverConfig(nu=nu, t_end=1.0))
    res = energy_identity_residual(series, nu)
    E = series.column("energy")
    monotone = bool(np.all(np.diff(E) <= 0))
    ok = res <= 1e-3 and monotone
    return CheckResult("energy identity", ok, f"residual {res:.1e} <= 1e-3, nonincreasing={monotone}")


def check_planar_invariance() -> CheckResult:
    box = _box()
    w0 = make_base_flow(BaseFlowSpec(kind="random_2d", amplitude=0.5, seed=4), box)
    worst = [0.0]

    def on_sample(states):
        c = states[0].v_hat.coeffs
        kz = box.derivative_wavenumbers[2]
        ratio = SpectralVectorField(1j * kz * c, box).l2_norm() / states[0].v_hat.l2_norm()
        worst[0] = max(worst[0], ratio)

    march([SolverState(0.0, w0)], SolverConfig(nu=0.05, t_end=1.0), on_sample)
    return CheckResult("planar flows stay planar", worst[0] <= 1e-10, f"max |v_z|/|v| {worst[0]:.1e} <= 1e-10")


def _case_ii_report():
    box = _box()
    cfg = ExperimentConfig(
        box=box,
        solver=SolverConfig(nu=0.1, t_end=1.0),
        base=BaseFlowSpec(kind="taylor_green_2d"),
        perturbation=PerturbationSpec(case="ii", epsilon=1e-2, bulk_amplitude=1.0, seed=2),
    )
    return run_experiment(cfg)


def check_budgets(report) -> list[CheckResult]:
    names = ["perturbation energy budget", "z-derivative budget", "I3 = I4 = 0 for planar base", "Gronwall bound"]
    if report.aborted:
        return [CheckResult(n, False, f"experiment aborted: {report.abort_message}") for n in names]
    c5 = check_energy_budget_c5(report)
    d2 = check_z_budget_d2(report)
    i34 = i3_i4_relative(report)
    C, bound = gronwall_check(report)
    return [
        CheckResult("perturbation energy budget", c5 <= 1e-3, f"residual {c5:.1e} <= 1e-3"),
        CheckResult("z-derivative budget", d2 <= 1e-3, f"residual {d2:.1e} <= 1e-3"),
        CheckResult("I3 = I4 = 0 for planar base", i34 <= 1e-11, f"relative {i34:.1e} <= 1e-11"),
        CheckResult("Gronwall bound", C <= 1.1 * bound, f"K/K0 {C:.3f} <= 1.1 x {bound:.3f}"),
    ]


def check_restart() -> CheckResult:
    box = _box()
    cfg = SolverConfig(nu=0.05, t_end=0.5, record_every=2)
    v0 = _random_field(box, 21, rms=0.5)
    full = run(v0, cfg)
    saved = {}
    with tempfile.TemporaryDirectory() as tmp:

        def capture(states):
            if states[0].step_index == 4:
                saved["state"] = load_checkpoint(save_checkpoint(Path(tmp) / "ck.npz", states[0], cfg), cfg)

        march([SolverState(0.0, v0)], cfg, capture)
    tail = run(saved["state"], cfg)
    n = len(tail)
    same = tail.times == full.times[-n:] and all(
        tail.records[k] == full.records[k][-n:] for k in full.names
    )
    return CheckResult("checkpoint restart", bool(same), "bit-exact tail" if same else "tail differs")


CHECKS: list[tuple[str, Callable[[], CheckResult]]] = [
    ("transform round trip", check_round_trip),
    ("snapshot round trip", check_snapshot),
    ("projection removes gradients", check_projection),
    ("Taylor-Green decay", check_taylor_green),
    ("viscous mode decay", check_viscous_mode),
    ("trilinear skew-symmetry", check_skew_symmetry),
    ("energy identity", check_energy_identity),
    ("planar flows stay planar", check_planar_invariance),
    ("checkpoint restart", check_restart),
]


def run_battery(emit: Callable[[CheckResult], None] | None = None) -> list[CheckResult]:
    """Run every check in order; ``emit`` is called as each result arrives."""
    results = []

    def record(r):
        results.append(r)
        if emit:
            emit(r)

    for name, check in CHECKS:
        try:
            record(check())
        except Exception as exc:  # a crashing check is a failing check
            record(CheckResult(name, False, f"error: {exc}"))
    try:
        for r in check_budgets(_case_ii_report()):
            record(r)
    except Exception as exc:
        record(CheckResult("experiment budgets", False, f"error: {exc}"))
    return results
