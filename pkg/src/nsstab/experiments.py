"""Perturbation experiments around a base flow.

``v`` (started from ``w0 + u0``) and ``w`` (started from ``w0``) are marched in
lockstep with a shared step size and identical forcing, and the perturbation
``u = v - w`` is diagnosed at every common sample. Sign conventions for the
recorded integrals (``<a, b>`` is the L2 pairing over the box):

* ``c5_integral = <(u.grad) w, u>``; the energy budget is
  ``d/dt ||u||^2 + 2 nu ||grad u||^2 = -2 c5_integral``.
* ``I1 = <(u_z.grad) w, u_z>``, ``I2 = <(u_z.grad) u, u_z>``,
  ``I3 = <(w_z.grad) u, u_z>``, ``I4 = <(u.grad) w_z, u_z>``; the z-budget is
  ``d/dt ||u_z||^2 + 2 nu ||grad u_z||^2 = -2 (I1 + I2 + I3 + I4)``.
"""
from __future__ import annotations

import json
import math
from collections import deque
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from .baseflows import (
    BaseFlowSpec,
    PerturbationSpec,
    extra_condition_diagnostics,
    make_base_flow,
    make_base_forcing,
    make_extra_condition_report,
    make_perturbation,
)
from .fields import (
    BoxSpec,
    SpectralVectorField,
    gradient,
    project_coeffs,
    save_snapshot,
    inverse_transform,
    spectral_tail_ratio,
    to_physical,
    to_spectral,
)
from .norms import (
    DiagnosticSeries,
    StabilityQuantities,
    accumulate_quantities,
    field_diagnostics,
    quantity_history,
)
from .solver import SolverAbort, SolverConfig, SolverState, march, stable_hash

RESOLUTION_TAIL_LIMIT = 1e-3
GRONWALL_SLACK = 1.1


@dataclass(frozen=True)
class ExperimentConfig:
    box: BoxSpec
    solver: SolverConfig
    base: BaseFlowSpec
    perturbation: PerturbationSpec
    horizon: float | None = None
    sweep: tuple[float, ...] = ()
    snapshot_times: tuple[float, ...] = ()

    def __post_init__(self):
        if self.horizon is None:
            object.__setattr__(self, "horizon", float(self.solver.t_end))
        if not (0 <= self.horizon <= self.solver.t_end):
            raise ValueError(
                f"horizon must lie in [0, solver.t_end={self.solver.t_end}], got {self.horizon}"
            )
        sweep = tuple(float(e) for e in self.sweep)
        if any(e < 0 or not math.isfinite(e) for e in sweep):
            raise ValueError(f"sweep values must be finite and >= 0, got {sweep}")
        if any(b <= a for a, b in zip(sweep, sweep[1:])):
            raise ValueError(f"sweep values must be strictly increasing, got {sweep}")
        object.__setattr__(self, "sweep", sweep)
        snaps = tuple(float(t) for t in self.snapshot_times)
        if any(not (0 <= t <= self.horizon) for t in snaps):
            raise ValueError(f"snapshot times must lie in [0, horizon], got {snaps}")
        object.__setattr__(self, "snapshot_times", snaps)

    def to_dict(self) -> dict:
        return {
            "box": {"lengths": list(self.box.lengths), "resolution": list(self.box.resolution)},
            "solver": self.solver.to_dict(),
            "base": self.base.to_dict(),
            "perturbation": self.perturbation.to_dict(),
            "horizon": self.horizon,
            "sweep": list(self.sweep),
            "snapshot_times": list(self.snapshot_times),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        box = BoxSpec(tuple(d["box"]["lengths"]), tuple(d["box"]["resolution"]))
        return cls(
            box=box,
            solver=SolverConfig(**d["solver"]),
            base=BaseFlowSpec(**d["base"]),
            perturbation=PerturbationSpec(**d["perturbation"]),
            horizon=d.get("horizon"),
            sweep=tuple(d.get("sweep", ())),
            snapshot_times=tuple(d.get("snapshot_times", ())),
        )

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())

    def with_epsilon(self, epsilon: float) -> "ExperimentConfig":
        return replace(self, perturbation=replace(self.perturbation, epsilon=float(epsilon)), sweep=())


@dataclass(frozen=True)
class BudgetRecord:
    t: float
    dE_dt: float
    dissipation: float
    rhs_c5: float
    dEz_dt: float
    dissipation_z: float
    I1: float
    I2: float
    I3: float
    I4: float
    residual_c5: float
    residual_d2: float


@dataclass(frozen=True)
class StabilityVerdict:
    stable: bool
    measured_A0: float
    condition_value: float
    condition_holds: bool
    implication_holds: bool
    gronwall_C: float | None
    gronwall_bound: float
    L_ratio: float | None
    L_bound_holds: bool | None
    threshold_estimate: float | None = None


@dataclass
class ExperimentReport:
    config: ExperimentConfig
    series: dict[str, DiagnosticSeries]
    budgets: list[BudgetRecord]
    quantities: StabilityQuantities | None
    verdict: StabilityVerdict | None
    resolution_health: dict
    extra_condition: tuple[float, float]
    consistency_residual: float
    forcing: dict
    aborted: bool = False
    abort_message: str | None = None
    snapshots: list[tuple[float, float, SpectralVectorField]] = field(default_factory=list)

    @property
    def config_hash(self) -> str:
        return self.config.config_hash()

    def summary(self) -> dict:
        return report_summary(self)


# ---------------------------------------------------------------------------
# per-sample interaction terms


def _advect(a: np.ndarray, grad: np.ndarray) -> np.ndarray:
    """``(a.grad) f`` with ``grad[i, j] = d_j f_i``."""
    return np.einsum("j...,ij...->i...", a, grad)


class _PairProbe:
    """Diagnostics of ``u = v - w`` and ``w`` sharing one set of transforms."""

    def __init__(self, box: BoxSpec, nu: float):
        self.box = box
        self.nu = nu
        self.gronwall = 0.0
        self._last = None  # (t, grad_linf of w)
        self._window: deque = deque(maxlen=3)
        self.consistency = []

    def _physical_grad(self, c):
        g = gradient(c, self.box)
        return g, to_physical(g.reshape((9,) + self.box.spectral_shape), self.box).reshape(
            (3, 3) + self.box.resolution
        )

    def sample(self, t: float, v_hat: SpectralVectorField, w_hat: SpectralVectorField):
        box, dV = self.box, self.box.cell_volume
        u_c = v_hat.coeffs - w_hat.coeffs
        u_hat = SpectralVectorField(u_c, box, divergence_free=True)
        phys = to_physical(np.concatenate([u_c, v_hat.coeffs]), box)
        u, v = phys[:3], phys[3:]
        gu_hat, gu = self._physical_grad(u_c)
        gw_hat, gw = self._physical_grad(w_hat.coeffs)
        uz, wz = gu[:, 2], gw[:, 2]

        def tri(a, g, b):
            return float(np.sum(_advect(a, g) * b)) * dV

        terms = {
            "c5_integral": tri(u, gw, u),
            "I1": tri(uz, gw, uz),
            "I2": tri(uz, gu, uz),
            "I3": tri(wz, gu, uz),
            "I4": 0.0,
        }
        if np.any(gw_hat[:, 2]):
            _, gwz = self._physical_grad(gw_hat[:, 2])
            terms["I4"] = tri(u, gwz, uz)

        grad_w = float(np.sqrt(np.sum(gw**2, axis=(0, 1))).max())
        if self._last is not None:
            t0, g0 = self._last
            self.gronwall += 0.5 * (t - t0) * (g0 + grad_w)
        self._last = (t, grad_w)

        u_rec = field_diagnostics(u_hat)
        u_rec.update(terms)
        u_rec["gronwall_weight"] = self.gronwall

        w_rec = {
            "energy": w_hat.l2_norm() ** 2,
            "grad_linf": grad_w,
            "tail_ratio": spectral_tail_ratio(w_hat),
        }
        w_rec.update(extra_condition_diagnostics(w_hat))
        v_rec = {
            "energy": v_hat.l2_norm() ** 2,
            "max_speed": math.sqrt(float(np.sum(v**2, axis=0).max())),
            "tail_ratio": spectral_tail_ratio(v_hat),
        }

        # right-hand side of the perturbation system, for the consistency residual
        adv = to_spectral(_advect(v, gu) + _advect(u, gw), box) * box.dealias_mask
        rhs = -project_coeffs(adv, box) - self.nu * box.k2 * u_c
        self._window.append((t, u_c, rhs))
        if len(self._window) == 3:
            self.consistency.append(self._consistency())
        return u_hat, u_rec, v_rec, w_rec

    def _consistency(self) -> float:
        """``u(t2) - u(t0)`` against the Simpson integral of the perturbation right-hand side."""
        (t0, u0, r0), (t1, _, r1), (t2, u2, r2) = self._window
        h1, h2 = t1 - t0, t2 - t1
        H = h1 + h2
        integral = H / 6 * ((2 - h2 / h1) * r0 + H**2 / (h1 * h2) * r1 + (2 - h1 / h2) * r2)
        box = self.box
        change = u2 - u0
        a = SpectralVectorField(change - integral, box).l2_norm()
        scale = max(SpectralVectorField(change, box).l2_norm(), SpectralVectorField(integral, box).l2_norm())
        return a / scale if scale > 0 else 0.0


# ---------------------------------------------------------------------------
# experiment


def run_experiment(
    config: ExperimentConfig,
    w0: SpectralVectorField | None = None,
    u0: SpectralVectorField | None = None,
) -> ExperimentReport:
    """Co-evolve ``w0 + u0`` and ``w0``; explicit fields override the generated ones."""
    box = config.box
    if w0 is None:
        w0 = make_base_flow(config.base, box)
    if u0 is None:
        u0 = make_perturbation(config.perturbation, box)
    forcing = make_base_forcing(config.base, box)
    nu = config.solver.nu

    probe = _PairProbe(box, nu)
    meta = {"nu": nu, "config_hash": config.config_hash()}
    series = {name: DiagnosticSeries(meta=dict(meta)) for name in ("u", "v", "w")}
    pending = sorted(config.snapshot_times)
    snapshots = []

    def on_sample(states):
        v_state, w_state = states
        t = v_state.t
        u_hat, u_rec, v_rec, w_rec = probe.sample(t, v_state.v_hat, w_state.v_hat)
        series["u"].append(t, u_rec)
        series["v"].append(t, v_rec)
        series["w"].append(t, w_rec)
        while pending and pending[0] <= t:
            snapshots.append((pending.pop(0), t, u_hat))

    states = [SolverState(0.0, w0 + u0, forcing), SolverState(0.0, w0, forcing)]
    aborted, message = False, None
    try:
        march(states, config.solver, on_sample, t_end=config.horizon)
    except SolverAbort as exc:
        aborted, message = True, str(exc)

    budgets = compute_budgets(series["u"], nu)
    quantities = verdict = None
    if len(series["u"]):
        quantities = accumulate_quantities(series["u"], nu)
        verdict = bootstrap_check(quantities, series["u"], planar_base=_is_planar(w0))
        if aborted:
            verdict = replace(verdict, stable=False, implication_holds=not verdict.condition_holds)

    tails_v = series["v"].get("tail_ratio")
    tails_w = series["w"].get("tail_ratio")
    max_v = float(tails_v.max()) if len(tails_v) else 0.0
    max_w = float(tails_w.max()) if len(tails_w) else 0.0
    health = {
        "max_tail_ratio_v": max_v,
        "max_tail_ratio_w": max_w,
        "resolution_lost": bool(max(max_v, max_w) > RESOLUTION_TAIL_LIMIT),
    }
    return ExperimentReport(
        config=config,
        series=series,
        budgets=budgets,
        quantities=quantities,
        verdict=verdict,
        resolution_health=health,
        extra_condition=make_extra_condition_report(series["w"]),
        consistency_residual=max(probe.consistency, default=0.0),
        forcing=forcing.describe(),
        aborted=aborted,
        abort_message=message,
        snapshots=snapshots,
    )


def _is_planar(w: SpectralVectorField) -> bool:
    return not np.any(w.coeffs[:, :, :, 1:])


# ---------------------------------------------------------------------------
# budgets


def _normalized(residual: np.ndarray, *terms: np.ndarray) -> np.ndarray:
    scale = np.max(np.abs(np.stack(terms)), axis=0)
    out = np.zeros_like(residual)
    nz = scale > 0
    out[nz] = np.abs(residual[nz]) / scale[nz]
    return out


def _simpson_pairs(t: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Integral of ``y`` over ``[t[k-1], t[k+1]]`` for each interior ``k`` (non-uniform Simpson)."""
    h1, h2 = np.diff(t)[:-1], np.diff(t)[1:]
    H = h1 + h2
    w0 = H / 6 * (2 - h2 / h1)
    w1 = H**3 / (6 * h1 * h2)
    w2 = H / 6 * (2 - h1 / h2)
    return w0 * y[:-2] + w1 * y[1:-1] + w2 * y[2:]


def compute_budgets(series: DiagnosticSeries, nu: float) -> list[BudgetRecord]:
    """Energy and z-energy budgets at the interior samples.

    Each residual compares the change of the sampled energy across the two
    adjacent intervals with the Simpson integral of the rates over the same
    span, normalized by the largest of those terms.
    """
    if len(series) < 3:
        return []
    t = series.t
    span = t[2:] - t[:-2]
    E, Ez = series.column("energy"), series.column("energy_z")
    diss = 2 * nu * series.column("dissipation")
    diss_z = 2 * nu * series.column("dissipation_z")
    rhs = -2 * series.column("c5_integral")
    I = [series.column(f"I{k}") for k in range(1, 5)]

    dE, dEz = E[2:] - E[:-2], Ez[2:] - Ez[:-2]
    q_diss, q_rhs = _simpson_pairs(t, diss), _simpson_pairs(t, rhs)
    q_diss_z = _simpson_pairs(t, diss_z)
    q_I = [_simpson_pairs(t, 2 * x) for x in I]
    res_c5 = _normalized(dE + q_diss - q_rhs, dE, q_diss, q_rhs)
    res_d2 = _normalized(dEz + q_diss_z + sum(q_I), dEz, q_diss_z, *q_I)
    return [
        BudgetRecord(
            t=float(t[k]),
            dE_dt=float(dE[k - 1] / span[k - 1]),
            dissipation=float(diss[k]),
            rhs_c5=float(rhs[k]),
            dEz_dt=float(dEz[k - 1] / span[k - 1]),
            dissipation_z=float(diss_z[k]),
            I1=float(I[0][k]),
            I2=float(I[1][k]),
            I3=float(I[2][k]),
            I4=float(I[3][k]),
            residual_c5=float(res_c5[k - 1]),
            residual_d2=float(res_d2[k - 1]),
        )
        for k in range(1, len(t) - 1)
    ]


def check_energy_budget_c5(report: ExperimentReport) -> float:
    return max((b.residual_c5 for b in report.budgets), default=0.0)


def check_z_budget_d2(report: ExperimentReport) -> float:
    return max((b.residual_d2 for b in report.budgets), default=0.0)


def i3_i4_relative(report: ExperimentReport) -> float:
    """Largest ``max(|I3|, |I4|)`` relative to the largest z-budget term, over samples."""
    s = report.series["u"]
    if len(s) == 0:
        return 0.0
    I = np.abs(np.stack([s.column(f"I{k}") for k in range(1, 5)]))
    scale = np.maximum(I.max(axis=0), report.config.solver.nu * s.column("dissipation_z"))
    rel = np.zeros(len(s))
    nz = scale > 0
    rel[nz] = np.max(I[2:, nz], axis=0) / scale[nz]
    return float(rel.max())


# ---------------------------------------------------------------------------
# verdicts


def bootstrap_check(
    quantities: StabilityQuantities, trajectory: DiagnosticSeries, planar_base: bool = True
) -> StabilityVerdict:
    """Stability verdict and the measured bootstrap constant.

    ``stable`` means ``J <= 2 J0`` over the horizon. ``measured_A0`` is the
    smallest ``A`` with ``J <= A I^(1/4) J^(5/4) + J0`` at every sampled horizon;
    the sufficient condition is ``A I^(1/4) (2 J0)^(1/4) < 1/2``.
    """
    hist = quantity_history(trajectory, trajectory.meta.get("nu"))
    I, J = hist["I"], hist["J"]
    J0 = quantities.J0
    stable = bool(J.max() <= 2 * J0)
    denom = I**0.25 * J**1.25
    ok = denom > 0
    A0 = float(np.max((J[ok] - J0) / denom[ok], initial=0.0))
    A0 = max(A0, 0.0)
    condition = A0 * quantities.I**0.25 * (2 * J0) ** 0.25
    holds = bool(condition < 0.5)
    G = float(trajectory.get("gronwall_weight")[-1])
    C = quantities.K / quantities.K0 if quantities.K0 > 0 else None
    L_ratio = quantities.L / quantities.L0 if quantities.L0 > 0 else None
    L_holds = None
    if planar_base and L_ratio is not None:
        L_holds = bool(L_ratio <= 4.0)
    return StabilityVerdict(
        stable=stable,
        measured_A0=A0,
        condition_value=float(condition),
        condition_holds=holds,
        implication_holds=bool(stable or not holds),
        gronwall_C=C,
        gronwall_bound=math.exp(0.5 * G),
        L_ratio=L_ratio,
        L_bound_holds=L_holds,
    )


def gronwall_check(report: ExperimentReport) -> tuple[float, float]:
    """``(K/K0, exp(G/2))`` with ``G = int ||grad w||_inf dt``."""
    q = report.quantities
    if q is None or q.K0 == 0:
        raise ValueError("Gronwall check needs a nonzero initial perturbation (K0 = 0)")
    G = float(report.series["u"].get("gronwall_weight")[-1])
    return q.K / q.K0, math.exp(0.5 * G)


@dataclass(frozen=True)
class L4ChainResult:
    """Measured constants of the L6 embedding chain for ``u``.

    ``embedding_constant = ||u||_{L3_t L6} / (sup ||u_z||^(1/3) (int ||grad u||^2)^(1/3))``;
    ``interpolation_ratio = ||u||_{L4} / (||u||_{L3_t L6}^(3/4) sup ||u||^(1/4))`` is at
    most 1 (Holder); ``l4_constant = ||u||_{L4} / sup ||u_z||^(1/4)``.
    """

    embedding_constant: float
    interpolation_ratio: float
    l4_constant: float
    l3_l6: float
    l4: float


def l4_chain_check(report_or_series) -> L4ChainResult:
    s = report_or_series.series["u"] if isinstance(report_or_series, ExperimentReport) else report_or_series
    if len(s) < 2:
        raise ValueError("chain check needs at least two samples")
    t = s.t
    sup_z = math.sqrt(float(s.column("energy_z").max()))
    if sup_z == 0.0:
        raise ValueError("chain check undefined: u_z vanishes identically")
    sup_u = math.sqrt(float(s.column("energy").max()))
    l3l6 = float(np.trapezoid(s.column("l6") ** 3, t)) ** (1 / 3)
    grad_sq = float(np.trapezoid(s.column("dissipation"), t))
    l4 = float(np.trapezoid(s.column("l4_pow4"), t)) ** 0.25
    return L4ChainResult(
        embedding_constant=l3l6 / (sup_z ** (1 / 3) * grad_sq ** (1 / 3)),
        interpolation_ratio=l4 / (l3l6**0.75 * sup_u**0.25),
        l4_constant=l4 / sup_z**0.25,
        l3_l6=l3l6,
        l4=l4,
    )


# ---------------------------------------------------------------------------
# sweeps


@dataclass
class SweepResult:
    config: ExperimentConfig
    epsilons: list[float]
    reports: list[ExperimentReport]
    largest_stable: float | None
    smallest_unstable: float | None
    monotonicity_violations: list[float]
    threshold_estimate: float | None

    @property
    def stable(self) -> list[bool]:
        return [bool(r.verdict and r.verdict.stable) for r in self.reports]

    def summary(self) -> dict:
        return {
            "config": self.config.to_dict(),
            "config_hash": self.config.config_hash(),
            "members": [
                {
                    "epsilon": e,
                    "config_hash": r.config_hash,
                    "stable": s,
                    "aborted": r.aborted,
                    "measured_A0": r.verdict.measured_A0 if r.verdict else None,
                    "condition_value": r.verdict.condition_value if r.verdict else None,
                }
                for e, r, s in zip(self.epsilons, self.reports, self.stable)
            ],
            "bracket": {
                "largest_stable": self.largest_stable,
                "smallest_unstable": self.smallest_unstable,
            },
            "threshold_estimate": self.threshold_estimate,
            "monotonicity_violations": self.monotonicity_violations,
        }


def summarize_sweep(config: ExperimentConfig, epsilons, reports) -> SweepResult:
    stable = [bool(r.verdict and r.verdict.stable) for r in reports]
    good = [e for e, s in zip(epsilons, stable) if s]
    bad = [e for e, s in zip(epsilons, stable) if not s]
    lo = max(good) if good else None
    hi = min(bad) if bad else None
    violations = [e for e in good if hi is not None and e > hi]
    estimate = None
    if lo is not None and hi is not None and lo < hi:
        estimate = math.sqrt(lo * hi) if lo > 0 else hi / 2
    reports = [
        replace(r, verdict=replace(r.verdict, threshold_estimate=estimate)) if r.verdict else r
        for r in reports
    ]
    return SweepResult(config, list(epsilons), reports, lo, hi, violations, estimate)


def threshold_sweep(config: ExperimentConfig, threads: int = 1) -> SweepResult:
    """Run one experiment per sweep epsilon (shared base flow and seeds)."""
    if not config.sweep:
        raise ValueError("threshold sweep needs a nonempty sweep list")
    members = [config.with_epsilon(e) for e in config.sweep]
    if threads > 1 and len(members) > 1:
        with ProcessPoolExecutor(max_workers=min(threads, len(members))) as pool:
            reports = list(pool.map(run_experiment, members))
    else:
        reports = [run_experiment(m) for m in members]
    return summarize_sweep(config, list(config.sweep), reports)


# ---------------------------------------------------------------------------
# output


def _clean(x):
    if isinstance(x, float) and not math.isfinite(x):
        return None
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_clean(v) for v in x]
    if isinstance(x, (np.floating,)):
        return _clean(float(x))
    if isinstance(x, (np.bool_,)):
        return bool(x)
    return x


def report_summary(report: ExperimentReport) -> dict:
    u = report.series["u"]
    gron = None
    if report.quantities is not None and report.quantities.K0 > 0:
        C, bound = gronwall_check(report)
        gron = {
            "C_meas": C,
            "bound_factor": bound,
            "within_bound": bool(C <= GRONWALL_SLACK * bound),
            "weight_integral": float(u.get("gronwall_weight")[-1]),
        }
    return _clean(
        {
            "config": report.config.to_dict(),
            "config_hash": report.config_hash,
            "status": "aborted" if report.aborted else "ok",
            "abort_message": report.abort_message,
            "samples": len(u),
            "t_final": u.times[-1] if len(u) else None,
            "forcing": report.forcing,
            "verdict": asdict(report.verdict) if report.verdict else None,
            "quantities": asdict(report.quantities) if report.quantities else None,
            "residuals": {
                "energy_budget": check_energy_budget_c5(report),
                "z_budget": check_z_budget_d2(report),
                "i3_i4_relative": i3_i4_relative(report),
                "consistency": report.consistency_residual,
            },
            "gronwall": gron,
            "extra_condition": {
                "wz_l5": report.extra_condition[0],
                "grad_wz_l52": report.extra_condition[1],
            },
            "resolution": report.resolution_health,
        }
    )


def dumps(summary: dict) -> str:
    return json.dumps(summary, indent=2, sort_keys=True) + "\n"


def _budgets_csv(budgets: list[BudgetRecord], path: Path) -> None:
    names = list(BudgetRecord.__dataclass_fields__)
    lines = [",".join(names)]
    for b in budgets:
        lines.append(",".join(format(getattr(b, n), ".17g") for n in names))
    path.write_text("\n".join(lines) + "\n")


def report_paths(report: ExperimentReport, out_dir) -> dict[str, Path]:
    out_dir = Path(out_dir)
    stem = f"run-{report.config_hash}"
    paths = {"summary": out_dir / f"{stem}.json", "budgets": out_dir / f"{stem}-budgets.csv"}
    for name in report.series:
        paths[name] = out_dir / f"{stem}-{name}.csv"
    for requested, _, _ in report.snapshots:
        paths[f"snapshot@{requested:g}"] = out_dir / f"{stem}-u-t{requested:g}.npz"
    return paths


def _refuse_overwrite(paths, force: bool) -> None:
    if force:
        return
    existing = [str(p) for p in paths if Path(p).exists()]
    if existing:
        raise FileExistsError(f"refusing to overwrite {existing[0]} (use --force)")


def write_report(report: ExperimentReport, out_dir, force: bool = False) -> dict[str, Path]:
    paths = report_paths(report, out_dir)
    _refuse_overwrite(paths.values(), force)
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    paths["summary"].write_text(dumps(report.summary()))
    _budgets_csv(report.budgets, paths["budgets"])
    for name, s in report.series.items():
        s.to_csv(paths[name])
    for requested, actual, u_hat in report.snapshots:
        save_snapshot(paths[f"snapshot@{requested:g}"], inverse_transform(u_hat), t=np.float64(actual))
    return paths


def write_sweep(result: SweepResult, out_dir, force: bool = False) -> Path:
    out_dir = Path(out_dir)
    target = out_dir / f"sweep-{result.config.config_hash()}.json"
    member_paths = [p for r in result.reports for p in report_paths(r, out_dir).values()]
    _refuse_overwrite([target, *member_paths], force)
    for r in result.reports:
        write_report(r, out_dir, force=True)
    target.write_text(dumps(_clean(result.summary())))
    return target
