"""Pseudo-spectral incompressible Navier-Stokes on the periodic box.

The convective term is evaluated in rotational form ``v x omega``, truncated
by the 2/3 rule and Leray-projected (the gradient ``grad |v|^2/2`` is
absorbed by the projection). Time stepping is classical RK4 applied to the
integrating-factor form, so the viscous decay ``exp(-nu |k|^2 t)`` of every
mode is exact and the step is limited by advection only.
"""
from __future__ import annotations

import hashlib
import json
import math
import warnings
from dataclasses import asdict, dataclass, field, replace
from functools import cached_property
from typing import Callable, Mapping, Sequence

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .fields import (
    BoxSpec,
    PhysicalVectorField,
    SpectralVectorField,
    curl,
    inverse_transform,
    load_snapshot,
    project_coeffs,
    relative_divergence,
    save_snapshot,
    spectral_tail_ratio,
    to_physical,
    to_spectral,
)
from .norms import DiagnosticSeries, field_diagnostics

CHECKPOINT_VERSION = 1
DIVERGENCE_TOL = 1e-12
# an automatic step this far below dt_max is treated as blow-up
DT_COLLAPSE = 1e-6
# relative per-step growth of ||v|| that flags an unforced run as unstable;
# dissipation and RK4 damping make the exact change nonpositive
ENERGY_GROWTH_TOL = 1e-9

# Debug hook: -1 makes the integrating factor amplify instead of damp. Only the
# hidden fault-injection flag of the command line sets it.
_viscosity_sign = 1.0


def set_viscosity_sign(sign: float) -> None:
    global _viscosity_sign
    _viscosity_sign = float(sign)


class SolverAbort(RuntimeError):
    """Non-finite values appeared; ``series`` holds the samples recorded so far."""

    def __init__(self, t: float, series: DiagnosticSeries | None = None, detail: str = ""):
        msg = f"blow-up or instability detected at t={t:.17g}"
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)
        self.t = t
        self.series = series


@dataclass(frozen=True)
class SolverConfig:
    nu: float
    t_end: float
    dt: float | str = "auto"
    cfl: float = 0.5
    record_every: int = 1
    dealias: bool = True
    dt_max: float = 0.1

    def __post_init__(self):
        if not (isinstance(self.nu, (int, float)) and math.isfinite(self.nu) and self.nu > 0):
            raise ValueError(f"nu must be a positive real, got {self.nu!r}")
        if not (math.isfinite(self.t_end) and self.t_end >= 0):
            raise ValueError(f"t_end must be >= 0, got {self.t_end!r}")
        if isinstance(self.dt, str):
            if self.dt != "auto":
                raise ValueError(f"dt must be a positive real or 'auto', got {self.dt!r}")
        elif not (math.isfinite(self.dt) and self.dt > 0):
            raise ValueError(f"dt must be a positive real or 'auto', got {self.dt!r}")
        if not (0 < self.cfl <= 1):
            raise ValueError(f"cfl must lie in (0, 1], got {self.cfl!r}")
        if not (isinstance(self.record_every, int) and self.record_every >= 1):
            raise ValueError(f"record_every must be a positive integer, got {self.record_every!r}")
        if not (math.isfinite(self.dt_max) and self.dt_max > 0):
            raise ValueError(f"dt_max must be positive, got {self.dt_max!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())


def stable_hash(obj) -> str:
    text = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()[:16]


@dataclass(frozen=True, eq=False)
class Forcing:
    """Body force ``F(t) = field * (1 + a sin(omega t))``; ``field=None`` means no force."""

    field: SpectralVectorField | None = None
    modulation_amplitude: float = 0.0
    modulation_frequency: float = 0.0

    def __post_init__(self):
        if self.field is not None:
            projected = project_coeffs(self.field.coeffs, self.field.box)
            object.__setattr__(
                self, "field", SpectralVectorField(projected, self.field.box, divergence_free=True)
            )

    @property
    def kind(self) -> str:
        if self.field is None:
            return "zero"
        return "modulated" if self.modulation_amplitude else "steady"

    def coeffs_at(self, t: float) -> np.ndarray | None:
        if self.field is None:
            return None
        scale = 1.0 + self.modulation_amplitude * math.sin(self.modulation_frequency * t)
        return self.field.coeffs * scale

    def describe(self) -> dict:
        out = {"kind": self.kind}
        if self.field is not None:
            out["l2_norm"] = self.field.l2_norm()
            out["modulation_amplitude"] = self.modulation_amplitude
            out["modulation_frequency"] = self.modulation_frequency
        return out


NO_FORCING = Forcing()


@dataclass(frozen=True)
class SolverState:
    t: float
    v_hat: SpectralVectorField
    forcing: Forcing = NO_FORCING
    step_index: int = 0


@dataclass(frozen=True, eq=False)
class Sample:
    """What an observer sees; arrays are read-only."""

    t: float
    step_index: int
    v_hat: SpectralVectorField

    @cached_property
    def velocity(self) -> PhysicalVectorField:
        data = to_physical(self.v_hat.coeffs, self.v_hat.box)
        data.setflags(write=False)
        return PhysicalVectorField(data, self.v_hat.box)


Observer = Callable[[Sample], Mapping[str, float]]


def default_observer(sample: Sample) -> dict[str, float]:
    out = field_diagnostics(sample.v_hat)
    out["tail_ratio"] = spectral_tail_ratio(sample.v_hat)
    return out


# ---------------------------------------------------------------------------
# right-hand side


def _convective(c: np.ndarray, box: BoxSpec, use_dealias: bool) -> np.ndarray:
    """Projected ``P D[v x omega]`` in coefficient space."""
    phys = to_physical(np.concatenate([c, curl(c, box)]), box)
    v, w = phys[:3], phys[3:]
    cross = np.stack(
        [v[1] * w[2] - v[2] * w[1], v[2] * w[0] - v[0] * w[2], v[0] * w[1] - v[1] * w[0]]
    )
    if not np.isfinite(cross).all():
        raise FloatingPointError("non-finite convective product")
    out = to_spectral(cross, box)
    if use_dealias:
        out *= box.dealias_mask
    return project_coeffs(out, box)


def nonlinear_term(v_hat: SpectralVectorField, dealias: bool = True, t: float = 0.0) -> SpectralVectorField:
    """``-P[(v . grad) v]`` computed pseudo-spectrally in rotational form."""
    try:
        c = _convective(v_hat.coeffs, v_hat.box, dealias)
    except FloatingPointError as exc:
        raise SolverAbort(t, detail=str(exc)) from None
    return SpectralVectorField(c, v_hat.box, divergence_free=True)


def _rhs(c, t, box, use_dealias, forcing: Forcing):
    out = _convective(c, box, use_dealias)
    f = forcing.coeffs_at(t)
    if f is not None:
        out = out + f
    return out


def max_wavenumber(box: BoxSpec) -> float:
    return max(math.pi * n / L for n, L in zip(box.resolution, box.lengths))


def cfl_timestep(v_hat: SpectralVectorField, config: SolverConfig) -> float:
    """Largest ``dt <= dt_max`` with ``dt * k_max * max|v| <= cfl``."""
    if not isinstance(config.dt, str):
        return float(config.dt)
    speed = np.sqrt(np.sum(to_physical(v_hat.coeffs, v_hat.box) ** 2, axis=0)).max()
    if not np.isfinite(speed):
        raise FloatingPointError("non-finite velocity")
    if speed == 0.0:
        return config.dt_max
    dt = min(config.dt_max, config.cfl / (max_wavenumber(v_hat.box) * float(speed)))
    if dt < DT_COLLAPSE * config.dt_max:
        raise FloatingPointError(f"time step collapsed to {dt:.3g} (max speed {float(speed):.3g})")
    return dt


def step(state: SolverState, config: SolverConfig, dt: float | None = None) -> SolverState:
    """One integrating-factor RK4 step; returns a new state."""
    box = state.v_hat.box
    if dt is None:
        try:
            dt = cfl_timestep(state.v_hat, config)
        except FloatingPointError as exc:
            raise SolverAbort(state.t, detail=str(exc)) from None
    h = float(dt)
    t = state.t
    half = np.exp(-_viscosity_sign * config.nu * box.k2 * (h / 2))
    full = half * half
    args = (box, config.dealias, state.forcing)
    c = state.v_hat.coeffs
    try:
        k1 = _rhs(c, t, *args)
        k2 = _rhs(half * (c + (h / 2) * k1), t + h / 2, *args)
        k3 = _rhs(half * c + (h / 2) * k2, t + h / 2, *args)
        k4 = _rhs(full * c + h * half * k3, t + h, *args)
    except FloatingPointError as exc:
        raise SolverAbort(t, detail=str(exc)) from None
    new = full * c + (h / 6) * (full * k1 + 2 * half * (k2 + k3) + k4)
    new = project_coeffs(new, box)
    if not np.isfinite(new).all():
        raise SolverAbort(t + h, detail="non-finite coefficients after step")
    v_new = SpectralVectorField(new, box, divergence_free=True)
    if state.forcing.field is None:
        before, after = state.v_hat.l2_norm(), v_new.l2_norm()
        if after > before * (1 + ENERGY_GROWTH_TOL):
            raise SolverAbort(t + h, detail=f"energy of an unforced flow grew from {before**2:.6g} to {after**2:.6g}")
    return SolverState(
        t=t + h,
        v_hat=v_new,
        forcing=state.forcing,
        step_index=state.step_index + 1,
    )


def _ensure_divergence_free(v: SpectralVectorField) -> SpectralVectorField:
    if relative_divergence(v) > DIVERGENCE_TOL:
        warnings.warn("initial velocity is not divergence-free; projecting it", stacklevel=3)
        return SpectralVectorField(project_coeffs(v.coeffs, v.box), v.box, divergence_free=True)
    return SpectralVectorField(v.coeffs, v.box, divergence_free=True)


def march(
    states: Sequence[SolverState],
    config: SolverConfig,
    on_sample: Callable[[Sequence[SolverState]], None],
    t_end: float | None = None,
) -> list[SolverState]:
    """Advance several states in lockstep with a shared step size.

    The shared ``dt`` is the smallest CFL step over all states, so co-evolved
    trajectories are sampled at identical times. ``on_sample`` is called at the
    start (when ``step_index`` is on the recording stride), every
    ``record_every`` steps, and at ``t_end``.
    """
    t_end = config.t_end if t_end is None else t_end
    states = list(states)
    t0 = states[0].t
    if any(s.t != t0 or s.step_index != states[0].step_index for s in states):
        raise ValueError("lockstep states must share time and step index")
    if states[0].step_index % config.record_every == 0:
        on_sample(states)
    while states[0].t < t_end:
        try:
            dt = min(cfl_timestep(s.v_hat, config) for s in states)
        except FloatingPointError as exc:
            raise SolverAbort(states[0].t, detail=str(exc)) from None
        remaining = t_end - states[0].t
        last = dt >= remaining * (1 - 1e-9)
        if last:
            dt = remaining
        states = [step(s, config, dt) for s in states]
        if last:
            states = [replace(s, t=float(t_end)) for s in states]
            on_sample(states)
            break
        if states[0].step_index % config.record_every == 0:
            on_sample(states)
    return states


def run(
    v0: SpectralVectorField | SolverState,
    config: SolverConfig,
    forcing: Forcing | None = None,
    observer: Observer | None = None,
) -> DiagnosticSeries:
    """March to ``config.t_end`` and return the observed series.

    ``v0`` may be a :class:`SolverState` (e.g. from :func:`load_checkpoint`) to
    resume a trajectory; the recording stride continues from its step index.
    """
    observer = observer or default_observer
    if isinstance(v0, SolverState):
        state = v0 if forcing is None else replace(v0, forcing=forcing)
        state = replace(state, v_hat=_ensure_divergence_free(state.v_hat))
    else:
        state = SolverState(0.0, _ensure_divergence_free(v0), forcing or NO_FORCING)
    series = DiagnosticSeries(meta={"nu": config.nu, "config_hash": config.config_hash()})

    def record(states):
        s = states[0]
        coeffs = s.v_hat.coeffs.copy()
        coeffs.setflags(write=False)
        sample = Sample(s.t, s.step_index, SpectralVectorField(coeffs, s.v_hat.box, True))
        series.append(s.t, observer(sample))

    try:
        march([state], config, record)
    except SolverAbort as exc:
        exc.series = series
        raise
    return series


def energy_identity_residual(series: DiagnosticSeries, nu: float) -> float:
    """Largest ``|E(t) - E(0) + 2 nu int_0^t D| / (E(0) + 2 nu int_0^t D)`` over samples.

    The integral is the trapezoid rule on the recorded samples, so for a
    force-free run the residual shrinks at second order in the sampling interval.
    """
    if len(series) < 2:
        return 0.0
    E = series.column("energy")
    work = 2 * nu * cumulative_trapezoid(series.column("dissipation"), series.t, initial=0.0)
    scale = E[0] + work
    if not np.any(scale > 0):
        return 0.0
    res = np.abs(E - E[0] + work)[scale > 0] / scale[scale > 0]
    return float(res.max())


# ---------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, state: SolverState, config: SolverConfig):
    """Snapshot file plus the bit-exact spectral state, time, step and config hash."""
    phys = inverse_transform(state.v_hat)
    return save_snapshot(
        path,
        phys,
        t=np.float64(state.t),
        step_index=np.int64(state.step_index),
        config_hash=np.array(config.config_hash()),
        v_hat=state.v_hat.coeffs,
        checkpoint_version=np.int64(CHECKPOINT_VERSION),
    )


def load_checkpoint(path, config: SolverConfig | None = None, forcing: Forcing | None = None) -> SolverState:
    phys, extra = load_snapshot(path)
    if int(extra.get("checkpoint_version", -1)) != CHECKPOINT_VERSION:
        raise ValueError(f"{path}: not a version-{CHECKPOINT_VERSION} checkpoint")
    if config is not None and str(extra["config_hash"]) != config.config_hash():
        raise ValueError(f"{path}: checkpoint was written with a different solver config")
    v_hat = SpectralVectorField(extra["v_hat"], phys.box, divergence_free=True)
    return SolverState(
        t=float(extra["t"]),
        v_hat=v_hat,
        forcing=forcing or NO_FORCING,
        step_index=int(extra["step_index"]),
    )
