"""Base flows ``w`` (z-independent planar solutions, optionally with a small
z-ripple) and initial perturbations ``u0``.

Random fields draw one coefficient per Fourier mode inside a fixed band, so a
given spec produces the same continuous field at every resolution that
resolves the band. Streams are counter-based (Philox keyed by seed and a
stream id), so results never depend on call order.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np

from .fields import BoxSpec, SpectralVectorField, curl, gradient, project_coeffs, to_physical
from .norms import DiagnosticSeries
from .solver import NO_FORCING, Forcing

BASE_KINDS = ("zero", "taylor_green_2d", "random_2d", "forced_2d")
PERTURBATION_CASES = ("i", "ii")

# stream ids keep the independent random draws of one seed apart
_STREAM_BASE = 1
_STREAM_FORCING = 2
_STREAM_PERTURBATION = 3
_STREAM_BULK = 4


def philox(seed: int, stream: int) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), int(stream)])))


@dataclass(frozen=True)
class BaseFlowSpec:
    """Planar base flow. For random kinds ``amplitude`` is the rms speed;
    ``ripple`` adds ``a (sin z, cos z, 0)`` to leave the planar class."""

    kind: str = "taylor_green_2d"
    amplitude: float = 1.0
    seed: int = 0
    spectrum_slope: float = -3.0
    forcing_amplitude: float = 0.0
    max_mode: int = 4
    ripple: float = 0.0

    def __post_init__(self):
        if self.kind not in BASE_KINDS:
            raise ValueError(f"base kind must be one of {BASE_KINDS}, got {self.kind!r}")
        if self.kind != "zero" and not (math.isfinite(self.amplitude) and self.amplitude > 0):
            raise ValueError(f"base amplitude must be positive, got {self.amplitude!r}")
        if not (math.isfinite(self.forcing_amplitude) and self.forcing_amplitude >= 0):
            raise ValueError(f"forcing_amplitude must be >= 0, got {self.forcing_amplitude!r}")
        if self.forcing_amplitude and self.kind != "forced_2d":
            raise ValueError("forcing_amplitude is only meaningful for kind 'forced_2d'")
        if not (isinstance(self.max_mode, int) and self.max_mode >= 1):
            raise ValueError(f"max_mode must be a positive integer, got {self.max_mode!r}")
        if not math.isfinite(self.ripple) or self.ripple < 0:
            raise ValueError(f"ripple must be >= 0, got {self.ripple!r}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass(frozen=True)
class PerturbationSpec:
    """``epsilon`` is ``||u0||`` in case i and ``||d_z u0||`` in case ii."""

    case: str = "i"
    epsilon: float = 1e-3
    seed: int = 0
    bulk_amplitude: float = 0.0
    max_mode: int | None = None
    spectrum_slope: float = -3.0

    def __post_init__(self):
        if self.case not in PERTURBATION_CASES:
            raise ValueError(f"perturbation case must be 'i' or 'ii', got {self.case!r}")
        if not (math.isfinite(self.epsilon) and self.epsilon >= 0):
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon!r}")
        if not (math.isfinite(self.bulk_amplitude) and self.bulk_amplitude >= 0):
            raise ValueError(f"bulk_amplitude must be >= 0, got {self.bulk_amplitude!r}")
        if self.case == "i" and self.bulk_amplitude:
            raise ValueError("bulk_amplitude applies to case 'ii' only")
        if self.max_mode is not None and not (isinstance(self.max_mode, int) and self.max_mode >= 1):
            raise ValueError(f"max_mode must be a positive integer, got {self.max_mode!r}")

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# random band-limited fields


def _band_limit(box: BoxSpec, max_mode: int) -> None:
    if 3 * max_mode > min(box.resolution):
        raise ValueError(
            f"max_mode={max_mode} exceeds the dealiased band of resolution {box.resolution}"
        )


def _spectrum_from_modes(box: BoxSpec, modes: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Half-spectrum coefficients of the real part of ``sum values_m e^{i m.x}``.

    Each draw is split symmetrically between ``m`` and ``-m``, so the result is
    exactly Hermitian, band-limited and independent of the grid.
    """
    full = np.zeros((values.shape[0],) + box.resolution, dtype=complex)
    for sign, vals in ((1, values), (-1, values.conj())):
        idx = tuple((sign * modes[:, i]) % box.resolution[i] for i in range(3))
        np.add.at(full, (slice(None),) + idx, 0.5 * vals)
    return full[..., : box.spectral_shape[2]]


def _mode_list(max_mode: int, planar: bool) -> np.ndarray:
    m = np.arange(-max_mode, max_mode + 1)
    mz = np.zeros(1, dtype=int) if planar else m
    grid = np.stack(np.meshgrid(m, m, mz, indexing="ij"), axis=-1).reshape(-1, 3)
    r2 = np.sum(grid**2, axis=1)
    return grid[(r2 > 0) & (r2 <= max_mode**2)]


def _shaped_draw(rng, modes: np.ndarray, ncomp: int, exponent: float) -> np.ndarray:
    kk = np.sqrt(np.sum(modes.astype(float) ** 2, axis=1))
    amp = kk**exponent
    draw = rng.standard_normal((ncomp, len(modes))) + 1j * rng.standard_normal((ncomp, len(modes)))
    return draw * amp


def random_planar_field(
    box: BoxSpec, rng: np.random.Generator, max_mode: int, slope: float
) -> SpectralVectorField:
    """z-independent solenoidal field ``(psi_y, -psi_x, 0)`` with energy spectrum ~ k^slope."""
    _band_limit(box, max_mode)
    modes = _mode_list(max_mode, planar=True)
    # planar shells hold ~k modes, velocity ~ k psi
    psi = _spectrum_from_modes(box, modes, _shaped_draw(rng, modes, 1, (slope - 1) / 2 - 1))
    g = gradient(psi, box)[0]
    c = np.stack([g[1], -g[0], np.zeros_like(g[0])])
    return SpectralVectorField(c, box, divergence_free=True)


def random_solenoidal_field(
    box: BoxSpec, rng: np.random.Generator, max_mode: int, slope: float
) -> SpectralVectorField:
    """3D solenoidal field ``curl A`` with energy spectrum ~ k^slope."""
    _band_limit(box, max_mode)
    modes = _mode_list(max_mode, planar=False)
    # spatial shells hold ~k^2 modes, velocity ~ k A
    potential = _spectrum_from_modes(box, modes, _shaped_draw(rng, modes, 3, (slope - 2) / 2 - 1))
    c = project_coeffs(curl(potential, box), box)
    return SpectralVectorField(c, box, divergence_free=True)


def _rescaled(f: SpectralVectorField, target: float, current: float) -> SpectralVectorField:
    if target == 0:
        return SpectralVectorField.zeros(f.box)
    if current == 0:
        raise ValueError("cannot rescale a vanishing field to a nonzero target")
    return f * (target / current)


# ---------------------------------------------------------------------------
# generators


def _ripple(box: BoxSpec, a: float) -> SpectralVectorField:
    X, Y, Z = box.grid()
    data = np.zeros((3,) + box.resolution)
    data[0] = a * np.sin(Z)
    data[1] = a * np.cos(Z)
    return SpectralVectorField(np.fft.rfftn(data, axes=(1, 2, 3)) / box.npoints, box, True)


def make_base_flow(spec: BaseFlowSpec, box: BoxSpec) -> SpectralVectorField:
    if spec.kind == "zero":
        w = SpectralVectorField.zeros(box)
    elif spec.kind == "taylor_green_2d":
        X, Y, _ = box.grid()
        data = np.zeros((3,) + box.resolution)
        data[0] = spec.amplitude * np.sin(X) * np.cos(Y)
        data[1] = -spec.amplitude * np.cos(X) * np.sin(Y)
        w = SpectralVectorField(np.fft.rfftn(data, axes=(1, 2, 3)) / box.npoints, box, True)
    else:
        raw = random_planar_field(box, philox(spec.seed, _STREAM_BASE), spec.max_mode, spec.spectrum_slope)
        w = _rescaled(raw, spec.amplitude * math.sqrt(box.volume), raw.l2_norm())
    if spec.ripple:
        w = w + _ripple(box, spec.ripple)
    c = w.coeffs.copy()
    c[:, 0, 0, 0] = 0  # quadrature roundoff would leave a ~1e-19 mean
    return SpectralVectorField(c, box, divergence_free=True)


def make_base_forcing(spec: BaseFlowSpec, box: BoxSpec) -> Forcing:
    """Steady planar forcing with rms ``forcing_amplitude`` (zero unless ``forced_2d``)."""
    if spec.kind != "forced_2d" or spec.forcing_amplitude == 0:
        return NO_FORCING
    raw = random_planar_field(box, philox(spec.seed, _STREAM_FORCING), spec.max_mode, spec.spectrum_slope)
    return Forcing(_rescaled(raw, spec.forcing_amplitude * math.sqrt(box.volume), raw.l2_norm()))


def z_derivative_norm(f: SpectralVectorField) -> float:
    kz = f.box.derivative_wavenumbers[2]
    return SpectralVectorField(1j * kz * f.coeffs, f.box).l2_norm()


def make_perturbation(spec: PerturbationSpec, box: BoxSpec) -> SpectralVectorField:
    max_mode = spec.max_mode if spec.max_mode is not None else min(box.resolution) // 4
    rng = philox(spec.seed, _STREAM_PERTURBATION)
    if spec.case == "i":
        if spec.epsilon == 0:
            return SpectralVectorField.zeros(box)
        raw = random_solenoidal_field(box, rng, max_mode, spec.spectrum_slope)
        return _rescaled(raw, spec.epsilon, raw.l2_norm())

    bulk = SpectralVectorField.zeros(box)
    if spec.bulk_amplitude:
        raw = random_planar_field(box, philox(spec.seed, _STREAM_BULK), max_mode, spec.spectrum_slope)
        bulk = _rescaled(raw, spec.bulk_amplitude, raw.l2_norm())
    if spec.epsilon == 0:
        return bulk
    raw = random_solenoidal_field(box, rng, max_mode, spec.spectrum_slope)
    c = raw.coeffs.copy()
    c[:, :, :, 0] = 0  # z-dependent part only; orthogonal to the bulk
    ripple = SpectralVectorField(c, box, divergence_free=True)
    return bulk + _rescaled(ripple, spec.epsilon, z_derivative_norm(ripple))


# ---------------------------------------------------------------------------
# smallness of the base flow's z-dependence


def extra_condition_diagnostics(w_hat: SpectralVectorField) -> dict[str, float]:
    """Spatial integrals ``int |w_z|^5`` and ``int |grad w_z|^(5/2)``."""
    box = w_hat.box
    gz = gradient(w_hat.coeffs, box)[:, 2]
    if not np.any(gz):
        return {"wz_l5_pow5": 0.0, "grad_wz_l52_pow52": 0.0}
    wz = to_physical(gz, box)
    g = to_physical(gradient(gz, box).reshape((9,) + box.spectral_shape), box)
    dV = box.cell_volume
    return {
        "wz_l5_pow5": float(np.sum(np.sum(wz**2, axis=0) ** 2.5)) * dV,
        "grad_wz_l52_pow52": float(np.sum(np.sum(g**2, axis=0) ** 1.25)) * dV,
    }


def make_extra_condition_report(series: DiagnosticSeries) -> tuple[float, float]:
    """Space-time norms ``||w_z||_{L5}`` and ``||grad w_z||_{L5/2}`` over the recorded horizon."""
    if len(series) < 2:
        return 0.0, 0.0
    t = series.t
    a = float(np.trapezoid(series.get("wz_l5_pow5"), t))
    b = float(np.trapezoid(series.get("grad_wz_l52_pow52"), t))
    return max(a, 0.0) ** 0.2, max(b, 0.0) ** 0.4
