"""Lebesgue and anisotropic mixed norms, diagnostic time series, and the
time-integrated stability quantities I, J, K, L.

Conventions used throughout:

* ``energy`` is ``||v||^2``, ``dissipation`` is ``||grad v||^2`` (no ``2 nu``).
* ``energy_z`` / ``dissipation_z`` are the same for ``v_z = dv/dz``.
* ``gronwall_weight`` is ``G(t) = int_0^t ||grad w||_inf ds`` of a base flow;
  the weighted quantities K and L use ``u * exp(-G/2)``.
* Time integrals use the trapezoid rule on the sample times.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy.integrate import cumulative_trapezoid

from .fields import (
    BoxSpec,
    PhysicalVectorField,
    SpectralVectorField,
    forward_transform,
    gradient,
    to_physical,
)

_ALLOWED_XY = (2.0, 4.0, math.inf)
_ALLOWED_Z = (2.0, math.inf)

NONNEGATIVE_KEYS = frozenset(
    {
        "energy",
        "dissipation",
        "energy_z",
        "dissipation_z",
        "grad_mixed_sq",
        "vz_l4l2_pow4",
        "trilinear_abs",
        "trilinear_column",
        "grad_linf",
        "gronwall_weight",
        "max_speed",
        "l6",
        "l4_pow4",
        "tail_ratio",
    }
)


def lp_norm(f: PhysicalVectorField, p: float) -> float:
    """``(sum |f|^p dV)^(1/p)`` with ``|f|`` the pointwise Euclidean magnitude.

    The equal-weight periodic rule is exact for trigonometric polynomials of
    degree below the grid size. ``p = inf`` gives the maximum magnitude.
    """
    p = float(p)
    if not p >= 1.0:
        raise ValueError(f"Lebesgue exponent must be >= 1, got {p}")
    mag = f.magnitude()
    if math.isinf(p):
        return float(mag.max())
    if p == 2.0:
        return math.sqrt(float(np.sum(mag**2)) * f.box.cell_volume)
    return (float(np.sum(mag**p)) * f.box.cell_volume) ** (1.0 / p)


@dataclass(frozen=True)
class MixedNormSpec:
    """Exponent ``p_xy`` over the (x, y) plane of the ``r_z`` norm along z-columns."""

    p_xy: float = 2.0
    r_z: float = math.inf

    def __post_init__(self):
        p, r = float(self.p_xy), float(self.r_z)
        if p not in _ALLOWED_XY or r not in _ALLOWED_Z:
            raise ValueError(
                f"unsupported mixed norm L{p:g}_xy(L{r:g}_z); "
                "p_xy must be one of 2, 4, inf and r_z one of 2, inf"
            )
        object.__setattr__(self, "p_xy", p)
        object.__setattr__(self, "r_z", r)


def _column_norm(mag: np.ndarray, r: float, dz: float) -> np.ndarray:
    if math.isinf(r):
        return mag.max(axis=-1)
    return np.sqrt(np.sum(mag**2, axis=-1) * dz)


def _plane_norm(col: np.ndarray, p: float, dA: float) -> float:
    if math.isinf(p):
        return float(col.max())
    return (float(np.sum(col**p)) * dA) ** (1.0 / p)


def mixed_norm(f: PhysicalVectorField, spec: MixedNormSpec) -> float:
    dx, dy, dz = f.box.spacing
    col = _column_norm(f.magnitude(), spec.r_z, dz)
    return _plane_norm(col, spec.p_xy, dx * dy)


# ---------------------------------------------------------------------------
# per-sample diagnostics


def _power(c: np.ndarray, box: BoxSpec) -> float:
    return box.volume * float(np.sum(box.parseval_weights * (c.real**2 + c.imag**2)))


def field_diagnostics(fh: SpectralVectorField) -> dict[str, float]:
    """Norms of one field needed for I, J and the mixed-norm chain checks."""
    box = fh.box
    c = fh.coeffs
    n = box.spectral_shape
    grad_hat = gradient(c, box)
    gradz_hat = gradient(grad_hat[:, 2], box)
    v = to_physical(c, box)
    grad = to_physical(grad_hat.reshape((9,) + n), box)
    gmag = np.sqrt(np.sum(grad**2, axis=0))
    vz = grad.reshape((3, 3) + box.resolution)[:, 2]
    vz2 = np.sum(vz**2, axis=0)
    speed2 = np.sum(v**2, axis=0)

    dx, dy, dz = box.spacing
    dA, dV = dx * dy, box.cell_volume
    col_vz2 = np.sum(vz2, axis=-1) * dz
    col_gmax = gmag.max(axis=-1)
    return {
        "energy": _power(c, box),
        "dissipation": _power(grad_hat, box),
        "energy_z": _power(grad_hat[:, 2], box),
        "dissipation_z": _power(gradz_hat, box),
        "grad_mixed_sq": float(np.sum(col_gmax**2)) * dA,
        "vz_l4l2_pow4": float(np.sum(col_vz2**2)) * dA,
        "trilinear_abs": float(np.sum(vz2 * gmag)) * dV,
        "trilinear_column": float(np.sum(col_gmax * col_vz2)) * dA,
        "grad_linf": float(gmag.max()),
        "max_speed": math.sqrt(float(speed2.max())),
        "l6": (float(np.sum(speed2**3)) * dV) ** (1.0 / 6.0),
        "l4_pow4": float(np.sum(speed2**2)) * dV,
    }


# ---------------------------------------------------------------------------
# time series


@dataclass
class DiagnosticSeries:
    """Append-only record of named scalar diagnostics at increasing times."""

    times: list[float] = field(default_factory=list)
    records: dict[str, list[float]] = field(default_factory=dict)
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.times)

    @property
    def names(self) -> list[str]:
        return list(self.records)

    def append(self, t: float, values: Mapping[str, float]) -> None:
        t = float(t)
        if not math.isfinite(t):
            raise ValueError(f"non-finite sample time {t}")
        if self.times and not t > self.times[-1]:
            raise ValueError(f"sample time {t} does not increase past {self.times[-1]}")
        if self.times and set(values) != set(self.records):
            missing = set(self.records) ^ set(values)
            raise ValueError(f"diagnostic names changed between samples: {sorted(missing)}")
        clean = {}
        for name, value in values.items():
            value = float(value)
            if not math.isfinite(value):
                raise ValueError(f"diagnostic {name!r} is not finite at t={t}: {value}")
            if name in NONNEGATIVE_KEYS and value < 0:
                raise ValueError(f"norm diagnostic {name!r} is negative at t={t}: {value}")
            clean[name] = value
        self.times.append(t)
        for name, value in clean.items():
            self.records.setdefault(name, []).append(value)

    def column(self, name: str) -> np.ndarray:
        try:
            return np.asarray(self.records[name], dtype=np.float64)
        except KeyError:
            raise KeyError(f"series has no diagnostic {name!r}; have {self.names}") from None

    def get(self, name: str, default: float = 0.0) -> np.ndarray:
        if name in self.records:
            return self.column(name)
        return np.full(len(self), default)

    @property
    def t(self) -> np.ndarray:
        return np.asarray(self.times, dtype=np.float64)

    def prefix(self, n: int) -> "DiagnosticSeries":
        return DiagnosticSeries(
            self.times[:n], {k: v[:n] for k, v in self.records.items()}, dict(self.meta)
        )

    def to_csv(self, path) -> Path:
        path = Path(path)
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["t"] + self.names)
            for i, t in enumerate(self.times):
                row = [t] + [self.records[k][i] for k in self.names]
                writer.writerow([format(x, ".17g") for x in row])
        return path

    @classmethod
    def from_csv(cls, path) -> "DiagnosticSeries":
        with open(path, newline="") as fh:
            rows = list(csv.reader(fh))
        if not rows or rows[0][0] != "t":
            raise ValueError(f"{path}: missing header row starting with 't'")
        names = rows[0][1:]
        series = cls()
        for row in rows[1:]:
            series.append(float(row[0]), dict(zip(names, map(float, row[1:]))))
        if not rows[1:]:
            series.records = {k: [] for k in names}
        return series


@dataclass(frozen=True)
class StabilityQuantities:
    """Sup-in-time plus space-time gradient norms of a trajectory.

    ``I``/``J`` use the field and its z-derivative; ``K``/``L`` the same with the
    Gronwall weight ``exp(-G/2)``. ``J0``, ``K0``, ``L0`` are the initial-datum
    bounds ``C * ||.||`` with ``C = 1 + (2 nu)^(-1/2)``, the constant produced by
    integrating the energy inequality; ``initial_norm``/``initial_norm_z`` are
    the raw ``||u_0||`` and ``||u_0,z||``.
    """

    I: float
    J: float
    K: float
    L: float
    J0: float
    K0: float
    L0: float
    initial_norm: float = 0.0
    initial_norm_z: float = 0.0
    energy_constant: float = 1.0


def energy_constant(nu: float | None) -> float:
    if nu is None:
        return 1.0
    if not nu > 0:
        raise ValueError(f"viscosity must be positive, got {nu}")
    return 1.0 + 1.0 / math.sqrt(2.0 * nu)


def quantity_history(series: DiagnosticSeries, nu: float | None = None) -> dict[str, np.ndarray]:
    """I, J, K, L evaluated on every prefix horizon ``[0, t_k]``."""
    if len(series) == 0:
        raise ValueError("cannot accumulate an empty series")
    t = series.t
    E, D = series.column("energy"), series.column("dissipation")
    Ez, Dz = series.get("energy_z"), series.get("dissipation_z")
    weight = np.exp(-series.get("gronwall_weight"))

    def combined(sup_part, rate):
        integral = cumulative_trapezoid(rate, t, initial=0.0) if len(t) > 1 else np.zeros(1)
        return np.sqrt(np.maximum.accumulate(sup_part)) + np.sqrt(np.maximum(integral, 0.0))

    return {
        "t": t,
        "I": combined(E, D),
        "J": combined(Ez, Dz),
        "K": combined(E * weight, D * weight),
        "L": combined(Ez * weight, Dz * weight),
    }


def accumulate_quantities(
    series: DiagnosticSeries, nu: float | None = None
) -> StabilityQuantities:
    """Quantities over the full recorded horizon.

    ``nu`` defaults to ``series.meta["nu"]`` when present; without a viscosity
    the initial-datum constant is 1.
    """
    if nu is None:
        nu = series.meta.get("nu")
    hist = quantity_history(series, nu)
    C = energy_constant(nu)
    n0 = math.sqrt(series.column("energy")[0])
    nz0 = math.sqrt(series.get("energy_z")[0])
    return StabilityQuantities(
        I=float(hist["I"][-1]),
        J=float(hist["J"][-1]),
        K=float(hist["K"][-1]),
        L=float(hist["L"][-1]),
        J0=C * nz0,
        K0=C * n0,
        L0=C * nz0,
        initial_norm=n0,
        initial_norm_z=nz0,
        energy_constant=C,
    )


def _time_integral(series: DiagnosticSeries, name: str) -> float:
    y = series.column(name)
    if len(y) < 2:
        return 0.0
    return float(np.trapezoid(y, series.t))


# ---------------------------------------------------------------------------
# inequality ratios


def _plane_spectral(g: np.ndarray, lengths) -> tuple[np.ndarray, float, float]:
    g = np.asarray(g, dtype=np.float64)
    if g.ndim == 2:
        g = g[None]
    g = g - g.mean(axis=(1, 2), keepdims=True)
    Nx, Ny = g.shape[1:]
    Lx, Ly = lengths
    dA = Lx * Ly / (Nx * Ny)
    gh = np.fft.fft2(g)
    mx = np.fft.fftfreq(Nx, 1.0 / Nx)
    my = np.fft.fftfreq(Ny, 1.0 / Ny)
    kx = np.where(np.abs(mx) == Nx // 2, 0.0, 2 * np.pi * mx / Lx).reshape(-1, 1)
    ky = np.where(np.abs(my) == Ny // 2, 0.0, 2 * np.pi * my / Ly).reshape(1, -1)
    k2 = kx**2 + ky**2
    grad_sq = float(np.sum(k2 * np.abs(gh) ** 2)) * dA / (Nx * Ny)
    return g, dA, grad_sq


def ladyzhenskaya_ratio(g: np.ndarray, lengths=(2 * math.pi, 2 * math.pi)) -> float:
    """``||g||_L4^2 / (||g||_L2 ||grad g||_L2)`` of a mean-subtracted plane field.

    ``g`` has shape ``(Nx, Ny)`` or ``(ncomp, Nx, Ny)``.
    """
    g, dA, grad_sq = _plane_spectral(g, lengths)
    mag2 = np.sum(g**2, axis=0)
    l2_sq = float(np.sum(mag2)) * dA
    if l2_sq == 0.0 or grad_sq == 0.0:
        raise ValueError("Ladyzhenskaya ratio undefined for a constant field")
    l4_sq = math.sqrt(float(np.sum(mag2**2)) * dA)
    return l4_sq / math.sqrt(l2_sq * grad_sq)


def random_plane_field(
    rng: np.random.Generator,
    resolution: tuple[int, int],
    max_mode: int = 12,
    slope: float = -5.0 / 3.0,
) -> np.ndarray:
    """Zero-mean random field with modes ``|m| <= max_mode`` and energy ~ ``|m|^slope``.

    Coefficients are drawn per mode, not per grid point, so a given generator
    state yields the same continuous field at every resolution that resolves it.
    """
    Nx, Ny = resolution
    if 2 * max_mode >= min(Nx, Ny):
        raise ValueError(f"max_mode={max_mode} not representable on {resolution}")
    m = np.arange(-max_mode, max_mode + 1)
    mx, my = np.meshgrid(m, m, indexing="ij")
    kk = np.hypot(mx, my)
    amp = np.where(kk > 0, np.power(np.where(kk > 0, kk, 1.0), (slope - 1.0) / 2.0), 0.0)
    coeff = amp * (rng.standard_normal(kk.shape) + 1j * rng.standard_normal(kk.shape))
    spec = np.zeros((Nx, Ny), dtype=complex)
    spec[mx % Nx, my % Ny] = coeff
    return np.fft.ifft2(spec).real * (Nx * Ny)


def ladyzhenskaya_sup(
    n_fields: int, resolution: int, seed: int = 0, max_mode: int = 12
) -> float:
    """Largest Ladyzhenskaya ratio over ``n_fields`` seeded random plane fields."""
    rng = np.random.Generator(np.random.Philox(seed))
    best = 0.0
    for _ in range(n_fields):
        slope = rng.uniform(-4.0, 0.0)
        g = random_plane_field(rng, (resolution, resolution), max_mode, slope)
        best = max(best, ladyzhenskaya_ratio(g))
    return best


def embedding_l6_ratio(f: PhysicalVectorField) -> float:
    """``||f||_L6 / (||f_x|| ||f_y|| ||f_z||)^(1/3)`` for the mean-subtracted field."""
    data = f.data - f.data.mean(axis=(1, 2, 3), keepdims=True)
    g = PhysicalVectorField(data, f.box)
    gh = forward_transform(g)
    grad_hat = gradient(gh.coeffs, f.box)
    norms = [math.sqrt(_power(grad_hat[:, j], f.box)) for j in range(3)]
    if max(norms) == 0.0 or min(norms) <= 1e-12 * max(norms):
        raise ValueError(
            "L6 embedding ratio undefined: a directional derivative vanishes "
            f"(||f_x||, ||f_y||, ||f_z||) = {tuple(norms)}"
        )
    return lp_norm(g, 6) / (norms[0] * norms[1] * norms[2]) ** (1.0 / 3.0)


def anisotropic_interp_check(series: DiagnosticSeries, nu: float | None = None) -> float:
    """``||v_z||_{L4_xy,t(L2_z)} / J`` over the recorded horizon."""
    q = accumulate_quantities(series, nu)
    if q.J == 0.0:
        raise ValueError("J = 0: z-derivative vanishes identically, ratio undefined")
    return _time_integral(series, "vz_l4l2_pow4") ** 0.25 / q.J


@dataclass(frozen=True)
class ChainCheck:
    """Successive upper bounds for ``int int |v_z|^2 |grad v|``.

    ``direct <= column <= holder`` must hold exactly (Holder steps with
    positive quadrature weights); ``constant = direct / scale`` with
    ``scale = I^(1/2) J^(1/2) J^2`` is the measured constant of the chain.
    """

    direct: float
    column: float
    holder: float
    scale: float
    constant: float
    mixed_gradient: float
    mixed_constant: float


def trilinear_chain_check(series: DiagnosticSeries, nu: float | None = None) -> ChainCheck:
    q = accumulate_quantities(series, nu)
    if q.J == 0.0 or q.I == 0.0:
        raise ValueError("chain check needs I > 0 and J > 0")
    direct = _time_integral(series, "trilinear_abs")
    column = _time_integral(series, "trilinear_column")
    mixed = math.sqrt(_time_integral(series, "grad_mixed_sq"))
    l4 = math.sqrt(_time_integral(series, "vz_l4l2_pow4"))
    scale = math.sqrt(q.I * q.J) * q.J**2
    return ChainCheck(
        direct=direct,
        column=column,
        holder=mixed * l4,
        scale=scale,
        constant=direct / scale,
        mixed_gradient=mixed,
        mixed_constant=mixed / math.sqrt(q.I * q.J),
    )
