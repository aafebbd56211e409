"""Vector fields on a triply periodic box and their Fourier representation.

Spectral coefficients are stored in the real-to-complex (``rfftn``) layout,
shape ``(ncomp, Nx, Ny, Nz//2 + 1)``, normalized so that the zero mode is the
spatial mean. Hermitian symmetry is implicit for ``0 < kz < Nz/2`` and holds
by construction on the two self-conjugate planes ``kz = 0`` and ``kz = Nz/2``
for any coefficients produced by :func:`forward_transform`.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.fft as sfft

SNAPSHOT_FORMAT = "nsstab-field"
SNAPSHOT_VERSION = 1

AXES = {"x": 0, "y": 1, "z": 2}
HERMITIAN_TOL = 1e-10


def _readonly(a: np.ndarray) -> np.ndarray:
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class BoxSpec:
    """Periodic box ``[0,Lx) x [0,Ly) x [0,Lz)`` sampled on an ``Nx x Ny x Nz`` grid."""

    lengths: tuple[float, float, float] = (2 * math.pi, 2 * math.pi, 2 * math.pi)
    resolution: tuple[int, int, int] = (32, 32, 32)

    def __post_init__(self):
        lengths = tuple(float(v) for v in self.lengths)
        resolution = tuple(int(n) for n in self.resolution)
        if len(lengths) != 3 or len(resolution) != 3:
            raise ValueError("box needs three lengths and three resolutions")
        for name, L in zip("xyz", lengths):
            if not (math.isfinite(L) and L > 0):
                raise ValueError(f"box length L{name}={L} must be positive and finite")
        for name, n in zip("xyz", resolution):
            if n < 8 or n % 2:
                raise ValueError(f"resolution N{name}={n} must be even and >= 8")
        object.__setattr__(self, "lengths", lengths)
        object.__setattr__(self, "resolution", resolution)

    @classmethod
    def cube(cls, n: int, length: float = 2 * math.pi) -> "BoxSpec":
        return cls((length,) * 3, (n,) * 3)

    @property
    def volume(self) -> float:
        Lx, Ly, Lz = self.lengths
        return Lx * Ly * Lz

    @property
    def spacing(self) -> tuple[float, float, float]:
        return tuple(L / n for L, n in zip(self.lengths, self.resolution))

    @property
    def cell_volume(self) -> float:
        dx, dy, dz = self.spacing
        return dx * dy * dz

    @property
    def npoints(self) -> int:
        Nx, Ny, Nz = self.resolution
        return Nx * Ny * Nz

    @property
    def spectral_shape(self) -> tuple[int, int, int]:
        Nx, Ny, Nz = self.resolution
        return (Nx, Ny, Nz // 2 + 1)

    @cached_property
    def signed_modes(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Signed integer mode numbers, broadcastable to :attr:`spectral_shape`."""
        Nx, Ny, Nz = self.resolution
        mx = np.fft.fftfreq(Nx, 1.0 / Nx).astype(np.int64).reshape(-1, 1, 1)
        my = np.fft.fftfreq(Ny, 1.0 / Ny).astype(np.int64).reshape(1, -1, 1)
        mz = np.arange(Nz // 2 + 1, dtype=np.int64).reshape(1, 1, -1)
        return tuple(_readonly(m) for m in (mx, my, mz))

    @cached_property
    def wavenumbers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Physical wavenumbers ``2 pi m / L`` per axis (Nyquist included)."""
        return tuple(
            _readonly(2 * np.pi * m / L) for m, L in zip(self.signed_modes, self.lengths)
        )

    @cached_property
    def derivative_wavenumbers(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Wavenumbers with the Nyquist entry zeroed (odd-derivative convention)."""
        out = []
        for k, m, n in zip(self.wavenumbers, self.signed_modes, self.resolution):
            out.append(_readonly(np.where(np.abs(m) == n // 2, 0.0, k)))
        return tuple(out)

    @cached_property
    def k2(self) -> np.ndarray:
        """``|k|^2`` on the spectral grid (Nyquist included, used by the Laplacian)."""
        kx, ky, kz = self.wavenumbers
        return _readonly(kx**2 + ky**2 + kz**2)

    @cached_property
    def leray_inv_k2(self) -> np.ndarray:
        """``1/|k'|^2`` with derivative wavenumbers; 0 where ``k' = 0``."""
        kx, ky, kz = self.derivative_wavenumbers
        k2 = kx**2 + ky**2 + kz**2
        return _readonly(np.where(k2 > 0, 1.0 / np.where(k2 > 0, k2, 1.0), 0.0))

    @cached_property
    def dealias_mask(self) -> np.ndarray:
        mx, my, mz = self.signed_modes
        Nx, Ny, Nz = self.resolution
        keep = (3 * np.abs(mx) <= Nx) & (3 * np.abs(my) <= Ny) & (3 * np.abs(mz) <= Nz)
        return _readonly(keep)

    @cached_property
    def parseval_weights(self) -> np.ndarray:
        """Multiplicity of each stored kz column in the full spectrum."""
        Nz = self.resolution[2]
        w = np.full(Nz // 2 + 1, 2.0)
        w[0] = 1.0
        w[-1] = 1.0
        return _readonly(w.reshape(1, 1, -1))

    def grid(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Sample coordinates as broadcastable 1-D arrays ``(X, Y, Z)``."""
        axes = [
            (np.arange(n) * (L / n)).reshape(shape)
            for n, L, shape in zip(
                self.resolution, self.lengths, [(-1, 1, 1), (1, -1, 1), (1, 1, -1)]
            )
        ]
        return tuple(axes)


@dataclass(frozen=True, eq=False)
class PhysicalVectorField:
    """Grid samples of a real field; ``data`` has shape ``(ncomp, Nx, Ny, Nz)``.

    ``ncomp`` is 3 for velocities; gradient tensors are carried as 9 components.
    """

    data: np.ndarray
    box: BoxSpec

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 3:
            data = data[None]
        if data.shape[1:] != self.box.resolution:
            raise ValueError(
                f"field shape {data.shape[1:]} does not match box resolution {self.box.resolution}"
            )
        object.__setattr__(self, "data", data)

    @property
    def ncomp(self) -> int:
        return self.data.shape[0]

    def magnitude(self) -> np.ndarray:
        """Pointwise Euclidean magnitude over components."""
        return np.sqrt(np.sum(self.data**2, axis=0))

    def mean(self) -> np.ndarray:
        return self.data.mean(axis=(1, 2, 3))

    def __sub__(self, other: "PhysicalVectorField") -> "PhysicalVectorField":
        return PhysicalVectorField(self.data - other.data, self.box)

    def __mul__(self, scale: float) -> "PhysicalVectorField":
        return PhysicalVectorField(self.data * scale, self.box)

    __rmul__ = __mul__


@dataclass(frozen=True, eq=False)
class SpectralVectorField:
    """Normalized Fourier coefficients of a real field in ``rfftn`` layout."""

    coeffs: np.ndarray
    box: BoxSpec
    divergence_free: bool = False

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=np.complex128)
        if c.ndim == 3:
            c = c[None]
        if c.shape[1:] != self.box.spectral_shape:
            raise ValueError(
                f"coefficient shape {c.shape[1:]} does not match {self.box.spectral_shape}"
            )
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zeros(cls, box: BoxSpec, ncomp: int = 3) -> "SpectralVectorField":
        return cls(np.zeros((ncomp,) + box.spectral_shape, complex), box, divergence_free=True)

    @property
    def ncomp(self) -> int:
        return self.coeffs.shape[0]

    def __add__(self, other: "SpectralVectorField") -> "SpectralVectorField":
        return SpectralVectorField(
            self.coeffs + other.coeffs,
            self.box,
            self.divergence_free and other.divergence_free,
        )

    def __sub__(self, other: "SpectralVectorField") -> "SpectralVectorField":
        return SpectralVectorField(
            self.coeffs - other.coeffs,
            self.box,
            self.divergence_free and other.divergence_free,
        )

    def __mul__(self, scale: float) -> "SpectralVectorField":
        return SpectralVectorField(self.coeffs * scale, self.box, self.divergence_free)

    __rmul__ = __mul__

    def copy(self) -> "SpectralVectorField":
        return SpectralVectorField(self.coeffs.copy(), self.box, self.divergence_free)

    def full_coefficients(self) -> np.ndarray:
        """Expand to the full ``(ncomp, Nx, Ny, Nz)`` spectrum using Hermitian symmetry."""
        Nx, Ny, Nz = self.box.resolution
        full = np.empty((self.ncomp, Nx, Ny, Nz), dtype=complex)
        half = Nz // 2 + 1
        full[..., :half] = self.coeffs
        # c(-m) = conj(c(m)); index -m mod N
        src = np.conj(self.coeffs[..., 1 : Nz - half + 1])
        src = np.roll(np.flip(src, axis=(1, 2)), shift=(1, 1), axis=(1, 2))
        full[..., half:] = np.flip(src, axis=3)
        return full

    def l2_norm(self) -> float:
        """Physical-space L2 norm via Parseval."""
        return math.sqrt(self.box.volume * _weighted_power(self.coeffs, self.box))

    def norm_max(self) -> float:
        return float(np.max(np.abs(self.coeffs))) if self.coeffs.size else 0.0


def _weighted_power(coeffs: np.ndarray, box: BoxSpec) -> float:
    return float(np.sum(box.parseval_weights * (coeffs.real**2 + coeffs.imag**2)))


def inner_product(a: SpectralVectorField, b: SpectralVectorField) -> float:
    """L2 inner product of two real fields, ``sum_i int a_i b_i dx``, via Parseval."""
    s = np.sum(a.box.parseval_weights * (a.coeffs * np.conj(b.coeffs)).real)
    return float(a.box.volume * s)


# ---------------------------------------------------------------------------
# transforms


def to_spectral(data: np.ndarray, box: BoxSpec) -> np.ndarray:
    """Unchecked forward transform of ``(..., Nx, Ny, Nz)`` real samples."""
    return sfft.rfftn(data, axes=(-3, -2, -1)) / box.npoints


def to_physical(coeffs: np.ndarray, box: BoxSpec) -> np.ndarray:
    """Unchecked inverse transform; off-symmetric parts on self-conjugate planes are dropped."""
    return sfft.irfftn(coeffs * box.npoints, s=box.resolution, axes=(-3, -2, -1))


def forward_transform(f: PhysicalVectorField) -> SpectralVectorField:
    bad = ~np.isfinite(f.data)
    if bad.any():
        idx = tuple(int(i) for i in np.argwhere(bad)[0])
        raise ValueError(f"non-finite sample {f.data[idx]!r} at index {idx}")
    return SpectralVectorField(to_spectral(f.data, f.box), f.box)


def hermitian_defect(fh: SpectralVectorField) -> float:
    """Relative violation of ``c(-k) = conj(c(k))`` on the self-conjugate kz planes."""
    scale = fh.norm_max()
    if scale == 0.0:
        return 0.0
    worst = 0.0
    for plane in (0, -1):
        c = fh.coeffs[..., plane]
        mirrored = np.conj(np.roll(np.flip(c, axis=(1, 2)), shift=(1, 1), axis=(1, 2)))
        worst = max(worst, float(np.max(np.abs(c - mirrored))))
    return worst / scale


def inverse_transform(fh: SpectralVectorField) -> PhysicalVectorField:
    defect = hermitian_defect(fh)
    if defect > HERMITIAN_TOL:
        raise ValueError(
            f"coefficients are not Hermitian-symmetric (relative defect {defect:.3e} > {HERMITIAN_TOL:g})"
        )
    return PhysicalVectorField(to_physical(fh.coeffs, fh.box), fh.box)


# ---------------------------------------------------------------------------
# Fourier multipliers


def _axis_index(axis) -> int:
    if isinstance(axis, str):
        try:
            return AXES[axis]
        except KeyError:
            raise ValueError(f"unknown axis {axis!r}; expected one of x, y, z") from None
    if axis not in (0, 1, 2):
        raise ValueError(f"unknown axis {axis!r}")
    return int(axis)


def derivative(fh: SpectralVectorField, axis) -> SpectralVectorField:
    """Spectral derivative along ``axis``; the Nyquist mode along that axis is zeroed."""
    k = fh.box.derivative_wavenumbers[_axis_index(axis)]
    return SpectralVectorField(1j * k * fh.coeffs, fh.box, fh.divergence_free)


def gradient(coeffs: np.ndarray, box: BoxSpec) -> np.ndarray:
    """Gradient tensor of a spectral vector: ``out[i, j] = d_j f_i``."""
    kx, ky, kz = box.derivative_wavenumbers
    return np.stack([1j * kx * coeffs, 1j * ky * coeffs, 1j * kz * coeffs], axis=1)


def divergence(fh: SpectralVectorField) -> np.ndarray:
    kx, ky, kz = fh.box.derivative_wavenumbers
    c = fh.coeffs
    return 1j * (kx * c[0] + ky * c[1] + kz * c[2])


def curl(coeffs: np.ndarray, box: BoxSpec) -> np.ndarray:
    kx, ky, kz = box.derivative_wavenumbers
    u, v, w = coeffs
    return 1j * np.stack([ky * w - kz * v, kz * u - kx * w, kx * v - ky * u])


def project_coeffs(c: np.ndarray, box: BoxSpec) -> np.ndarray:
    kx, ky, kz = box.derivative_wavenumbers
    kdotu = (kx * c[0] + ky * c[1] + kz * c[2]) * box.leray_inv_k2
    return np.stack([c[0] - kx * kdotu, c[1] - ky * kdotu, c[2] - kz * kdotu])


def leray_project(fh: SpectralVectorField) -> SpectralVectorField:
    """Orthogonal projection onto divergence-free fields, ``u - k (k.u)/|k|^2``."""
    if fh.ncomp != 3:
        raise ValueError("Leray projection needs a 3-component field")
    return SpectralVectorField(project_coeffs(fh.coeffs, fh.box), fh.box, divergence_free=True)


def dealias(fh: SpectralVectorField) -> SpectralVectorField:
    """2/3-rule truncation: zero every mode with ``|m_axis| > N_axis/3`` on any axis."""
    return SpectralVectorField(fh.coeffs * fh.box.dealias_mask, fh.box, fh.divergence_free)


def relative_divergence(fh: SpectralVectorField) -> float:
    """``max_k |k.u(k)| / max_k |u(k)|`` (0 for the zero field)."""
    scale = fh.norm_max()
    if scale == 0.0:
        return 0.0
    return float(np.max(np.abs(divergence(fh)))) / scale


def spectral_tail_ratio(fh: SpectralVectorField) -> float:
    """Energy fraction in the top third of the retained (dealiased) band."""
    mx, my, mz = fh.box.signed_modes
    Nx, Ny, Nz = fh.box.resolution
    # normalized band coordinate: 1 at the 2/3-rule cutoff
    s = np.maximum(np.maximum(3 * np.abs(mx) / Nx, 3 * np.abs(my) / Ny), 3 * np.abs(mz) / Nz)
    power = fh.box.parseval_weights * np.sum(np.abs(fh.coeffs) ** 2, axis=0)
    retained = s <= 1.0
    total = float(np.sum(power[retained]))
    if total == 0.0:
        return 0.0
    tail = float(np.sum(power[(s > 2.0 / 3.0) & retained]))
    return tail / total


# ---------------------------------------------------------------------------
# snapshots


def save_snapshot(path, f: PhysicalVectorField, **extra) -> Path:
    """Write ``f`` as an ``.npz`` container; components are stored x-fastest.

    ``extra`` arrays/scalars are stored alongside (checkpoints use this for the
    time, step counter, config hash and bit-exact spectral state).
    """
    path = Path(path)
    arrays = {
        "format": np.array(SNAPSHOT_FORMAT),
        "format_version": np.array(SNAPSHOT_VERSION),
        "lengths": np.array(f.box.lengths, dtype=np.float64),
        "resolution": np.array(f.box.resolution, dtype=np.int64),
        # (ncomp, Nz, Ny, Nx) C-order == x varies fastest
        "components": np.ascontiguousarray(np.transpose(f.data, (0, 3, 2, 1))),
    }
    for key, value in extra.items():
        if key in arrays:
            raise ValueError(f"reserved snapshot key {key!r}")
        arrays[key] = np.asarray(value)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_snapshot(path) -> tuple[PhysicalVectorField, dict]:
    with np.load(Path(path), allow_pickle=False) as z:
        if "format" not in z or str(z["format"]) != SNAPSHOT_FORMAT:
            raise ValueError(f"{path}: not a {SNAPSHOT_FORMAT} snapshot")
        version = int(z["format_version"])
        if version != SNAPSHOT_VERSION:
            raise ValueError(f"{path}: unsupported snapshot version {version}")
        box = BoxSpec(tuple(z["lengths"].tolist()), tuple(int(n) for n in z["resolution"]))
        data = np.transpose(z["components"], (0, 3, 2, 1))
        extra = {
            k: z[k]
            for k in z.files
            if k not in ("format", "format_version", "lengths", "resolution", "components")
        }
    return PhysicalVectorField(np.ascontiguousarray(data), box), extra
