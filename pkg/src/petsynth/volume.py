"""3D volumes with voxel geometry, MVOL file I/O, SUV conversion, and resampling.

A :class:`Volume3D` is the carrier type for every grid in the pipeline: CT in
Hounsfield units, PET activity in kBq/ml, SUV, binary masks, probability maps,
and normalized [0, 1] network inputs/outputs.  Axis order is (x, y, z) with
per-axis spacing in mm; axial slices are ``data[:, :, z]``.

Volumes are treated as immutable after construction; all operations here return
new volumes and are safe to call concurrently.

The MVOL on-disk format is a ``<name>.mvol.json`` sidecar (dims, spacing_mm,
offset_mm, modality, dtype ``f32le``) plus a ``<name>.mvol.raw`` raster of
little-endian float32 values in x-fastest order.  Non-finite values are
rejected on write.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from enum import Enum

import numpy as np


class Modality(str, Enum):
    CT = "CT"
    PET_ACTIVITY = "PET_ACTIVITY"
    SUV = "SUV"
    MASK = "MASK"
    PROB = "PROB"
    NORMALIZED = "NORMALIZED"


class MVolError(Exception):
    """Base class for MVOL file-format errors."""


class SidecarError(MVolError):
    """Sidecar JSON is missing, unreadable, or has bad/missing fields."""


class RasterSizeError(MVolError):
    """Raster byte length does not match the sidecar dims."""


class NonFiniteDataError(MVolError):
    """Volume contains NaN or infinity, which the format forbids."""


@dataclass
class Volume3D:
    """A 3D scalar grid with voxel spacing (mm), world offset (mm), and modality.

    Args:
        data: array of shape (nx, ny, nz); stored as float32.
        spacing: per-axis voxel size in mm, all > 0.
        offset: world position of voxel (0, 0, 0) in mm.
        modality: one of :class:`Modality`.
    """

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    modality: Modality = Modality.CT

    def __post_init__(self) -> None:
        self.data = np.asarray(self.data, dtype=np.float32)
        if self.data.ndim != 3:
            raise ValueError(f"volume data must be 3D, got shape {self.data.shape}")
        if min(self.data.shape) < 1:
            raise ValueError("volume dimensions must be >= 1 on every axis")
        self.spacing = tuple(float(s) for s in self.spacing)
        self.offset = tuple(float(t) for t in self.offset)
        if len(self.spacing) != 3 or len(self.offset) != 3:
            raise ValueError("spacing and offset must have 3 components")
        if any(s <= 0 for s in self.spacing):
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        self.modality = Modality(self.modality)
        if self.modality is Modality.MASK:
            if not np.isin(self.data, (0.0, 1.0)).all():
                raise ValueError("MASK volumes may contain only 0 and 1")
        elif self.modality is Modality.NORMALIZED:
            if self.data.size and (self.data.min() < 0.0 or self.data.max() > 1.0):
                raise ValueError("NORMALIZED volumes must lie in [0, 1]")

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.data.shape

    def with_data(self, data: np.ndarray, modality: Modality | None = None) -> "Volume3D":
        """New volume with the same geometry but different data (and modality)."""
        return Volume3D(data, self.spacing, self.offset,
                        self.modality if modality is None else modality)

    def same_grid(self, other: "Volume3D", tol: float = 1e-6) -> bool:
        return (self.dims == other.dims
                and np.allclose(self.spacing, other.spacing, atol=tol)
                and np.allclose(self.offset, other.offset, atol=tol))


@dataclass(frozen=True)
class Window:
    """An intensity window [lo, hi] in the units of the volume it applies to."""

    lo: float
    hi: float

    def __post_init__(self) -> None:
        if not self.lo < self.hi:
            raise ValueError(f"window requires lo < hi, got [{self.lo}, {self.hi}]")

    @property
    def width(self) -> float:
        return self.hi - self.lo


#: Standard liver-parenchyma CT window in HU.
CT_WINDOW = Window(-160.0, 240.0)
#: SUV range covering the uptake values of interest.
SUV_WINDOW = Window(0.0, 20.0)
#: SUV level above which uptake is treated as suspicious for malignancy.
MALIGNANCY_SUV = 2.5


class AffineTransform:
    """A 4x4 homogeneous affine on voxel index coordinates.

    For PET/CT alignment the convention is: the matrix returned by
    :func:`build_alignment_transform` maps source-grid (PET) indices onto
    target-grid (CT) indices.  :func:`resample_linear` applies its transform
    directly to target indices, so pulling the PET onto the CT grid uses
    ``build_alignment_transform(...).inverse()``.
    """

    def __init__(self, matrix: np.ndarray):
        m = np.asarray(matrix, dtype=np.float64)
        if m.shape != (4, 4):
            raise ValueError(f"affine matrix must be 4x4, got {m.shape}")
        if not np.allclose(m[3], (0.0, 0.0, 0.0, 1.0)):
            raise ValueError("bottom row of an affine transform must be (0, 0, 0, 1)")
        self.matrix = m

    @classmethod
    def from_scale_translation(cls, scale, translation) -> "AffineTransform":
        m = np.eye(4)
        m[0, 0], m[1, 1], m[2, 2] = scale
        m[:3, 3] = translation
        return cls(m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(np.eye(4))

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Transform an (n, 3) array of index coordinates."""
        p = np.asarray(points, dtype=np.float64)
        return p @ self.matrix[:3, :3].T + self.matrix[:3, 3]

    def inverse(self) -> "AffineTransform":
        """Analytic inverse; raises numpy.linalg.LinAlgError if singular."""
        return AffineTransform(np.linalg.inv(self.matrix))


# ---------------------------------------------------------------------------
# MVOL file I/O
# ---------------------------------------------------------------------------

def _mvol_base(path: str | os.PathLike) -> str:
    p = str(path)
    for suffix in (".mvol.json", ".mvol.raw", ".mvol"):
        if p.endswith(suffix):
            return p[: -len(suffix)]
    return p


def save_volume(v: Volume3D, path: str | os.PathLike) -> None:
    """Write an MVOL sidecar + raster pair; ``load_volume`` inverts it exactly."""
    base = _mvol_base(path)
    if not base:
        raise ValueError("empty volume path")
    if not np.isfinite(v.data).all():
        raise NonFiniteDataError("volume contains non-finite voxels")
    sidecar = {
        "dims": list(v.dims),
        "spacing_mm": list(v.spacing),
        "offset_mm": list(v.offset),
        "modality": v.modality.value,
        "dtype": "f32le",
    }
    with open(base + ".mvol.json", "w", encoding="utf-8") as f:
        json.dump(sidecar, f, indent=2)
        f.write("\n")
    v.data.astype("<f4").ravel(order="F").tofile(base + ".mvol.raw")


def load_volume(path: str | os.PathLike) -> Volume3D:
    """Read an MVOL pair written by :func:`save_volume`.

    Raises:
        FileNotFoundError: sidecar or raster file is missing.
        SidecarError: sidecar is not valid JSON or has bad fields.
        RasterSizeError: raster length does not match the sidecar dims.
    """
    base = _mvol_base(path)
    sidecar_path = base + ".mvol.json"
    raster_path = base + ".mvol.raw"
    with open(sidecar_path, "r", encoding="utf-8") as f:
        try:
            sidecar = json.load(f)
        except json.JSONDecodeError as e:
            raise SidecarError(f"{sidecar_path}: invalid JSON ({e})") from e
    try:
        dims = [int(d) for d in sidecar["dims"]]
        spacing = [float(s) for s in sidecar["spacing_mm"]]
        offset = [float(t) for t in sidecar["offset_mm"]]
        modality = Modality(sidecar["modality"])
        dtype = sidecar["dtype"]
    except (KeyError, TypeError, ValueError) as e:
        raise SidecarError(f"{sidecar_path}: bad or missing field ({e})") from e
    if len(dims) != 3 or any(d < 1 for d in dims):
        raise SidecarError(f"{sidecar_path}: dims must be 3 positive integers, got {dims}")
    if dtype != "f32le":
        raise SidecarError(f"{sidecar_path}: unsupported dtype {dtype!r}")
    raw = np.fromfile(raster_path, dtype="<f4")
    expected = dims[0] * dims[1] * dims[2]
    if raw.size != expected:
        raise RasterSizeError(
            f"{raster_path}: raster size mismatch, expected {expected} values, got {raw.size}")
    data = raw.reshape(dims, order="F")
    return Volume3D(data, tuple(spacing), tuple(offset), modality)


# ---------------------------------------------------------------------------
# Intensity operations
# ---------------------------------------------------------------------------

def compute_suv(activity: Volume3D, injected_dose_kbq: float, weight_g: float) -> Volume3D:
    """Convert a PET activity volume (kBq/ml) to standardized uptake values.

    Each voxel r becomes r / (dose / weight), the uptake relative to a uniform
    distribution of the decay-corrected injected dose over the body weight.
    """
    if activity.modality is not Modality.PET_ACTIVITY:
        raise ValueError(f"expected a PET_ACTIVITY volume, got {activity.modality.value}")
    if injected_dose_kbq <= 0:
        raise ValueError("injected dose must be positive")
    if weight_g <= 0:
        raise ValueError("patient weight must be positive")
    factor = np.float32(weight_g / injected_dose_kbq)
    return activity.with_data(activity.data * factor, Modality.SUV)


def window_and_normalize(v: Volume3D, w: Window) -> Volume3D:
    """Clip to [w.lo, w.hi] and scale linearly to [0, 1]."""
    lo = np.float32(w.lo)
    clipped = np.clip(v.data, lo, np.float32(w.hi))
    out = (clipped - lo) / np.float32(w.width)
    return v.with_data(out, Modality.NORMALIZED)


def denormalize(v: Volume3D, w: Window, modality: Modality = Modality.SUV) -> Volume3D:
    """Invert :func:`window_and_normalize`: map [0, 1] back to [w.lo, w.hi]."""
    if v.data.size and (v.data.min() < 0.0 or v.data.max() > 1.0):
        raise ValueError("denormalize requires values in [0, 1]")
    out = v.data * np.float32(w.width) + np.float32(w.lo)
    return v.with_data(out, modality)


# ---------------------------------------------------------------------------
# Alignment and resampling
# ---------------------------------------------------------------------------

def build_alignment_transform(s_ct, s_pet, t) -> AffineTransform:
    """Affine that maps PET-grid indices onto the CT grid.

    The diagonal holds the voxel-size ratios (pet / ct) per axis and the
    translation column holds ``t``, the PET origin offset expressed in
    CT-voxel units.  Invert to obtain the CT-to-PET sampling map.
    """
    s_ct = tuple(float(s) for s in s_ct)
    s_pet = tuple(float(s) for s in s_pet)
    if any(s <= 0 for s in s_ct + s_pet):
        raise ValueError("voxel spacings must be positive")
    scale = tuple(p / c for p, c in zip(s_pet, s_ct))
    return AffineTransform.from_scale_translation(scale, tuple(float(x) for x in t))


def resample_linear(
    src: Volume3D,
    a: AffineTransform,
    target_dims: tuple[int, int, int],
    target_spacing: tuple[float, float, float] | None = None,
    target_offset: tuple[float, float, float] | None = None,
    pad_value: float | None = None,
) -> Volume3D:
    """Resample ``src`` onto a new grid by sampling at ``a @ target_index``.

    Each target voxel is filled by trilinear interpolation of the source at the
    transformed index coordinate.  Corner samples that fall outside the source
    bounds contribute the pad value, which defaults to the source minimum
    (air-like for CT, zero-uptake for PET), so resampled values never leave
    [min(src), max(src)].
    """
    if any(d < 1 for d in target_dims):
        raise ValueError(f"target dims must be >= 1 per axis, got {target_dims}")
    inv_check = a.inverse()  # noqa: F841  raises on a singular transform up front
    pad = np.float32(src.data.min() if pad_value is None else pad_value)
    nx, ny, nz = target_dims
    sx, sy, sz = src.dims
    m = a.matrix
    out = np.empty((nx, ny, nz), dtype=np.float32)
    ix, iy = np.meshgrid(np.arange(nx, dtype=np.float64),
                         np.arange(ny, dtype=np.float64), indexing="ij")
    # One z-slab at a time keeps the 8-corner gather memory bounded.
    for z in range(nz):
        cx = m[0, 0] * ix + m[0, 1] * iy + m[0, 2] * z + m[0, 3]
        cy = m[1, 0] * ix + m[1, 1] * iy + m[1, 2] * z + m[1, 3]
        cz = m[2, 0] * ix + m[2, 1] * iy + m[2, 2] * z + m[2, 3]
        out[:, :, z] = _trilinear_sample(src.data, cx, cy, cz, pad, (sx, sy, sz))
    return Volume3D(
        out,
        src.spacing if target_spacing is None else target_spacing,
        src.offset if target_offset is None else target_offset,
        src.modality,
    )


def _trilinear_sample(data, cx, cy, cz, pad, dims):
    """Trilinear interpolation with out-of-range corners replaced by ``pad``."""
    sx, sy, sz = dims
    x0 = np.floor(cx).astype(np.int64)
    y0 = np.floor(cy).astype(np.int64)
    z0 = np.floor(cz).astype(np.int64)
    fx = (cx - x0).astype(np.float32)
    fy = (cy - y0).astype(np.float32)
    fz = (cz - z0).astype(np.float32)
    acc = np.zeros(cx.shape, dtype=np.float32)
    for dx in (0, 1):
        wx = fx if dx else np.float32(1.0) - fx
        xi = x0 + dx
        vx = (xi >= 0) & (xi < sx)
        xi_c = np.clip(xi, 0, sx - 1)
        for dy in (0, 1):
            wy = fy if dy else np.float32(1.0) - fy
            yi = y0 + dy
            vy = (yi >= 0) & (yi < sy)
            yi_c = np.clip(yi, 0, sy - 1)
            for dz in (0, 1):
                wz = fz if dz else np.float32(1.0) - fz
                zi = z0 + dz
                vz = (zi >= 0) & (zi < sz)
                zi_c = np.clip(zi, 0, sz - 1)
                corner = np.where(vx & vy & vz, data[xi_c, yi_c, zi_c], pad)
                acc += wx * wy * wz * corner
    return acc
