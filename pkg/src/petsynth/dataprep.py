"""Aligned, normalized CT/PET slice pairs plus online training augmentation.

``prepare_pair`` turns a raw CT + PET scan into a :class:`ScanPair`: the PET is
converted to SUV if needed, pulled onto the CT grid, and both volumes are
windowed to [0, 1].  ``extract_slices`` yields axial 2D pairs; ``augment`` and
``add_input_noise`` are the per-batch training-time transforms.

All randomized operations take an explicit ``numpy.random.Generator`` so that
parallel data loading stays deterministic given per-worker seeds.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .volume import (
    CT_WINDOW,
    SUV_WINDOW,
    Modality,
    Volume3D,
    Window,
    build_alignment_transform,
    compute_suv,
    resample_linear,
    window_and_normalize,
)


@dataclass
class ScanPair:
    """A normalized CT volume and the PET volume resampled onto its grid.

    ``slice_range`` is an optional inclusive axial index range restricting the
    scan to a region of interest (e.g. the liver).
    """

    ct: Volume3D
    pet: Volume3D
    suv_window: Window = SUV_WINDOW
    slice_range: tuple[int, int] | None = None

    def __post_init__(self) -> None:
        if not self.ct.same_grid(self.pet):
            raise ValueError("CT and PET must share dims, spacing, and offset")
        for v in (self.ct, self.pet):
            if v.modality is not Modality.NORMALIZED:
                raise ValueError("ScanPair volumes must be NORMALIZED")
        if self.slice_range is not None:
            lo, hi = self.slice_range
            nz = self.ct.dims[2]
            if not (0 <= lo <= hi < nz):
                raise ValueError(f"slice range {self.slice_range} outside [0, {nz - 1}]")


@dataclass
class AugmentConfig:
    """Online augmentation parameters: uniform scale/translation plus CT input noise.

    The noise is zero-mean Gaussian with sigma = noise_bound / 3, hard-clipped
    to +-noise_bound.
    """

    scale_range: tuple[float, float] = (0.9, 1.1)
    translate_range_px: tuple[float, float] = (-25.0, 25.0)
    noise_bound: float = 0.005
    seed: int = 0

    def __post_init__(self) -> None:
        if self.scale_range[0] <= 0:
            raise ValueError("scale range must be positive")
        if self.scale_range[0] > self.scale_range[1]:
            raise ValueError("scale range must be ordered")
        if self.noise_bound < 0:
            raise ValueError("noise bound must be >= 0")


def prepare_pair(
    ct_raw: Volume3D,
    pet_raw: Volume3D,
    dose: float | None = None,
    weight: float | None = None,
    windows: tuple[Window, Window] = (CT_WINDOW, SUV_WINDOW),
    slice_range: tuple[int, int] | None = None,
) -> ScanPair:
    """Align a raw PET to a raw CT and window both into [0, 1].

    The PET is converted to SUV first (skipped when already in SUV modality),
    then resampled onto the CT grid with the inverse of the PET-to-CT
    alignment affine, and finally both volumes are window-normalized.
    """
    if ct_raw.modality is not Modality.CT:
        raise ValueError(f"expected CT modality, got {ct_raw.modality.value}")
    if pet_raw.modality is Modality.PET_ACTIVITY:
        if dose is None or weight is None:
            raise ValueError("activity PET requires injected dose and patient weight")
        pet_suv = compute_suv(pet_raw, dose, weight)
    elif pet_raw.modality is Modality.SUV:
        pet_suv = pet_raw
    else:
        raise ValueError(f"PET volume must be PET_ACTIVITY or SUV, got {pet_raw.modality.value}")

    # PET origin offset in CT-voxel units; the alignment affine maps PET
    # indices onto the CT grid, so sampling uses its inverse.
    t = tuple((po - co) / s for po, co, s in zip(pet_suv.offset, ct_raw.offset, ct_raw.spacing))
    align = build_alignment_transform(ct_raw.spacing, pet_suv.spacing, t)
    pet_on_ct = resample_linear(pet_suv, align.inverse(), ct_raw.dims,
                                target_spacing=ct_raw.spacing, target_offset=ct_raw.offset)
    ct_win, suv_win = windows
    return ScanPair(
        ct=window_and_normalize(ct_raw, ct_win),
        pet=window_and_normalize(pet_on_ct, suv_win),
        suv_window=suv_win,
        slice_range=slice_range,
    )


def extract_slices(p: ScanPair) -> list[tuple[np.ndarray, np.ndarray]]:
    """Axial (ct, pet) 2D slice pairs over the pair's slice range (or all)."""
    nz = p.ct.dims[2]
    lo, hi = p.slice_range if p.slice_range is not None else (0, nz - 1)
    if lo > hi:
        raise ValueError(f"empty slice range [{lo}, {hi}]")
    return [(p.ct.data[:, :, z].copy(), p.pet.data[:, :, z].copy())
            for z in range(lo, hi + 1)]


def _scale_translate(img: np.ndarray, scale: float, shift: tuple[float, float]) -> np.ndarray:
    """Scale about the image center, then translate; bilinear, min-padded."""
    c = (np.asarray(img.shape, dtype=np.float64) - 1.0) / 2.0
    inv = 1.0 / scale
    offset = c - c * inv - np.asarray(shift, dtype=np.float64) * inv
    out = ndimage.affine_transform(
        img.astype(np.float32), np.diag([inv, inv]), offset=offset,
        output_shape=img.shape, order=1, mode="constant", cval=float(img.min()),
    )
    return out.astype(np.float32)


def augment(
    sample: tuple[np.ndarray, np.ndarray],
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> tuple[np.ndarray, np.ndarray]:
    """Apply one shared random scale + translation to both slices of a pair.

    Drawing the parameters once keeps the CT and PET geometrically consistent.
    Each slice is padded with its own minimum value.
    """
    ct, pet = sample
    if ct.shape != pet.shape:
        raise ValueError("paired slices must share a shape")
    scale = float(rng.uniform(*cfg.scale_range))
    shift = tuple(rng.uniform(*cfg.translate_range_px, size=2))
    if scale == 1.0 and shift == (0.0, 0.0):
        return ct.astype(np.float32), pet.astype(np.float32)
    return _scale_translate(ct, scale, shift), _scale_translate(pet, scale, shift)


def add_input_noise(
    ct_slice: np.ndarray,
    cfg: AugmentConfig,
    rng: np.random.Generator,
) -> np.ndarray:
    """Perturb a normalized CT slice with clipped Gaussian noise.

    Training-time only, and only ever applied to the CT input, never the PET
    target.
    """
    if cfg.noise_bound == 0:
        return ct_slice.astype(np.float32)
    sigma = cfg.noise_bound / 3.0
    noise = rng.normal(0.0, sigma, size=ct_slice.shape)
    noise = np.clip(noise, -cfg.noise_bound, cfg.noise_bound)
    return (ct_slice + noise.astype(np.float32)).astype(np.float32)


def split_train_val(slices, fraction: float, seed: int):
    """Random disjoint train/validation partition with |val| = round(fraction * n)."""
    if not 0 < fraction < 1:
        raise ValueError("fraction must be in (0, 1)")
    n = len(slices)
    if n == 0:
        raise ValueError("cannot split an empty slice list")
    n_val = int(round(fraction * n))
    perm = np.random.default_rng(seed).permutation(n)
    val_idx = sorted(perm[:n_val].tolist())
    train_idx = sorted(perm[n_val:].tolist())
    return [slices[i] for i in train_idx], [slices[i] for i in val_idx]


# ---------------------------------------------------------------------------
# Pair manifest files
# ---------------------------------------------------------------------------

@dataclass
class PairRecord:
    """One scan entry of a pair manifest: file paths plus SUV/ROI metadata."""

    ct_path: str
    pet_path: str
    dose: float | None = None
    weight: float | None = None
    slice_lo: int | None = None
    slice_hi: int | None = None

    @property
    def slice_range(self) -> tuple[int, int] | None:
        if self.slice_lo is None or self.slice_hi is None:
            return None
        return (self.slice_lo, self.slice_hi)


def write_pair_manifest(records: list[PairRecord], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        for r in records:
            writer.writerow([
                r.ct_path, r.pet_path,
                "" if r.dose is None else repr(float(r.dose)),
                "" if r.weight is None else repr(float(r.weight)),
                "" if r.slice_lo is None else int(r.slice_lo),
                "" if r.slice_hi is None else int(r.slice_hi),
            ])


def read_pair_manifest(path) -> list[PairRecord]:
    records = []
    with open(path, newline="", encoding="utf-8") as f:
        for row in csv.reader(f):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 6:
                raise ValueError(f"manifest row needs 6 fields, got {len(row)}: {row}")
            ct, pet, dose, weight, lo, hi = (field.strip() for field in row)
            records.append(PairRecord(
                ct_path=ct, pet_path=pet,
                dose=float(dose) if dose else None,
                weight=float(weight) if weight else None,
                slice_lo=int(lo) if lo else None,
                slice_hi=int(hi) if hi else None,
            ))
    return records
