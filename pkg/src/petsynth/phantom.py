"""Synthetic paired CT/PET scans with known lesion ground truth.

The phantom is a liver-like ellipsoid of elevated attenuation on a soft-tissue
background, carrying a configurable number of spherical lesions.  Lesions are
hypodense on CT and hot on PET, with a flat-core radial SUV profile chosen so
that every lesion stays above the malignancy threshold at the coarse PET
sampling.  The PET volume is generated on its own grid (different spacing and
a translational offset), so a phantom pair exercises the full alignment path.

`generate_candidates` fabricates the output of an external lesion detector:
one high-scoring candidate per true lesion plus a requested number of planted
false positives kept strictly outside a caller-supplied exclusion mask.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .dataprep import PairRecord, write_pair_manifest
from .detection import CandidateSet, Component, connected_components
from .volume import MALIGNANCY_SUV, Modality, Volume3D, save_volume

# liver semi-axes as fractions of the half-extent per axis
_LIVER_FRAC = (0.75, 0.62, 0.80)
_EDGE_MARGIN_MM = 2.0
_MAX_ATTEMPTS = 200
# true candidates must survive a strict >0.95 probability cut, planted false
# positives must not; both stay clear of the cut by a small float margin
_TRUE_SCORE_RANGE = (0.96, 0.99)
_FALSE_SCORE_RANGE = (0.80, 0.945)


class PhantomGeometryError(RuntimeError):
    """Requested lesions or candidates cannot be placed in the volume."""


@dataclass(frozen=True)
class PhantomConfig:
    ct_dims: tuple[int, int, int] = (64, 64, 16)
    pet_dims: tuple[int, int, int] = (22, 22, 16)
    ct_spacing: tuple[float, float, float] = (1.0, 1.0, 4.0)
    pet_spacing: tuple[float, float, float] = (3.0, 3.0, 4.0)
    ct_offset: tuple[float, float, float] = (0.0, 0.0, 0.0)
    pet_offset: tuple[float, float, float] = (1.5, 1.5, 0.0)
    n_lesions: int = 2
    lesion_radius_range: tuple[float, float] = (3.5, 6.0)
    lesion_suv_range: tuple[float, float] = (4.0, 8.0)
    background_suv_range: tuple[float, float] = (0.5, 1.5)
    soft_tissue_hu: float = 20.0
    liver_hu: float = 60.0
    lesion_hu_delta: float = -25.0
    ct_noise_hu: float = 4.0
    pet_noise_suv: float = 0.05
    seed: int = 0

    def __post_init__(self) -> None:
        for name in ("ct_dims", "pet_dims"):
            dims = getattr(self, name)
            if len(dims) != 3 or any(int(d) <= 0 for d in dims):
                raise ValueError(f"{name} must be three positive ints, got {dims}")
        for name in ("ct_spacing", "pet_spacing"):
            sp = getattr(self, name)
            if len(sp) != 3 or any(s <= 0 for s in sp):
                raise ValueError(f"{name} must be three positive floats, got {sp}")
        if self.n_lesions < 0:
            raise ValueError("n_lesions must be >= 0")
        for name in ("lesion_radius_range", "lesion_suv_range", "background_suv_range"):
            lo, hi = getattr(self, name)
            if not 0 <= lo <= hi:
                raise ValueError(f"{name} must be an ascending non-negative range")
        if self.lesion_suv_range[0] <= MALIGNANCY_SUV:
            raise ValueError("lesion_suv_range minimum must exceed "
                             f"{MALIGNANCY_SUV} so lesions read as malignant")
        if self.lesion_radius_range[0] <= 0:
            raise ValueError("lesion radii must be positive")


@dataclass(frozen=True)
class Lesion:
    """One phantom lesion: world-mm center, radius and peak SUV."""

    center_mm: tuple[float, float, float]
    radius_mm: float
    peak_suv: float


def _liver_geometry(cfg: PhantomConfig) -> tuple[np.ndarray, np.ndarray]:
    dims = np.asarray(cfg.ct_dims, dtype=np.float64)
    spacing = np.asarray(cfg.ct_spacing, dtype=np.float64)
    offset = np.asarray(cfg.ct_offset, dtype=np.float64)
    center = offset + (dims - 1.0) * spacing / 2.0
    semi = np.asarray(_LIVER_FRAC) * (dims - 1.0) * spacing / 2.0
    return center, semi


def _grid_mm(dims, spacing, offset):
    axes = [offset[i] + spacing[i] * np.arange(dims[i], dtype=np.float64)
            for i in range(3)]
    return np.meshgrid(*axes, indexing="ij")


def _dist_mm(grid, center) -> np.ndarray:
    x, y, z = grid
    return np.sqrt((x - center[0]) ** 2 + (y - center[1]) ** 2
                   + (z - center[2]) ** 2)


def _lesion_profile(dist_mm: np.ndarray, radius_mm: float) -> np.ndarray:
    """Radial intensity: flat core out to half the radius, Gaussian beyond.

    The sigma equals the core radius, so the profile is still ~0.6 at the
    nominal lesion boundary; any PET voxel center landing within the lesion
    therefore samples well above threshold even on a 3 mm grid.
    """
    core = radius_mm / 2.0
    out = np.exp(-((dist_mm - core) ** 2) / (2.0 * core * core))
    return np.where(dist_mm <= core, 1.0, out)


def place_lesions(cfg: PhantomConfig) -> list[Lesion]:
    """Sample non-overlapping lesions inside the liver, or fail loudly.

    Centers are drawn uniformly from the liver ellipsoid eroded by the lesion
    radius plus an edge margin; pairs must be separated by both radii plus
    twice the coarsest PET spacing so lesions remain distinct components on
    either grid.
    """
    rng = np.random.default_rng([cfg.seed, 0])
    center, semi = _liver_geometry(cfg)
    r_hi = cfg.lesion_radius_range[1]
    if float(semi.min()) <= r_hi + _EDGE_MARGIN_MM:
        raise PhantomGeometryError(
            f"liver semi-axes {np.round(semi, 1)} mm cannot hold lesions of "
            f"radius up to {r_hi} mm")
    min_gap = 2.0 * max(cfg.pet_spacing)
    for _ in range(_MAX_ATTEMPTS):
        placed: list[Lesion] = []
        for _ in range(cfg.n_lesions):
            radius = float(rng.uniform(*cfg.lesion_radius_range))
            peak = float(rng.uniform(*cfg.lesion_suv_range))
            room = semi - radius - _EDGE_MARGIN_MM
            for _ in range(_MAX_ATTEMPTS):
                u = rng.uniform(-1.0, 1.0, size=3)
                if float(u @ u) > 1.0:
                    continue
                c = center + u * room
                if all(np.linalg.norm(c - np.asarray(p.center_mm))
                       > radius + p.radius_mm + min_gap for p in placed):
                    placed.append(Lesion(tuple(c), radius, peak))
                    break
            else:
                break
        if len(placed) == cfg.n_lesions:
            return placed
    raise PhantomGeometryError(
        f"could not place {cfg.n_lesions} lesions after {_MAX_ATTEMPTS} tries")


def _render_ct(cfg: PhantomConfig, lesions: list[Lesion]) -> Volume3D:
    rng = np.random.default_rng([cfg.seed, 1])
    center, semi = _liver_geometry(cfg)
    grid = _grid_mm(cfg.ct_dims, cfg.ct_spacing, cfg.ct_offset)
    x, y, z = grid
    hu = np.full(cfg.ct_dims, cfg.soft_tissue_hu, dtype=np.float64)
    inside = (((x - center[0]) / semi[0]) ** 2 + ((y - center[1]) / semi[1]) ** 2
              + ((z - center[2]) / semi[2]) ** 2) <= 1.0
    hu[inside] = cfg.liver_hu
    for les in lesions:
        hu[_dist_mm(grid, les.center_mm) <= les.radius_mm] += cfg.lesion_hu_delta
    hu += rng.normal(0.0, cfg.ct_noise_hu, size=cfg.ct_dims)
    return Volume3D(hu.astype(np.float32), cfg.ct_spacing, cfg.ct_offset,
                    Modality.CT)


def _render_pet(cfg: PhantomConfig, lesions: list[Lesion]) -> Volume3D:
    rng = np.random.default_rng([cfg.seed, 2])
    grid = _grid_mm(cfg.pet_dims, cfg.pet_spacing, cfg.pet_offset)
    suv = np.full(cfg.pet_dims, float(rng.uniform(*cfg.background_suv_range)),
                  dtype=np.float64)
    for les in lesions:
        suv += les.peak_suv * _lesion_profile(_dist_mm(grid, les.center_mm),
                                              les.radius_mm)
    suv += rng.normal(0.0, cfg.pet_noise_suv, size=cfg.pet_dims)
    return Volume3D(np.maximum(suv, 0.0).astype(np.float32), cfg.pet_spacing,
                    cfg.pet_offset, Modality.SUV)


def _render_gt(cfg: PhantomConfig, lesions: list[Lesion]) -> Volume3D:
    grid = _grid_mm(cfg.ct_dims, cfg.ct_spacing, cfg.ct_offset)
    mask = np.zeros(cfg.ct_dims, dtype=bool)
    for les in lesions:
        mask |= _dist_mm(grid, les.center_mm) <= les.radius_mm
    return Volume3D(mask.astype(np.float32), cfg.ct_spacing, cfg.ct_offset,
                    Modality.MASK)


def generate_phantom_pair(cfg: PhantomConfig) -> tuple[Volume3D, Volume3D, Volume3D]:
    """Build (ct_raw, pet_raw, gt_lesions); deterministic in cfg.seed.

    The CT is in Hounsfield units on the CT grid, the PET is in SUV on its
    own grid, and the ground-truth lesion mask lives on the CT grid.
    """
    lesions = place_lesions(cfg)
    return _render_ct(cfg, lesions), _render_pet(cfg, lesions), _render_gt(cfg, lesions)


def _index_ball(radius_vox: int) -> np.ndarray:
    r = int(radius_vox)
    span = np.arange(-r, r + 1)
    dx, dy, dz = np.meshgrid(span, span, span, indexing="ij")
    keep = dx ** 2 + dy ** 2 + dz ** 2 <= r * r
    return np.stack([dx[keep], dy[keep], dz[keep]], axis=1)


def generate_candidates(gt_lesions: Volume3D, n_false: int, avoid: Volume3D,
                        seed: int, false_radius_vox: int = 1,
                        ) -> tuple[CandidateSet, Volume3D]:
    """Simulate detector output for a phantom scan.

    Every ground-truth lesion becomes a candidate scored above 0.95; n_false
    spurious blobs with scores below 0.95 are planted strictly outside
    `avoid` (and clear of all other candidates, so components stay distinct).
    Returns the candidate set and a probability map painting each candidate
    with its score.
    """
    if gt_lesions.modality is not Modality.MASK or avoid.modality is not Modality.MASK:
        raise ValueError("gt_lesions and avoid must be MASK volumes")
    if not gt_lesions.same_grid(avoid):
        raise ValueError("avoid mask must share the ground-truth grid")
    if n_false < 0:
        raise ValueError("n_false must be >= 0")
    rng = np.random.default_rng([seed, 3])
    comps: list[Component] = []
    for comp in connected_components(gt_lesions).components:
        comps.append(Component(id=len(comps) + 1, voxels=comp.voxels,
                               score=float(rng.uniform(*_TRUE_SCORE_RANGE))))

    occupied = gt_lesions.data > 0.5
    forbidden = avoid.data > 0.5
    dims = np.asarray(gt_lesions.dims)
    ball = _index_ball(false_radius_vox)
    margin = false_radius_vox + 1
    if n_false > 0 and (dims <= 2 * margin).any():
        raise PhantomGeometryError(f"volume {gt_lesions.dims} too small for "
                                   f"radius-{false_radius_vox} blobs")
    for _ in range(n_false):
        for _ in range(_MAX_ATTEMPTS):
            c = rng.integers(margin, dims - margin, size=3)
            vox = c + ball
            lo, hi = c - margin, c + margin + 1
            # the halo box keeps a >=1 voxel gap to everything already placed
            halo = occupied[lo[0]:hi[0], lo[1]:hi[1], lo[2]:hi[2]]
            if forbidden[tuple(vox.T)].any() or halo.any():
                continue
            occupied[tuple(vox.T)] = True
            comps.append(Component(id=len(comps) + 1, voxels=vox,
                                   score=float(rng.uniform(*_FALSE_SCORE_RANGE))))
            break
        else:
            raise PhantomGeometryError(
                f"no room for false candidate {len(comps) + 1} outside the "
                f"exclusion mask after {_MAX_ATTEMPTS} tries")

    cands = CandidateSet(components=comps, dims=gt_lesions.dims,
                         spacing=gt_lesions.spacing, offset=gt_lesions.offset)
    prob = np.zeros(gt_lesions.dims, dtype=np.float32)
    for comp in cands.components:
        prob[tuple(comp.voxels.T)] = comp.score
    return cands, Volume3D(prob, gt_lesions.spacing, gt_lesions.offset,
                           Modality.PROB)


def save_phantom_pair(cfg: PhantomConfig, out_dir, stem: str = "scan0000",
                      ) -> tuple[PairRecord, str]:
    """Write one phantom scan as MVOL files; returns its manifest record
    and the ground-truth mask path."""
    out = Path(out_dir)
    os.makedirs(out, exist_ok=True)
    ct, pet, gt = generate_phantom_pair(cfg)
    ct_path = out / f"{stem}_ct.mvol"
    pet_path = out / f"{stem}_pet.mvol"
    gt_path = out / f"{stem}_gt.mvol"
    save_volume(ct, ct_path)
    save_volume(pet, pet_path)
    save_volume(gt, gt_path)
    return PairRecord(str(ct_path), str(pet_path)), str(gt_path)


def write_phantom_dataset(cfg: PhantomConfig, n_scans: int, out_dir,
                          manifest_name: str = "pairs.csv") -> str:
    """Generate n_scans phantoms (seeds cfg.seed, cfg.seed+1, ...) plus a
    pair manifest; returns the manifest path.

    Manifest paths are relative to the output directory, so the dataset can
    be moved (and two same-seed datasets are byte-identical).
    """
    if n_scans <= 0:
        raise ValueError("n_scans must be positive")
    records = []
    for i in range(n_scans):
        stem = f"scan{i:04d}"
        save_phantom_pair(replace(cfg, seed=cfg.seed + i), out_dir, stem=stem)
        records.append(PairRecord(f"{stem}_ct.mvol", f"{stem}_pet.mvol"))
    manifest = Path(out_dir) / manifest_name
    write_pair_manifest(records, manifest)
    return str(manifest)
