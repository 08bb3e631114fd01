"""Lesion candidate handling: SUV gating of detections and FROC scoring.

A candidate set is the 26-connected component decomposition of a binary mask,
usually obtained by thresholding an external detector's probability map.  The
false-positive reduction step keeps only the components that respond in the
synthesized PET above the malignancy threshold; scoring counts per-lesion hits
(any voxel overlap) and false positives per scan.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .evaluate import to_suv
from .volume import MALIGNANCY_SUV, Modality, Volume3D

CONNECTIVITY_26 = np.ones((3, 3, 3), dtype=int)
DEFAULT_TH_GRID = (0.80, 0.85, 0.90, 0.95, 0.99)
OPERATING_POINT = 0.95


@dataclass
class Component:
    """One connected candidate: integer voxel coordinates plus an optional score."""

    id: int
    voxels: np.ndarray  # (k, 3) int
    score: float | None = None

    @property
    def size(self) -> int:
        return self.voxels.shape[0]


@dataclass
class CandidateSet:
    components: list[Component]
    dims: tuple[int, int, int]
    spacing: tuple[float, float, float]
    offset: tuple[float, float, float]

    def __post_init__(self) -> None:
        seen: set[tuple[int, int, int]] = set()
        bound = np.asarray(self.dims)
        for comp in self.components:
            v = comp.voxels
            if v.size and ((v < 0).any() or (v >= bound).any()):
                raise ValueError(f"component {comp.id} has voxels outside {self.dims}")
            for key in map(tuple, v):
                if key in seen:
                    raise ValueError(f"component {comp.id} overlaps another component")
                seen.add(key)

    def same_grid(self, other) -> bool:
        return (self.dims == tuple(other.dims)
                and np.allclose(self.spacing, other.spacing)
                and np.allclose(self.offset, other.offset))

    def label_volume(self) -> np.ndarray:
        """Dense int array with each voxel holding its component id (0 = none)."""
        lab = np.zeros(self.dims, dtype=np.int32)
        for comp in self.components:
            if comp.size:
                lab[tuple(comp.voxels.T)] = comp.id
        return lab


@dataclass
class DetectionScore:
    """Per-scan detection quality: hit fraction and false-positive count."""

    tpr: float  # NaN when there are no ground-truth lesions
    fpr: float
    hits: list = field(default_factory=list)  # per-lesion flags, id order


def connected_components(mask: Volume3D, scores: Volume3D | None = None) -> CandidateSet:
    """26-connectivity components with ids in first-encounter scan order.

    When ``scores`` is given (a probability map on the same grid), each
    component carries the maximum score over its voxels.
    """
    if mask.modality is not Modality.MASK:
        raise ValueError("connected_components expects a MASK volume")
    lab, n = ndimage.label(mask.data > 0.5, structure=CONNECTIVITY_26)
    comps = []
    if n:
        coords = np.argwhere(lab > 0)
        labels = lab[lab > 0]
        order = np.argsort(labels, kind="stable")
        coords, labels = coords[order], labels[order]
        bounds = np.searchsorted(labels, np.arange(1, n + 2))
        for i in range(1, n + 1):
            v = coords[bounds[i - 1]: bounds[i]]
            score = None
            if scores is not None:
                score = float(scores.data[tuple(v.T)].max())
            comps.append(Component(id=i, voxels=v, score=score))
    return CandidateSet(components=comps, dims=mask.dims,
                        spacing=mask.spacing, offset=mask.offset)


def suv_threshold_mask(syn_pet: Volume3D, th: float = MALIGNANCY_SUV) -> Volume3D:
    """Binary mask of voxels strictly above the SUV threshold."""
    data = (to_suv(syn_pet).data > th).astype(np.float32)
    return Volume3D(data, syn_pet.spacing, syn_pet.offset, Modality.MASK)


def reduce_false_positives(cands: CandidateSet, suv_mask: Volume3D,
                           min_overlap_voxels: int = 1) -> CandidateSet:
    """Keep components overlapping the SUV mask by at least the given voxel count.

    Components pass or drop whole; none are split, merged, or created.  An
    empty mask therefore removes every candidate.
    """
    if min_overlap_voxels < 1:
        raise ValueError("min_overlap_voxels must be >= 1")
    if cands.dims != suv_mask.dims or not cands.same_grid(suv_mask):
        raise ValueError("candidate grid does not match the SUV mask grid")
    m = suv_mask.data > 0.5
    kept = [c for c in cands.components
            if c.size and int(m[tuple(c.voxels.T)].sum()) >= min_overlap_voxels]
    return CandidateSet(components=kept, dims=cands.dims,
                        spacing=cands.spacing, offset=cands.offset)


def score_detection(cands: CandidateSet, gt_lesions: CandidateSet) -> DetectionScore:
    """Hit each lesion overlapped by any candidate; count non-overlapping candidates.

    With zero ground-truth lesions the hit fraction is undefined (NaN) while
    the false-positive count is still meaningful.
    """
    if not cands.same_grid(gt_lesions):
        raise ValueError("candidate and ground-truth grids differ")
    gt_lab = gt_lesions.label_volume()
    hit_ids: set[int] = set()
    fp = 0
    for comp in cands.components:
        overlapped = set(np.unique(gt_lab[tuple(comp.voxels.T)])) - {0} if comp.size else set()
        if overlapped:
            hit_ids |= overlapped
        else:
            fp += 1
    n_gt = len(gt_lesions.components)
    hits = [c.id in hit_ids for c in gt_lesions.components]
    tpr = float("nan") if n_gt == 0 else len(hit_ids) / n_gt
    return DetectionScore(tpr=tpr, fpr=float(fp), hits=hits)


@dataclass
class FrocPoint:
    threshold: float
    fpr: float
    tpr: float


def froc(prob_map: Volume3D, gt: CandidateSet, syn_pet: Volume3D,
         th_grid=DEFAULT_TH_GRID, use_fpr_layer: bool = False,
         min_overlap_voxels: int = 1, suv_th: float = MALIGNANCY_SUV,
         ) -> list[FrocPoint]:
    """Scan-level FROC: one (fpr, tpr) point per probability threshold.

    At each threshold the candidates are the components of
    ``prob_map > th``; with ``use_fpr_layer`` they are first gated by the
    synthesized PET's SUV threshold mask.
    """
    if prob_map.modality is not Modality.PROB:
        raise ValueError("froc expects a PROB volume")
    grid = list(th_grid)
    if not grid:
        raise ValueError("threshold grid is empty")
    if any(not 0 < t < 1 for t in grid) or any(a >= b for a, b in zip(grid, grid[1:])):
        raise ValueError("threshold grid must be strictly ascending within (0, 1)")
    suv_mask = suv_threshold_mask(syn_pet, suv_th) if use_fpr_layer else None
    points = []
    for th in grid:
        mask = Volume3D((prob_map.data > th).astype(np.float32), prob_map.spacing,
                        prob_map.offset, Modality.MASK)
        cands = connected_components(mask, scores=prob_map)
        if suv_mask is not None:
            cands = reduce_false_positives(cands, suv_mask, min_overlap_voxels)
        score = score_detection(cands, gt)
        points.append(FrocPoint(threshold=th, fpr=score.fpr, tpr=score.tpr))
    return points


def froc_csv(points: list[FrocPoint], path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write("threshold,mean_fpr,tpr\n")
        for p in points:
            f.write(f"{p.threshold!r},{p.fpr!r},{p.tpr!r}\n")


def froc_plot(points_raw: list[FrocPoint], points_reduced: list[FrocPoint], path) -> None:
    """FPR/TPR curves with and without the reduction layer, saved to file."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4.5))
    for pts, label, style in ((points_raw, "detector alone", "o--"),
                              (points_reduced, "with SUV gating", "s-")):
        ax.plot([p.fpr for p in pts], [p.tpr for p in pts], style, label=label)
    ax.set_xlabel("false positives per scan")
    ax.set_ylabel("true positive rate")
    ax.set_ylim(0.0, 1.05)
    ax.grid(True, alpha=0.3)
    ax.legend(loc="lower right")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
