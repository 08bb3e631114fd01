"""Reconstruction quality metrics split by uptake region.

MAE and PSNR are always computed in SUV units, so the PSNR peak is the SUV
window maximum (20) regardless of whether the inputs arrive normalized.  Each
scan is scored three ways: over the high-uptake region (reference SUV
strictly above 2.5), over its complement, and as the unweighted mean of the
two.  A scan without any high-uptake voxel reports those metrics as undefined
(NaN) and is counted, not averaged.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from .volume import MALIGNANCY_SUV, SUV_WINDOW, Modality, Volume3D, denormalize

UNDEFINED = float("nan")
PSNR_PEAK = SUV_WINDOW.hi


def is_defined(x: float) -> bool:
    return not math.isnan(x)


def to_suv(v: Volume3D) -> Volume3D:
    """Return the volume in SUV units, denormalizing if needed."""
    if v.modality is Modality.SUV:
        return v
    if v.modality is Modality.NORMALIZED:
        return denormalize(v, SUV_WINDOW)
    raise ValueError(f"cannot interpret {v.modality.value} volume as SUV")


def _suv_pair(syn: Volume3D, ref: Volume3D, mask) -> tuple[np.ndarray, np.ndarray]:
    if not syn.same_grid(ref):
        raise ValueError("synthesized and reference volumes must share a grid")
    a = to_suv(syn).data.astype(np.float64)
    b = to_suv(ref).data.astype(np.float64)
    if mask is not None:
        m = mask.data.astype(bool) if isinstance(mask, Volume3D) else np.asarray(mask, bool)
        if m.shape != a.shape:
            raise ValueError("mask shape does not match the volumes")
        a, b = a[m], b[m]
    return a.reshape(-1), b.reshape(-1)


def mae(syn: Volume3D, ref: Volume3D, mask=None) -> float:
    """Mean absolute error in SUV units; NaN when the mask is empty."""
    a, b = _suv_pair(syn, ref, mask)
    if a.size == 0:
        return UNDEFINED
    return float(np.mean(np.abs(a - b)))


def psnr(syn: Volume3D, ref: Volume3D, mask=None) -> float:
    """10 log10(peak^2 / MSE) dB with peak 20 SUV; +inf for an exact match."""
    a, b = _suv_pair(syn, ref, mask)
    if a.size == 0:
        return UNDEFINED
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * math.log10(PSNR_PEAK ** 2 / mse)


def suv_region_masks(ref_pet: Volume3D,
                     threshold: float = MALIGNANCY_SUV) -> tuple[Volume3D, Volume3D]:
    """(high, low) masks splitting the volume at the SUV threshold, strict >."""
    data = to_suv(ref_pet).data
    high = (data > threshold).astype(np.float32)
    low = 1.0 - high
    mk = lambda d: Volume3D(d, ref_pet.spacing, ref_pet.offset, Modality.MASK)
    return mk(high), mk(low)


@dataclass
class PairMetrics:
    """Six per-scan scores; NaN marks metrics over an empty high region."""

    mae_high: float
    psnr_high: float
    mae_low: float
    psnr_low: float
    mae_avg: float
    psnr_avg: float

    @staticmethod
    def field_names() -> list[str]:
        return [f.name for f in fields(PairMetrics)]

    def values(self) -> list[float]:
        return [getattr(self, n) for n in self.field_names()]


def evaluate_pair(syn: Volume3D, ref: Volume3D,
                  slice_range: tuple[int, int] | None = None,
                  threshold: float = MALIGNANCY_SUV) -> PairMetrics:
    """Region-split MAE/PSNR for one synthesized/reference pair.

    ``slice_range`` restricts the evaluation to an inclusive axial window,
    e.g. the annotated liver extent.
    """
    if not syn.same_grid(ref):
        raise ValueError("synthesized and reference volumes must share a grid")
    if slice_range is not None:
        lo, hi = slice_range
        nz = syn.dims[2]
        if not (0 <= lo <= hi < nz):
            raise ValueError(f"slice range {slice_range} outside [0, {nz - 1}]")
        cut = lambda v: Volume3D(v.data[:, :, lo: hi + 1], v.spacing, v.offset, v.modality)
        syn, ref = cut(syn), cut(ref)
    high, low = suv_region_masks(ref, threshold)
    m_high = mae(syn, ref, high)
    p_high = psnr(syn, ref, high)
    m_low = mae(syn, ref, low)
    p_low = psnr(syn, ref, low)
    return PairMetrics(
        mae_high=m_high, psnr_high=p_high, mae_low=m_low, psnr_low=p_low,
        mae_avg=(m_high + m_low) / 2.0, psnr_avg=(p_high + p_low) / 2.0,
    )


@dataclass
class ReconReport:
    """Aggregate of per-scan metrics: mean and population std per column.

    Scans whose high region is empty are excluded from the high and average
    columns; ``n_missing_high`` says how many.
    """

    label: str
    records: list[PairMetrics]
    mean: PairMetrics
    std: PairMetrics
    n_missing_high: int


def aggregate_report(records: list[PairMetrics], label: str = "") -> ReconReport:
    if not records:
        raise ValueError("cannot aggregate an empty record list")
    means, stds = [], []
    missing = sum(1 for r in records if not is_defined(r.mae_high))
    for name in PairMetrics.field_names():
        vals = np.array([getattr(r, name) for r in records], dtype=np.float64)
        vals = vals[~np.isnan(vals)]
        if vals.size == 0:
            means.append(UNDEFINED)
            stds.append(UNDEFINED)
        else:
            # infinite PSNR rows leave the spread undefined, not an error
            with np.errstate(invalid="ignore"):
                means.append(float(vals.mean()))
                stds.append(float(vals.std()))  # population std
    return ReconReport(label=label, records=records,
                       mean=PairMetrics(*means), std=PairMetrics(*stds),
                       n_missing_high=missing)


def _fmt(x: float) -> str:
    if not is_defined(x):
        return "undefined"
    if math.isinf(x):
        return "inf"
    return f"{x:.4f}"


def report_csv(report: ReconReport, path) -> None:
    """One row per scan plus mean/std aggregate rows."""
    names = PairMetrics.field_names()
    with open(path, "w", encoding="utf-8") as f:
        f.write("row,label," + ",".join(names) + "\n")
        for i, r in enumerate(report.records):
            f.write(f"scan{i},{report.label}," + ",".join(_fmt(v) for v in r.values()) + "\n")
        f.write(f"mean,{report.label}," + ",".join(_fmt(v) for v in report.mean.values()) + "\n")
        f.write(f"std,{report.label}," + ",".join(_fmt(v) for v in report.std.values()) + "\n")
        f.write(f"n_missing_high,{report.label},{report.n_missing_high}\n")


def report_table(reports: list[ReconReport]) -> str:
    """Text table with high / low / average column groups, one row per method."""
    header = (f"{'method':<24} {'MAE high':>12} {'PSNR high':>12} {'MAE low':>12} "
              f"{'PSNR low':>12} {'MAE avg':>12} {'PSNR avg':>12}")
    lines = [header, "-" * len(header)]
    for rep in reports:
        cells = []
        for name in PairMetrics.field_names():
            m, s = getattr(rep.mean, name), getattr(rep.std, name)
            cells.append(f"{_fmt(m)}±{_fmt(s)}" if is_defined(m) else "undefined")
        label = rep.label or "?"
        lines.append(f"{label:<24} " + " ".join(f"{c:>12}" for c in cells))
        if rep.n_missing_high:
            lines.append(f"  ({rep.n_missing_high} scan(s) without high-SUV voxels "
                         f"excluded from high/avg columns)")
    return "\n".join(lines)
