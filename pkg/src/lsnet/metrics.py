"""Segmentation evaluation: Dice, volume overlap error, relative volume
difference, and average/maximum symmetric surface distance in mm.

Surfaces are foreground voxels with at least one background 6-neighbor
(the volume border counts as background); distances are Euclidean between
voxel centers scaled by the grid spacing.
"""

import csv
from dataclasses import dataclass, fields

import numpy as np
from scipy.spatial import cKDTree

from .errors import DataError, UsageError
from .volume import Volume


@dataclass
class CaseReport:
    dice: float
    voe: float
    rvd: float
    assd_mm: float
    mssd_mm: float


def _as_bool(mask):
    if isinstance(mask, Volume):
        return mask.data != 0
    return np.asarray(mask) != 0


def _check_same_grid(pred, ref):
    p, r = _as_bool(pred), _as_bool(ref)
    if p.shape != r.shape:
        raise UsageError(f"mask grids differ: {p.shape} vs {r.shape}")
    return p, r


def dice(pred, ref):
    """2|P&R| / (|P|+|R|); 1.0 when both masks are empty."""
    p, r = _check_same_grid(pred, ref)
    denom = int(p.sum()) + int(r.sum())
    if denom == 0:
        return 1.0
    return 2.0 * int(np.logical_and(p, r).sum()) / denom


def voe(pred, ref):
    """Volume overlap error, 1 - Jaccard; 0.0 when both masks are empty."""
    p, r = _check_same_grid(pred, ref)
    union = int(np.logical_or(p, r).sum())
    if union == 0:
        return 0.0
    return 1.0 - int(np.logical_and(p, r).sum()) / union


def rvd(pred, ref):
    """Signed relative volume difference (|P|-|R|)/|R|."""
    p, r = _check_same_grid(pred, ref)
    nr = int(r.sum())
    if nr == 0:
        raise DataError("relative volume difference undefined for empty reference")
    return (int(p.sum()) - nr) / nr


def surface_voxels(mask):
    """Boolean mask of foreground voxels with a background 6-neighbor."""
    m = _as_bool(mask)
    padded = np.pad(m, 1)
    interior = (padded[2:, 1:-1, 1:-1] & padded[:-2, 1:-1, 1:-1]
                & padded[1:-1, 2:, 1:-1] & padded[1:-1, :-2, 1:-1]
                & padded[1:-1, 1:-1, 2:] & padded[1:-1, 1:-1, :-2])
    return m & ~interior


def _surface_points_mm(mask, spacing):
    surf = surface_voxels(mask)
    if not surf.any():
        raise DataError("undefined surface distance: empty mask")
    zyx = np.argwhere(surf).astype(np.float64)
    scale = np.array([spacing[2], spacing[1], spacing[0]], dtype=np.float64)
    return zyx * scale


def _directed_surface_dists(pred, ref, spacing):
    p = _surface_points_mm(pred, spacing)
    r = _surface_points_mm(ref, spacing)
    d_pr = cKDTree(r).query(p)[0]
    d_rp = cKDTree(p).query(r)[0]
    return d_pr, d_rp


def assd(pred, ref, spacing):
    """Average symmetric surface distance in mm."""
    d_pr, d_rp = _directed_surface_dists(pred, ref, spacing)
    return float((d_pr.sum() + d_rp.sum()) / (len(d_pr) + len(d_rp)))


def mssd(pred, ref, spacing):
    """Maximum symmetric surface distance (surface Hausdorff) in mm."""
    d_pr, d_rp = _directed_surface_dists(pred, ref, spacing)
    return float(max(d_pr.max(), d_rp.max()))


def evaluate_case(pred, ref, spacing):
    p, r = _check_same_grid(pred, ref)
    d_pr, d_rp = _directed_surface_dists(p, r, spacing)
    return CaseReport(
        dice=dice(p, r),
        voe=voe(p, r),
        rvd=rvd(p, r),
        assd_mm=float((d_pr.sum() + d_rp.sum()) / (len(d_pr) + len(d_rp))),
        mssd_mm=float(max(d_pr.max(), d_rp.max())))


def aggregate(reports):
    """Arithmetic mean of each metric over the given case reports."""
    if not reports:
        raise DataError("aggregate needs at least one report")
    cols = [f.name for f in fields(CaseReport)]
    return CaseReport(**{
        c: float(np.mean([getattr(rep, c) for rep in reports])) for c in cols})


CSV_HEADER = ["case", "dice", "voe", "rvd", "assd_mm", "mssd_mm"]


def write_report_csv(path, names_and_reports):
    """Per-case rows plus a final 'mean' row, 6 significant digits."""
    reports = [rep for _name, rep in names_and_reports]
    mean = aggregate(reports)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(CSV_HEADER)
        for name, rep in names_and_reports:
            w.writerow([name] + [f"{getattr(rep, c):.6g}" for c in CSV_HEADER[1:]])
        w.writerow(["mean"] + [f"{getattr(mean, c):.6g}" for c in CSV_HEADER[1:]])


def read_report_csv(path):
    """Inverse of write_report_csv; returns list of (name, CaseReport)."""
    with open(path, newline="") as f:
        rows = list(csv.reader(f))
    if not rows or rows[0] != CSV_HEADER:
        raise DataError(f"unexpected report header {rows[0] if rows else None}")
    out = []
    for row in rows[1:]:
        if len(row) != len(CSV_HEADER):
            raise DataError(f"bad report row {row}")
        out.append((row[0], CaseReport(*(float(v) for v in row[1:]))))
    return out
