"""3-D connected-component labeling and region utilities.

Components are found with union-find over x-runs, linear in the number of
runs, so large grids stay cheap.  Labels are assigned in first-encounter
scan order (z, then y, then x), which makes the output deterministic.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DataError, UsageError
from .volume import Volume


@dataclass
class ComponentMap:
    """labels: int32 grid, 0 background, components 1..K; sizes[k-1] is the
    voxel count of component k."""

    labels: np.ndarray
    sizes: np.ndarray
    spacing: tuple

    @property
    def count(self):
        return len(self.sizes)


def _extract_runs(mask):
    """Maximal foreground runs along x as (row, x_start, x_end) arrays,
    row = z*ny + y, ordered by (row, x_start)."""
    nz, ny, nx = mask.shape
    flat = mask.reshape(nz * ny, nx)
    padded = np.zeros((nz * ny, nx + 2), dtype=np.int8)
    padded[:, 1:-1] = flat
    d = np.diff(padded, axis=1)
    srow, scol = np.nonzero(d == 1)
    erow, ecol = np.nonzero(d == -1)
    # starts/ends pair up in order within each row
    return srow, scol, ecol - 1


class _UnionFind:
    def __init__(self, n):
        self.parent = np.arange(n, dtype=np.int64)

    def find(self, i):
        p = self.parent
        while p[i] != i:
            p[i] = p[p[i]]
            i = p[i]
        return i

    def union(self, a, b):
        ra, rb = self.find(a), self.find(b)
        if ra != rb:
            if ra < rb:
                self.parent[rb] = ra
            else:
                self.parent[ra] = rb


def connected_components_3d(mask, connectivity=26):
    """Label the foreground of a binary volume.

    Two voxels share a component iff a foreground path joins them under
    the chosen connectivity (6: faces, 26: faces+edges+corners).
    """
    if connectivity not in (6, 26):
        raise UsageError(f"connectivity must be 6 or 26, got {connectivity}")
    if isinstance(mask, Volume):
        spacing = mask.spacing
        grid = mask.data != 0
    else:
        spacing = (1.0, 1.0, 1.0)
        grid = np.asarray(mask) != 0
    nz, ny, nx = grid.shape

    run_row, run_s, run_e = _extract_runs(grid)
    n_runs = len(run_row)
    labels = np.zeros(grid.shape, dtype=np.int32)
    if n_runs == 0:
        return ComponentMap(labels=labels, sizes=np.zeros(0, dtype=np.int64),
                            spacing=spacing)

    # run indices grouped by row for neighbor lookups
    row_starts = np.searchsorted(run_row, np.arange(nz * ny))
    row_ends = np.searchsorted(run_row, np.arange(nz * ny), side="right")
    uf = _UnionFind(n_runs)
    reach = 1 if connectivity == 26 else 0

    def link_rows(row_a, row_b):
        i = row_starts[row_a]
        ia_end = row_ends[row_a]
        j = row_starts[row_b]
        jb_end = row_ends[row_b]
        while i < ia_end and j < jb_end:
            if run_s[i] <= run_e[j] + reach and run_s[j] <= run_e[i] + reach:
                uf.union(i, j)
            # advance whichever run ends first
            if run_e[i] < run_e[j]:
                i += 1
            else:
                j += 1

    for z in range(nz):
        for y in range(ny):
            row = z * ny + y
            if row_starts[row] == row_ends[row]:
                continue
            if y > 0:
                link_rows(row, row - 1)  # (z, y-1)
            if z > 0:
                zrow = row - ny  # (z-1, y)
                link_rows(row, zrow)
                if connectivity == 26:
                    if y > 0:
                        link_rows(row, zrow - 1)
                    if y < ny - 1:
                        link_rows(row, zrow + 1)

    # first-encounter labeling in scan order
    root_label = {}
    run_label = np.empty(n_runs, dtype=np.int32)
    for i in range(n_runs):
        r = uf.find(i)
        if r not in root_label:
            root_label[r] = len(root_label) + 1
        run_label[i] = root_label[r]

    k = len(root_label)
    sizes = np.zeros(k, dtype=np.int64)
    flat_labels = labels.reshape(nz * ny, nx)
    for i in range(n_runs):
        flat_labels[run_row[i], run_s[i]:run_e[i] + 1] = run_label[i]
        sizes[run_label[i] - 1] += run_e[i] - run_s[i] + 1
    return ComponentMap(labels=labels, sizes=sizes, spacing=spacing)


def largest_component(cm):
    """Binary mask of the biggest component; ties keep the smallest label."""
    if cm.count == 0:
        raise DataError("no foreground components")
    best = int(np.argmax(cm.sizes)) + 1
    return cm.labels == best


@dataclass
class BoundingBox:
    """Inclusive voxel bounds per axis."""

    x0: int
    x1: int
    y0: int
    y1: int
    z0: int
    z1: int


def bounding_box(mask, margin_mm, spacing):
    """Tight box around the foreground, dilated by ceil(margin/spacing)
    voxels per axis and clamped to the grid."""
    grid = mask.data != 0 if isinstance(mask, Volume) else np.asarray(mask) != 0
    if not grid.any():
        raise DataError("bounding box of an empty mask")
    nz, ny, nx = grid.shape
    zs, ys, xs = np.nonzero(grid)
    mx = int(np.ceil(margin_mm / spacing[0]))
    my = int(np.ceil(margin_mm / spacing[1]))
    mz = int(np.ceil(margin_mm / spacing[2]))
    return BoundingBox(
        x0=max(0, int(xs.min()) - mx), x1=min(nx - 1, int(xs.max()) + mx),
        y0=max(0, int(ys.min()) - my), y1=min(ny - 1, int(ys.max()) + my),
        z0=max(0, int(zs.min()) - mz), z1=min(nz - 1, int(zs.max()) + mz))
