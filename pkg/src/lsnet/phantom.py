"""Synthetic phantoms: an ellipsoidal liver with spherical lesions inside,
Gaussian intensity noise around per-class HU means.  Desk-scale stand-in
for real CT data in training and acceptance tests.
"""

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .volume import Volume


@dataclass
class PhantomConfig:
    dims: tuple = (64, 64, 32)
    spacing: tuple = (1.5, 1.5, 3.0)
    # per-axis (lo, hi) liver semi-axis ranges in mm
    liver_semiaxes_mm: tuple = ((22.0, 32.0), (22.0, 32.0), (20.0, 30.0))
    center_jitter_mm: float = 5.0
    lesion_count: tuple = (1, 3)
    lesion_radius_mm: tuple = (5.0, 10.0)
    mean_background: float = -100.0
    mean_liver: float = 60.0
    mean_lesion: float = 0.0
    noise_sigma: float = 12.0

    def __post_init__(self):
        lo_semi = min(lo for lo, _hi in self.liver_semiaxes_mm)
        if self.lesion_radius_mm[1] >= lo_semi:
            raise ConfigError(
                f"max lesion radius {self.lesion_radius_mm[1]} mm does not fit "
                f"inside the smallest liver semi-axis {lo_semi} mm")
        if self.lesion_count[0] < 0 or self.lesion_count[0] > self.lesion_count[1]:
            raise ConfigError(f"bad lesion count range {self.lesion_count}")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")


def _voxel_centers_mm(dims, spacing):
    nx, ny, nz = dims
    sx, sy, sz = spacing
    x = (np.arange(nx) + 0.5) * sx
    y = (np.arange(ny) + 0.5) * sy
    z = (np.arange(nz) + 0.5) * sz
    return x, y, z


def generate_phantom(seed, cfg=None):
    """Return (intensity Volume, label Volume) for the given seed.

    Every lesion sphere lies fully inside the liver ellipsoid (rejection
    sampling against the shrunk ellipsoid that guarantees containment).
    """
    if cfg is None:
        cfg = PhantomConfig()
    rng = np.random.default_rng(seed)
    nx, ny, nz = cfg.dims
    sx, sy, sz = cfg.spacing
    extent = (nx * sx, ny * sy, nz * sz)

    semi = np.array([rng.uniform(lo, hi) for lo, hi in cfg.liver_semiaxes_mm])
    center = np.array([e / 2.0 for e in extent])
    center += rng.uniform(-cfg.center_jitter_mm, cfg.center_jitter_mm, size=3)

    xs, ys, zs = _voxel_centers_mm(cfg.dims, cfg.spacing)
    dx = (xs - center[0]) / semi[0]
    dy = (ys - center[1]) / semi[1]
    dz = (zs - center[2]) / semi[2]
    liver = (dz[:, None, None] ** 2 + dy[None, :, None] ** 2
             + dx[None, None, :] ** 2) <= 1.0

    labels = np.zeros((nz, ny, nx), dtype=np.uint8)
    labels[liver] = 1

    n_lesions = int(rng.integers(cfg.lesion_count[0], cfg.lesion_count[1] + 1))
    a_min = semi.min()
    for _ in range(n_lesions):
        r = rng.uniform(*cfg.lesion_radius_mm)
        # center inside the ellipsoid shrunk by factor (1 - r/a_min):
        # sufficient for the whole sphere to stay inside the liver
        shrink = 1.0 - r / a_min
        for _attempt in range(1000):
            p = center + rng.uniform(-1.0, 1.0, size=3) * semi * shrink
            q = (p - center) / (semi * shrink)
            if (q ** 2).sum() <= 1.0:
                break
        else:  # pragma: no cover - acceptance region is ~52% of the box
            raise ConfigError("could not place lesion inside liver")
        ddx = xs - p[0]
        ddy = ys - p[1]
        ddz = zs - p[2]
        sphere = (ddz[:, None, None] ** 2 + ddy[None, :, None] ** 2
                  + ddx[None, None, :] ** 2) <= r * r
        labels[sphere] = 2

    means = np.array([cfg.mean_background, cfg.mean_liver, cfg.mean_lesion],
                     dtype=np.float32)
    img = means[labels]
    if cfg.noise_sigma > 0:
        img = img + rng.normal(0.0, cfg.noise_sigma,
                               size=img.shape).astype(np.float32)
    return (Volume(img.astype(np.float32), cfg.spacing, "intensity"),
            Volume(labels, cfg.spacing, "labels"))
