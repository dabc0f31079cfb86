"""Two-model coarse-to-fine inference.

Stage one segments the liver on a coarse resampled grid and keeps the
largest 3-D component.  Stage two re-processes the slices inside that
region at the original resolution with the 3-class model.  The merged
prediction is reduced to one liver component, lesions are intersected
with it, and low-confidence lesion components are removed.
"""

from dataclasses import dataclass

import numpy as np

from . import network, ops
from .errors import ConfigError, LsnetError, PipelineError, UsageError
from .morpho import bounding_box, connected_components_3d, largest_component
from .volume import Volume, clip_hu, extract_slab, resample_to_grid, resample_trilinear


@dataclass
class CascadeConfig:
    coarse_spacing: tuple = (1.0, 1.0, 2.5)
    window: int = 480
    window_overlap: int = 32
    roi_margin_mm: float = 10.0
    lesion_prob_threshold: float = 0.80
    connectivity: int = 26

    def __post_init__(self):
        if self.window % 16 or self.window < 16:
            raise ConfigError(f"window must be a positive multiple of 16, "
                              f"got {self.window}")
        if not 0 <= self.window_overlap < self.window:
            raise ConfigError(f"overlap must be in [0,window), got "
                              f"{self.window_overlap}")
        if not 0.0 < self.lesion_prob_threshold < 1.0:
            raise ConfigError(f"lesion probability threshold must be in (0,1), "
                              f"got {self.lesion_prob_threshold}")
        if self.connectivity not in (6, 26):
            raise ConfigError(f"connectivity must be 6 or 26, "
                              f"got {self.connectivity}")
        if len(self.coarse_spacing) != 3 or any(s <= 0 for s in self.coarse_spacing):
            raise ConfigError(f"bad coarse spacing {self.coarse_spacing}")


@dataclass
class ProbVolume:
    """Per-voxel class probabilities on a Volume grid, channel-first
    (num_classes, nz, ny, nx)."""

    probs: np.ndarray
    spacing: tuple

    @property
    def num_classes(self):
        return self.probs.shape[0]

    def argmax_labels(self):
        return self.probs.argmax(axis=0).astype(np.uint8)


def _tile_positions(dim, window, overlap):
    if dim <= window:
        return [0]
    step = window - overlap
    pos = list(range(0, dim - window + 1, step))
    if pos[-1] != dim - window:
        pos.append(dim - window)
    return pos


def sliding_window_slice_inference(net, vol, z, window=480, overlap=32):
    """Class probabilities for slice z of a volume.

    The slice is covered with window x window tiles (a single tile when it
    fits; smaller slices are edge-padded up to the network's stride
    multiple).  Overlapping pixels average the per-tile softmax outputs
    with uniform weights and are renormalized to sum to 1.
    """
    div = net.spec.stride_total
    if window % div:
        raise UsageError(f"window {window} not divisible by network stride {div}")
    slab = extract_slab(vol, z, net.spec.in_slices).slices
    h, w = slab.shape[2], slab.shape[3]

    def ceil_div(a):
        return -(-a // div) * div

    tile_h = window if h >= window else ceil_div(h)
    tile_w = window if w >= window else ceil_div(w)
    pad_h = max(0, tile_h - h)
    pad_w = max(0, tile_w - w)
    if pad_h or pad_w:
        slab = np.pad(slab, ((0, 0), (0, 0), (0, pad_h), (0, pad_w)), mode="edge")
    hp, wp = slab.shape[2], slab.shape[3]

    nc = net.spec.num_classes
    acc = np.zeros((nc, hp, wp), dtype=np.float32)
    weight = np.zeros((hp, wp), dtype=np.float32)
    for py in _tile_positions(hp, tile_h, overlap):
        for px in _tile_positions(wp, tile_w, overlap):
            tile = np.ascontiguousarray(slab[:, :, py:py + tile_h, px:px + tile_w])
            logits, _ = network.forward(net, tile, "eval")
            probs = ops.softmax_channels(logits)[0]
            acc[:, py:py + tile_h, px:px + tile_w] += probs
            weight[py:py + tile_h, px:px + tile_w] += 1.0
    acc /= weight[None]
    acc = acc[:, :h, :w]
    acc /= acc.sum(axis=0, keepdims=True)
    return acc


def segment_liver_coarse(net_a, vol, cfg):
    """Initial liver mask on the coarse grid: per-slice 2-class inference,
    argmax, then the largest 3-D connected component."""
    if net_a.spec.num_classes != 2:
        raise UsageError("coarse liver model must have 2 classes")
    if vol.kind != "intensity":
        raise UsageError("coarse segmentation expects an intensity volume")
    coarse = resample_trilinear(vol, cfg.coarse_spacing)
    nz = coarse.dims[2]
    mask = np.zeros(coarse.data.shape, dtype=bool)
    for z in range(nz):
        probs = sliding_window_slice_inference(
            net_a, coarse, z, cfg.window, cfg.window_overlap)
        mask[z] = probs.argmax(axis=0) == 1
    cm = connected_components_3d(mask, cfg.connectivity)
    if cm.count == 0:
        raise PipelineError("liver not found", stage="coarse-liver")
    keep = largest_component(cm)
    return Volume(keep.astype(np.uint8), coarse.spacing, "labels")


def refine_in_roi(net_b, vol_original, initial_liver_coarse, cfg):
    """3-class probabilities on the original grid inside the liver ROI.

    The coarse mask is mapped to the original grid by nearest neighbor and
    dilated by the configured margin; every slice in the box z-range is
    re-processed over the box's in-plane extent.  Outside the ROI the
    background probability is 1.
    """
    if net_b.spec.num_classes != 3:
        raise UsageError("refinement model must have 3 classes")
    mask_orig = resample_to_grid(initial_liver_coarse, vol_original.dims,
                                 vol_original.spacing)
    if not mask_orig.data.any():
        raise PipelineError("initial liver mask is empty on the original grid",
                            stage="refine")
    box = bounding_box(mask_orig, cfg.roi_margin_mm, vol_original.spacing)

    sub = Volume(vol_original.data[:, box.y0:box.y1 + 1, box.x0:box.x1 + 1],
                 vol_original.spacing, vol_original.kind)
    nz, ny, nx = vol_original.data.shape
    probs = np.zeros((3, nz, ny, nx), dtype=np.float32)
    probs[0] = 1.0
    for z in range(box.z0, box.z1 + 1):
        p = sliding_window_slice_inference(net_b, sub, z, cfg.window,
                                           cfg.window_overlap)
        probs[:, z, box.y0:box.y1 + 1, box.x0:box.x1 + 1] = p
    return ProbVolume(probs=probs, spacing=vol_original.spacing)


def suppress_low_confidence_lesions(lesion_mask, prob, threshold,
                                    connectivity=26):
    """Drop every lesion component whose maximum lesion-class probability
    is below the threshold (strictly less; components at the threshold
    stay)."""
    if not 0.0 < threshold < 1.0:
        raise UsageError(f"threshold must be in (0,1), got {threshold}")
    was_volume = isinstance(lesion_mask, Volume)
    grid = lesion_mask.data != 0 if was_volume else np.asarray(lesion_mask) != 0
    cm = connected_components_3d(grid, connectivity)
    if cm.count == 0:
        out = grid
    else:
        peak = np.zeros(cm.count + 1, dtype=np.float32)
        np.maximum.at(peak, cm.labels.ravel(), prob.probs[2].ravel())
        lut = np.zeros(cm.count + 1, dtype=bool)
        lut[1:] = peak[1:] >= threshold
        out = lut[cm.labels]
    if was_volume:
        return Volume(out.astype(np.uint8), lesion_mask.spacing, "labels")
    return out


def merge_and_finalize(prob, cfg):
    """Argmax labels -> largest liver+lesion component = final liver;
    lesions are the argmax-lesion voxels inside it, minus low-confidence
    components."""
    labels = prob.argmax_labels()
    union = labels >= 1
    cm = connected_components_3d(union, cfg.connectivity)
    if cm.count == 0:
        raise PipelineError("no liver predicted", stage="finalize")
    final_liver = largest_component(cm)
    lesion = np.logical_and(labels == 2, final_liver)
    lesion = suppress_low_confidence_lesions(
        lesion, prob, cfg.lesion_prob_threshold, cfg.connectivity)
    return (Volume(final_liver.astype(np.uint8), prob.spacing, "labels"),
            Volume(lesion.astype(np.uint8), prob.spacing, "labels"))


def run_cascade(net_a, net_b, raw_volume, cfg=None):
    """Full pipeline on a raw intensity volume.

    Returns (liver mask, lesion mask, probability volume), all on the
    original grid.  Stage failures propagate as PipelineError tagged with
    the stage name.
    """
    if cfg is None:
        cfg = CascadeConfig()
    if raw_volume.kind != "intensity":
        raise UsageError("cascade input must be an intensity volume")

    def stage(name, fn, *args):
        try:
            return fn(*args)
        except PipelineError:
            raise
        except LsnetError as e:
            raise PipelineError(str(e), stage=name) from e

    clipped = stage("preprocess", clip_hu, raw_volume)
    coarse_liver = stage("coarse-liver", segment_liver_coarse,
                         net_a, clipped, cfg)
    prob = stage("refine", refine_in_roi, net_b, clipped, coarse_liver, cfg)
    liver, lesion = stage("finalize", merge_and_finalize, prob, cfg)
    return liver, lesion, prob
