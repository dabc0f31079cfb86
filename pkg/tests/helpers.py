"""Shared test utilities: independent oracles and gradient-check helpers.

The oracles here are deliberately naive (nested loops, flood fill,
all-pairs distances) and are written against the operation definitions,
not against the implementations they check.
"""

import numpy as np


# ---------------------------------------------------------------------------
# direct-loop convolution oracles

def conv2d_oracle(x, w, b, stride, pad):
    n, ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, co, oh, ow), dtype=x.dtype)
    for s in range(n):
        for c in range(co):
            for oy in range(oh):
                for ox in range(ow):
                    acc = float(b[c])
                    for q in range(ci):
                        for i in range(kh):
                            for j in range(kw):
                                iy = oy * stride + i - pad
                                ix = ox * stride + j - pad
                                if 0 <= iy < h and 0 <= ix < wd:
                                    acc += float(x[s, q, iy, ix]) * float(w[c, q, i, j])
                    out[s, c, oy, ox] = acc
    return out


def tconv2d_oracle(x, w, b):
    n, ci, h, wd = x.shape
    _, co, k, _ = w.shape
    out = np.zeros((n, co, k * h, k * wd), dtype=x.dtype)
    out += np.asarray(b)[None, :, None, None]
    for s in range(n):
        for q in range(ci):
            for c in range(co):
                for i in range(h):
                    for j in range(wd):
                        for u in range(k):
                            for v in range(k):
                                out[s, c, i * k + u, j * k + v] += \
                                    float(x[s, q, i, j]) * float(w[q, c, u, v])
    return out


# ---------------------------------------------------------------------------
# gradient checking

def finite_diff_grad(f, arr, eps=1e-3):
    """Central-difference gradient of scalar f() with respect to arr,
    perturbing arr in place."""
    grad = np.zeros_like(arr, dtype=np.float64)
    flat = arr.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        old = flat[i]
        flat[i] = old + eps
        lp = f()
        flat[i] = old - eps
        lm = f()
        flat[i] = old
        gflat[i] = (lp - lm) / (2.0 * eps)
    return grad


def rel_err(analytic, numeric, floor=1e-6):
    """Vector-norm relative error with an absolute floor so true-zero
    gradients (e.g. conv bias feeding batch norm) compare as zero."""
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    denom = max(np.linalg.norm(a), np.linalg.norm(n), floor)
    return float(np.linalg.norm(a - n) / denom)


# ---------------------------------------------------------------------------
# flood-fill connected-components oracle

_OFFSETS_6 = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)]
_OFFSETS_26 = [(dz, dy, dx)
               for dz in (-1, 0, 1) for dy in (-1, 0, 1) for dx in (-1, 0, 1)
               if (dz, dy, dx) != (0, 0, 0)]


def flood_fill_components(mask, connectivity):
    """Label components by iterative flood fill in (z,y,x) scan order."""
    offsets = _OFFSETS_6 if connectivity == 6 else _OFFSETS_26
    nz, ny, nx = mask.shape
    labels = np.zeros(mask.shape, dtype=np.int32)
    next_label = 0
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if not mask[z, y, x] or labels[z, y, x]:
                    continue
                next_label += 1
                stack = [(z, y, x)]
                labels[z, y, x] = next_label
                while stack:
                    cz, cy, cx = stack.pop()
                    for dz, dy, dx in offsets:
                        tz, ty, tx = cz + dz, cy + dy, cx + dx
                        if (0 <= tz < nz and 0 <= ty < ny and 0 <= tx < nx
                                and mask[tz, ty, tx] and not labels[tz, ty, tx]):
                            labels[tz, ty, tx] = next_label
                            stack.append((tz, ty, tx))
    sizes = np.bincount(labels.ravel(), minlength=next_label + 1)[1:]
    return labels, sizes


# ---------------------------------------------------------------------------
# all-pairs surface-distance oracle

def surface_voxels_oracle(mask):
    nz, ny, nx = mask.shape
    out = np.zeros(mask.shape, dtype=bool)
    for z in range(nz):
        for y in range(ny):
            for x in range(nx):
                if not mask[z, y, x]:
                    continue
                for dz, dy, dx in _OFFSETS_6:
                    tz, ty, tx = z + dz, y + dy, x + dx
                    if not (0 <= tz < nz and 0 <= ty < ny and 0 <= tx < nx) \
                            or not mask[tz, ty, tx]:
                        out[z, y, x] = True
                        break
    return out


def surface_dists_oracle(pred, ref, spacing):
    """(assd, mssd) by brute-force all-pairs nearest distances."""
    scale = np.array([spacing[2], spacing[1], spacing[0]], dtype=np.float64)
    p = np.argwhere(surface_voxels_oracle(pred)) * scale
    r = np.argwhere(surface_voxels_oracle(ref)) * scale
    d = np.sqrt(((p[:, None, :] - r[None, :, :]) ** 2).sum(axis=2))
    d_pr = d.min(axis=1)
    d_rp = d.min(axis=0)
    assd = (d_pr.sum() + d_rp.sum()) / (len(d_pr) + len(d_rp))
    return float(assd), float(max(d_pr.max(), d_rp.max()))


# ---------------------------------------------------------------------------
# misc

def init_bn_stats(net, rng, size=32):
    """One train-mode forward so eval mode has running statistics."""
    from lsnet import network
    x = rng.standard_normal(
        (1, net.spec.in_slices, size, size)).astype(np.float32)
    network.forward(net, x, "train")
    return net
