"""Forward CPU rasterizer: project, depth-sort, alpha-composite per tile.

Color, semantic logits and expected depth share one front-to-back compositing
pass; the instance image keeps the id of the single largest-weight
contributor, since ids are categorical. Rendering is pure and deterministic:
depth ties break by primitive index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DimensionError
from .gaussians import UNASSIGNED_ID, rotations_to_matrices

PSNR_CAP = 99.0


@dataclass
class RenderOutput:
    color: np.ndarray  # [H, W, 3] in [0, 1]
    logits: np.ndarray  # [H, W, C] compositing-weighted semantic logits
    instance: np.ndarray  # [H, W] uint32, UNASSIGNED_ID where nothing lands
    alpha: np.ndarray  # [H, W] accumulated compositing weight
    depth: np.ndarray  # [H, W] expected depth, weighted (unnormalized)
    dominant_depth: np.ndarray  # [H, W] depth of the argmax-weight contributor

    def label_map(self, alpha_gate=0.5):
        """Per-pixel argmax class (1-based; 0 = background) of normalized logits."""
        covered = self.alpha > alpha_gate
        labels = np.zeros(self.alpha.shape, dtype=np.uint16)
        if covered.any():
            labels[covered] = np.argmax(self.logits[covered], axis=-1).astype(np.uint16) + 1
        return labels

    def instance_map(self, alpha_gate=0.5):
        """Argmax-weight contributor id gated by coverage (0 = background)."""
        out = np.zeros(self.alpha.shape, dtype=np.uint32)
        covered = (self.alpha > alpha_gate) & (self.instance != UNASSIGNED_ID)
        out[covered] = self.instance[covered]
        return out

    def depth_map(self, alpha_gate=0.5):
        """Alpha-normalized expected depth; 0 where coverage is too thin."""
        out = np.zeros_like(self.depth)
        covered = self.alpha > alpha_gate
        out[covered] = self.depth[covered] / self.alpha[covered]
        return out

    def surface_depth_map(self, alpha_gate=0.5):
        """Dominant-contributor depth, gated by coverage.

        Unlike the expected depth this never mixes depths across occlusion
        boundaries, so every reported value lies on (or inside) an actual
        surface.
        """
        out = np.zeros_like(self.dominant_depth)
        covered = self.alpha > alpha_gate
        out[covered] = self.dominant_depth[covered]
        return out


def project_gaussian(center, scale, quat, cam, dilation=0.3, near=0.01):
    """EWA projection of one gaussian: (mean2d, cov2d, depth) or None if culled."""
    mean2d, cov2d, depth, idx = project_batch(
        np.asarray(center, np.float32).reshape(1, 3),
        np.asarray(scale, np.float32).reshape(1, 3),
        np.asarray(quat, np.float32).reshape(1, 4),
        cam, dilation=dilation, near=near,
    )
    if len(idx) == 0:
        return None
    return mean2d[0], cov2d[0], float(depth[0])


def project_batch(centers, scales, quats, cam, dilation=0.3, near=0.01):
    """Vectorized EWA projection; drops primitives behind the near plane.

    Returns (mean2d [M, 2], cov2d [M, 2, 2], depth [M]) plus the index of the
    survivors into the input arrays as a fourth element.
    """
    n = len(centers)
    if n == 0:
        return np.zeros((0, 2)), np.zeros((0, 2, 2)), np.zeros(0), np.zeros(0, dtype=int)
    pc = cam.cam_from_world(centers)
    infront = pc[:, 2] > near
    idx = np.nonzero(infront)[0]
    pc = pc[idx]
    x, y, z = pc[:, 0], pc[:, 1], pc[:, 2]
    mean2d = np.stack([cam.fx * x / z + cam.cx, cam.fy * y / z + cam.cy], axis=1)

    rot = rotations_to_matrices(quats[idx])
    m = rot * np.asarray(scales[idx], dtype=np.float64)[:, None, :]
    cov_world = m @ np.swapaxes(m, 1, 2)
    w2c = cam.rotation().T
    cov_cam = w2c @ cov_world @ w2c.T

    jac = np.zeros((len(idx), 2, 3))
    jac[:, 0, 0] = cam.fx / z
    jac[:, 0, 2] = -cam.fx * x / (z * z)
    jac[:, 1, 1] = cam.fy / z
    jac[:, 1, 2] = -cam.fy * y / (z * z)
    cov2d = jac @ cov_cam @ np.swapaxes(jac, 1, 2)
    cov2d = 0.5 * (cov2d + np.swapaxes(cov2d, 1, 2))
    cov2d[:, 0, 0] += dilation
    cov2d[:, 1, 1] += dilation
    return mean2d, cov2d, z, idx


@dataclass
class PixelComposite:
    color: np.ndarray
    logits: np.ndarray
    depth: float
    alpha: float
    weights: list


def composite_pixel(contributions, num_classes=1, early_stop=1e-4):
    """Reference front-to-back compositing of presorted contributions.

    Each contribution is (alpha, color(3,), logits(C,), depth); w_i is
    alpha_i times the transmittance left by everything in front.
    """
    color = np.zeros(3)
    logits = np.zeros(num_classes)
    depth = 0.0
    transmittance = 1.0
    accum = 0.0
    weights = []
    for alpha, rgb, lg, d in contributions:
        if transmittance < early_stop:
            break
        w = float(alpha) * transmittance
        color += w * np.asarray(rgb, dtype=np.float64)
        logits += w * np.asarray(lg, dtype=np.float64)
        depth += w * float(d)
        accum += w
        weights.append(w)
        transmittance *= 1.0 - float(alpha)
    return PixelComposite(color=color, logits=logits, depth=depth, alpha=accum, weights=weights)


def render(scene, cam, size, tile=16, dilation=0.3, alpha_clamp=0.99,
           min_alpha=0.0039, early_stop=1e-4, near=0.01):
    """Rasterize the scene from ``cam`` into a ``size`` x ``size`` canvas."""
    h = w = int(size)
    store = scene.store
    num_classes = store.logits.shape[1]
    out = RenderOutput(
        color=np.zeros((h, w, 3), dtype=np.float32),
        logits=np.zeros((h, w, num_classes), dtype=np.float32),
        instance=np.full((h, w), UNASSIGNED_ID, dtype=np.uint32),
        alpha=np.zeros((h, w), dtype=np.float32),
        depth=np.zeros((h, w), dtype=np.float32),
        dominant_depth=np.zeros((h, w), dtype=np.float32),
    )
    if len(store) == 0:
        return out
    mean2d, cov2d, depth, idx = project_batch(
        store.centers, store.scales, store.quats, cam, dilation=dilation, near=near
    )
    if len(idx) == 0:
        return out

    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    inv = np.empty_like(cov2d)
    inv[:, 0, 0] = cov2d[:, 1, 1] / det
    inv[:, 1, 1] = cov2d[:, 0, 0] / det
    inv[:, 0, 1] = inv[:, 1, 0] = -cov2d[:, 0, 1] / det
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = 3.0 * np.sqrt(lam_max)

    opac = store.opacities[idx]
    rgb = store.colors[idx]
    logits = store.logits[idx]
    ids = store.ids[idx]

    tiles = int(math.ceil(h / tile))
    tx0 = np.clip(((mean2d[:, 0] - radius) // tile).astype(int), 0, tiles - 1)
    tx1 = np.clip(((mean2d[:, 0] + radius) // tile).astype(int), 0, tiles - 1)
    ty0 = np.clip(((mean2d[:, 1] - radius) // tile).astype(int), 0, tiles - 1)
    ty1 = np.clip(((mean2d[:, 1] + radius) // tile).astype(int), 0, tiles - 1)
    onscreen = (
        (mean2d[:, 0] + radius > 0) & (mean2d[:, 0] - radius < w)
        & (mean2d[:, 1] + radius > 0) & (mean2d[:, 1] - radius < h)
    )
    tile_lists = [[] for _ in range(tiles * tiles)]
    for g in np.nonzero(onscreen)[0]:
        for ty in range(ty0[g], ty1[g] + 1):
            base = ty * tiles
            for tx in range(tx0[g], tx1[g] + 1):
                tile_lists[base + tx].append(g)

    best_w = np.zeros((h, w), dtype=np.float32)
    for ty in range(tiles):
        for tx in range(tiles):
            members = tile_lists[ty * tiles + tx]
            if not members:
                continue
            members = np.asarray(members)
            # front-to-back; equal depths resolved by primitive index
            order = members[np.lexsort((idx[members], depth[members]))]
            y0, x0 = ty * tile, tx * tile
            ys = np.arange(y0, min(y0 + tile, h)) + 0.5
            xs = np.arange(x0, min(x0 + tile, w)) + 0.5
            px, py = np.meshgrid(xs, ys)
            trans = np.ones(px.shape, dtype=np.float32)
            t_color = np.zeros(px.shape + (3,), dtype=np.float32)
            t_logit = np.zeros(px.shape + (num_classes,), dtype=np.float32)
            t_alpha = np.zeros(px.shape, dtype=np.float32)
            t_depth = np.zeros(px.shape, dtype=np.float32)
            t_best = np.zeros(px.shape, dtype=np.float32)
            t_inst = np.full(px.shape, UNASSIGNED_ID, dtype=np.uint32)
            t_dom = np.zeros(px.shape, dtype=np.float32)
            for g in order:
                dx = px - mean2d[g, 0]
                dy = py - mean2d[g, 1]
                power = -0.5 * (inv[g, 0, 0] * dx * dx + 2.0 * inv[g, 0, 1] * dx * dy
                                + inv[g, 1, 1] * dy * dy)
                alpha = np.minimum(opac[g] * np.exp(power), alpha_clamp)
                alpha[alpha < min_alpha] = 0.0
                if not alpha.any():
                    continue
                wgt = alpha * trans
                t_color += wgt[..., None] * rgb[g]
                t_logit += wgt[..., None] * logits[g]
                t_depth += wgt * np.float32(depth[g])
                t_alpha += wgt
                claim = wgt > t_best
                t_best[claim] = wgt[claim]
                t_inst[claim] = ids[g]
                t_dom[claim] = np.float32(depth[g])
                trans = trans * (1.0 - alpha)
                if trans.max() < early_stop:
                    break
            ye, xe = y0 + px.shape[0], x0 + px.shape[1]
            out.color[y0:ye, x0:xe] = t_color
            out.logits[y0:ye, x0:xe] = t_logit
            out.alpha[y0:ye, x0:xe] = t_alpha
            out.depth[y0:ye, x0:xe] = t_depth
            out.instance[y0:ye, x0:xe] = t_inst
            out.dominant_depth[y0:ye, x0:xe] = t_dom
            best_w[y0:ye, x0:xe] = t_best
    np.clip(out.color, 0.0, 1.0, out=out.color)
    return out


def psnr(a, b):
    """Peak signal-to-noise ratio in dB for [0, 1] images; capped at 99."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionError(f"psnr shapes differ: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(10.0 * math.log10(1.0 / mse), PSNR_CAP)
