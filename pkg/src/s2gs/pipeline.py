"""Streaming driver, offline-global baseline, evaluation, benchmark harness.

One `SceneState` carries every piece of cross-frame information: the
accumulated gaussian scene, the encoder KV cache, and the instance memory
bank. `stream_step` consumes exactly one new FrameBundle and never looks
back; the offline baseline re-encodes the full retained history each step
and exists to measure the cost asymmetry, while producing the same outputs.
"""

from __future__ import annotations

import resource
import time
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import encoder as enc_mod
from .encoder import CausalEncoder
from .errors import CausalityError
from .gaussians import GaussianBatch, GaussianScene, back_project, construct_gaussians
from .memory import MemoryBank, tracking_metrics
from .renderer import psnr, render
from .semantic import FeaturePyramid, QueryDecoder
from .world import LOGIT_GAIN


@dataclass
class Models:
    """Everything learnable (or frozen-learned) the driver needs."""

    encoder: CausalEncoder
    pyramid: FeaturePyramid
    decoder: QueryDecoder

    @classmethod
    def fresh(cls, cfg, seed=0):
        return cls(
            encoder=CausalEncoder(cfg, seed=seed),
            pyramid=FeaturePyramid(cfg.image_size, cfg.feature_dim, seed=cfg.feature_seed),
            decoder=QueryDecoder(cfg, seed=seed + 1),
        )


@dataclass
class SceneState:
    """The only cross-frame carrier: scene + cache + memory bank + counter."""

    scene: GaussianScene
    cache: object
    bank: MemoryBank
    t: int = -1

    def nbytes(self):
        return self.scene.nbytes() + self.cache.nbytes() + self.bank.nbytes()


@dataclass
class StepOutputs:
    sem_map: np.ndarray  # [H, W] predicted semantic labels (0 = background)
    inst_map: np.ndarray  # [H, W] predicted track-id map (0 = background)
    track_ids: np.ndarray  # ids aligned with kept detections
    det_queries: np.ndarray  # indices of kept detections
    features: np.ndarray  # [tokens, dim] encoder features for this frame
    depth: np.ndarray  # geometry depth actually used
    render: object = None


def new_state(cfg, models):
    return SceneState(
        scene=GaussianScene(cfg.num_classes, budget=cfg.scene_budget),
        cache=models.encoder.new_cache(),
        bank=MemoryBank(cfg.ema_alpha, cfg.sim_threshold, cfg.max_age),
        t=-1,
    )


def _detections(cfg, qs):
    """Filter decoded queries by class confidence and mask area.

    Near-duplicate queries firing on one object are suppressed: scanning in
    descending confidence, a detection is dropped when most of its mask is
    already claimed by a kept one.
    """
    probs = qs.class_probs_np()
    conf = probs[:, : cfg.num_classes].max(axis=1)
    cls = probs[:, : cfg.num_classes].argmax(axis=1) + 1
    masks = qs.masks_np() > 0.5
    areas = masks.sum(axis=(1, 2))
    gated = np.nonzero((conf >= cfg.conf_threshold) & (areas >= cfg.min_area))[0]
    order = gated[np.lexsort((gated, -conf[gated]))]
    kept = []
    for q in order:
        dominated = any(
            (masks[q] & masks[k]).sum() / max(areas[q], 1) > cfg.detection_overlap
            for k in kept
        )
        if not dominated:
            kept.append(int(q))
    keep = np.array(sorted(kept), dtype=int)
    return keep, masks, cls, conf


def _paint_maps(cfg, keep, masks, cls, conf, ids):
    """Fuse per-query masks into semantic / instance id maps (high conf wins)."""
    size = cfg.image_size
    sem_map = np.zeros((size, size), dtype=np.uint16)
    inst_map = np.zeros((size, size), dtype=np.uint32)
    order = sorted(range(len(keep)), key=lambda i: conf[keep[i]])
    for i in order:
        q = keep[i]
        sem_map[masks[q]] = cls[q]
        inst_map[masks[q]] = ids[i]
    return sem_map, inst_map


def _semantic_image(cfg, keep, qs):
    """Per-pixel class scores lifted from mask-weighted query class probs."""
    size = cfg.image_size
    probs = qs.class_probs_np()
    soft = qs.masks_np()
    image = np.zeros((size, size, cfg.num_classes), dtype=np.float32)
    for q in keep:
        image += soft[q][..., None] * probs[q, : cfg.num_classes]
    return image


def stream_step(cfg, models, state, bundle, mode="oracle", gt_stamp=False,
                render_size=0):
    """Advance the persistent state by exactly one frame.

    Geometry comes either from the frame heads (student) or the bundle's
    teacher oracle (oracle). Semantics always come from the decoupled 2D
    stream; new gaussians are stamped with per-pixel class scores and track
    ids, then appended to the scene.
    """
    if bundle.index != state.t + 1:
        raise CausalityError(f"bundle {bundle.index} does not follow frame {state.t}")

    features, state.cache = models.encoder.encode_step(bundle.rgb, state.cache)

    if mode == "oracle":
        depth = bundle.depth
        cam = bundle.cam
        valid = bundle.valid
        heads = None
    elif mode == "student":
        with ad.no_grad():
            heads = models.encoder.heads_forward(features)
        depth = heads.depth.data
        cam = heads.to_camera()
        valid = np.ones_like(depth, dtype=bool)
    else:
        raise CausalityError(f"unknown mode {mode!r}")

    feats2d = models.pyramid.extract(bundle.rgb)
    with ad.no_grad():
        qs = models.decoder.decode(feats2d)
    keep, masks, cls, conf = _detections(cfg, qs)
    ids = state.bank.step(qs.embeds_np()[keep], cls[keep], bundle.index)
    sem_map, inst_map = _paint_maps(cfg, keep, masks, cls, conf, ids)

    if gt_stamp:
        stamp_sem = np.eye(cfg.num_classes, dtype=np.float32)[
            np.clip(bundle.semantics.astype(int) - 1, 0, cfg.num_classes - 1)
        ] * LOGIT_GAIN
        stamp_sem[bundle.semantics == 0] = 0.0
        stamp_ids = bundle.instances.astype(np.uint32)
    else:
        stamp_sem = _semantic_image(cfg, keep, qs)
        stamp_ids = inst_map

    batch = _geometry_batch(cfg, bundle, depth, cam, valid, stamp_sem, stamp_ids,
                            mode, heads)
    state.scene.accumulate(batch, bundle.index)
    state.t = bundle.index

    out = StepOutputs(sem_map=sem_map, inst_map=inst_map, track_ids=ids,
                      det_queries=keep, features=features, depth=depth)
    if render_size:
        out.render = render(state.scene, cam, render_size, tile=cfg.tile_size,
                            dilation=cfg.cov_dilation, alpha_clamp=cfg.alpha_clamp,
                            min_alpha=cfg.min_splat_alpha, near=cfg.near_plane)
    return state, out


def _geometry_batch(cfg, bundle, depth, cam, valid, stamp_sem, stamp_ids, mode, heads):
    """Per-pixel gaussians for this frame at the configured stride."""
    stride = cfg.pixel_stride
    safe_depth = np.where(depth > 0, depth, 1.0)
    centers = back_project(safe_depth, cam)
    off = stride // 2
    sel = np.s_[off::stride, off::stride]
    if mode == "oracle":
        c = centers[sel].reshape(-1, 3)
        d = safe_depth[sel].reshape(-1)
        keep_px = valid[sel].reshape(-1)
        foot = cfg.oracle_footprint_px * stride
        scale = (d * (foot / cam.fx))[:, None].repeat(3, axis=1)
        n = len(c)
        quats = np.tile(np.array([1, 0, 0, 0], np.float32), (n, 1))
        opac = np.full(n, cfg.oracle_opacity, dtype=np.float32)
        colors = bundle.rgb[sel].reshape(-1, 3)
        logits = stamp_sem[sel].reshape(n, -1)
        ids = stamp_ids[sel].reshape(-1)
        batch = GaussianBatch(c, scale, quats, opac, colors, logits, ids,
                              np.full(n, bundle.index, np.uint32))
        return batch.select(keep_px)
    attrs = heads.attrs.data
    batch = construct_gaussians(centers, attrs, stamp_sem, stamp_ids, stride=stride,
                                birth_frame=bundle.index)
    keep_px = valid[sel].reshape(-1)
    return batch.select(keep_px)


class OfflineBaseline:
    """Re-encodes the whole retained history at every step (no caches).

    Functionally equivalent to streaming; exists to measure cost growth.
    """

    def __init__(self, cfg, models):
        self.cfg = cfg
        self.models = models
        self.retained = []
        self.scene = GaussianScene(cfg.num_classes, budget=cfg.scene_budget)
        self.bank = MemoryBank(cfg.ema_alpha, cfg.sim_threshold, cfg.max_age)
        self.t = -1

    def retained_nbytes(self):
        return sum(b.nbytes() for b in self.retained)

    def step(self, bundle, mode="oracle", gt_stamp=False):
        if bundle.index != self.t + 1:
            raise CausalityError(f"bundle {bundle.index} does not follow frame {self.t}")
        self.retained.append(bundle)
        frames = np.stack([b.rgb for b in self.retained])
        with ad.no_grad():
            feats_all = self.models.encoder.forward_batched(frames)
        features = feats_all.data[-1]

        cfg = self.cfg
        if mode == "oracle":
            depth, cam, valid = bundle.depth, bundle.cam, bundle.valid
            heads = None
        else:
            with ad.no_grad():
                heads = self.models.encoder.heads_forward(feats_all[-1])
            depth = heads.depth.data
            cam = heads.to_camera()
            valid = np.ones_like(depth, dtype=bool)

        feats2d = self.models.pyramid.extract(bundle.rgb)
        with ad.no_grad():
            qs = self.models.decoder.decode(feats2d)
        keep, masks, cls, conf = _detections(cfg, qs)
        ids = self.bank.step(qs.embeds_np()[keep], cls[keep], bundle.index)
        sem_map, inst_map = _paint_maps(cfg, keep, masks, cls, conf, ids)
        if gt_stamp:
            stamp_sem = np.eye(cfg.num_classes, dtype=np.float32)[
                np.clip(bundle.semantics.astype(int) - 1, 0, cfg.num_classes - 1)
            ] * LOGIT_GAIN
            stamp_sem[bundle.semantics == 0] = 0.0
            stamp_ids = bundle.instances.astype(np.uint32)
        else:
            stamp_sem = _semantic_image(cfg, keep, qs)
            stamp_ids = inst_map
        batch = _geometry_batch(cfg, bundle, depth, cam, valid, stamp_sem, stamp_ids,
                                mode, heads)
        self.scene.accumulate(batch, bundle.index)
        self.t = bundle.index
        return StepOutputs(sem_map=sem_map, inst_map=inst_map, track_ids=ids,
                           det_queries=keep, features=features, depth=depth)


# -- evaluation ---------------------------------------------------------------


def class_iou_report(pred_maps, gt_maps, num_classes):
    """Aggregate per-class IoU over frames; classes = background + present ones."""
    inter = np.zeros(num_classes + 1)
    union = np.zeros(num_classes + 1)
    present = {0}
    for pred, gt in zip(pred_maps, gt_maps):
        present.update(int(c) for c in np.unique(gt))
        for c in range(num_classes + 1):
            p = pred == c
            g = gt == c
            inter[c] += float((p & g).sum())
            union[c] += float((p | g).sum())
    ious = {}
    for c in sorted(present):
        ious[c] = 100.0 * inter[c] / union[c] if union[c] > 0 else 0.0
    miou = float(np.mean([ious[c] for c in sorted(present)]))
    return miou, ious


def evaluate_scene_views(cfg, scene, bundles, alpha_gate=None):
    """Render the persistent scene at the bundles' cameras and score it."""
    gate = cfg.label_alpha_gate if alpha_gate is None else alpha_gate
    psnrs, pred_sem = [], []
    for b in bundles:
        out = render(scene, b.cam, cfg.image_size, tile=cfg.tile_size,
                     dilation=cfg.cov_dilation, alpha_clamp=cfg.alpha_clamp,
                     min_alpha=cfg.min_splat_alpha, near=cfg.near_plane)
        psnrs.append(psnr(out.color, b.rgb))
        pred_sem.append(out.label_map(gate))
    miou, ious = class_iou_report(pred_sem, [b.semantics for b in bundles], cfg.num_classes)
    return {"psnr": float(np.mean(psnrs)), "miou": miou, "class_iou": ious,
            "per_view_psnr": psnrs}


def evaluate_source_consistency(cfg, scene, bundles, alpha_gate=None):
    """Per-source-view self-consistency of back-projection plus splatting.

    Each frame's own gaussians are rendered back at that frame's camera and
    compared to the frame's observation: the round trip pixel -> 3D -> pixel
    should reproduce what was seen. Whole-scene novel-view quality is the
    complementary `evaluate_scene_views`.
    """
    gate = cfg.label_alpha_gate if alpha_gate is None else alpha_gate
    psnrs, pred_sem = [], []
    for b in bundles:
        sub = GaussianScene(cfg.num_classes)
        sub.accumulate(scene.frame_slice(b.index), b.index)
        out = render(sub, b.cam, cfg.image_size, tile=cfg.tile_size,
                     dilation=cfg.cov_dilation, alpha_clamp=cfg.alpha_clamp,
                     min_alpha=cfg.min_splat_alpha, near=cfg.near_plane)
        psnrs.append(psnr(out.color, b.rgb))
        pred_sem.append(out.label_map(gate))
    miou, ious = class_iou_report(pred_sem, [b.semantics for b in bundles], cfg.num_classes)
    return {"psnr": float(np.mean(psnrs)), "miou": miou, "class_iou": ious,
            "per_view_psnr": psnrs}


def evaluate_tracking(pred_inst_maps, gt_inst_maps):
    report = tracking_metrics(pred_inst_maps, gt_inst_maps)
    return {"t_miou": report.t_miou, "t_sr": report.t_sr,
            "id_switches": report.id_switches}


# -- benchmark ----------------------------------------------------------------


@dataclass
class BenchRecord:
    t: int
    cost: float  # seconds (wall timer) or MACs (mac timer)
    state_bytes: int
    scene_size: int
    cache_tokens: int
    rss_bytes: int


@dataclass
class BenchResult:
    mode: str
    records: list = field(default_factory=list)
    truncated_at: int = -1  # OOM-equivalent cutoff, -1 if none


def run_benchmark(cfg, models, bundles, modes=("streaming", "offline"), repeats=3,
                  timer="wall", memory_cap=None, mode_geometry="oracle"):
    """Per-frame cost records for streaming vs offline over one sequence.

    ``timer='wall'`` records median wall seconds over ``repeats`` runs;
    ``timer='mac'`` records the deterministic multiply-accumulate counter and
    byte-accounted state sizes (reproducible artifacts).
    """
    results = []
    total = len(bundles)
    if "streaming" in modes:
        reps = repeats if timer == "wall" else 1
        times = np.zeros((reps, total))
        sizes = []
        for r in range(reps):
            state = new_state(cfg, models)
            sizes = []
            for i, b in enumerate(bundles):
                enc_mod.mac_counter.reset()
                t0 = time.perf_counter()
                state, _ = stream_step(cfg, models, state, b, mode=mode_geometry)
                dt = time.perf_counter() - t0
                times[r, i] = enc_mod.mac_counter.total if timer == "mac" else dt
                sizes.append((state.nbytes(), len(state.scene), state.cache.length()))
        med = np.median(times, axis=0)
        res = BenchResult(mode="streaming")
        for i in range(total):
            res.records.append(BenchRecord(
                t=i + 1, cost=float(med[i]), state_bytes=sizes[i][0],
                scene_size=sizes[i][1], cache_tokens=sizes[i][2],
                rss_bytes=_rss() if timer == "wall" else 0,
            ))
        results.append(res)
    if "offline" in modes:
        base = OfflineBaseline(cfg, models)
        res = BenchResult(mode="offline")
        for i, b in enumerate(bundles):
            if memory_cap is not None and base.retained_nbytes() + b.nbytes() > memory_cap:
                res.truncated_at = i + 1
                break
            enc_mod.mac_counter.reset()
            t0 = time.perf_counter()
            with _count_batched_macs(base.models.encoder, i + 1):
                base.step(b, mode=mode_geometry)
            dt = time.perf_counter() - t0
            cost = enc_mod.mac_counter.total if timer == "mac" else dt
            res.records.append(BenchRecord(
                t=i + 1, cost=float(cost),
                state_bytes=base.retained_nbytes() + base.scene.nbytes(),
                scene_size=len(base.scene), cache_tokens=0,
                rss_bytes=_rss() if timer == "wall" else 0,
            ))
        results.append(res)
    return results


class _count_batched_macs:
    """Accounts the offline batched-forward MACs analytically."""

    def __init__(self, encoder, t):
        self.encoder = encoder
        self.t = t

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        cfg = self.encoder.cfg
        n = self.t * self.encoder.tokens_per_frame
        d = cfg.embed_dim
        per_layer = 4 * n * d * d + 2 * n * n * d + n * d * 8 * d
        embed = n * self.encoder.patch_embed.weight.shape[0] * d
        enc_mod.mac_counter.add(cfg.encoder_layers * per_layer + embed)
        return False


def _rss():
    return resource.getrusage(resource.RUSAGE_SELF).ru_maxrss * 1024


def write_bench_csv(path, result, timer):
    unit = "macs" if timer == "mac" else "seconds"
    with open(path, "w", encoding="ascii") as fh:
        fh.write(f"t,cost_{unit},state_bytes,scene_size,cache_tokens,rss_bytes\n")
        for r in result.records:
            cost = f"{r.cost:.0f}" if timer == "mac" else f"{r.cost:.6f}"
            fh.write(f"{r.t},{cost},{r.state_bytes},{r.scene_size},{r.cache_tokens},{r.rss_bytes}\n")
        if result.truncated_at >= 0:
            fh.write(f"# OOM-equivalent: truncated at t={result.truncated_at}\n")


def write_bench_svg(path, results, timer):
    """Minimal deterministic SVG: per-frame cost and state size curves."""
    width, height, pad = 640, 360, 50
    colors = {"streaming": "#1f77b4", "offline": "#d62728"}
    all_costs = [r.cost for res in results for r in res.records] or [1.0]
    all_t = [r.t for res in results for r in res.records] or [1]
    cmax = max(all_costs) or 1.0
    tmax = max(all_t)
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">']
    lines.append(f'<rect width="{width}" height="{height}" fill="white"/>')
    unit = "MACs" if timer == "mac" else "s"
    lines.append(
        f'<text x="{width // 2}" y="20" text-anchor="middle" font-size="14">'
        f"per-frame cost ({unit}) vs stream length</text>"
    )
    for res in results:
        pts = []
        for r in res.records:
            x = pad + (width - 2 * pad) * (r.t / tmax)
            y = height - pad - (height - 2 * pad) * (r.cost / cmax)
            pts.append(f"{x:.1f},{y:.1f}")
        color = colors.get(res.mode, "#333")
        lines.append(f'<polyline fill="none" stroke="{color}" stroke-width="2" points="{" ".join(pts)}"/>')
        if res.truncated_at >= 0:
            lines.append(
                f'<text x="{width - pad}" y="{pad}" text-anchor="end" fill="{color}" '
                f'font-size="12">OOM-equivalent at t={res.truncated_at}</text>'
            )
    ystart = pad
    for res in results:
        color = colors.get(res.mode, "#333")
        lines.append(f'<text x="{pad + 4}" y="{ystart}" fill="{color}" font-size="12">{res.mode}</text>')
        ystart += 16
    lines.append(f'<line x1="{pad}" y1="{height - pad}" x2="{width - pad}" y2="{height - pad}" stroke="black"/>')
    lines.append(f'<line x1="{pad}" y1="{pad}" x2="{pad}" y2="{height - pad}" stroke="black"/>')
    lines.append("</svg>")
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def affine_fit_r2(ts, ys):
    """Least-squares fit y = a t + b; returns (a, b, r_squared)."""
    ts = np.asarray(ts, dtype=np.float64)
    ys = np.asarray(ys, dtype=np.float64)
    a, b = np.polyfit(ts, ys, 1)
    pred = a * ts + b
    ss_res = float(((ys - pred) ** 2).sum())
    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    return float(a), float(b), r2


def loglog_slope(ts, ys):
    """Log-log least-squares growth exponent of cumulative cost."""
    ts = np.asarray(ts, dtype=np.float64)
    ys = np.maximum(np.asarray(ys, dtype=np.float64), 1e-12)
    slope, _ = np.polyfit(np.log(ts), np.log(ys), 1)
    return float(slope)
