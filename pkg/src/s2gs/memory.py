"""Online identity maintenance: cosine affinity, gated bipartite association,
EMA prototype updates, track lifecycle, and sequence-level consistency
metrics.

Prototypes are unit-norm running embeddings; track ids increase monotonically
and are never reused. A prototype unseen for more than ``max_age`` frames is
retired, so a long-occluded object reappears under a fresh id.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError
from .semantic import hungarian_match


@dataclass
class InstancePrototype:
    track_id: int
    embed: np.ndarray  # unit-norm identity embedding
    last_seen: int
    hits: int = 1
    class_counts: dict = field(default_factory=dict)

    def dominant_class(self):
        if not self.class_counts:
            return 0
        best = max(sorted(self.class_counts), key=lambda k: self.class_counts[k])
        return best


def affinity(embeds, bank):
    """[D, Dz] detections x [K] prototypes cosine matrix."""
    embeds = np.asarray(embeds, dtype=np.float32)
    if len(embeds) and np.abs(np.linalg.norm(embeds, axis=-1) - 1.0).max() > 1e-4:
        raise ContractError("detection embeddings must be unit-norm")
    if not bank.prototypes:
        return np.zeros((len(embeds), 0), dtype=np.float32)
    protos = np.stack([p.embed for p in bank.prototypes])
    return embeds @ protos.T


def associate(aff, sim_threshold):
    """Hungarian on (1 - affinity); matches below threshold become new.

    Returns (matches [(det, proto)], new_detections, unmatched_prototypes).
    """
    d, k = aff.shape
    if d == 0 or k == 0:
        return [], list(range(d)), list(range(k))
    pairs, _ = hungarian_match(1.0 - np.asarray(aff, dtype=np.float64))
    matches, matched_d, matched_k = [], set(), set()
    for det, proto in pairs:
        if aff[det, proto] >= sim_threshold:
            matches.append((det, proto))
            matched_d.add(det)
            matched_k.add(proto)
    news = [i for i in range(d) if i not in matched_d]
    stale = [j for j in range(k) if j not in matched_k]
    return matches, news, stale


def ema_update(prototype_embed, embed, alpha):
    """Norm((1 - alpha) * old + alpha * new); degenerate sums keep the old.

    Returns (updated embedding, degenerate flag).
    """
    if not 0.0 <= alpha <= 1.0:
        raise ContractError(f"alpha must be in [0, 1], got {alpha}")
    old = np.asarray(prototype_embed, dtype=np.float32)
    new = np.asarray(embed, dtype=np.float32)
    for v, name in ((old, "prototype"), (new, "detection")):
        if abs(float(np.linalg.norm(v)) - 1.0) > 1e-4:
            raise ContractError(f"{name} embedding must be unit-norm")
    blend = (1.0 - alpha) * old + alpha * new
    norm = float(np.linalg.norm(blend))
    if norm < 1e-6:
        return old.copy(), True
    return (blend / norm).astype(np.float32), False


class MemoryBank:
    """Single-writer set of instance prototypes advanced one frame at a time."""

    def __init__(self, alpha=0.2, sim_threshold=0.5, max_age=10):
        self.alpha = alpha
        self.sim_threshold = sim_threshold
        self.max_age = max_age
        self.prototypes = []
        self._next_id = 1

    def __len__(self):
        return len(self.prototypes)

    def nbytes(self):
        return sum(p.embed.nbytes for p in self.prototypes)

    def step(self, embeds, classes, frame):
        """Associate one frame's filtered detections; returns their track ids.

        Detections must already satisfy the confidence and area gates.
        Matched prototypes take an EMA step; unmatched detections spawn new
        prototypes; prototypes unseen for more than max_age frames retire.
        """
        embeds = np.asarray(embeds, dtype=np.float32)
        if embeds.size == 0:
            matches, news = [], []
            ids = np.zeros(0, dtype=np.uint32)
        else:
            embeds = embeds.reshape(-1, embeds.shape[-1])
            ids = np.zeros(len(embeds), dtype=np.uint32)
            aff = affinity(embeds, self)
            matches, news, _ = associate(aff, self.sim_threshold)
        for det, proto_idx in matches:
            proto = self.prototypes[proto_idx]
            proto.embed, _ = ema_update(proto.embed, embeds[det], self.alpha)
            proto.last_seen = frame
            proto.hits += 1
            cls = int(classes[det])
            proto.class_counts[cls] = proto.class_counts.get(cls, 0) + 1
            ids[det] = proto.track_id
        for det in news:
            proto = InstancePrototype(
                track_id=self._next_id, embed=embeds[det].copy(), last_seen=frame,
                class_counts={int(classes[det]): 1},
            )
            self._next_id += 1
            self.prototypes.append(proto)
            ids[det] = proto.track_id
        self.prototypes = [p for p in self.prototypes if frame - p.last_seen <= self.max_age]
        return ids


# -- sequence-level metrics ---------------------------------------------------


@dataclass
class TrackingReport:
    t_miou: float  # percent
    t_sr: float  # percent
    id_switches: int
    per_instance: dict  # gt id -> track IoU


def tracking_metrics(pred_id_maps, gt_id_maps):
    """Track-level consistency of predicted id maps against ground truth.

    Per GT instance: bind it to the predicted track with the highest IoU at
    the instance's first visible frame, then score the whole sequence as
    sum_t |bind & gt| / sum_t |bind | gt| over the frames where the instance
    is visible. T-mIoU is the mean, T-SR the fraction strictly above 0.5.
    Id switches follow the MOT convention: count +1 whenever the best-IoU
    (> 0.5) per-frame match of a GT instance changes track id.
    """
    if len(pred_id_maps) != len(gt_id_maps):
        raise ContractError("prediction and ground truth must cover the same frames")
    gt_ids = sorted({int(i) for m in gt_id_maps for i in np.unique(m) if i != 0})
    if not gt_ids:
        raise ContractError("tracking metrics undefined without ground-truth instances")

    per_instance = {}
    for g in gt_ids:
        first = next(t for t, m in enumerate(gt_id_maps) if (m == g).any())
        gmask = gt_id_maps[first] == g
        best_track, best_iou = 0, -1.0
        for track in np.unique(pred_id_maps[first]):
            if track == 0:
                continue
            iou = _iou(pred_id_maps[first] == track, gmask)
            if iou > best_iou:
                best_track, best_iou = int(track), iou
        inter = union = 0.0
        for t in range(len(gt_id_maps)):
            gm = gt_id_maps[t] == g
            if not gm.any():
                continue
            pm = pred_id_maps[t] == best_track if best_track else np.zeros_like(gm)
            inter += float((pm & gm).sum())
            union += float((pm | gm).sum())
        per_instance[g] = inter / union if union > 0 else 0.0

    switches = 0
    last_bound = {}
    for t in range(len(gt_id_maps)):
        for g in gt_ids:
            gm = gt_id_maps[t] == g
            if not gm.any():
                continue
            best_track, best_iou = None, 0.5
            for track in np.unique(pred_id_maps[t]):
                if track == 0:
                    continue
                iou = _iou(pred_id_maps[t] == track, gm)
                if iou > best_iou:
                    best_track, best_iou = int(track), iou
            if best_track is None:
                continue
            if g in last_bound and last_bound[g] != best_track:
                switches += 1
            last_bound[g] = best_track

    ious = list(per_instance.values())
    return TrackingReport(
        t_miou=100.0 * float(np.mean(ious)),
        t_sr=100.0 * float(np.mean([v > 0.5 for v in ious])),
        id_switches=switches,
        per_instance=per_instance,
    )


def _iou(a, b):
    inter = float((a & b).sum())
    union = float((a | b).sum())
    return inter / union if union > 0 else 0.0


def export_tracks_csv(path, rows):
    """Track export: (frame, track_id, class, area, cx, cy) rows."""
    with open(path, "w", encoding="ascii") as fh:
        fh.write("frame,track_id,class,area,cx,cy\n")
        for frame, track_id, cls, area, cx, cy in rows:
            fh.write(f"{frame},{track_id},{cls},{area},{cx:.2f},{cy:.2f}\n")
