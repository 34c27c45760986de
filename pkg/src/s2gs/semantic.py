"""Per-frame semantic branch, fully decoupled from the geometry stream.

A frozen randomly-initialized conv pyramid stands in for a pretrained 2D
feature extractor; a small query decoder cross-attends to its tokens to
produce masks, class scores and unit-norm identity embeddings. Training
aligns queries with ground-truth instances per frame (Hungarian on a
mask+class cost) and pulls same-instance embeddings together across frames
with a supervised contrastive objective.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ContractError, DimensionError


# -- frozen feature pyramid -------------------------------------------------


def _conv2d(x, w, b, stride=1, pad=0):
    """im2col convolution; x [H, W, Cin], w [kh, kw, Cin, Cout]."""
    kh, kw, cin, cout = w.shape
    if pad:
        x = np.pad(x, ((pad, pad), (pad, pad), (0, 0)))
    h, wd, _ = x.shape
    oh = (h - kh) // stride + 1
    ow = (wd - kw) // stride + 1
    cols = np.empty((oh, ow, kh * kw * cin), dtype=np.float32)
    for i in range(kh):
        for j in range(kw):
            patch = x[i : i + stride * oh : stride, j : j + stride * ow : stride, :]
            cols[:, :, (i * kw + j) * cin : (i * kw + j + 1) * cin] = patch
    out = cols.reshape(oh * ow, -1) @ w.reshape(-1, cout) + b
    return out.reshape(oh, ow, cout)


class FeaturePyramid:
    """Fixed random conv stack, frozen after initialization.

    Three feature channels carry the block-mean RGB directly (color is the
    dominant cue at this scale); the rest come from the random convs.
    Outputs depend only on the input frame and the init seed, never on the
    geometry stream.
    """

    def __init__(self, image_size=64, dim=64, seed=7771):
        if dim <= 3:
            raise DimensionError("feature dim must exceed the 3 color channels")
        self.image_size = image_size
        self.dim = dim
        rng = np.random.default_rng(seed)
        conv_dim = dim - 3

        def he(shape):
            fan = shape[0] * shape[1] * shape[2]
            return (rng.normal(size=shape) * math.sqrt(2.0 / fan)).astype(np.float32)

        self.w1, self.b1 = he((4, 4, 3, conv_dim)), np.zeros(conv_dim, dtype=np.float32)
        self.w2, self.b2 = he((3, 3, conv_dim, conv_dim)), np.zeros(conv_dim, dtype=np.float32)
        self.w3, self.b3 = he((2, 2, conv_dim, conv_dim)), np.zeros(conv_dim, dtype=np.float32)

    def extract(self, frame):
        """[H, W, 3] RGB in [0, 1] -> {4: [H/4, W/4, D], 8: [H/8, W/8, D]}."""
        if frame.shape != (self.image_size, self.image_size, 3):
            raise DimensionError(
                f"frame shape {frame.shape}, expected {(self.image_size, self.image_size, 3)}"
            )
        x = np.asarray(frame, dtype=np.float32) - 0.5
        c4 = np.maximum(_conv2d(x, self.w1, self.b1, stride=4), 0.0)
        c4 = np.maximum(_conv2d(c4, self.w2, self.b2, stride=1, pad=1), 0.0)
        c8 = np.maximum(_conv2d(c4, self.w3, self.b3, stride=2), 0.0)
        rgb4 = _block_mean(x, 4) * 2.0
        rgb8 = _block_mean(x, 8) * 2.0
        return {4: np.concatenate([rgb4, c4], axis=-1),
                8: np.concatenate([rgb8, c8], axis=-1)}


def _block_mean(x, block):
    h, w, c = x.shape
    return x.reshape(h // block, block, w // block, block, c).mean(axis=(1, 3))


# -- query decoder -----------------------------------------------------------


@dataclass
class QuerySet:
    """Decoded per-frame queries: masks, class scores, identity embeddings."""

    queries: Tensor  # [N, D]
    mask_logits: Tensor  # [N, H, W]
    class_logits: Tensor  # [N, C+1], last channel = no-object
    embeds: Tensor  # [N, Dz], rows unit-norm
    aux: list = field(default_factory=list)  # intermediate rounds (training)

    @property
    def masks(self):
        return ad.sigmoid(self.mask_logits)

    def masks_np(self):
        from .autodiff import _sigmoid_stable

        return _sigmoid_stable(self.mask_logits.data)

    def class_probs_np(self):
        z = self.class_logits.data
        e = np.exp(z - z.max(axis=-1, keepdims=True))
        return e / e.sum(axis=-1, keepdims=True)

    def embeds_np(self):
        return self.embeds.data


class QueryDecoder:
    """A few rounds of cross/self attention from learnable queries to features."""

    def __init__(self, cfg, seed=1):
        self.cfg = cfg
        rng = np.random.default_rng(seed)
        d = cfg.feature_dim
        n = cfg.queries
        self.q0 = Tensor((rng.normal(size=(n, d)) * 0.5).astype(np.float32), requires_grad=True)
        self.level_embed = Tensor(np.zeros((2, d), dtype=np.float32), requires_grad=True)
        self.context_ln = nn.LayerNorm(d)
        self.rounds = []
        for _ in range(cfg.decoder_rounds):
            self.rounds.append(
                {
                    "ln_cross": nn.LayerNorm(d),
                    "cross": nn.MultiHeadAttention(d, 4, rng),
                    "ln_self": nn.LayerNorm(d),
                    "self": nn.MultiHeadAttention(d, 4, rng),
                    "ln_ff": nn.LayerNorm(d),
                    "ff": nn.FeedForward(d, 2 * d, rng),
                }
            )
        self.final_ln = nn.LayerNorm(d)
        self.mask_head = nn.Linear(d, d, rng)
        self.pixel_ln = nn.LayerNorm(d)
        self.pixel_proj = nn.Linear(d, d, rng)
        self.class_head = nn.Linear(d, cfg.num_classes + 1, rng)
        self.ident_head = nn.Linear(d, cfg.identity_dim, rng)
        grid4 = cfg.image_size // 4
        grid8 = cfg.image_size // 8
        self.pe4 = nn.sincos_grid(grid4, grid4, d)
        self.pe8 = nn.sincos_grid(grid8, grid8, d)
        self.grid4 = grid4

    def params(self):
        out = {"q0": self.q0, "level_embed": self.level_embed}
        out.update(self.context_ln.params("context_ln."))
        for i, r in enumerate(self.rounds):
            out.update(r["ln_cross"].params(f"round{i}.ln_cross."))
            out.update(r["cross"].params(f"round{i}.cross."))
            out.update(r["ln_self"].params(f"round{i}.ln_self."))
            out.update(r["self"].params(f"round{i}.self."))
            out.update(r["ln_ff"].params(f"round{i}.ln_ff."))
            out.update(r["ff"].params(f"round{i}.ff."))
        out.update(self.final_ln.params("final_ln."))
        out.update(self.mask_head.params("mask_head."))
        out.update(self.pixel_ln.params("pixel_ln."))
        out.update(self.pixel_proj.params("pixel_proj."))
        out.update(self.class_head.params("class_head."))
        out.update(self.ident_head.params("ident_head."))
        return out

    def identity_params(self):
        return self.ident_head.params("ident_head.")

    def decode(self, feats, aux=False):
        """Features from FeaturePyramid.extract -> QuerySet for this frame.

        Cross-attention is gated to each query's current mask estimate
        (full attention as fallback for empty estimates), which keeps
        queries from bleeding across same-class instances. With
        ``aux=True`` the result also carries per-round intermediate
        predictions for deep supervision during training.
        """
        d = self.cfg.feature_dim
        f4 = feats[4].reshape(-1, d) + self.pe4
        f8 = feats[8].reshape(-1, d) + self.pe8
        ctx = ad.concat(
            [
                ad.add(Tensor(f4), self.level_embed[0:1]),
                ad.add(Tensor(f8), self.level_embed[1:2]),
            ],
            axis=0,
        )
        ctx = self.context_ln(ctx)
        pix = self.pixel_proj(self.pixel_ln(Tensor(f4)))  # [G*G, D]
        q = self.q0
        gate = self._attention_gate(self._lowres(self.final_ln(q), pix).data)
        stages = []
        for r in self.rounds:
            q = ad.add(q, r["cross"](r["ln_cross"](q), ctx, gate))
            h = r["ln_self"](q)
            q = ad.add(q, r["self"](h, h))
            q = ad.add(q, r["ff"](r["ln_ff"](q)))
            lowres = self._lowres(self.final_ln(q), pix)
            gate = self._attention_gate(lowres.data)
            if aux or r is self.rounds[-1]:
                stages.append(self._predict(self.final_ln(q), pix, lowres))
        final = stages[-1]
        final.aux = stages[:-1]
        return final

    def _lowres(self, q, pix):
        d = self.cfg.feature_dim
        me = self.mask_head(q)
        lowres = ad.mul(ad.matmul(me, ad.transpose(pix)), 1.0 / math.sqrt(d))
        return ad.reshape(lowres, (self.cfg.queries, self.grid4, self.grid4))

    def _attention_gate(self, lowres_logits):
        """{0, -inf} cross-attention mask from the current mask estimate."""
        g4 = lowres_logits > 0.0  # [N, G, G]
        n, g, _ = g4.shape
        g8 = g4.reshape(n, g // 2, 2, g // 2, 2).max(axis=(2, 4))
        flat = np.concatenate([g4.reshape(n, -1), g8.reshape(n, -1)], axis=1)
        flat[~flat.any(axis=1)] = True  # empty estimate: attend everywhere
        return np.where(flat, 0.0, ad.neg_inf()).astype(np.float32)

    def _predict(self, q, pix, lowres):
        size = self.cfg.image_size
        mask_logits = nn.upsample_bilinear(lowres, size, size)
        class_logits = self.class_head(q)
        embeds = ad.l2_normalize(self.ident_head(q), axis=-1)
        return QuerySet(queries=q, mask_logits=mask_logits, class_logits=class_logits, embeds=embeds)


# -- hungarian assignment -----------------------------------------------------


def hungarian_match(cost):
    """Minimum-cost injective assignment of min(n, m) rows to columns.

    Potentials + augmenting rows (O(n^3)); scan order is fixed so ties break
    deterministically (lexicographic preference by row, then column).
    Returns (pairs sorted by row, total cost).
    """
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.size == 0:
        raise ContractError(f"cost must be a nonempty matrix, got shape {cost.shape}")
    if np.isnan(cost).any() or not np.isfinite(cost).all():
        raise ContractError("cost matrix must be finite")
    n, m = cost.shape
    flipped = n > m
    work = cost.T if flipped else cost
    rows, cols = work.shape

    inf = float("inf")
    u = [0.0] * (rows + 1)
    v = [0.0] * (cols + 1)
    match = [0] * (cols + 1)  # match[j] = row occupying column j (1-based)
    way = [0] * (cols + 1)
    for i in range(1, rows + 1):
        match[0] = i
        j0 = 0
        minv = [inf] * (cols + 1)
        used = [False] * (cols + 1)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = inf
            j1 = -1
            row = work[i0 - 1]
            for j in range(1, cols + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(cols + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1

    pairs = []
    for j in range(1, cols + 1):
        if match[j]:
            r, c = match[j] - 1, j - 1
            pairs.append((c, r) if flipped else (r, c))
    pairs.sort()
    total = float(sum(cost[r, c] for r, c in pairs))
    return pairs, total


def soft_iou(a, b):
    """Soft intersection-over-union of two [..., H, W] masks in [0, 1]."""
    inter = float((a * b).sum())
    union = float(a.sum() + b.sum() - inter)
    return inter / union if union > 0 else 0.0


def match_cost(pred, gt_masks, gt_classes, w_mask=1.0, w_cls=1.0):
    """[N, K] alignment cost: w_mask (1 - soft IoU) + w_cls (1 - p_class)."""
    gt_masks = np.asarray(gt_masks, dtype=np.float32)
    if gt_masks.ndim != 3 or len(gt_masks) == 0:
        raise ContractError("need at least one ground-truth instance")
    masks = pred.masks_np()
    probs = pred.class_probs_np()
    n, k = masks.shape[0], gt_masks.shape[0]
    cost = np.zeros((n, k), dtype=np.float64)
    for j in range(k):
        g = gt_masks[j]
        cls = int(gt_classes[j]) - 1
        for i in range(n):
            cost[i, j] = w_mask * (1.0 - soft_iou(masks[i], g)) + w_cls * (1.0 - probs[i, cls])
    return cost


# -- losses -------------------------------------------------------------------


def supcon_loss(embeds, labels, temperature):
    """Supervised contrastive loss over unit-norm embeddings.

    Per anchor with at least one positive: mean over positives p of
    -log( exp(z_i.z_p / T) / sum_{a != i} exp(z_i.z_a / T) ), summed over
    anchors. Anchors without positives are ignored. Returns (loss, anchors).
    """
    if temperature <= 0:
        raise ContractError(f"temperature must be positive, got {temperature}")
    labels = np.asarray(labels)
    if (labels < 0).any():
        raise ContractError("labels must be non-negative")
    n = len(labels)
    if n != embeds.shape[0]:
        raise DimensionError("labels and embeddings disagree in length")
    norms = np.linalg.norm(embeds.data, axis=-1)
    if np.abs(norms - 1.0).max() > 1e-4:
        raise ContractError("embedding rows must be unit-norm")

    offdiag = (~np.eye(n, dtype=bool)).astype(embeds.data.dtype)
    positives = (labels[None, :] == labels[:, None]) & ~np.eye(n, dtype=bool)
    counts = positives.sum(axis=1)
    anchors = int((counts > 0).sum())
    if anchors == 0:
        return Tensor(np.zeros((), dtype=embeds.data.dtype)), 0

    sim = ad.mul(ad.matmul(embeds, ad.transpose(embeds)), 1.0 / temperature)
    row_max = np.where(offdiag > 0, sim.data, -np.inf).max(axis=1, keepdims=True)
    shifted = ad.sub(sim, Tensor(row_max.astype(embeds.data.dtype)))
    expd = ad.mul(ad.texp(shifted), Tensor(offdiag))
    denom = ad.tlog(ad.tsum(expd, axis=1, keepdims=True))
    log_prob = ad.sub(shifted, denom)
    weights = np.zeros((n, n), dtype=embeds.data.dtype)
    rows = counts > 0
    weights[rows] = positives[rows] / counts[rows, None]
    loss = ad.neg(ad.tsum(ad.mul(log_prob, Tensor(weights))))
    return loss, anchors


def mask_bce_loss(mask_logits, target):
    """Stable per-pixel binary cross-entropy from logits; mean over pixels."""
    y = Tensor(np.asarray(target, dtype=np.float32))
    pos = ad.mul(y, ad.softplus(ad.neg(mask_logits)))
    neg_part = ad.mul(ad.sub(1.0, y), ad.softplus(mask_logits))
    return ad.tmean(ad.add(pos, neg_part))


def mask_iou_loss(mask_logits, target):
    """1 - soft IoU between sigmoid(logits) and a binary target."""
    m = ad.sigmoid(mask_logits)
    g = Tensor(np.asarray(target, dtype=np.float32))
    inter = ad.tsum(ad.mul(m, g))
    union = ad.sub(ad.add(ad.tsum(m), ad.tsum(g)), inter)
    return ad.sub(1.0, ad.div(inter, ad.add(union, 1e-6)))


def class_ce_loss(class_logits_row, target_index):
    """Cross-entropy of one query's class logits against an integer target."""
    lse = ad.logsumexp(ad.reshape(class_logits_row, (1, -1)), axis=-1, keepdims=False)
    return ad.sub(ad.reshape(lse, ()), ad.reshape(class_logits_row[target_index : target_index + 1], ()))
