"""Training loops: semantic decoder, projector distillation, encoder distillation.

All loops consume streams of FrameBundles from the synthetic world, run on
the autodiff tape, and step Adam. Feature maps are cached per frame since the
pyramid is frozen.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import semantic as sem
from .autodiff import Adam, Tensor
from .encoder import CausalEncoder
from .openvocab import Projector, distill_step
from .semantic import FeaturePyramid, QueryDecoder


def gt_instances(bundle, min_area=1):
    """Binary masks, classes and ids of the bundle's visible instances."""
    classes = bundle.instance_classes()
    masks, cls, ids = [], [], []
    for iid, c in sorted(classes.items()):
        m = bundle.instances == iid
        if m.sum() >= min_area:
            masks.append(m.astype(np.float32))
            cls.append(c)
            ids.append(iid)
    return np.asarray(masks), cls, ids


class FrameRecord:
    """One training frame with cached frozen features and ground truth."""

    def __init__(self, bundle, pyramid, clip_id):
        self.bundle = bundle
        self.feats = pyramid.extract(bundle.rgb)
        self.masks, self.classes, self.ids = gt_instances(bundle, min_area=8)
        self.clip_id = clip_id

    @property
    def has_instances(self):
        return len(self.masks) > 0


def build_records(sequences, pyramid):
    records = []
    for clip_id, bundles in enumerate(sequences):
        records.append([FrameRecord(b, pyramid, clip_id) for b in bundles])
    return records


def train_semantic(cfg, sequences, steps, seed=0, use_contrastive=True, lr=2e-3,
                   frames_per_step=4, contrastive_weight=1.0, log_rows=None):
    """Train the query decoder on synthetic clips.

    Per step: decode a few frames of one clip, Hungarian-align queries to GT
    instances, apply mask BCE + soft-IoU + class CE, and (optionally) the
    supervised contrastive loss over matched identity embeddings across the
    step's frames. Returns the trained decoder.
    """
    pyramid = FeaturePyramid(cfg.image_size, cfg.feature_dim, seed=cfg.feature_seed)
    decoder = QueryDecoder(cfg, seed=seed + 1)
    records = build_records(sequences, pyramid)
    rng = np.random.default_rng(seed)
    opt = Adam(list(decoder.params().values()), lr=lr)
    no_obj = cfg.num_classes  # last channel

    for step in range(steps):
        if step == int(steps * 0.7):
            opt.lr = lr * 0.25
        clip = records[int(rng.integers(len(records)))]
        usable = [r for r in clip if r.has_instances]
        if not usable:
            continue
        k = min(frames_per_step, len(usable))
        picks = rng.choice(len(usable), size=k, replace=False)
        losses_mask, losses_cls = [], []
        embeds_rows, embed_labels = [], []
        for pi in picks:
            rec = usable[int(pi)]
            qs = decoder.decode(rec.feats, aux=True)
            cost = sem.match_cost(qs, rec.masks, rec.classes)
            pairs, _ = sem.hungarian_match(cost)
            matched = {q for q, _ in pairs}
            for stage, weight in [(qs, 1.0)] + [(a, 0.5) for a in qs.aux]:
                for q, g in pairs:
                    logits_q = stage.mask_logits[q]
                    term = ad.add(sem.mask_bce_loss(logits_q, rec.masks[g]),
                                  ad.mul(sem.mask_iou_loss(logits_q, rec.masks[g]), 2.0))
                    losses_mask.append(ad.mul(term, weight))
                    losses_cls.append(ad.mul(
                        sem.class_ce_loss(stage.class_logits[q], rec.classes[g] - 1), weight))
                for q in range(cfg.queries):
                    if q not in matched:
                        losses_cls.append(ad.mul(
                            sem.class_ce_loss(stage.class_logits[q], no_obj), 0.1 * weight))
            for q, g in pairs:
                embeds_rows.append(qs.embeds[q : q + 1])
                embed_labels.append(rec.clip_id * 1000 + rec.ids[g])
        if not losses_mask:
            continue
        loss_mask = ad.tmean(ad.concat([ad.reshape(l, (1,)) for l in losses_mask]))
        loss_cls = ad.tmean(ad.concat([ad.reshape(l, (1,)) for l in losses_cls]))
        total = ad.add(loss_mask, loss_cls)
        loss_cl_val = 0.0
        if use_contrastive and len(embeds_rows) >= 2:
            z = ad.concat(embeds_rows, axis=0)
            loss_cl, anchors = sem.supcon_loss(z, np.asarray(embed_labels), cfg.temperature)
            if anchors:
                total = ad.add(total, ad.mul(loss_cl, contrastive_weight / anchors))
                loss_cl_val = float(loss_cl.data) / anchors
        ad.backward(total)
        opt.step()
        opt.zero_grad()
        if log_rows is not None:
            log_rows.append((step, float(loss_mask.data), float(loss_cls.data), loss_cl_val))
    return decoder


def reset_identity_head(decoder, seed=99):
    """Fresh random identity head: the untrained-embedding ablation arm."""
    rng = np.random.default_rng(seed)
    d_in, d_out = decoder.ident_head.weight.shape
    decoder.ident_head.weight.data = (
        rng.uniform(-1, 1, size=(d_in, d_out)) / np.sqrt(d_in)
    ).astype(np.float32)
    decoder.ident_head.bias.data = np.zeros(d_out, dtype=np.float32)
    return decoder


def collect_distill_groups(cfg, decoder, pyramid, space, sequences):
    """Group matched identity embeddings by instance, with teacher vectors.

    Returns a list of (queries [k, Dz], teacher) pairs, one per instance that
    yielded at least one accepted teacher sample.
    """
    groups = {}
    teachers = {}
    with ad.no_grad():
        for si, bundles in enumerate(sequences):
            for b in bundles:
                masks, classes, ids = gt_instances(b, min_area=cfg.min_area)
                if not len(masks):
                    continue
                feats = pyramid.extract(b.rgb)
                qs = decoder.decode(feats)
                cost = sem.match_cost(qs, masks, classes)
                pairs, _ = sem.hungarian_match(cost)
                pred_masks = qs.masks_np()
                for q, g in pairs:
                    v = space.teacher_embed(b.rgb, pred_masks[q] > 0.5, b.semantics,
                                            min_area=cfg.min_area)
                    if v is None:
                        continue
                    key = (si, ids[g])
                    groups.setdefault(key, []).append(qs.embeds.data[q].copy())
                    teachers.setdefault(key, []).append(v)
    out = []
    for key, queries in sorted(groups.items()):
        teacher = np.mean(teachers[key], axis=0)
        teacher /= np.linalg.norm(teacher)
        out.append((np.stack(queries), teacher.astype(np.float32)))
    return out


def train_projector(cfg, decoder, space, sequences, steps, seed=0, lr=3e-3,
                    groups_per_step=8):
    """Distill the query-to-semantic projector; decoder weights stay frozen."""
    pyramid = FeaturePyramid(cfg.image_size, cfg.feature_dim, seed=cfg.feature_seed)
    samples = collect_distill_groups(cfg, decoder, pyramid, space, sequences)
    projector = Projector(cfg.identity_dim, cfg.semantic_dim, seed=seed + 5)
    rng = np.random.default_rng(seed)
    opt = Adam(list(projector.params().values()), lr=lr)
    for _ in range(steps):
        if not samples:
            break
        picks = rng.integers(len(samples), size=min(groups_per_step, len(samples)))
        batch = [samples[int(i)] for i in picks]
        distill_step(projector, batch, rng, opt, aggregate_prob=cfg.aggregate_prob)
    return projector


def train_encoder(cfg, sequences, steps, seed=0, lr=1e-3, clip_len=4, log_rows=None):
    """Distill depth and camera heads toward the synthetic teacher oracle."""
    encoder = CausalEncoder(cfg, seed=seed + 9)
    rng = np.random.default_rng(seed)
    opt = Adam(list(encoder.params().values()), lr=lr)
    for step in range(steps):
        bundles = sequences[int(rng.integers(len(sequences)))]
        start = int(rng.integers(max(len(bundles) - clip_len + 1, 1)))
        clip = bundles[start : start + clip_len]
        frames = np.stack([b.rgb for b in clip])
        feats = encoder.forward_batched(frames)
        total = Tensor(np.zeros(()))
        for i, b in enumerate(clip):
            heads = encoder.heads_forward(feats[i])
            losses = encoder.distill_losses(heads, b.depth, b.cam, b.valid)
            total = ad.add(total, ad.add(losses.depth, ad.mul(losses.camera, 0.25)))
        total = ad.mul(total, 1.0 / len(clip))
        ad.backward(total)
        opt.step()
        opt.zero_grad()
        if log_rows is not None:
            log_rows.append((step, float(total.data)))
    return encoder
