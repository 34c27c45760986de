"""Query-to-semantic projection, distillation, and text-label retrieval.

The vision-language teacher is synthetic: each class owns one fixed random
orthonormal embedding, and a region's teacher embedding is its majority
ground-truth class embedding plus mild noise. Distillation trains only the
projector; half the samples distill a random convex blend of same-instance
queries so the projection stays stable under momentum-style query drift.
"""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from . import nn
from .autodiff import Tensor
from .errors import ContractError, DataError, VocabularyError


class SemanticSpace:
    """Fixed vocabulary of unit-norm label embeddings plus a region teacher."""

    def __init__(self, labels, dim=32, seed=4242, noise=0.05):
        if dim < len(labels):
            raise ContractError("semantic dimension must be >= vocabulary size")
        self.labels = list(labels)
        self.dim = dim
        self.noise = noise
        rng = np.random.default_rng(seed)
        basis, _ = np.linalg.qr(rng.normal(size=(dim, dim)))
        self.embeddings = basis[: len(labels)].astype(np.float32)
        self._rng = np.random.default_rng(seed + 1)

    def embed_label(self, label):
        if label not in self.labels:
            raise VocabularyError(f"label {label!r} not in vocabulary {self.labels}")
        return self.embeddings[self.labels.index(label)]

    def teacher_embed(self, frame_rgb, mask, gt_semantics, min_area=16):
        """Teacher embedding of a masked region: majority-class vector + noise.

        Returns None for rejected samples (mask area below ``min_area`` or no
        labeled ground-truth pixels under the mask).
        """
        mask = np.asarray(mask) > 0.5
        if mask.sum() < min_area:
            return None
        sem = np.asarray(gt_semantics)[mask]
        sem = sem[sem > 0]
        if sem.size == 0:
            return None
        vals, counts = np.unique(sem, return_counts=True)
        cls = int(vals[np.argmax(counts)])
        base = self.embeddings[cls - 1]
        if self.noise > 0:
            # noise scale is the perturbation norm, not a per-component std
            direction = self._rng.normal(size=self.dim)
            direction /= np.linalg.norm(direction)
            v = base + self.noise * direction.astype(np.float32)
        else:
            v = base.copy()
        return (v / np.linalg.norm(v)).astype(np.float32)

    def save_vocabulary(self, path):
        with open(path, "w", encoding="ascii") as fh:
            for label, emb in zip(self.labels, self.embeddings):
                fh.write(label + "\t" + " ".join(f"{v:.8f}" for v in emb) + "\n")

    @classmethod
    def load_vocabulary(cls, path):
        labels, rows = [], []
        with open(path, "r", encoding="ascii") as fh:
            for line in fh:
                if not line.strip():
                    continue
                try:
                    label, vec = line.rstrip("\n").split("\t")
                except ValueError as exc:
                    raise DataError(f"{path}: malformed vocabulary line") from exc
                labels.append(label)
                rows.append([float(v) for v in vec.split()])
        space = cls.__new__(cls)
        space.labels = labels
        space.embeddings = np.asarray(rows, dtype=np.float32)
        space.dim = space.embeddings.shape[1]
        space.noise = 0.0
        space._rng = np.random.default_rng(0)
        return space


class Projector:
    """Two-layer MLP mapping identity queries into the semantic space."""

    def __init__(self, d_in, d_out, hidden=64, seed=11):
        rng = np.random.default_rng(seed)
        self.fc1 = nn.Linear(d_in, hidden, rng)
        self.fc2 = nn.Linear(hidden, d_out, rng)

    def params(self):
        return {**self.fc1.params("proj.fc1."), **self.fc2.params("proj.fc2.")}

    def project(self, q):
        """Unit-norm semantic embedding(s) of query vector(s)."""
        single = q.ndim == 1
        if not isinstance(q, Tensor):
            q = Tensor(np.atleast_2d(np.asarray(q, dtype=np.float32)))
        elif single:
            q = ad.reshape(q, (1, -1))
        out = ad.l2_normalize(self.fc2(ad.relu(self.fc1(q))), axis=-1)
        return ad.reshape(out, (-1,)) if single else out

    def project_np(self, q):
        with ad.no_grad():
            return self.project(np.asarray(q, dtype=np.float32)).data


def cosine_loss(projected, teacher):
    """mean(1 - cos(u, v)) for unit-norm rows."""
    v = Tensor(np.atleast_2d(np.asarray(teacher, dtype=np.float32)))
    cos = ad.tsum(ad.mul(projected, v), axis=-1)
    return ad.tmean(ad.sub(1.0, cos))


def distill_step(projector, samples, rng, optimizer, aggregate_prob=0.5):
    """One projector-only update over instance-grouped distillation samples.

    Each sample is (queries [k, D] of one instance, teacher vector). With
    probability ``aggregate_prob`` a random convex (Dirichlet) blend of the
    group is projected instead of a single sampled member.
    """
    inputs, targets = [], []
    for queries, teacher in samples:
        queries = np.asarray(queries, dtype=np.float32)
        if queries.ndim != 2 or len(queries) == 0:
            continue
        if rng.random() < aggregate_prob and len(queries) > 1:
            wts = rng.dirichlet(np.ones(len(queries))).astype(np.float32)
            inputs.append(wts @ queries)
        else:
            inputs.append(queries[int(rng.integers(len(queries)))])
        targets.append(teacher)
    if not inputs:
        return 0.0
    u = projector.project(Tensor(np.stack(inputs)))
    loss = cosine_loss(u, np.stack(targets))
    ad.backward(loss)
    optimizer.step()
    optimizer.zero_grad()
    return float(loss.data)


def retrieve(label_embedding, projected, masks):
    """Pick the query maximizing cosine similarity with the label embedding.

    ``projected`` rows and the label embedding must be unit-norm, so the
    scores are plain dot products in [-1, 1]. Ties take the lowest index.
    Returns (index, mask, scores).
    """
    e = np.asarray(label_embedding, dtype=np.float32)
    scores = np.asarray(projected, dtype=np.float32) @ e
    n_star = int(np.argmax(scores))  # argmax takes the first maximum
    return n_star, masks[n_star], scores


def grounding_miou(retrieved_masks, gt_masks):
    """Mean IoU (percent) over labels of retrieved vs ground-truth union masks."""
    ious = []
    for label, gmask in gt_masks.items():
        pred = retrieved_masks.get(label)
        pred = np.zeros_like(gmask) if pred is None else np.asarray(pred) > 0.5
        g = np.asarray(gmask) > 0.5
        union = float((pred | g).sum())
        ious.append(float((pred & g).sum()) / union if union > 0 else 0.0)
    return 100.0 * float(np.mean(ious)) if ious else 0.0
