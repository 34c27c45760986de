"""Pixel-aligned gaussian construction and the persistent accumulated scene.

The scene is append-only across frames: each step contributes one contiguous
block of primitives, and history is never rewritten. A budget caps growth by
evicting the lowest-opacity members of the oldest frames.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from .autodiff import _sigmoid_stable
from .camera import quat_to_matrix
from .errors import CausalityError, ContractError, DataError, DimensionError

UNASSIGNED_ID = 0xFFFFFFFF
SCENE_MAGIC = b"S2GS"

SCALE_FLOOR = 1e-4


@dataclass
class GaussianPrimitive:
    """One anisotropic gaussian with appearance and semantic payload."""

    center: np.ndarray  # (3,) world meters
    scale: np.ndarray  # (3,) positive meters
    rotation: np.ndarray  # (4,) unit quaternion
    opacity: float  # in (0, 1)
    color: np.ndarray  # (3,) in [0, 1]
    semantic_logits: np.ndarray  # (C,)
    instance_id: int  # UNASSIGNED_ID when untracked
    birth_frame: int


class GaussianBatch:
    """Struct-of-arrays batch of primitives; behaves like a sequence."""

    FIELDS = ("centers", "scales", "quats", "opacities", "colors", "logits", "ids", "births")

    def __init__(self, centers, scales, quats, opacities, colors, logits, ids, births):
        self.centers = np.asarray(centers, dtype=np.float32).reshape(-1, 3)
        n = len(self.centers)
        self.scales = np.asarray(scales, dtype=np.float32).reshape(n, 3)
        self.quats = np.asarray(quats, dtype=np.float32).reshape(n, 4)
        self.opacities = np.asarray(opacities, dtype=np.float32).reshape(n)
        self.colors = np.asarray(colors, dtype=np.float32).reshape(n, 3)
        logits = np.asarray(logits, dtype=np.float32)
        channels = logits.shape[-1] if logits.ndim >= 2 else (logits.size // n if n else 1)
        self.logits = logits.reshape(n, channels)
        self.ids = np.asarray(ids, dtype=np.uint32).reshape(n)
        self.births = np.asarray(births, dtype=np.uint32).reshape(n)

    @classmethod
    def empty(cls, num_classes):
        z = np.zeros(0)
        return cls(z.reshape(0, 3), np.zeros((0, 3)), np.zeros((0, 4)), z, np.zeros((0, 3)),
                   np.zeros((0, num_classes)), z, z)

    def __len__(self):
        return len(self.centers)

    def __getitem__(self, i):
        return GaussianPrimitive(
            center=self.centers[i], scale=self.scales[i], rotation=self.quats[i],
            opacity=float(self.opacities[i]), color=self.colors[i],
            semantic_logits=self.logits[i], instance_id=int(self.ids[i]),
            birth_frame=int(self.births[i]),
        )

    def select(self, mask_or_idx):
        return GaussianBatch(*[getattr(self, f)[mask_or_idx] for f in self.FIELDS])

    @classmethod
    def concatenate(cls, batches):
        return cls(*[np.concatenate([getattr(b, f) for b in batches], axis=0) for f in cls.FIELDS])

    def nbytes(self):
        return sum(getattr(self, f).nbytes for f in self.FIELDS)


def back_project(depth, cam):
    """Lift a [H, W] z-depth map to world points [H, W, 3] through ``cam``."""
    depth = np.asarray(depth)
    if (depth <= 0).any():
        raise ContractError("back_project requires strictly positive depth")
    h, w = depth.shape
    us, vs = np.meshgrid(np.arange(w), np.arange(h))
    ray = np.stack(
        [(us + 0.5 - cam.cx) / cam.fx, (vs + 0.5 - cam.cy) / cam.fy, np.ones_like(depth, dtype=np.float64)],
        axis=-1,
    )
    pts_cam = ray * depth[..., None]
    return cam.world_from_cam(pts_cam.reshape(-1, 3)).reshape(h, w, 3).astype(np.float32)


def project(points, cam):
    """World points -> (px, py, z_cam) in continuous pixel coordinates.

    Pixel (u, v)'s center maps to (u + 0.5, v + 0.5); inverse of back_project.
    """
    pts = np.asarray(points, dtype=np.float64)
    flat = pts.reshape(-1, 3)
    pc = cam.cam_from_world(flat)
    z = pc[:, 2]
    px = cam.fx * pc[:, 0] / z + cam.cx
    py = cam.fy * pc[:, 1] / z + cam.cy
    shape = pts.shape[:-1]
    return px.reshape(shape), py.reshape(shape), z.reshape(shape)


def construct_gaussians(centers, attrs, semantics=None, ids=None, stride=1,
                        scene_extent=8.0, birth_frame=0):
    """Turn per-pixel head outputs into primitives, one per strided pixel.

    ``attrs`` is [H, W, 11]: raw scale (3), raw rotation (4), opacity logit,
    RGB in [0, 1]. Scale goes through softplus clamped to
    [1e-4, scene_extent / 4]; opacity through sigmoid.
    """
    centers = np.asarray(centers, dtype=np.float32)
    attrs = np.asarray(attrs, dtype=np.float32)
    h, w = centers.shape[:2]
    if attrs.shape[:2] != (h, w):
        raise DimensionError(f"attrs {attrs.shape[:2]} not pixel-aligned with centers {(h, w)}")
    off = stride // 2
    sel = np.s_[off::stride, off::stride]
    c = centers[sel].reshape(-1, 3)
    a = attrs[sel].reshape(-1, 11)
    scales = np.clip(_softplus(a[:, 0:3]), SCALE_FLOOR, scene_extent / 4.0)
    quats = a[:, 3:7]
    norms = np.linalg.norm(quats, axis=1, keepdims=True)
    quats = np.where(norms > 1e-8, quats / np.maximum(norms, 1e-8), [[1.0, 0.0, 0.0, 0.0]])
    opac = _sigmoid_stable(a[:, 7])
    rgb = np.clip(a[:, 8:11], 0.0, 1.0)
    if semantics is None:
        logits = np.zeros((len(c), 1), dtype=np.float32)
    else:
        semantics = np.asarray(semantics, dtype=np.float32)
        if semantics.shape[:2] != (h, w):
            raise DimensionError("semantics not pixel-aligned")
        logits = semantics[sel].reshape(len(c), -1)
    if ids is None:
        id_arr = np.full(len(c), UNASSIGNED_ID, dtype=np.uint32)
    else:
        ids = np.asarray(ids)
        if ids.shape != (h, w):
            raise DimensionError("ids not pixel-aligned")
        id_arr = ids[sel].reshape(-1).astype(np.uint32)
    births = np.full(len(c), birth_frame, dtype=np.uint32)
    return GaussianBatch(c, scales, quats, opac, rgb, logits, id_arr, births)


def _softplus(x):
    return np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))


class GaussianScene:
    """Persistent store: one contiguous primitive range per contributing frame."""

    def __init__(self, num_classes, budget=None):
        self.num_classes = num_classes
        self.budget = budget
        self.store = GaussianBatch.empty(num_classes)
        self.ranges = []  # (frame, start, end), ordered by frame

    def __len__(self):
        return len(self.store)

    def last_frame(self):
        return self.ranges[-1][0] if self.ranges else -1

    def accumulate(self, batch, frame):
        """Append ``batch`` as frame ``frame``; evict if over budget.

        Surviving primitives are never mutated. Eviction removes the
        lowest-opacity members of the oldest frames first.
        """
        if frame <= self.last_frame():
            raise CausalityError(
                f"frame {frame} does not advance the scene (last was {self.last_frame()})"
            )
        if len(batch) and not (batch.births == frame).all():
            batch = GaussianBatch(batch.centers, batch.scales, batch.quats,
                                  batch.opacities, batch.colors, batch.logits,
                                  batch.ids, np.full(len(batch), frame, np.uint32))
        start = len(self.store)
        self.store = GaussianBatch.concatenate([self.store, batch])
        self.ranges.append((frame, start, start + len(batch)))
        if self.budget is not None and len(self.store) > self.budget:
            self._evict(len(self.store) - self.budget)
        return self

    def _evict(self, overflow):
        keep = np.ones(len(self.store), dtype=bool)
        for frame, start, end in self.ranges:
            if overflow <= 0:
                break
            size = end - start
            k = min(overflow, size)
            local = np.argsort(self.store.opacities[start:end], kind="stable")[:k]
            keep[start + local] = False
            overflow -= k
        self.store = self.store.select(keep)
        rebuilt, cursor = [], 0
        for frame, start, end in self.ranges:
            survivors = int(keep[start:end].sum())
            if survivors:
                rebuilt.append((frame, cursor, cursor + survivors))
                cursor += survivors
        self.ranges = rebuilt

    def frame_slice(self, frame):
        for f, start, end in self.ranges:
            if f == frame:
                return self.store.select(np.arange(start, end))
        raise KeyError(f"no primitives recorded for frame {frame}")

    def nbytes(self):
        return self.store.nbytes()

    # -- binary export ------------------------------------------------

    def save(self, path):
        s = self.store
        n, c = len(s), s.logits.shape[1]
        rec = np.dtype(
            [("center", "<f4", 3), ("scale", "<f4", 3), ("quat", "<f4", 4),
             ("opacity", "<f4"), ("rgb", "<f4", 3), ("logits", "<f4", (c,)),
             ("id", "<u4"), ("birth", "<u4")]
        )
        table = np.zeros(n, dtype=rec)
        table["center"], table["scale"], table["quat"] = s.centers, s.scales, s.quats
        table["opacity"], table["rgb"], table["logits"] = s.opacities, s.colors, s.logits
        table["id"], table["birth"] = s.ids, s.births
        with open(path, "wb") as fh:
            fh.write(SCENE_MAGIC)
            fh.write(struct.pack("<QH", n, c))
            fh.write(table.tobytes())

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            if fh.read(4) != SCENE_MAGIC:
                raise DataError(f"{path}: not a gaussian scene file")
            n, c = struct.unpack("<QH", fh.read(10))
            rec = np.dtype(
                [("center", "<f4", 3), ("scale", "<f4", 3), ("quat", "<f4", 4),
                 ("opacity", "<f4"), ("rgb", "<f4", 3), ("logits", "<f4", (c,)),
                 ("id", "<u4"), ("birth", "<u4")]
            )
            table = np.frombuffer(fh.read(n * rec.itemsize), dtype=rec, count=n)
        scene = cls(num_classes=c)
        scene.store = GaussianBatch(
            table["center"], table["scale"], table["quat"], table["opacity"],
            table["rgb"], table["logits"].reshape(n, c), table["id"], table["birth"],
        )
        births = scene.store.births
        scene.ranges = []
        for frame in np.unique(births):
            idx = np.nonzero(births == frame)[0]
            scene.ranges.append((int(frame), int(idx[0]), int(idx[-1]) + 1))
        return scene


def rotations_to_matrices(quats):
    """Batch of unit quaternions -> [N, 3, 3] rotation matrices."""
    q = np.asarray(quats, dtype=np.float64)
    if q.ndim == 1:
        return quat_to_matrix(q)[None]
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    m = np.empty((len(q), 3, 3), dtype=np.float64)
    m[:, 0, 0] = 1 - 2 * (y * y + z * z)
    m[:, 0, 1] = 2 * (x * y - w * z)
    m[:, 0, 2] = 2 * (x * z + w * y)
    m[:, 1, 0] = 2 * (x * y + w * z)
    m[:, 1, 1] = 1 - 2 * (x * x + z * z)
    m[:, 1, 2] = 2 * (y * z - w * x)
    m[:, 2, 0] = 2 * (x * z - w * y)
    m[:, 2, 1] = 2 * (y * z + w * x)
    m[:, 2, 2] = 1 - 2 * (x * x + y * y)
    return m
