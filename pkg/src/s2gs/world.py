"""Deterministic toy scenes with exact ground truth.

Scenes are themselves gaussian compositions, so the renderer doubles as the
ground-truth engine: RGB, depth, instance and semantic masks all come from
rendering the generating gaussians. Cameras follow either a fixed orbit or a
progressively extrapolating sweep whose frustum always grows past the
previous frame's view.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from . import formats
from .camera import CameraParams, look_at
from .errors import DataError, GenerationError
from .gaussians import GaussianBatch, GaussianScene
from .renderer import render

CLASS_NAMES = ("crate", "ball", "lamp", "plant", "chair", "screen")
CLASS_COLORS = np.array(
    [
        [0.85, 0.15, 0.12],
        [0.10, 0.75, 0.20],
        [0.92, 0.80, 0.10],
        [0.15, 0.25, 0.85],
        [0.80, 0.15, 0.80],
        [0.10, 0.80, 0.80],
    ],
    dtype=np.float32,
)
NUM_CLASSES = len(CLASS_NAMES)
LOGIT_GAIN = 10.0  # one-hot stamp magnitude for GT semantic channels


@dataclass
class ObjectSpec:
    class_id: int  # 1-based
    shape: str  # "sphere" | "box"
    position: np.ndarray
    size: float
    color: np.ndarray


@dataclass
class SceneSpec:
    seed: int
    n_objects: int = 0  # 0 -> sampled in [2, 5]
    room_extent: float = 8.0
    trajectory: str = "orbit"  # "orbit" | "sweep"
    objects: list = field(default_factory=list)

    def __post_init__(self):
        rng = np.random.default_rng(self.seed)
        if not self.objects:
            count = self.n_objects or int(rng.integers(2, 6))
            self.objects = _place_objects(rng, count)
            self.n_objects = count


def _place_objects(rng, count, tries=1000):
    objects = []
    for _ in range(count):
        for attempt in range(tries):
            size = float(rng.uniform(0.35, 0.6))
            pos = np.array(
                [rng.uniform(-1.2, 1.2), rng.uniform(-0.5, 0.7), rng.uniform(-1.2, 1.2)],
                dtype=np.float32,
            )
            ok = all(
                np.linalg.norm(pos - o.position) >= 0.5 * (size + o.size) + 0.35
                for o in objects
            )
            if ok:
                break
        else:
            raise GenerationError(f"could not place object {len(objects)} after {tries} tries")
        class_id = int(rng.integers(1, NUM_CLASSES + 1))
        shape = "sphere" if rng.random() < 0.5 else "box"
        color = np.clip(CLASS_COLORS[class_id - 1] + rng.uniform(-0.12, 0.12, 3), 0.05, 0.95)
        objects.append(ObjectSpec(class_id, shape, pos, size, color.astype(np.float32)))
    return objects


def _object_gaussians(rng, obj, instance_id, offset=None):
    """Cluster of 50-200 gaussians filling the object's shape.

    Opacity is high and footprints are small relative to the sampled extent,
    so the object behaves like a crisp convex solid: its silhouette is nearly
    the same 3D hull from every viewpoint.
    """
    k = int(rng.integers(120, 201))
    if obj.shape == "sphere":
        raw = rng.normal(size=(k, 3))
        raw /= np.linalg.norm(raw, axis=1, keepdims=True)
        pts = raw * rng.uniform(0.0, 1.0, (k, 1)) ** (1 / 3) * (0.85 * obj.size)
    else:
        pts = rng.uniform(-0.72, 0.72, (k, 3)) * obj.size
    centers = pts + (obj.position if offset is None else offset)
    scales = rng.uniform(0.10, 0.16, (k, 3)) * obj.size
    quats = rng.normal(size=(k, 4))
    quats /= np.linalg.norm(quats, axis=1, keepdims=True)
    opac = rng.uniform(0.9, 0.96, k)
    colors = np.clip(obj.color + rng.uniform(-0.06, 0.06, (k, 3)), 0.0, 1.0)
    logits = np.zeros((k, NUM_CLASSES), dtype=np.float32)
    logits[:, obj.class_id - 1] = LOGIT_GAIN
    ids = np.full(k, instance_id, dtype=np.uint32)
    return GaussianBatch(centers, scales, quats, opac, colors, logits, ids, np.zeros(k))


def build_ground_truth_scene(spec, offsets=None):
    """Static gaussian scene for all objects (instance ids are 1-based)."""
    rng = np.random.default_rng(spec.seed + 1)
    batches = []
    for i, obj in enumerate(spec.objects):
        off = None if offsets is None else offsets[i]
        batches.append(_object_gaussians(rng, obj, i + 1, off))
    scene = GaussianScene(num_classes=NUM_CLASSES)
    scene.accumulate(GaussianBatch.concatenate(batches), frame=0)
    return scene


def trajectory_camera(spec, t, total, image_size=64):
    """Camera for frame t: orbit keeps radius fixed, sweep expands outward."""
    f = image_size * 1.0
    if spec.trajectory == "sweep":
        angle = -0.7 + 0.16 * t
        radius = 3.4 + 0.06 * t
        height = 0.8 + 0.05 * t
    else:
        angle = 2.0 * math.pi * t / max(total, 8)
        radius = 3.8
        height = 1.0
    eye = np.array([radius * math.sin(angle), height, -radius * math.cos(angle)])
    quat, trans = look_at(eye, np.zeros(3))
    return CameraParams(fx=f, fy=f, cx=image_size / 2.0, cy=image_size / 2.0, quat=quat, trans=trans)


@dataclass
class FrameBundle:
    """One time step: observation plus oracle/teacher signals."""

    index: int
    rgb: np.ndarray  # [H, W, 3] float32
    depth: np.ndarray  # [H, W] z-depth, 0 where invalid
    valid: np.ndarray  # [H, W] bool
    cam: CameraParams
    instances: np.ndarray  # [H, W] uint32, 0 = background
    semantics: np.ndarray  # [H, W] uint16, 0 = background

    def nbytes(self):
        return (self.rgb.nbytes + self.depth.nbytes + self.valid.nbytes
                + self.instances.nbytes + self.semantics.nbytes)

    def instance_classes(self):
        """instance id -> majority semantic class under its mask."""
        out = {}
        for iid in np.unique(self.instances):
            if iid == 0:
                continue
            sem = self.semantics[self.instances == iid]
            vals, counts = np.unique(sem[sem > 0], return_counts=True)
            if len(vals):
                out[int(iid)] = int(vals[np.argmax(counts)])
        return out


def _bundle_from_render(index, out, cam, class_of_instance, alpha_gate=0.5):
    inst = out.instance_map(alpha_gate)
    # semantics follow the instance map exactly (one class per instance)
    lut = np.zeros(int(inst.max()) + 1 if inst.size else 1, dtype=np.uint16)
    for iid, cls in class_of_instance.items():
        if iid <= inst.max():
            lut[iid] = cls
    sem = lut[inst]
    # teacher depth: dominant-surface depth, never a cross-object mixture,
    # gated like the masks so depth coverage matches mask coverage exactly
    depth = out.surface_depth_map(alpha_gate).astype(np.float32)
    valid = depth > 0
    return FrameBundle(
        index=index, rgb=out.color.copy(), depth=depth, valid=valid, cam=cam,
        instances=inst, semantics=sem,
    )


def generate(spec, total, image_size=64):
    """Deterministic stream of FrameBundles for a static scene."""
    if total < 1:
        raise GenerationError("need at least one frame")
    scene = build_ground_truth_scene(spec)
    classes = {i + 1: obj.class_id for i, obj in enumerate(spec.objects)}
    bundles = []
    for t in range(total):
        cam = trajectory_camera(spec, t, total, image_size)
        out = render(scene, cam, image_size)
        bundles.append(_bundle_from_render(t, out, cam, classes))
    return bundles


def occlusion_scenario(seed, total=16, occluded_frames=3, image_size=64):
    """Two same-class objects swap sides; one spends K middle frames hidden.

    The far object tracks the near object's line of sight during the hidden
    stretch, guaranteeing full occlusion exactly there.
    """
    rng = np.random.default_rng(seed)
    class_id = int(rng.integers(1, NUM_CLASSES + 1))
    near_z, far_z = 0.4, 1.6
    size_a, size_b = 0.55, 0.4
    color_a = np.clip(CLASS_COLORS[class_id - 1] + rng.uniform(-0.12, 0.12, 3), 0.05, 0.95)
    color_b = np.clip(CLASS_COLORS[class_id - 1] + rng.uniform(-0.12, 0.12, 3), 0.05, 0.95)
    obj_a = ObjectSpec(class_id, "sphere", np.zeros(3), size_a, color_a.astype(np.float32))
    obj_b = ObjectSpec(class_id, "sphere", np.zeros(3), size_b, color_b.astype(np.float32))
    spec = SceneSpec(seed=seed, n_objects=2, objects=[obj_a, obj_b])

    f = image_size * 1.0
    eye = np.array([0.0, 0.3, -4.0])
    quat, trans = look_at(eye, np.array([0.0, 0.2, 1.0]))
    cam = CameraParams(fx=f, fy=f, cx=image_size / 2.0, cy=image_size / 2.0, quat=quat, trans=trans)

    t0 = (total - occluded_frames) // 2
    bundles = []
    for t in range(total):
        frac = t / max(total - 1, 1)
        ax = -0.9 + 1.8 * frac
        a_pos = np.array([ax, 0.0, near_z], dtype=np.float32)
        if occluded_frames > 0 and t0 <= t < t0 + occluded_frames:
            # align the far object with the near object's viewing ray
            ratio = (far_z - eye[2]) / (near_z - eye[2])
            b_pos = np.array(
                [eye[0] + (ax - eye[0]) * ratio, eye[1] + (0.0 - eye[1]) * ratio, far_z],
                dtype=np.float32,
            )
        else:
            bx = 0.9 - 1.8 * frac
            b_pos = np.array([bx, 0.55, far_z], dtype=np.float32)
        scene = build_ground_truth_scene(spec, offsets=[a_pos, b_pos])
        out = render(scene, cam, image_size)
        bundles.append(_bundle_from_render(t, out, cam, {1: class_id, 2: class_id}))
    return bundles


# -- dataset directory layout ------------------------------------------------


def export_dataset(directory, bundles, spec=None):
    os.makedirs(directory, exist_ok=True)
    cam_rows = ["frame,fx,fy,cx,cy,qw,qx,qy,qz,tx,ty,tz"]
    for b in bundles:
        formats.write_ppm(os.path.join(directory, f"frame_{b.index:04d}.ppm"), b.rgb)
        formats.write_depth(os.path.join(directory, f"depth_{b.index:04d}.s2dp"), b.depth)
        formats.write_pgm16(os.path.join(directory, f"inst_{b.index:04d}.pgm"), b.instances)
        formats.write_pgm16(os.path.join(directory, f"sem_{b.index:04d}.pgm"), b.semantics)
        c = b.cam
        vals = [c.fx, c.fy, c.cx, c.cy, *c.quat.tolist(), *c.trans.tolist()]
        cam_rows.append(f"{b.index}," + ",".join(f"{v:.8f}" for v in vals))
    with open(os.path.join(directory, "cameras.csv"), "w", encoding="ascii") as fh:
        fh.write("\n".join(cam_rows) + "\n")
    with open(os.path.join(directory, "spec.txt"), "w", encoding="ascii") as fh:
        fh.write(f"frames={len(bundles)}\n")
        if spec is not None:
            fh.write(f"seed={spec.seed}\n")
            fh.write(f"trajectory={spec.trajectory}\n")
            fh.write(f"objects={len(spec.objects)}\n")


class DatasetReader:
    """Streaming reader over an exported directory; counts frame reads."""

    def __init__(self, directory):
        self.directory = directory
        self.frame_reads = 0
        spec_path = os.path.join(directory, "spec.txt")
        if not os.path.exists(spec_path):
            raise DataError(f"{directory}: missing spec.txt")
        self.meta = {}
        with open(spec_path, "r", encoding="ascii") as fh:
            for line in fh:
                if "=" in line:
                    k, v = line.strip().split("=", 1)
                    self.meta[k] = v
        self.total = int(self.meta["frames"])
        self.cams = {}
        with open(os.path.join(directory, "cameras.csv"), "r", encoding="ascii") as fh:
            next(fh)
            for line in fh:
                vals = line.strip().split(",")
                idx = int(vals[0])
                nums = [float(v) for v in vals[1:]]
                self.cams[idx] = CameraParams(
                    fx=nums[0], fy=nums[1], cx=nums[2], cy=nums[3],
                    quat=np.array(nums[4:8], dtype=np.float32),
                    trans=np.array(nums[8:11], dtype=np.float32),
                )

    def read_frame(self, t):
        self.frame_reads += 1
        d = self.directory
        rgb = formats.read_ppm(os.path.join(d, f"frame_{t:04d}.ppm"))
        depth = formats.read_depth(os.path.join(d, f"depth_{t:04d}.s2dp"))
        inst = formats.read_pgm16(os.path.join(d, f"inst_{t:04d}.pgm"))
        sem = formats.read_pgm16(os.path.join(d, f"sem_{t:04d}.pgm")).astype(np.uint16)
        return FrameBundle(
            index=t, rgb=rgb, depth=depth, valid=depth > 0, cam=self.cams[t],
            instances=inst, semantics=sem,
        )

    def __iter__(self):
        for t in range(self.total):
            yield self.read_frame(t)
