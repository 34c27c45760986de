"""Pinhole cameras and quaternion helpers.

Conventions: world-from-camera pose (x_world = R x_cam + t), camera frame is
x-right / y-down / z-forward, quaternions are (w, x, y, z) unit-norm.
Continuous image coordinates put the center of pixel (u, v) at
(u + 0.5, v + 0.5); back-projection and projection both use this offset.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ContractError


def quat_normalize(q):
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0.0:
        raise ContractError("cannot normalize a zero quaternion")
    return (q / n).astype(np.float32)


def quat_to_matrix(q):
    w, x, y, z = np.asarray(q, dtype=np.float64)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)],
            [2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)],
            [2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)],
        ],
        dtype=np.float64,
    )


def matrix_to_quat(m):
    m = np.asarray(m, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array([0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s])
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = np.array([(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s])
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = np.array([(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s])
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = np.array([(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s])
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


@dataclass
class CameraParams:
    """Intrinsics in pixels plus a world-from-camera rigid pose."""

    fx: float
    fy: float
    cx: float
    cy: float
    quat: np.ndarray  # (w, x, y, z), unit
    trans: np.ndarray  # meters

    def __post_init__(self):
        self.quat = np.asarray(self.quat, dtype=np.float32)
        self.trans = np.asarray(self.trans, dtype=np.float32)
        if self.fx <= 0 or self.fy <= 0:
            raise ContractError(f"focal lengths must be positive, got fx={self.fx}, fy={self.fy}")
        if abs(float(np.linalg.norm(self.quat)) - 1.0) > 1e-5:
            raise ContractError("pose quaternion must be unit-norm")

    def rotation(self):
        return quat_to_matrix(self.quat)

    def world_from_cam(self, pts_cam):
        return pts_cam @ self.rotation().T + np.asarray(self.trans, dtype=np.float64)

    def cam_from_world(self, pts_world):
        return (np.asarray(pts_world, dtype=np.float64) - np.asarray(self.trans, dtype=np.float64)) @ self.rotation()

    def as_vector(self, width, height):
        """[fx/W, fy/H, cx/W, cy/H, quat, trans] residual layout (11 values)."""
        return np.concatenate(
            [
                np.array([self.fx / width, self.fy / height, self.cx / width, self.cy / height]),
                self.quat,
                self.trans,
            ]
        ).astype(np.float32)


def look_at(eye, target, up=(0.0, 1.0, 0.0)):
    """World-from-camera pose with +z pointing from eye toward target."""
    eye = np.asarray(eye, dtype=np.float64)
    fwd = np.asarray(target, dtype=np.float64) - eye
    n = np.linalg.norm(fwd)
    if n == 0:
        raise ContractError("look_at with coincident eye and target")
    fwd /= n
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(up, fwd)
    if np.linalg.norm(right) < 1e-8:
        right = np.cross(np.array([0.0, 0.0, 1.0]), fwd)
    right /= np.linalg.norm(right)
    down = np.cross(fwd, right)
    rot = np.stack([right, down, fwd], axis=1)
    return matrix_to_quat(rot), eye.astype(np.float32)
