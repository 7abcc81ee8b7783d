"""Pinhole camera model, rigid poses and the projection chain.

Conventions used everywhere in this package:

* The camera looks down +z; image u grows to the right, v grows downward.
* A ``Pose`` is camera-to-world: ``X_world = R @ X_cam + t`` where ``t`` is
  the camera center expressed in world coordinates.
* Quaternions are stored ``(w, x, y, z)`` with unit norm.

All functions accept either single points (shape ``(2,)``) or batches
(shape ``(N, 2)``) and are pure.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole intrinsics shared by every frame of a video."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    def matrix(self) -> np.ndarray:
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]]
        )


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    n = np.linalg.norm(q)
    if n == 0 or not np.isfinite(n):
        raise ValueError("cannot normalize zero/non-finite quaternion")
    return q / n


def quat_mul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    aw, ax, ay, az = a
    bw, bx, by, bz = b
    return np.array(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ]
    )


def quat_conj(q: np.ndarray) -> np.ndarray:
    return np.array([q[0], -q[1], -q[2], -q[3]])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    w, x, y, z = quat_normalize(q)
    return np.array(
        [
            [1 - 2 * (y * y + z * z), 2 * (x * y - z * w), 2 * (x * z + y * w)],
            [2 * (x * y + z * w), 1 - 2 * (x * x + z * z), 2 * (y * z - x * w)],
            [2 * (x * z - y * w), 2 * (y * z + x * w), 1 - 2 * (x * x + y * y)],
        ]
    )


def quat_from_matrix(m: np.ndarray) -> np.ndarray:
    """Shepperd's method; returns (w, x, y, z) with w >= 0."""
    m = np.asarray(m, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = np.array(
            [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s,
             (m[1, 0] - m[0, 1]) / s]
        )
    else:
        i = int(np.argmax(np.diag(m)))
        j, k = (i + 1) % 3, (i + 2) % 3
        s = np.sqrt(max(m[i, i] - m[j, j] - m[k, k] + 1.0, 0.0)) * 2
        q = np.empty(4)
        q[0] = (m[k, j] - m[j, k]) / s
        q[1 + i] = 0.25 * s
        q[1 + j] = (m[j, i] + m[i, j]) / s
        q[1 + k] = (m[k, i] + m[i, k]) / s
    if q[0] < 0:
        q = -q
    return quat_normalize(q)


def quat_from_rotvec(rv: np.ndarray) -> np.ndarray:
    rv = np.asarray(rv, dtype=np.float64)
    angle = np.linalg.norm(rv)
    if angle < 1e-12:
        return np.array([1.0, 0.5 * rv[0], 0.5 * rv[1], 0.5 * rv[2]]) / np.sqrt(
            1.0 + 0.25 * angle * angle
        )
    axis = rv / angle
    return np.concatenate([[np.cos(angle / 2)], np.sin(angle / 2) * axis])


def quat_angle(q: np.ndarray) -> float:
    """Rotation angle in radians of a unit quaternion."""
    w = min(1.0, abs(float(q[0])))
    return 2.0 * np.arccos(w)


@dataclass(frozen=True)
class Pose:
    """Camera-to-world rigid transform: rotation quaternion + camera center."""

    rotation: np.ndarray  # (4,) unit quaternion (w, x, y, z)
    translation: np.ndarray  # (3,) camera center in world coordinates

    def __post_init__(self):
        q = np.asarray(self.rotation, dtype=np.float64)
        t = np.asarray(self.translation, dtype=np.float64)
        if not (np.all(np.isfinite(q)) and np.all(np.isfinite(t))):
            raise ValueError("non-finite pose")
        if abs(np.linalg.norm(q) - 1.0) > 1e-6:
            q = quat_normalize(q)
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @staticmethod
    def identity() -> "Pose":
        return Pose(np.array([1.0, 0, 0, 0]), np.zeros(3))

    def rot_matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def matrix(self) -> np.ndarray:
        """4x4 camera-to-world homogeneous matrix."""
        m = np.eye(4)
        m[:3, :3] = self.rot_matrix()
        m[:3, 3] = self.translation
        return m

    def inverse(self) -> "Pose":
        qi = quat_conj(self.rotation)
        return Pose(qi, -quat_to_matrix(qi) @ self.translation)

    def compose(self, other: "Pose") -> "Pose":
        """self o other as transforms: (self.compose(other))(X) = self(other(X))."""
        return Pose(
            quat_mul(self.rotation, other.rotation),
            self.rot_matrix() @ other.translation + self.translation,
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map camera coordinates to world coordinates (batched over rows)."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rot_matrix().T + self.translation

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        """Map world coordinates into this camera's frame."""
        pts = np.asarray(points, dtype=np.float64)
        return (pts - self.translation) @ self.rot_matrix()


def relative(src: Pose, dst: Pose) -> Pose:
    """Transform taking src's frame into dst's frame: dst o src^-1."""
    return dst.compose(src.inverse())


def _as_batch(x: np.ndarray) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        return x[None, :], True
    return x, False


def unproject(x, depth, pose: Pose, k: Intrinsics) -> np.ndarray:
    """Lift pixel(s) at given depth(s) into world coordinates.

    x: (2,) or (N, 2) sub-pixel coordinates; depth: scalar or (N,).
    """
    pts, single = _as_batch(x)
    d = np.atleast_1d(np.asarray(depth, dtype=np.float64))
    if np.any(d <= 0):
        raise ValueError("depth must be positive")
    if not (np.all(np.isfinite(pts)) and np.all(np.isfinite(d))):
        raise ValueError("non-finite input to unproject")
    cam = np.empty((pts.shape[0], 3))
    cam[:, 0] = (pts[:, 0] - k.cx) / k.fx * d
    cam[:, 1] = (pts[:, 1] - k.cy) / k.fy * d
    cam[:, 2] = d
    world = pose.apply(cam)
    return world[0] if single else world


def project_world(points, pose: Pose, k: Intrinsics):
    """Project world point(s) into a camera.

    Returns (uv, depth, valid); valid is False where the point lies at or
    behind the camera (depth <= 0). In-bounds checks are the caller's job.
    """
    pts, single = _as_batch(points)
    cam = pose.apply_inverse(pts)
    z = cam[:, 2]
    valid = z > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        u = k.fx * cam[:, 0] / z + k.cx
        v = k.fy * cam[:, 1] / z + k.cy
    uv = np.stack([u, v], axis=-1)
    uv[~valid] = 0.0  # keep values finite on invalid rows
    if single:
        return uv[0], float(z[0]), bool(valid[0])
    return uv, z, valid


def project(x, depth, src_pose: Pose, dst_pose: Pose, k: Intrinsics):
    """Reproject pixel(s) seen at `depth` in src camera into dst camera.

    Returns (uv_dst, depth_in_dst, valid) where depth_in_dst is the z
    coordinate in the dst camera frame.
    """
    world = unproject(x, depth, src_pose, k)
    return project_world(world, dst_pose, k)
