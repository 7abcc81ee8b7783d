"""Camera trajectory smoothing.

Translations are convolved with a truncated, renormalized Gaussian kernel
(reflect padding at the boundaries). Rotations use a hemisphere-aligned,
kernel-weighted quaternion mean, renormalized to unit length; accurate for
the small angular spreads typical of hand shake.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Pose, quat_angle, quat_conj, quat_mul, quat_normalize


@dataclass(frozen=True)
class PoseSequence:
    poses: tuple
    timestamps: tuple

    def __post_init__(self):
        if len(self.poses) == 0:
            raise ValueError("empty pose sequence")
        if len(self.poses) != len(self.timestamps):
            raise ValueError("poses/timestamps length mismatch")
        ts = self.timestamps
        if any(b <= a for a, b in zip(ts, ts[1:])):
            raise ValueError("timestamps must be strictly increasing")
        object.__setattr__(self, "poses", tuple(self.poses))
        object.__setattr__(self, "timestamps", tuple(int(t) for t in ts))

    def __len__(self):
        return len(self.poses)


def gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    """Symmetric normalized kernel of odd length, truncated at +-3 sigma
    capped by the window half-width."""
    if window % 2 != 1 or window < 1:
        raise ValueError("window must be an odd integer >= 1")
    if window == 1:
        return np.array([1.0])
    if sigma <= 0:
        raise ValueError("sigma must be positive for window > 1")
    half = min(window // 2, int(np.ceil(3 * sigma)))
    offsets = np.arange(-half, half + 1)
    w = np.exp(-0.5 * (offsets / sigma) ** 2)
    return w / w.sum()


def _reflect_index(i: int, n: int) -> int:
    # mirror without repeating the edge sample, like np.pad mode="reflect"
    if n == 1:
        return 0
    period = 2 * (n - 1)
    i = i % period
    return i if i < n else period - i


def smooth_trajectory(seq: PoseSequence, window: int, sigma: float) -> PoseSequence:
    """Gaussian-smooth a pose sequence; same length and timestamps out."""
    kernel = gaussian_kernel(window, sigma if window > 1 else 1.0)
    half = len(kernel) // 2
    n = len(seq)
    trans = np.array([p.translation for p in seq.poses])
    quats = np.array([p.rotation for p in seq.poses])

    out = []
    for i in range(n):
        idx = np.array([_reflect_index(i + o, n) for o in range(-half, half + 1)])
        t_sm = kernel @ trans[idx]
        center = quats[_reflect_index(i, n)]
        q_win = quats[idx].copy()
        flip = q_win @ center < 0
        q_win[flip] *= -1.0
        q_sm = quat_normalize(kernel @ q_win)
        out.append(Pose(q_sm, t_sm))
    return PoseSequence(tuple(out), seq.timestamps)


def jerk_energy(seq: PoseSequence) -> float:
    """Sum of squared translation second differences plus squared geodesic
    second differences of rotation; 0 for constant or linear paths."""
    if len(seq) < 3:
        raise ValueError("need at least 3 poses")
    trans = np.array([p.translation for p in seq.poses])
    d2 = trans[2:] - 2 * trans[1:-1] + trans[:-2]
    e = float(np.sum(d2 * d2))
    quats = [p.rotation for p in seq.poses]
    for i in range(1, len(quats) - 1):
        step_fwd = quat_mul(quats[i + 1], quat_conj(quats[i]))
        step_bwd = quat_mul(quats[i], quat_conj(quats[i - 1]))
        diff = quat_mul(step_fwd, quat_conj(step_bwd))
        e += quat_angle(diff) ** 2
    return e
