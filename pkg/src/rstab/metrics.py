"""Stabilization quality metrics: cropping ratio, distortion value,
stability score, PSNR.

Conventions (isolated here so alternates can be evaluated):
  * stability uses the energy in FFT bins 2-6 over bins 2-floor(N/2)
    (1-based, bin 1 = DC), per track and axis, averaged;
  * the sequence distortion value is the minimum over frames (worst case);
  * homographies are fit by Hartley-normalized DLT.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

PSNR_CAP = 99.0
MIN_TRACK_LEN = 16


@dataclass(frozen=True)
class TrackSet:
    """tracks: (n_tracks, n_frames, 2) pixel trajectories."""

    tracks: np.ndarray

    def __post_init__(self):
        t = np.asarray(self.tracks, dtype=np.float64)
        if t.ndim != 3 or t.shape[2] != 2:
            raise ValueError("tracks must be (n_tracks, n_frames, 2)")
        if t.shape[1] < MIN_TRACK_LEN:
            raise ValueError(f"tracks must cover >= {MIN_TRACK_LEN} frames")
        object.__setattr__(self, "tracks", t)


def cropping_ratio(masks) -> float:
    """Mean retained-area fraction over the sequence."""
    masks = list(masks)
    if not masks:
        raise ValueError("empty mask sequence")
    return float(np.mean([np.mean(np.asarray(m, dtype=np.float64)) for m in masks]))


def fit_homography(src: np.ndarray, dst: np.ndarray) -> np.ndarray:
    """Normalized DLT from >= 4 correspondences; returns 3x3 H with
    dst ~ H src (homogeneous)."""
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    if src.shape[0] < 4:
        raise ValueError("need at least 4 correspondences")

    def normalizer(pts):
        c = pts.mean(axis=0)
        d = np.sqrt(((pts - c) ** 2).sum(axis=1)).mean()
        if d < 1e-12:
            raise np.linalg.LinAlgError("degenerate point configuration")
        s = np.sqrt(2.0) / d
        t = np.array([[s, 0, -s * c[0]], [0, s, -s * c[1]], [0, 0, 1]])
        return t

    ts = normalizer(src)
    td = normalizer(dst)
    sh = np.column_stack([src, np.ones(len(src))]) @ ts.T
    dh = np.column_stack([dst, np.ones(len(dst))]) @ td.T
    a = []
    for (x, y, _), (u, v, _) in zip(sh, dh):
        a.append([-x, -y, -1, 0, 0, 0, u * x, u * y, u])
        a.append([0, 0, 0, -x, -y, -1, v * x, v * y, v])
    _, s, vt = np.linalg.svd(np.asarray(a))
    if s[-2] < 1e-10:
        raise np.linalg.LinAlgError("rank-deficient DLT system")
    h = vt[-1].reshape(3, 3)
    h = np.linalg.inv(td) @ h @ ts
    return h / h[2, 2]


def frame_distortion(h: np.ndarray) -> float:
    """Anisotropy of the affine part: ratio of the two singular values of
    the top-left 2x2 block of the normalized homography."""
    a = h[:2, :2] / h[2, 2]
    s = np.linalg.svd(a, compute_uv=False)
    return float(s[1] / s[0])


def distortion_value(correspondences) -> float:
    """correspondences: iterable of (input_points, output_points) per frame.
    Degenerate frames are skipped with a warning; the sequence value is the
    minimum over the remaining frames."""
    scores = []
    for i, (src, dst) in enumerate(correspondences):
        try:
            h = fit_homography(src, dst)
        except np.linalg.LinAlgError as exc:
            warnings.warn(f"frame {i}: degenerate correspondences ({exc}); skipped")
            continue
        scores.append(frame_distortion(h))
    if not scores:
        raise ValueError("no frame yielded a valid homography")
    return float(min(scores))


def stability_score(tracks: TrackSet) -> float:
    """Fraction of low-frequency motion energy, averaged over tracks and
    axes; constant tracks score 1 by convention."""
    t = tracks.tracks
    n = t.shape[1]
    half = n // 2
    centered = t - t.mean(axis=1, keepdims=True)
    spec = np.abs(np.fft.rfft(centered, axis=1)) ** 2  # (tracks, freq, 2)
    lo = spec[:, 1:6].sum(axis=1)  # bins 2-6 (1-based)
    tot = spec[:, 1 : half + 1].sum(axis=1)  # bins 2-floor(N/2)
    score = np.where(tot > 1e-12, lo / np.maximum(tot, 1e-300), 1.0)
    return float(score.mean())


def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"image shape mismatch: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * np.log10(1.0 / mse))


# ---------------------------------------------------------------- track building


def tracks_from_poses(poses, world_points, intrinsics) -> TrackSet:
    """Project a fixed set of world points through a pose sequence.

    Tracks follow the camera motion exactly, making them an oracle
    substitute for feature tracking on synthetic data."""
    from .geometry import project_world

    pts = np.asarray(world_points, dtype=np.float64)
    n = len(poses)
    tr = np.zeros((len(pts), n, 2))
    for i, p in enumerate(poses):
        uv, _, valid = project_world(pts, p, intrinsics)
        if not np.all(valid):
            raise ValueError("track point behind camera")
        tr[:, i, :] = uv
    return TrackSet(tr)


def default_track_points(dataset, grid: int = 5) -> np.ndarray:
    """World points unprojected from a sparse grid of the first frame."""
    from .geometry import unproject

    k = dataset.intrinsics
    fr = dataset.frames[0]
    us = np.linspace(4, k.width - 5, grid)
    vs = np.linspace(4, k.height - 5, grid)
    uu, vv = np.meshgrid(us, vs)
    pix = np.stack([uu.ravel(), vv.ravel()], axis=-1)
    from .features import sample_bilinear

    d, _ = sample_bilinear(fr.depth, pix)
    return unproject(pix, d, fr.pose, k)
