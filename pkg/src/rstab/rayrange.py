"""Adaptive per-pixel ray ranges.

Neighboring depth maps are lifted to 3D, projected into the target view,
forward-splatted onto the pixel grid with bilinear mass weights, and
aggregated into a temporally weighted mean/deviation interval
[M - S, M + S] per pixel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import Intrinsics, Pose, project_world, unproject


@dataclass
class WarpedDepth:
    depth: np.ndarray  # (H, W); meaningful only where weight > 0
    weight: np.ndarray  # (H, W) accumulated splat mass


@dataclass(frozen=True)
class TemporalWeights:
    offsets: np.ndarray  # t - center, one entry per window member
    weights: np.ndarray  # normalized, sum 1
    lam: float
    center: int


@dataclass
class RayRangeMap:
    near: np.ndarray  # (H, W)
    far: np.ndarray  # (H, W)
    valid: np.ndarray  # (H, W) bool


def forward_warp_depth(depth: np.ndarray, pose_t: Pose, pose_target: Pose,
                       k: Intrinsics):
    """Lift every source pixel at its depth and project it into the target
    camera. Returns (positions (M, 2), depths (M,)); samples that land
    behind the target camera are dropped."""
    d = np.asarray(depth, dtype=np.float64)
    if np.any(d <= 0):
        raise ValueError("depth map must be positive")
    h, w = d.shape
    u, v = np.meshgrid(np.arange(w), np.arange(h))
    pix = np.stack([u.ravel(), v.ravel()], axis=-1).astype(np.float64)
    world = unproject(pix, d.ravel(), pose_t, k)
    uv, z, valid = project_world(world, pose_target, k)
    return uv[valid], z[valid]


def splat(positions: np.ndarray, depths: np.ndarray, h: int, w: int) -> WarpedDepth:
    """Bilinear forward splat: each sample spreads its depth onto the <= 4
    surrounding integer pixels with weight (1 - |du|) (1 - |dv|); per-pixel
    depth is the mass-weighted average."""
    num = np.zeros((h, w))
    den = np.zeros((h, w))
    if len(positions):
        u = positions[:, 0]
        v = positions[:, 1]
        i0 = np.floor(u).astype(np.int64)
        j0 = np.floor(v).astype(np.int64)
        fu = u - i0
        fv = v - j0
        d = np.asarray(depths, dtype=np.float64)
        for di, dj, wgt in (
            (0, 0, (1 - fu) * (1 - fv)),
            (1, 0, fu * (1 - fv)),
            (0, 1, (1 - fu) * fv),
            (1, 1, fu * fv),
        ):
            ii = i0 + di
            jj = j0 + dj
            ok = (ii >= 0) & (ii < w) & (jj >= 0) & (jj < h) & (wgt > 0)
            np.add.at(den, (jj[ok], ii[ok]), wgt[ok])
            np.add.at(num, (jj[ok], ii[ok]), wgt[ok] * d[ok])
    depth = np.zeros((h, w))
    covered = den > 0
    depth[covered] = num[covered] / den[covered]
    return WarpedDepth(depth, den)


def temporal_weights(window, center: int, lam: float,
                     literal_form: bool = False) -> TemporalWeights:
    """Normalized per-frame weights over a temporal window.

    Default form is exp(-lam * |t - center|), favoring frames temporally
    close to the target. `literal_form` switches to exp(lam * (t - center)),
    which grows toward future frames; kept for comparison."""
    offsets = np.asarray([t - center for t in window], dtype=np.float64)
    if offsets.size == 0:
        raise ValueError("empty temporal window")
    if literal_form:
        logits = lam * offsets
    else:
        logits = -lam * np.abs(offsets)
    logits -= logits.max()
    wgt = np.exp(logits)
    wgt /= wgt.sum()
    return TemporalWeights(offsets, wgt, lam, center)


def _fill_invalid(near, far, valid, fallback):
    """Iterative 3x3 dilation of valid ranges into invalid pixels; anything
    still uncovered gets the global fallback range."""
    near = near.copy()
    far = far.copy()
    filled = valid.copy()
    h, w = valid.shape
    while not filled.all():
        padded = np.pad(filled, 1)
        pn = np.pad(np.where(filled, near, 0.0), 1)
        pf = np.pad(np.where(filled, far, 0.0), 1)
        cnt = np.zeros((h, w))
        sn = np.zeros((h, w))
        sf = np.zeros((h, w))
        for di in range(3):
            for dj in range(3):
                cnt += padded[di : di + h, dj : dj + w]
                sn += pn[di : di + h, dj : dj + w]
                sf += pf[di : di + h, dj : dj + w]
        grow = ~filled & (cnt > 0)
        if not grow.any():
            near[~filled] = fallback[0]
            far[~filled] = fallback[1]
            break
        near[grow] = sn[grow] / cnt[grow]
        far[grow] = sf[grow] / cnt[grow]
        filled |= grow
    return near, far


def aggregate_ray_range(warped: list, tw: TemporalWeights,
                        s_min: float | None = None,
                        s_min_rel: float = 0.02,
                        eps: float = 1e-6) -> RayRangeMap:
    """Weighted mean/deviation interval from the splatted depth maps.

    Per pixel only frames with splat mass > 0 contribute; their temporal
    weights are renormalized. The deviation is floored at max(s_min,
    s_min_rel * mean) so a zero-variance range never collapses to a point.
    """
    if not warped:
        raise ValueError("empty temporal window")
    h, w = warped[0].depth.shape
    depths = np.stack([wd.depth for wd in warped])  # (V, H, W)
    mass = np.stack([wd.weight for wd in warped]) > 0
    wgt = tw.weights[:, None, None] * mass
    total = wgt.sum(axis=0)
    valid = total > 0
    if not valid.any():
        raise ValueError("no frame contributes any depth sample")
    with np.errstate(divide="ignore", invalid="ignore"):
        wgt_n = np.where(valid, wgt / np.where(total > 0, total, 1.0), 0.0)
    mean = (wgt_n * depths).sum(axis=0)
    var = (wgt_n * (depths - mean) ** 2).sum(axis=0)
    sdev = np.sqrt(np.maximum(var, 0.0))
    floor = s_min_rel * mean
    if s_min is not None:
        floor = np.maximum(floor, s_min)
    sdev = np.maximum(sdev, floor)
    near = np.maximum(eps, mean - sdev)
    far = mean + sdev

    contributing = depths[mass]
    fallback = (float(contributing.min()), float(contributing.max()))
    near, far = _fill_invalid(near, far, valid, fallback)
    return RayRangeMap(near, far, valid)


def build_ray_ranges(frames, window, target_pose: Pose, k: Intrinsics,
                     lam: float = 0.5, s_min: float | None = None,
                     s_min_rel: float = 0.02, center: int | None = None,
                     literal_form: bool = False) -> RayRangeMap:
    """Full pipeline for one target frame: warp + splat every window member's
    depth map, then aggregate."""
    if center is None:
        center = window[len(window) // 2]
    tw = temporal_weights(window, center, lam, literal_form=literal_form)
    warped = []
    for t in window:
        pos, dep = forward_warp_depth(frames[t].depth, frames[t].pose,
                                      target_pose, k)
        warped.append(splat(pos, dep, k.height, k.width))
    return aggregate_ray_range(warped, tw, s_min=s_min, s_min_rel=s_min_rel)
