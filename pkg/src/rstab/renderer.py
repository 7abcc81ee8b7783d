"""Stabilized rendering: per-ray sampling, multi-view gathering, density
prediction, color blending, volume compositing, and the sliding-window
orchestration over a whole sequence.

Determinism: every reduction runs in a fixed view/sample order, so a frame
renders bit-identically regardless of how frames are distributed over
worker threads.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from . import flow as flowmod
from .dataio import Dataset
from .density import AnalyticHead, RayBank, aggregate_views
from .features import extract_features, sample_bilinear
from .geometry import Intrinsics, Pose, project_world, unproject
from .rayrange import RayRangeMap, build_ray_ranges, splat, temporal_weights
from .trajectory import PoseSequence, smooth_trajectory


@dataclass(frozen=True)
class RenderConfig:
    window_size: int = 13
    samples: int = 3  # spatial samples per ray
    lam: float = 0.5  # temporal weight decay
    gamma: float = 1.0  # feature-affinity sharpness in color blending
    s_min: float | None = None  # absolute deviation floor (meters)
    s_min_rel: float = 0.02  # relative deviation floor (fraction of mean)
    eps_w: float = 1e-3  # accumulated-weight threshold for a valid pixel
    background: float = 0.5
    sigma_smooth: float = 2.0  # trajectory smoothing sigma (frames)
    smooth_window: int = 13
    no_arr: bool = False  # even global sampling instead of adaptive ranges
    even_samples: int = 128  # sample count used when no_arr is on
    no_cc: bool = False  # gather colors at geometric positions
    blend_only: bool = False  # plain warp-and-average, no volume rendering
    literal_tw: bool = False  # asymmetric exp(lam (t - T)) temporal weights
    threads: int = 1

    def __post_init__(self):
        if self.window_size < 1 or self.samples < 1:
            raise ValueError("window size and sample count must be >= 1")


@dataclass
class RenderedFrame:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    weight: np.ndarray  # (H, W) accumulated compositing weight
    valid: np.ndarray  # (H, W) bool, weight > eps_w


def sample_depths(near, far, l: int) -> np.ndarray:
    """Endpoint-inclusive uniform depth grid; midpoint for l = 1.

    near/far may be scalars or arrays; returns shape (l,) + near.shape."""
    near = np.asarray(near, dtype=np.float64)
    far = np.asarray(far, dtype=np.float64)
    if np.any(near <= 0) or np.any(far < near):
        raise ValueError("need 0 < near <= far")
    if l == 1:
        return (0.5 * (near + far))[None, ...]
    steps = np.arange(l, dtype=np.float64) / (l - 1)
    return near[None, ...] + steps.reshape((l,) + (1,) * near.ndim) * (far - near)[None, ...]


def blend_color(colors: np.ndarray, valid: np.ndarray, feats: np.ndarray,
                tw: np.ndarray, gamma: float):
    """Convex per-view combination: weight = temporal weight x
    exp(-gamma * ||f_v - mean(f)||^2) over valid views, normalized.

    colors: (V, 3) or (V, N, 3); valid: (V,) or (V, N); feats matches colors
    with C channels; tw: (V,). Returns (blended colors, any_valid mask)."""
    c = np.asarray(colors, dtype=np.float64)
    f = np.asarray(feats, dtype=np.float64)
    m = np.asarray(valid, dtype=bool)
    single = c.ndim == 2
    if single:
        c, f, m = c[:, None, :], f[:, None, :], m[:, None]
    wm = m.astype(np.float64)
    cnt = wm.sum(axis=0)
    any_valid = cnt > 0
    safe = np.maximum(cnt, 1.0)
    fbar = (f * wm[..., None]).sum(axis=0) / safe[..., None]
    dist2 = ((f - fbar) ** 2).sum(axis=-1)
    aff = np.exp(np.clip(-gamma * dist2, -60.0, 0.0))
    wgt = tw[:, None] * aff * wm
    tot = wgt.sum(axis=0)
    wgt = wgt / np.maximum(tot, 1e-300)
    out = (wgt[..., None] * c).sum(axis=0)
    out[~any_valid] = 0.0
    if single:
        return out[0], any_valid[0]
    return out, any_valid


def composite(colors: np.ndarray, sigmas: np.ndarray):
    """Front-to-back volume compositing.

    colors: (L, 3) or (L, N, 3); sigmas: (L,) or (L, N), all >= 0.
    w_i = A_i (1 - exp(-sigma_i)), A_i = exp(-sum_{j<i} sigma_j).
    Returns (accumulated color, total weight W = sum w_i)."""
    s = np.asarray(sigmas, dtype=np.float64)
    c = np.asarray(colors, dtype=np.float64)
    if np.any(s < 0):
        raise ValueError("densities must be nonnegative")
    csum = np.cumsum(s, axis=0)
    trans = np.exp(-(csum - s))
    wgt = trans * (-np.expm1(-s))
    color = (wgt[..., None] * c).sum(axis=0)
    return color, wgt.sum(axis=0)


class FrameRenderer:
    """Renders pixels of one target frame from its temporal window.

    Precomputes composed flow fields for color correction; geometry,
    features and the density head are shared immutable inputs."""

    # Gather positions up to PAD px outside a source frame are served from
    # edge-replicated borders; the smoothed camera can see slightly past the
    # union of input frustums at frame corners, and excluding those rays
    # would punch holes in the full-frame output.
    PAD = 2

    def __init__(self, dataset: Dataset, features: list, center: int,
                 window: list, target_pose: Pose, head, cfg: RenderConfig):
        self.ds = dataset
        self.center = center
        self.window = list(window)
        self.target_pose = target_pose
        self.head = head
        self.cfg = cfg
        self.k = dataset.intrinsics
        self.tw = temporal_weights(self.window, center, cfg.lam,
                                   literal_form=cfg.literal_tw).weights
        p = self.PAD
        self.padded_images = {
            t: np.pad(dataset.frames[t].image, ((p, p), (p, p), (0, 0)),
                      mode="edge")
            for t in self.window
        }
        self.padded_features = {
            t: np.pad(features[t], ((p, p), (p, p), (0, 0)), mode="edge")
            for t in self.window
        }
        if cfg.no_cc:
            self.flows = None
        else:
            self.flows = flowmod.composed_flows(dataset.frames, center, self.window)

    def render_points(self, pix: np.ndarray, near: np.ndarray, far: np.ndarray):
        """pix: (N, 2) target sub-pixels with per-point depth ranges.
        Returns (colors (N, 3), weights (N,))."""
        cfg = self.cfg
        n = pix.shape[0]
        depths = sample_depths(near, far, cfg.samples)  # (L, N)
        acc_color = np.zeros((n, 3))
        acc_sigma = np.zeros(n)
        acc_w = np.zeros(n)
        for li in range(depths.shape[0]):
            c_i, s_i = self._sample_descriptor(pix, depths[li])
            trans = np.exp(-acc_sigma)
            w_i = trans * (-np.expm1(-s_i))
            acc_color += w_i[:, None] * c_i
            acc_w += w_i
            acc_sigma += s_i
        return acc_color, acc_w

    def gather(self, pix: np.ndarray, depth: np.ndarray):
        """Multi-view gathering for one depth slice of rays.

        Features come from the geometric projections; colors from the
        flow-corrected positions where the flow chain is usable, falling
        back per view to the geometric position where it is not. Returns
        (density input (N, 2C), blended color (N, 3), usable (N,))."""
        cfg = self.cfg
        world = unproject(pix, depth, self.target_pose, self.k)
        if self.flows is not None:
            uv_c, _, v_c = project_world(world, self.ds.frames[self.center].pose,
                                         self.k)
        pad = float(self.PAD)
        feats, fvalid, cols, cvalid = [], [], [], []
        for t in self.window:
            fr = self.ds.frames[t]
            uv, _, behind_ok = project_world(world, fr.pose, self.k)
            f_t, in_ok = sample_bilinear(self.padded_features[t], uv + pad)
            geo_ok = behind_ok & in_ok
            feats.append(f_t)
            fvalid.append(geo_ok)
            if self.flows is None:
                cpos, cbase = uv, geo_ok
            else:
                fld, fld_v = self.flows[t]
                cc_pos, cc_ok = flowmod.flow_correct(uv_c, fld, fld_v)
                cc_ok = cc_ok & v_c
                cpos = np.where(cc_ok[:, None], cc_pos, uv)
                cbase = cc_ok | geo_ok
            col, col_in = sample_bilinear(self.padded_images[t], cpos + pad)
            cols.append(col)
            cvalid.append(cbase & col_in)
        feats = np.stack(feats)  # (V, N, C)
        fvalid = np.stack(fvalid)

        blend_valid = fvalid & np.stack(cvalid)
        color, any_col = blend_color(np.stack(cols), blend_valid, feats,
                                     self.tw, cfg.gamma)
        g = aggregate_views(feats, fvalid)
        return g, color, fvalid.any(axis=0) & any_col

    def _sample_descriptor(self, pix: np.ndarray, depth: np.ndarray):
        """Blend color and predict density for one depth slice of rays."""
        g, color, usable = self.gather(pix, depth)
        sigma = np.zeros(pix.shape[0])
        if usable.any():
            sigma[usable] = self.head.predict(g[usable])
        return color, sigma

    def render_frame(self, ranges: RayRangeMap | None,
                     global_range: tuple | None = None) -> RenderedFrame:
        cfg = self.cfg
        k = self.k
        h, w = k.height, k.width
        u, v = np.meshgrid(np.arange(w, dtype=np.float64),
                           np.arange(h, dtype=np.float64))
        pix = np.stack([u.ravel(), v.ravel()], axis=-1)
        if cfg.no_arr:
            if global_range is None:
                raise ValueError("no_arr rendering needs a global depth range")
            near = np.full(h * w, global_range[0])
            far = np.full(h * w, global_range[1])
        else:
            near = ranges.near.ravel()
            far = ranges.far.ravel()
        color, weight = self.render_points(pix, near, far)
        valid = weight > cfg.eps_w
        img = np.full((h * w, 3), cfg.background)
        img[valid] = np.clip(color[valid] / weight[valid, None], 0.0, 1.0)
        return RenderedFrame(img.reshape(h, w, 3), weight.reshape(h, w),
                             valid.reshape(h, w))


def render_pixel(renderer: FrameRenderer, x, near: float, far: float):
    """Single-ray entry point; returns (color (3,), weight, valid)."""
    pix = np.atleast_2d(np.asarray(x, dtype=np.float64))
    color, weight = renderer.render_points(pix, np.array([near]), np.array([far]))
    cfg = renderer.cfg
    if weight[0] > cfg.eps_w:
        return np.clip(color[0] / weight[0], 0.0, 1.0), float(weight[0]), True
    return np.full(3, cfg.background), float(weight[0]), False


# ---------------------------------------------------------------- baselines


def blend_only_frame(dataset: Dataset, window, center: int, target_pose: Pose,
                     cfg: RenderConfig) -> RenderedFrame:
    """Ablation baseline: forward-splat every input image to the target pose
    and average with temporal weights. No densities, no compositing."""
    k = dataset.intrinsics
    h, w = k.height, k.width
    tw = temporal_weights(window, center, cfg.lam,
                          literal_form=cfg.literal_tw).weights
    num = np.zeros((h, w, 3))
    den = np.zeros((h, w))
    from .rayrange import forward_warp_depth

    for wi, t in enumerate(window):
        fr = dataset.frames[t]
        pos, _ = forward_warp_depth(fr.depth, fr.pose, target_pose, k)
        # re-derive which source pixels survived so colors line up
        u, v = np.meshgrid(np.arange(w), np.arange(h))
        pixsrc = np.stack([u.ravel(), v.ravel()], axis=-1).astype(np.float64)
        world = unproject(pixsrc, fr.depth.ravel(), fr.pose, k)
        _, z, ok = project_world(world, target_pose, k)
        colors = fr.image.reshape(-1, 3)[ok]
        for ch in range(3):
            wd = splat(pos, colors[:, ch], h, w)
            num[:, :, ch] += tw[wi] * wd.weight * wd.depth
        den += tw[wi] * splat(pos, np.ones(len(pos)), h, w).weight
    valid = den > cfg.eps_w
    img = np.full((h, w, 3), cfg.background)
    img[valid] = np.clip(num[valid] / den[valid, None], 0.0, 1.0)
    return RenderedFrame(img, den, valid)


# ---------------------------------------------------------------- pipeline


def make_window(center: int, n: int, size: int) -> list:
    """Symmetric window clamped at sequence ends (asymmetric near clips)."""
    half = size // 2
    return list(range(max(0, center - half), min(n - 1, center + half) + 1))


def smoothed_poses(dataset: Dataset, cfg: RenderConfig) -> list:
    seq = PoseSequence(tuple(dataset.poses()), tuple(dataset.timestamps()))
    if cfg.sigma_smooth <= 0 or cfg.smooth_window <= 1:
        return list(seq.poses)
    win = cfg.smooth_window
    if win % 2 == 0:
        win += 1
    return list(smooth_trajectory(seq, win, cfg.sigma_smooth).poses)


def global_depth_range(dataset: Dataset) -> tuple:
    lo = min(float(fr.depth.min()) for fr in dataset.frames)
    hi = max(float(fr.depth.max()) for fr in dataset.frames)
    return lo, hi


@dataclass
class StabilizeResult:
    frames: list  # RenderedFrame per timestamp
    smoothed: list  # smoothed Pose per timestamp
    config: RenderConfig
    per_frame: list = field(default_factory=list)  # weight stats dicts


def _render_one(dataset, features, targets, cfg, head, grange, t):
    window = make_window(t, len(dataset), cfg.window_size)
    if cfg.blend_only:
        return blend_only_frame(dataset, window, t, targets[t], cfg)
    rend = FrameRenderer(dataset, features, t, window, targets[t], head, cfg)
    ranges = None
    if not cfg.no_arr:
        ranges = build_ray_ranges(dataset.frames, window, targets[t],
                                  dataset.intrinsics, lam=cfg.lam,
                                  s_min=cfg.s_min, s_min_rel=cfg.s_min_rel,
                                  center=t, literal_form=cfg.literal_tw)
    return rend.render_frame(ranges, global_range=grange)


def stabilize(dataset: Dataset, cfg: RenderConfig, head=None,
              target_poses: list | None = None) -> StabilizeResult:
    """Smooth the trajectory and re-render every frame at its smoothed pose.

    `target_poses` overrides the smoothed trajectory (used for rendering at
    the input poses during training/evaluation)."""
    if head is None:
        head = AnalyticHead()
    smoothed = smoothed_poses(dataset, cfg)
    targets = target_poses if target_poses is not None else smoothed
    if cfg.blend_only:
        features = None
    else:
        features = [extract_features(fr.image) for fr in dataset.frames]
    grange = global_depth_range(dataset)
    n = len(dataset)

    sample_count = cfg.even_samples if cfg.no_arr else cfg.samples
    run_cfg = replace(cfg, samples=sample_count)

    results = [None] * n
    if cfg.threads > 1:
        with ThreadPoolExecutor(max_workers=cfg.threads) as pool:
            futs = {
                pool.submit(_render_one, dataset, features, targets, run_cfg,
                            head, grange, t): t
                for t in range(n)
            }
            for fut, t in futs.items():
                results[t] = fut.result()
    else:
        for t in range(n):
            try:
                results[t] = _render_one(dataset, features, targets, run_cfg,
                                         head, grange, t)
            except Exception as exc:
                raise RuntimeError(f"rendering failed at frame {t}: {exc}") from exc

    res = StabilizeResult(results, smoothed, cfg)
    for t, rf in enumerate(results):
        res.per_frame.append(
            {
                "frame": t,
                "weight_min": float(rf.weight.min()),
                "weight_mean": float(rf.weight.mean()),
                "weight_max": float(rf.weight.max()),
                "valid_fraction": float(rf.valid.mean()),
            }
        )
    return res


# ---------------------------------------------------------------- training data


def build_ray_bank(dataset: Dataset, cfg: RenderConfig, rng=None,
                   rays_per_frame: int | None = None) -> RayBank:
    """Precompute per-ray density inputs and blended sample colors for
    training, rendering each input frame from its own window (the target
    pose is the held-in input pose, so the frame itself is ground truth)."""
    features = [extract_features(fr.image) for fr in dataset.frames]
    k = dataset.intrinsics
    h, w = k.height, k.width
    n = len(dataset)
    grange = global_depth_range(dataset)
    inputs, colors, validm, gts = [], [], [], []
    for t in range(n):
        window = make_window(t, n, cfg.window_size)
        rend = FrameRenderer(dataset, features, t, window,
                             dataset.frames[t].pose, AnalyticHead(), cfg)
        ranges = None
        if not cfg.no_arr:
            ranges = build_ray_ranges(dataset.frames, window,
                                      dataset.frames[t].pose, k, lam=cfg.lam,
                                      s_min=cfg.s_min, s_min_rel=cfg.s_min_rel,
                                      center=t, literal_form=cfg.literal_tw)
        u, v = np.meshgrid(np.arange(w, dtype=np.float64),
                           np.arange(h, dtype=np.float64))
        pix = np.stack([u.ravel(), v.ravel()], axis=-1)
        if rays_per_frame is not None and rays_per_frame < len(pix):
            if rng is None:
                rng = np.random.default_rng(0)
            sel = rng.choice(len(pix), size=rays_per_frame, replace=False)
        else:
            sel = np.arange(len(pix))
        pix = pix[sel]
        if cfg.no_arr:
            near = np.full(len(sel), grange[0])
            far = np.full(len(sel), grange[1])
        else:
            near = ranges.near.ravel()[sel]
            far = ranges.far.ravel()[sel]
        depths = sample_depths(near, far, cfg.samples)  # (L, M)
        g_l, c_l, v_l = [], [], []
        for li in range(depths.shape[0]):
            g, color, usable = rend.gather(pix, depths[li])
            g_l.append(g)
            c_l.append(color)
            v_l.append(usable)
        inputs.append(np.stack(g_l, axis=1))  # (M, L, 2C)
        colors.append(np.stack(c_l, axis=1))
        validm.append(np.stack(v_l, axis=1))
        gts.append(dataset.frames[t].image.reshape(-1, 3)[sel])
    return RayBank(
        np.concatenate(inputs), np.concatenate(colors),
        np.concatenate(validm), np.concatenate(gts),
    )
