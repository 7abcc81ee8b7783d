"""Synthetic shaky-video oracle.

Scenes are built from infinite textured planes plus finite textured quads
(optionally moving, one rigid translation per frame). Everything is
analytic: images are exact ray casts, depth maps are exact z-depths, and
flow fields come from the known 3D correspondences, so renders, depths and
flows can serve as ground truth at any pose. All randomness is hash- or
seed-driven; a given spec yields bit-identical datasets on every run.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .dataio import Dataset, FrameBundle
from .geometry import Intrinsics, Pose, quat_from_rotvec, quat_mul


# ---------------------------------------------------------------- textures


def _hash01(ix: np.ndarray, iy: np.ndarray, seed: int) -> np.ndarray:
    """Deterministic lattice hash -> [0, 1)."""
    x = (
        ix.astype(np.int64).astype(np.uint32) * np.uint32(0x9E3779B1)
        ^ iy.astype(np.int64).astype(np.uint32) * np.uint32(0x85EBCA77)
        ^ np.uint32((seed * 0xC2B2AE3D) & 0xFFFFFFFF)
    )
    x ^= x >> np.uint32(16)
    x *= np.uint32(0x7FEB352D)
    x ^= x >> np.uint32(15)
    x *= np.uint32(0x846CA68B)
    x ^= x >> np.uint32(16)
    return x.astype(np.float64) / 4294967296.0


def _value_noise(a: np.ndarray, b: np.ndarray, seed: int) -> np.ndarray:
    """Smoothstep-interpolated lattice noise in [0, 1]."""
    ia, ib = np.floor(a), np.floor(b)
    fa, fb = a - ia, b - ib
    ua = fa * fa * (3 - 2 * fa)
    ub = fb * fb * (3 - 2 * fb)
    v00 = _hash01(ia, ib, seed)
    v01 = _hash01(ia + 1, ib, seed)
    v10 = _hash01(ia, ib + 1, seed)
    v11 = _hash01(ia + 1, ib + 1, seed)
    return v00 * (1 - ua) * (1 - ub) + v01 * ua * (1 - ub) + v10 * (1 - ua) * ub + v11 * ua * ub


def texture(a: np.ndarray, b: np.ndarray, seed: int, scale: float,
            base_color, contrast: float) -> np.ndarray:
    """Analytic smooth texture: multi-octave value noise plus a low
    frequency sinusoidal weave, tinted by a per-surface base color."""
    a = np.asarray(a, dtype=np.float64) / scale
    b = np.asarray(b, dtype=np.float64) / scale
    val = np.zeros_like(a)
    amp, freq, total = 1.0, 1.0, 0.0
    for octave in range(3):
        val += amp * _value_noise(a * freq, b * freq, seed + 101 * octave)
        total += amp
        amp *= 0.5
        freq *= 2.0
    val /= total
    weave = 0.5 + 0.5 * np.sin(2 * np.pi * a * 0.5) * np.sin(2 * np.pi * b * 0.5)
    lum = 0.5 + contrast * (val - 0.5) + 0.2 * contrast * (weave - 0.5)
    base = np.asarray(base_color, dtype=np.float64)
    rgb = lum[..., None] * (0.35 + 0.65 * base)
    return np.clip(rgb, 0.02, 0.98)


# ---------------------------------------------------------------- surfaces


def _plane_basis(normal: np.ndarray):
    n = np.asarray(normal, dtype=np.float64)
    n = n / np.linalg.norm(n)
    helper = np.array([0.0, 1.0, 0.0]) if abs(n[1]) < 0.9 else np.array([1.0, 0.0, 0.0])
    e1 = np.cross(helper, n)
    e1 /= np.linalg.norm(e1)
    e2 = np.cross(n, e1)
    return n, e1, e2


@dataclass(frozen=True)
class PlaneSpec:
    """Infinite textured plane."""

    point: tuple
    normal: tuple
    tex_seed: int = 1
    tex_scale: float = 1.0
    base_color: tuple = (0.8, 0.8, 0.8)
    contrast: float = 0.5


@dataclass(frozen=True)
class QuadSpec:
    """Finite textured rectangle, rigidly translating at `velocity` per frame."""

    center: tuple
    normal: tuple
    half_u: float
    half_v: float
    velocity: tuple = (0.0, 0.0, 0.0)
    tex_seed: int = 7
    tex_scale: float = 0.5
    base_color: tuple = (0.9, 0.5, 0.3)
    contrast: float = 0.5

    def center_at(self, t: float) -> np.ndarray:
        return np.asarray(self.center, dtype=np.float64) + t * np.asarray(
            self.velocity, dtype=np.float64
        )


@dataclass(frozen=True)
class SceneSpec:
    planes: tuple
    quads: tuple = ()
    n_frames: int = 30
    width: int = 64
    height: int = 64
    focal: float = 64.0
    seed: int = 7
    base_velocity: tuple = (0.02, 0.0, 0.0)  # meters per frame
    jitter_rot: float = 0.012  # radians, rms-level before band-pass scaling
    jitter_trans: float = 0.07  # meters

    def __post_init__(self):
        if len(self.planes) == 0:
            raise ValueError("need at least one infinite plane")
        if self.jitter_rot < 0 or self.jitter_trans < 0:
            raise ValueError("jitter amplitudes must be nonnegative")
        object.__setattr__(self, "planes", tuple(self.planes))
        object.__setattr__(self, "quads", tuple(self.quads))

    def intrinsics(self) -> Intrinsics:
        return Intrinsics(
            self.focal, self.focal, (self.width - 1) / 2.0, (self.height - 1) / 2.0,
            self.width, self.height,
        )


def scene_to_json(spec: SceneSpec) -> str:
    doc = {
        "planes": [vars(p) | {} for p in spec.planes],
        "quads": [vars(q) | {} for q in spec.quads],
        "n_frames": spec.n_frames,
        "width": spec.width,
        "height": spec.height,
        "focal": spec.focal,
        "seed": spec.seed,
        "base_velocity": list(spec.base_velocity),
        "jitter_rot": spec.jitter_rot,
        "jitter_trans": spec.jitter_trans,
    }
    return json.dumps(doc, indent=2, sort_keys=True)


def scene_from_json(text: str) -> SceneSpec:
    doc = json.loads(text)

    def tup(d, key):
        if key in d:
            d[key] = tuple(d[key])

    planes = []
    for p in doc["planes"]:
        tup(p, "point"), tup(p, "normal"), tup(p, "base_color")
        planes.append(PlaneSpec(**p))
    quads = []
    for q in doc.get("quads", []):
        tup(q, "center"), tup(q, "normal"), tup(q, "velocity"), tup(q, "base_color")
        quads.append(QuadSpec(**q))
    return SceneSpec(
        planes=tuple(planes),
        quads=tuple(quads),
        n_frames=doc["n_frames"],
        width=doc["width"],
        height=doc["height"],
        focal=doc["focal"],
        seed=doc["seed"],
        base_velocity=tuple(doc["base_velocity"]),
        jitter_rot=doc["jitter_rot"],
        jitter_trans=doc["jitter_trans"],
    )


# ---------------------------------------------------------------- trajectory


def _smooth_rows(x: np.ndarray, sigma: float) -> np.ndarray:
    n = x.shape[0]
    half = max(1, int(np.ceil(3 * sigma)))
    k = np.exp(-0.5 * (np.arange(-half, half + 1) / sigma) ** 2)
    k /= k.sum()
    pad = np.pad(x, ((half, half), (0, 0)), mode="reflect")
    out = np.zeros_like(x)
    for i, w in enumerate(k):
        out += w * pad[i : i + n]
    return out


def make_trajectory(spec: SceneSpec):
    """Shaky camera path: smooth base translation plus band-pass jitter in
    rotation and translation (smooth noise minus its own smoothed version,
    so the jitter is genuinely high-frequency)."""
    n = spec.n_frames
    rng = np.random.default_rng(spec.seed)
    white = rng.standard_normal((n, 6))
    smooth = _smooth_rows(white, 1.0)
    band = smooth - _smooth_rows(smooth, 4.0)
    rms = np.sqrt(np.mean(band**2, axis=0))
    rms[rms == 0] = 1.0
    band = band / rms
    rot_j = band[:, :3] * spec.jitter_rot
    trans_j = band[:, 3:] * spec.jitter_trans

    base_v = np.asarray(spec.base_velocity, dtype=np.float64)
    poses = []
    for t in range(n):
        center = base_v * t + trans_j[t]
        q = quat_mul(quat_from_rotvec(rot_j[t]), np.array([1.0, 0, 0, 0]))
        poses.append(Pose(q, center))
    return poses


# ---------------------------------------------------------------- ray casting


def _pixel_rays(pose: Pose, k: Intrinsics):
    u, v = np.meshgrid(np.arange(k.width), np.arange(k.height))
    dirs_cam = np.stack(
        [(u.ravel() - k.cx) / k.fx, (v.ravel() - k.cy) / k.fy, np.ones(u.size)],
        axis=-1,
    )
    dirs_world = dirs_cam @ pose.rot_matrix().T
    return pose.translation, dirs_world


def _cast(spec: SceneSpec, origin: np.ndarray, dirs: np.ndarray, t: float):
    """Intersect rays with every surface; returns per-ray depth (z in camera
    units of the ray parameterization), color, and world velocity."""
    m = dirs.shape[0]
    best_depth = np.full(m, np.inf)
    color = np.zeros((m, 3))
    velocity = np.zeros((m, 3))

    for p in spec.planes:
        n, e1, e2 = _plane_basis(p.normal)
        denom = dirs @ n
        num = (np.asarray(p.point, dtype=np.float64) - origin) @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            d = num / denom
        hit = np.isfinite(d) & (d > 1e-6) & (d < best_depth)
        if not np.any(hit):
            continue
        pts = origin + d[hit, None] * dirs[hit]
        rel = pts - np.asarray(p.point, dtype=np.float64)
        col = texture(rel @ e1, rel @ e2, p.tex_seed, p.tex_scale,
                      p.base_color, p.contrast)
        best_depth[hit] = d[hit]
        color[hit] = col
        velocity[hit] = 0.0

    for q in spec.quads:
        n, e1, e2 = _plane_basis(q.normal)
        c = q.center_at(t)
        denom = dirs @ n
        num = (c - origin) @ n
        with np.errstate(divide="ignore", invalid="ignore"):
            d = num / denom
        cand = np.isfinite(d) & (d > 1e-6) & (d < best_depth)
        if not np.any(cand):
            continue
        pts = origin + d[cand, None] * dirs[cand]
        rel = pts - c
        a, b = rel @ e1, rel @ e2
        inside = (np.abs(a) <= q.half_u) & (np.abs(b) <= q.half_v)
        sel = np.where(cand)[0][inside]
        if sel.size == 0:
            continue
        col = texture(a[inside], b[inside], q.tex_seed, q.tex_scale,
                      q.base_color, q.contrast)
        best_depth[sel] = d[cand][inside]
        color[sel] = col
        velocity[sel] = np.asarray(q.velocity, dtype=np.float64)

    if np.any(~np.isfinite(best_depth)):
        raise ValueError(
            "scene leaves rays unbounded; ensure an infinite background plane "
            "covers the whole view"
        )
    return best_depth, color, velocity


def render_ground_truth(spec: SceneSpec, pose: Pose, t: float = 0.0):
    """Exact analytic render from an arbitrary pose at scene time t.

    Returns (image (H, W, 3), depth (H, W))."""
    if not (np.all(np.isfinite(pose.translation)) and np.all(np.isfinite(pose.rotation))):
        raise ValueError("non-finite pose")
    k = spec.intrinsics()
    origin, dirs = _pixel_rays(pose, k)
    depth, color, _ = _cast(spec, origin, dirs, t)
    h, w = k.height, k.width
    return color.reshape(h, w, 3), depth.reshape(h, w)


def _hit_points(spec: SceneSpec, pose: Pose, t: float):
    k = spec.intrinsics()
    origin, dirs = _pixel_rays(pose, k)
    depth, _, velocity = _cast(spec, origin, dirs, t)
    points = origin + depth[:, None] * dirs
    return points, velocity, depth


def gt_flow(spec: SceneSpec, poses, t1: int, t2: int):
    """Exact flow from frame t1 to frame t2, following dynamic surfaces.

    Returns (flow (H, W, 2), occluded (H, W) bool). Flow stores the
    geometric correspondence even where the target view occludes it; the
    occlusion mask reports those pixels separately."""
    k = spec.intrinsics()
    h, w = k.height, k.width
    pts1, vel, _ = _hit_points(spec, poses[t1], float(t1))
    pts2 = pts1 + (t2 - t1) * vel
    cam2 = poses[t2].apply_inverse(pts2)
    z2 = cam2[:, 2]
    if np.any(z2 <= 0):
        raise ValueError("correspondence behind the target camera")
    u2 = k.fx * cam2[:, 0] / z2 + k.cx
    v2 = k.fy * cam2[:, 1] / z2 + k.cy
    u1, v1 = np.meshgrid(np.arange(w), np.arange(h))
    flow = np.stack([u2 - u1.ravel(), v2 - v1.ravel()], axis=-1).reshape(h, w, 2)

    _, depth2 = render_ground_truth(spec, poses[t2], float(t2))
    from .features import sample_bilinear

    d_seen, valid = sample_bilinear(depth2, np.stack([u2, v2], axis=-1))
    occluded = np.zeros(h * w, dtype=bool)
    occluded[valid] = z2[valid] > d_seen[valid] + 1e-3 * z2[valid]
    occluded[~valid] = True
    return flow, occluded.reshape(h, w)


def synth_scene(spec: SceneSpec) -> tuple[Dataset, list]:
    """Render the full dataset (frames, exact depth, exact flow-to-next).

    Returns (dataset, occlusion_masks)."""
    poses = make_trajectory(spec)
    k = spec.intrinsics()
    frames = []
    occs = []
    for t in range(spec.n_frames):
        image, depth = render_ground_truth(spec, poses[t], float(t))
        flow = None
        if t < spec.n_frames - 1:
            flow, occ = gt_flow(spec, poses, t, t + 1)
            occs.append(occ)
        fr = FrameBundle(image, depth, flow, poses[t], t)
        fr.validate()
        frames.append(fr)
    return Dataset(frames, k, seed=spec.seed), occs


# ---------------------------------------------------------------- presets


def preset_scene(name: str, seed: int = 7, n_frames: int = 30,
                 size: int = 64) -> SceneSpec:
    back = PlaneSpec(point=(0.3, 0.0, 6.0), normal=(0.0, 0.0, -1.0),
                     tex_seed=11, tex_scale=1.4, base_color=(0.75, 0.8, 0.9),
                     contrast=0.45)
    floor = PlaneSpec(point=(0.0, 1.1, 0.0), normal=(0.0, -1.0, 0.12),
                      tex_seed=23, tex_scale=1.0, base_color=(0.85, 0.75, 0.6),
                      contrast=0.4)
    common = dict(n_frames=n_frames, width=size, height=size,
                  focal=float(size), seed=seed)
    if name == "static":
        return SceneSpec(planes=(back, floor), **common)
    if name == "parallax":
        near = QuadSpec(center=(-0.35, -0.15, 3.2), normal=(0.0, 0.0, -1.0),
                        half_u=0.6, half_v=0.5, velocity=(0.0, 0.0, 0.0),
                        tex_seed=31, tex_scale=0.45,
                        base_color=(0.55, 0.85, 0.55), contrast=0.5)
        return SceneSpec(planes=(back, floor), quads=(near,), **common)
    if name == "dynamic":
        mover = QuadSpec(center=(-0.75, 0.05, 4.0), normal=(0.0, 0.0, -1.0),
                         half_u=0.45, half_v=0.4, velocity=(0.045, 0.012, 0.0),
                         tex_seed=41, tex_scale=0.4,
                         base_color=(0.95, 0.45, 0.35), contrast=0.55)
        return SceneSpec(planes=(back, floor), quads=(mover,), **common)
    raise ValueError(f"unknown preset {name!r} (expected static, dynamic, parallax)")
