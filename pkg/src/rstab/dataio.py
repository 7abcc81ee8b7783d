"""Dataset file formats and directory layout.

Formats:
  images      PNG (8-bit) emitted; PNG and binary PPM (P6) accepted
  depth       PFM, grayscale "Pf", little-endian (negative scale),
              rows stored bottom-to-top
  flow        Middlebury .flo: float32 magic 202021.25 ("PIEH"), int32
              width, int32 height, row-major float32 (u, v) pairs
  poses       text, one line per frame: t qw qx qy qz tx ty tz
              (camera-to-world)
  intrinsics  text, one line: fx fy cx cy width height
  manifest    manifest.json key/value tree with file lists, N, resolution,
              seed
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .geometry import Intrinsics, Pose

FLO_MAGIC = 202021.25  # the bytes of "PIEH" read as little-endian float32


class FormatError(Exception):
    pass


# ---------------------------------------------------------------- images


def save_png(path, image: np.ndarray) -> None:
    """image: (H, W, 3) float in [0, 1] or uint8."""
    if image.dtype != np.uint8:
        image = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(image, mode="RGB").save(path, format="PNG")


def load_image(path) -> np.ndarray:
    """Load PNG or PPM(P6) as (H, W, 3) float in [0, 1]."""
    path = os.fspath(path)
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"P6":
        arr = _read_ppm(path)
    else:
        arr = np.asarray(Image.open(path).convert("RGB"))
    return arr.astype(np.float64) / 255.0


def load_image_u8(path) -> np.ndarray:
    path = os.fspath(path)
    with open(path, "rb") as f:
        head = f.read(2)
    if head == b"P6":
        return _read_ppm(path)
    return np.asarray(Image.open(path).convert("RGB"))


def _read_ppm(path) -> np.ndarray:
    with open(path, "rb") as f:
        data = f.read()
    tokens = []
    i = 0
    while len(tokens) < 4:
        while i < len(data) and data[i : i + 1].isspace():
            i += 1
        if i < len(data) and data[i : i + 1] == b"#":
            while i < len(data) and data[i] != 0x0A:
                i += 1
            continue
        j = i
        while j < len(data) and not data[j : j + 1].isspace():
            j += 1
        tokens.append(data[i:j])
        i = j
    if tokens[0] != b"P6":
        raise FormatError(f"{path}: not a P6 PPM")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != 255:
        raise FormatError(f"{path}: only maxval 255 supported")
    i += 1  # single whitespace after maxval
    raw = data[i : i + 3 * w * h]
    if len(raw) != 3 * w * h:
        raise FormatError(f"{path}: truncated PPM payload")
    return np.frombuffer(raw, dtype=np.uint8).reshape(h, w, 3)


# ---------------------------------------------------------------- PFM


def save_pfm(path, data: np.ndarray) -> None:
    """Grayscale PFM, little-endian (scale -1), rows bottom-to-top."""
    arr = np.asarray(data, dtype=np.float32)
    if arr.ndim != 2:
        raise ValueError("save_pfm expects a 2-D array")
    h, w = arr.shape
    with open(path, "wb") as f:
        f.write(b"Pf\n")
        f.write(f"{w} {h}\n".encode("ascii"))
        f.write(b"-1.0\n")
        f.write(arr[::-1].tobytes())


def load_pfm(path) -> np.ndarray:
    path = os.fspath(path)
    with open(path, "rb") as f:
        header = f.readline().strip()
        if header == b"PF":
            channels = 3
        elif header == b"Pf":
            channels = 1
        else:
            raise FormatError(f"{path}: bad PFM magic {header!r}")
        dims = f.readline().split()
        if len(dims) != 2:
            raise FormatError(f"{path}: bad PFM dimension line")
        w, h = int(dims[0]), int(dims[1])
        scale = float(f.readline().strip())
        endian = "<" if scale < 0 else ">"
        count = w * h * channels
        raw = f.read(count * 4)
        if len(raw) != count * 4:
            raise FormatError(f"{path}: truncated PFM payload")
    arr = np.frombuffer(raw, dtype=endian + "f4").reshape(
        (h, w) if channels == 1 else (h, w, 3)
    )
    arr = arr[::-1].copy()  # stored bottom-to-top
    if abs(scale) not in (0.0, 1.0):
        arr *= abs(scale)
    return arr.astype(np.float32)


# ---------------------------------------------------------------- .flo


def save_flo(path, flow: np.ndarray) -> None:
    arr = np.asarray(flow, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise ValueError("save_flo expects an (H, W, 2) array")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(struct.pack("<f", FLO_MAGIC))
        f.write(struct.pack("<ii", w, h))
        f.write(arr.tobytes())


def load_flo(path) -> np.ndarray:
    path = os.fspath(path)
    with open(path, "rb") as f:
        magic = struct.unpack("<f", f.read(4))[0]
        if magic != FLO_MAGIC:
            raise FormatError(f"{path}: bad .flo magic {magic!r} (expected PIEH)")
        w, h = struct.unpack("<ii", f.read(8))
        if w <= 0 or h <= 0:
            raise FormatError(f"{path}: bad .flo dimensions {w}x{h}")
        raw = f.read(2 * w * h * 4)
        if len(raw) != 2 * w * h * 4:
            raise FormatError(f"{path}: truncated .flo payload")
    return np.frombuffer(raw, dtype="<f4").reshape(h, w, 2).copy()


# ---------------------------------------------------------------- poses


def save_poses(path, poses, timestamps) -> None:
    with open(path, "w") as f:
        for t, p in zip(timestamps, poses):
            vals = [float(v) for v in (*p.rotation, *p.translation)]
            f.write(" ".join([str(int(t))] + [repr(v) for v in vals]) + "\n")


def load_poses(path):
    timestamps, poses = [], []
    with open(path) as f:
        for ln, line in enumerate(f, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) != 8:
                raise FormatError(f"{path}:{ln}: expected 8 fields, got {len(parts)}")
            timestamps.append(int(parts[0]))
            vals = [float(v) for v in parts[1:]]
            poses.append(Pose(np.array(vals[:4]), np.array(vals[4:])))
    return poses, timestamps


def save_intrinsics(path, k: Intrinsics) -> None:
    with open(path, "w") as f:
        f.write(f"{k.fx!r} {k.fy!r} {k.cx!r} {k.cy!r} {k.width} {k.height}\n")


def load_intrinsics(path) -> Intrinsics:
    with open(path) as f:
        parts = f.read().split()
    if len(parts) != 6:
        raise FormatError(f"{path}: expected 6 intrinsics fields")
    return Intrinsics(
        float(parts[0]), float(parts[1]), float(parts[2]), float(parts[3]),
        int(parts[4]), int(parts[5]),
    )


# ---------------------------------------------------------------- dataset


@dataclass
class FrameBundle:
    image: np.ndarray  # (H, W, 3) in [0, 1]
    depth: np.ndarray  # (H, W) meters, > 0
    flow_to_next: np.ndarray | None  # (H, W, 2) pixels; None on last frame
    pose: Pose
    timestamp: int

    def validate(self):
        h, w = self.depth.shape
        if self.image.shape[:2] != (h, w):
            raise ValueError("image/depth size mismatch")
        if self.flow_to_next is not None and self.flow_to_next.shape != (h, w, 2):
            raise ValueError("flow size mismatch")
        if np.any(self.depth <= 0):
            raise ValueError("depth must be positive everywhere")
        if self.image.min() < 0 or self.image.max() > 1:
            raise ValueError("image values must lie in [0, 1]")


@dataclass
class Dataset:
    frames: list
    intrinsics: Intrinsics
    seed: int = 0
    extras: dict = field(default_factory=dict)  # e.g. scene spec path

    def __len__(self):
        return len(self.frames)

    def poses(self):
        return [fr.pose for fr in self.frames]

    def timestamps(self):
        return [fr.timestamp for fr in self.frames]


def save_dataset(ds: Dataset, out_dir) -> None:
    out_dir = os.fspath(out_dir)
    for sub in ("frames", "depth", "flow"):
        os.makedirs(os.path.join(out_dir, sub), exist_ok=True)
    manifest = {
        "n_frames": len(ds.frames),
        "resolution": [ds.intrinsics.width, ds.intrinsics.height],
        "seed": ds.seed,
        "intrinsics": "intrinsics.txt",
        "poses": "poses.txt",
        "frames": [],
        "depth": [],
        "flow": [],
    }
    manifest.update(ds.extras)
    for fr in ds.frames:
        i = fr.timestamp
        img_rel = f"frames/frame_{i:04d}.png"
        dep_rel = f"depth/depth_{i:04d}.pfm"
        save_png(os.path.join(out_dir, img_rel), fr.image)
        save_pfm(os.path.join(out_dir, dep_rel), fr.depth)
        manifest["frames"].append(img_rel)
        manifest["depth"].append(dep_rel)
        if fr.flow_to_next is not None:
            flo_rel = f"flow/flow_{i:04d}.flo"
            save_flo(os.path.join(out_dir, flo_rel), fr.flow_to_next)
            manifest["flow"].append(flo_rel)
    save_intrinsics(os.path.join(out_dir, "intrinsics.txt"), ds.intrinsics)
    save_poses(
        os.path.join(out_dir, "poses.txt"),
        [fr.pose for fr in ds.frames],
        [fr.timestamp for fr in ds.frames],
    )
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")


def load_dataset(path) -> Dataset:
    path = os.fspath(path)
    man_path = os.path.join(path, "manifest.json")
    if not os.path.exists(man_path):
        raise FormatError(f"{man_path}: manifest not found")
    with open(man_path) as f:
        manifest = json.load(f)
    k = load_intrinsics(os.path.join(path, manifest["intrinsics"]))
    poses, timestamps = load_poses(os.path.join(path, manifest["poses"]))
    n = manifest["n_frames"]
    if len(poses) != n or len(manifest["frames"]) != n:
        raise FormatError(f"{path}: manifest frame count mismatch")
    frames = []
    for i in range(n):
        image = load_image(os.path.join(path, manifest["frames"][i]))
        depth = load_pfm(os.path.join(path, manifest["depth"][i])).astype(np.float64)
        if depth.shape != image.shape[:2]:
            raise FormatError(f"{path}: depth/image dimension mismatch at frame {i}")
        flow = None
        if i < n - 1:
            flow = load_flo(os.path.join(path, manifest["flow"][i])).astype(np.float64)
            if flow.shape[:2] != image.shape[:2]:
                raise FormatError(f"{path}: flow dimension mismatch at frame {i}")
        frames.append(FrameBundle(image, depth, flow, poses[i], timestamps[i]))
    extras = {
        key: manifest[key]
        for key in manifest
        if key not in ("n_frames", "resolution", "seed", "intrinsics", "poses",
                       "frames", "depth", "flow")
    }
    return Dataset(frames, k, seed=manifest.get("seed", 0), extras=extras)
