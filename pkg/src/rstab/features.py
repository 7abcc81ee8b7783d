"""Hand-crafted per-frame descriptors and sub-pixel sampling.

The 11 channels per pixel are:

  0-2  R, G, B passthrough
  3    luma
  4-5  Sobel gx, gy of luma (normalized so values stay ~[-1, 1])
  6    3x3 luma mean
  7    3x3 luma standard deviation
  8-10 half-resolution luma / gx / gy, upsampled back to full resolution

The descriptor stands behind ``extract_features`` so a different extractor
can be swapped in without touching the renderer.
"""

from __future__ import annotations

import numpy as np

FEATURE_CHANNELS = 11

_SOBEL_X = np.array([[-1, 0, 1], [-2, 0, 2], [-1, 0, 1]], dtype=np.float64) / 8.0
_SOBEL_Y = _SOBEL_X.T


def _conv3(img: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    """3x3 correlation with reflect padding (edge not repeated)."""
    p = np.pad(img, 1, mode="reflect")
    out = np.zeros_like(img, dtype=np.float64)
    for di in range(3):
        for dj in range(3):
            out += kernel[di, dj] * p[di : di + img.shape[0], dj : dj + img.shape[1]]
    return out


def _box3(img: np.ndarray) -> np.ndarray:
    return _conv3(img, np.full((3, 3), 1.0 / 9.0))


def extract_features(image: np.ndarray) -> np.ndarray:
    """image: (H, W, 3) in [0, 1] -> (H, W, 11) descriptor map."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ValueError("expected an (H, W, 3) image")
    h, w = img.shape[:2]
    luma = 0.299 * img[..., 0] + 0.587 * img[..., 1] + 0.114 * img[..., 2]
    gx = _conv3(luma, _SOBEL_X)
    gy = _conv3(luma, _SOBEL_Y)
    mean3 = _box3(luma)
    var3 = np.maximum(_box3(luma * luma) - mean3 * mean3, 0.0)
    std3 = np.sqrt(var3)

    # half-resolution branch: 2x2 average pool, then nearest upsample
    h2, w2 = h // 2, w // 2
    small = luma[: 2 * h2, : 2 * w2].reshape(h2, 2, w2, 2).mean(axis=(1, 3))
    sgx = _conv3(small, _SOBEL_X)
    sgy = _conv3(small, _SOBEL_Y)

    def up(m):
        big = np.repeat(np.repeat(m, 2, axis=0), 2, axis=1)
        if big.shape != (h, w):  # odd sizes: repeat last row/col
            big = np.pad(big, ((0, h - big.shape[0]), (0, w - big.shape[1])), mode="edge")
        return big

    feats = np.stack(
        [img[..., 0], img[..., 1], img[..., 2], luma, gx, gy, mean3, std3,
         up(small), up(sgx), up(sgy)],
        axis=-1,
    )
    return feats


def sample_bilinear(grid: np.ndarray, x: np.ndarray):
    """Bilinear lookup of an (H, W, C) or (H, W) grid at sub-pixel x = (u, v).

    x may be (2,) or (N, 2). Returns (values, valid); valid is False wherever
    any of the four neighbors falls outside the grid (no clamping). Values on
    invalid rows are finite but unspecified.
    """
    g = np.asarray(grid, dtype=np.float64)
    squeeze_c = g.ndim == 2
    if squeeze_c:
        g = g[..., None]
    h, w = g.shape[:2]
    pts = np.asarray(x, dtype=np.float64)
    single = pts.ndim == 1
    pts = np.atleast_2d(pts)

    u, v = pts[:, 0], pts[:, 1]
    finite = np.isfinite(u) & np.isfinite(v)
    u = np.where(finite, u, -10.0)
    v = np.where(finite, v, -10.0)
    i0 = np.floor(u).astype(np.int64)
    j0 = np.floor(v).astype(np.int64)
    valid = finite & (i0 >= 0) & (j0 >= 0) & (i0 + 1 <= w - 1) & (j0 + 1 <= h - 1)
    i0c = np.clip(i0, 0, w - 2)
    j0c = np.clip(j0, 0, h - 2)
    fu = np.clip(u - i0, 0.0, 1.0)[:, None]
    fv = np.clip(v - j0, 0.0, 1.0)[:, None]
    v00 = g[j0c, i0c]
    v01 = g[j0c, i0c + 1]
    v10 = g[j0c + 1, i0c]
    v11 = g[j0c + 1, i0c + 1]
    vals = (
        v00 * (1 - fu) * (1 - fv)
        + v01 * fu * (1 - fv)
        + v10 * (1 - fu) * fv
        + v11 * fu * fv
    )
    if squeeze_c:
        vals = vals[:, 0]
    if single:
        return vals[0], bool(valid[0])
    return vals, valid
