"""Differentiable bilinear sampling of images/feature maps by a warp grid.

Out-of-bounds taps use zero padding, which keeps the sampling operator linear
in the sampled map and its gradients consistent.  Sample positions within
``SNAP_EPS`` pixels of an integer lattice point are snapped onto it so that
identity grids reproduce their input bit-exactly regardless of floating-point
rounding in the normalized-coordinate round trip.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geometry import WarpGrid

SNAP_EPS = 1e-9  # pixels


@dataclass(frozen=True)
class Image:
    """Dense H x W x C map of real intensities (training range [-1, 1])."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.asarray(self.data, dtype=float)
        if arr.ndim == 2:
            arr = arr[:, :, None]
        if arr.ndim != 3:
            raise ValueError(f"expected (H, W, C) data, got shape {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValueError("image values must be finite")
        object.__setattr__(self, "data", arr)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]


@dataclass(frozen=True)
class SampleGradients:
    """Analytic partial derivatives of the bilinear sampler."""

    grad_image: np.ndarray        # same shape as the sampled map
    grad_grid: np.ndarray         # (H_out, W_out, 2), normalized units


def _pixel_positions(grid_xy: np.ndarray, height: int, width: int):
    """Normalized coords -> (row, col) pixel positions with integer snapping."""
    pc = (grid_xy[..., 0] + 1.0) * (width - 1) / 2.0
    pr = (grid_xy[..., 1] + 1.0) * (height - 1) / 2.0
    rc = np.round(pc)
    rr = np.round(pr)
    pc = np.where(np.abs(pc - rc) < SNAP_EPS, rc, pc)
    pr = np.where(np.abs(pr - rr) < SNAP_EPS, rr, pr)
    return pr, pc


def _taps(pr, pc, height, width):
    y0 = np.floor(pr).astype(np.int64)
    x0 = np.floor(pc).astype(np.int64)
    wy = pr - y0
    wx = pc - x0
    corners = []
    for dy, dx in ((0, 0), (0, 1), (1, 0), (1, 1)):
        yi = y0 + dy
        xi = x0 + dx
        valid = (yi >= 0) & (yi <= height - 1) & (xi >= 0) & (xi <= width - 1)
        corners.append((np.clip(yi, 0, height - 1), np.clip(xi, 0, width - 1), valid))
    weights = ((1 - wy) * (1 - wx), (1 - wy) * wx, wy * (1 - wx), wy * wx)
    return corners, weights, wy, wx


def bilinear_forward(maps: np.ndarray, grids: np.ndarray) -> np.ndarray:
    """Batched core: maps (N, C, H, W), grids (N, Ho, Wo, 2) -> (N, C, Ho, Wo)."""
    n, c, h, w = maps.shape
    pr, pc = _pixel_positions(grids, h, w)
    corners, weights, _, _ = _taps(pr, pc, h, w)
    bidx = np.arange(n)[:, None, None]
    out = np.zeros(grids.shape[:3] + (c,))
    for (yi, xi, valid), wt in zip(corners, weights):
        vals = maps[bidx, :, yi, xi] * valid[..., None]
        out += wt[..., None] * vals
    return np.moveaxis(out, 3, 1)


def bilinear_backward(upstream: np.ndarray, maps: np.ndarray, grids: np.ndarray):
    """Batched analytic gradients; returns (grad_maps, grad_grids)."""
    n, c, h, w = maps.shape
    pr, pc = _pixel_positions(grids, h, w)
    corners, weights, wy, wx = _taps(pr, pc, h, w)
    up = np.moveaxis(upstream, 1, 3)          # (N, Ho, Wo, C)
    bidx = np.arange(n)[:, None, None]

    grad_maps_flat = np.zeros((n * h * w, c))
    tap_vals = []
    for (yi, xi, valid), wt in zip(corners, weights):
        vals = maps[bidx, :, yi, xi] * valid[..., None]
        tap_vals.append(vals)
        flat = ((bidx * h + yi) * w + xi).ravel()
        contrib = (wt[..., None] * up * valid[..., None]).reshape(-1, c)
        np.add.at(grad_maps_flat, flat, contrib)
    grad_maps = grad_maps_flat.reshape(n, h, w, c)
    grad_maps = np.moveaxis(grad_maps, 3, 1)

    m00, m01, m10, m11 = tap_vals
    dval_dwx = (1 - wy)[..., None] * (m01 - m00) + wy[..., None] * (m11 - m10)
    dval_dwy = (1 - wx)[..., None] * (m10 - m00) + wx[..., None] * (m11 - m01)
    grad_px = (up * dval_dwx).sum(axis=3)
    grad_py = (up * dval_dwy).sum(axis=3)
    grad_grids = np.stack([grad_px * (w - 1) / 2.0, grad_py * (h - 1) / 2.0], axis=3)
    return grad_maps, grad_grids


def sample_bilinear(image: Image, grid: WarpGrid) -> Image:
    """Warp a single map by a grid; output size follows the grid."""
    maps = np.moveaxis(image.data, 2, 0)[None]
    out = bilinear_forward(maps, grid.coords[None])
    return Image(np.moveaxis(out[0], 0, 2))


def sample_bilinear_backward(upstream, image: Image, grid: WarpGrid) -> SampleGradients:
    """Exact analytic gradients of ``sample_bilinear``.

    ``upstream`` must match the forward output shape (H_out, W_out, C);
    grid gradients are expressed in normalized coordinate units.
    """
    up = np.asarray(upstream, dtype=float)
    if up.ndim == 2:
        up = up[:, :, None]
    expected = (grid.height, grid.width, image.channels)
    if up.shape != expected:
        raise ValueError(f"upstream shape {up.shape} does not match forward output {expected}")
    maps = np.moveaxis(image.data, 2, 0)[None]
    grad_maps, grad_grids = bilinear_backward(np.moveaxis(up, 2, 0)[None],
                                              maps, grid.coords[None])
    return SampleGradients(grad_image=np.moveaxis(grad_maps[0], 0, 2),
                           grad_grid=grad_grids[0])
