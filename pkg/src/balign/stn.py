"""Differentiable warp modules: thin-plate-spline and projective grid
generators plus the graph-connected bilinear warp.

Both warpers produce backward-mapping grids (output pixel -> input sampling
position) and can push template points through the same map, with gradients
flowing to the predicted parameters and to the template.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor, make_op
from .errors import DegenerateInputError
from .geometry import (DEFAULT_STN_REGULARIZATION, _hom, _tps_kernel,
                       pixel_centers, regular_lattice)
from .sampler import bilinear_backward, bilinear_forward


def _kernel_grad_factor(d2: np.ndarray) -> np.ndarray:
    """dU/d(r^2) = log(r^2) + 1 with the removable singularity at 0 set to 0.

    U = r^2 log r^2 and dU/d(dx) = 2 dx (log r^2 + 1) -> 0 as r -> 0, so the
    coincident-point entry contributes no gradient.
    """
    out = np.zeros_like(d2)
    nz = d2 > 0.0
    out[nz] = np.log(d2[nz]) + 1.0
    return out


class TpsWarper:
    """TPS grid generator on a fixed regular control lattice.

    The system matrix depends only on the lattice, so it is factored once;
    grids and warped points are then linear in the predicted offsets, and an
    all-zero offset yields bit-exactly the identity grid.
    """

    def __init__(self, grid_size: int, out_h: int, out_w: int,
                 regularization: float = DEFAULT_STN_REGULARIZATION):
        if grid_size < 2:
            raise ValueError("grid_size must be >= 2")
        self.grid_size = grid_size
        self.out_h = out_h
        self.out_w = out_w
        self.regularization = regularization
        self.lattice = regular_lattice(grid_size)
        n = grid_size * grid_size
        diff = self.lattice[:, None, :] - self.lattice[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        lhs = np.zeros((n + 3, n + 3))
        lhs[:n, :n] = _tps_kernel(d2) + regularization * np.eye(n)
        p = _hom(self.lattice)
        lhs[:n, n:] = p
        lhs[n:, :n] = p.T
        # Columns of L^-1 acting on the displacement block: coefficients are
        # point_basis @ offsets, grids are pixels + map_matrix @ offsets.
        self.point_basis = np.linalg.solve(lhs, np.eye(n + 3, n))
        self.pixels = pixel_centers(out_h, out_w)
        self.map_matrix = self._eval_rows(self.pixels) @ self.point_basis

    def _eval_rows(self, points: np.ndarray) -> np.ndarray:
        diff = points[:, None, :] - self.lattice[None, :, :]
        d2 = np.einsum("ijk,ijk->ij", diff, diff)
        return np.concatenate([_tps_kernel(d2), _hom(points)], axis=1)

    def control_count(self) -> int:
        return self.grid_size * self.grid_size

    def grid(self, offsets: Tensor) -> Tensor:
        """Sampling grids (B, out_h, out_w, 2) from offsets (B, n, 2)."""
        n = self.control_count()
        if offsets.data.shape[1:] != (n, 2):
            raise ValueError(f"offsets must be (batch, {n}, 2)")
        disp = np.einsum("pk,bkc->bpc", self.map_matrix, offsets.data)
        out = (self.pixels[None] + disp).reshape(-1, self.out_h, self.out_w, 2)

        def backward(g):
            gflat = g.reshape(g.shape[0], -1, 2)
            return ((offsets, np.einsum("pk,bpc->bkc", self.map_matrix, gflat)),)

        return make_op(out, (offsets,), backward)

    def warp_points(self, offsets: Tensor, template: Tensor) -> Tensor:
        """Map template points (L, 2) through each sample's warp -> (B, L, 2).

        Differentiable in both the predicted offsets (linear) and the template
        position (through the kernel and affine terms).
        """
        template = Tensor._coerce(template)
        tpl = template.data
        if tpl.ndim != 2 or tpl.shape[1] != 2:
            raise ValueError("template must be (points, 2)")
        coeffs = np.einsum("qk,bkc->bqc", self.point_basis, offsets.data)
        rows = self._eval_rows(tpl)
        out = tpl[None] + np.einsum("lq,bqc->blc", rows, coeffs)

        def backward(g):
            g_coeff = np.einsum("lq,blc->bqc", rows, g)
            g_off = np.einsum("qk,bqc->bkc", self.point_basis, g_coeff)
            n = self.control_count()
            diff = tpl[:, None, :] - self.lattice[None, :, :]
            d2 = np.einsum("ijk,ijk->ij", diff, diff)
            factor = _kernel_grad_factor(d2)
            s = np.einsum("blc,bqc->lq", g, coeffs[:, :n, :])
            g_tpl = (g.sum(axis=0)
                     + 2.0 * np.einsum("lq,lqa->la", s * factor, diff))
            # Affine columns of the eval rows are (x, y, 1); the constant one
            # carries no template derivative.
            g_tpl[:, 0] += np.einsum("blc,bc->l", g, coeffs[:, n, :])
            g_tpl[:, 1] += np.einsum("blc,bc->l", g, coeffs[:, n + 1, :])
            return ((offsets, g_off), (template, g_tpl))

        return make_op(out, (offsets, template), backward)


class ProjWarper:
    """Projective (homography) grid generator driven by 8 offset parameters.

    Parameters are offsets from the identity in row-major order of the first
    eight homography entries; the ninth entry is fixed at 1.
    """

    def __init__(self, out_h: int, out_w: int):
        self.out_h = out_h
        self.out_w = out_w
        self.pixels = pixel_centers(out_h, out_w)

    @staticmethod
    def _matrices(params: np.ndarray) -> np.ndarray:
        b = params.shape[0]
        h = np.concatenate([params, np.zeros((b, 1))], axis=1).reshape(b, 3, 3)
        h += np.eye(3)
        return h

    def _project(self, h: np.ndarray, pts: np.ndarray):
        ph = _hom(pts)
        uvw = np.einsum("bij,pj->bpi", h, ph)
        w = uvw[..., 2]
        if np.any(np.abs(w) < 1e-8):
            raise DegenerateInputError("projective warp maps a point to infinity")
        return uvw[..., 0] / w, uvw[..., 1] / w, w, ph

    def grid(self, params: Tensor) -> Tensor:
        """Sampling grids (B, out_h, out_w, 2) from parameters (B, 8)."""
        if params.data.shape[1:] != (8,):
            raise ValueError("params must be (batch, 8)")
        h = self._matrices(params.data)
        x, y, w, ph = self._project(h, self.pixels)
        out = np.stack([x, y], axis=2).reshape(-1, self.out_h, self.out_w, 2)

        def backward(g):
            gb = g.reshape(g.shape[0], -1, 2)
            gx, gy = gb[..., 0] / w, gb[..., 1] / w
            gw = -(gb[..., 0] * x + gb[..., 1] * y) / w
            dp = np.concatenate([
                np.einsum("bp,pj->bj", gx, ph),
                np.einsum("bp,pj->bj", gy, ph),
                np.einsum("bp,pj->bj", gw, ph[:, :2]),
            ], axis=1)
            return ((params, dp),)

        return make_op(out, (params,), backward)

    def warp_points(self, params: Tensor, template: Tensor) -> Tensor:
        """Map template points (L, 2) through each homography -> (B, L, 2)."""
        template = Tensor._coerce(template)
        tpl = template.data
        if tpl.ndim != 2 or tpl.shape[1] != 2:
            raise ValueError("template must be (points, 2)")
        h = self._matrices(params.data)
        x, y, w, ph = self._project(h, tpl)
        out = np.stack([x, y], axis=2)

        def backward(g):
            gx, gy = g[..., 0] / w, g[..., 1] / w
            gw = -(g[..., 0] * x + g[..., 1] * y) / w
            dp = np.concatenate([
                np.einsum("bl,lj->bj", gx, ph),
                np.einsum("bl,lj->bj", gy, ph),
                np.einsum("bl,lj->bj", gw, ph[:, :2]),
            ], axis=1)
            # Chain rule through u/w: d(u/w)/dT = (h_row0[:2] - (u/w) h_row2[:2]) / w
            # and gw already carries the -(out . g)/w part of the quotient rule.
            dt = (np.einsum("bl,bj->lj", gx, h[:, 0, :2])
                  + np.einsum("bl,bj->lj", gy, h[:, 1, :2])
                  + np.einsum("bl,bj->lj", gw, h[:, 2, :2]))
            return ((params, dp), (template, dt))

        return make_op(out, (params, template), backward)


def warp(maps: Tensor, grids: Tensor) -> Tensor:
    """Bilinear warp of (N, C, H, W) maps by (N, Ho, Wo, 2) grids, in-graph.

    Gradients flow to the grids and, when the maps are graph-connected (the
    feature-map variant), to the maps as well.
    """
    maps = Tensor._coerce(maps)
    out = bilinear_forward(maps.data, grids.data)

    def backward(g):
        grad_maps, grad_grids = bilinear_backward(g, maps.data, grids.data)
        return ((maps, grad_maps), (grids, grad_grids))

    return make_op(out, (maps, grids), backward)
