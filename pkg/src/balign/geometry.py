"""2-D geometric transforms (affine, projective, thin-plate-spline), dense
backward-mapping warp grids, and warp inversion for landmark tracking.

Coordinates are normalized to [-1, 1)^2 .. [-1, 1]^2 with (-1, -1) at the
top-left pixel center and (+1, +1) at the bottom-right pixel center.  Warp
grids follow the backward-mapping convention: ``coords[r, c]`` is the input
coordinate sampled by output pixel (r, c).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateInputError, NotInvertibleError, SingularFitError

# Regularization used when solving TPS systems from network-predicted control
# points; guards against near-duplicate predictions.  Oracle fits use 0.
DEFAULT_STN_REGULARIZATION = 1e-6

_IDENTITY_23 = np.array([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])


def pixel_centers(height: int, width: int) -> np.ndarray:
    """Normalized coordinates of pixel centers, shape (height*width, 2).

    Row-major: index r*width + c holds the (x, y) center of pixel (r, c).
    """
    xs = np.linspace(-1.0, 1.0, width)
    ys = np.linspace(-1.0, 1.0, height)
    gx, gy = np.meshgrid(xs, ys)
    return np.stack([gx.ravel(), gy.ravel()], axis=1)


def regular_lattice(grid_size: int) -> np.ndarray:
    """Cross points of a regular grid over [-1, 1]^2, shape (grid_size^2, 2)."""
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    return pixel_centers(grid_size, grid_size)


def _as_points(points) -> np.ndarray:
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    if pts.ndim != 2 or pts.shape[1] != 2:
        raise ValueError(f"expected points of shape (n, 2), got {pts.shape}")
    return pts


def _hom(points: np.ndarray) -> np.ndarray:
    """Append a ones column: (n, 2) -> (n, 3) of (x, y, 1)."""
    return np.concatenate([points, np.ones((len(points), 1))], axis=1)


def _solve_refined(lhs: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Dense LU solve with two steps of iterative refinement.

    Refinement keeps interpolation residuals near machine precision even for
    badly conditioned kernel matrices (near-duplicate control points).
    """
    sol = np.linalg.solve(lhs, rhs)
    for _ in range(2):
        resid = rhs - lhs @ sol
        sol = sol + np.linalg.solve(lhs, resid)
    return sol


@dataclass(frozen=True)
class Point2:
    """A single 2-D point in normalized coordinates."""

    x: float
    y: float

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y])


@dataclass(frozen=True)
class LandmarkSet:
    """Ordered landmarks for one face, with designated eye indices."""

    points: np.ndarray            # (S, 2) normalized coordinates
    eye_indices: tuple = (0, 1)

    def __post_init__(self):
        pts = _as_points(self.points)
        object.__setattr__(self, "points", pts)
        i, j = self.eye_indices
        if len(pts) < 3:
            raise ValueError("a LandmarkSet needs at least 3 points")
        if i == j or not (0 <= i < len(pts)) or not (0 <= j < len(pts)):
            raise ValueError(f"bad eye indices {self.eye_indices} for {len(pts)} points")
        if not np.all(np.isfinite(pts)):
            raise ValueError("landmarks must be finite")
        object.__setattr__(self, "eye_indices", (int(i), int(j)))

    def __len__(self):
        return len(self.points)

    def interpupil_distance(self) -> float:
        i, j = self.eye_indices
        return float(np.linalg.norm(self.points[i] - self.points[j]))

    def transformed(self, transform) -> "LandmarkSet":
        return LandmarkSet(apply_transform(transform, self.points), self.eye_indices)


def save_landmarks(path, landmarks: LandmarkSet):
    """Write a landmark set as JSON with 9 significant digits."""
    payload = {
        "points": [[float(f"{v:.9g}") for v in p] for p in landmarks.points],
        "eye_indices": list(landmarks.eye_indices),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_landmarks(path) -> LandmarkSet:
    with open(path) as fh:
        payload = json.load(fh)
    return LandmarkSet(np.array(payload["points"], dtype=float),
                       tuple(payload["eye_indices"]))


@dataclass(frozen=True)
class AffineTransform:
    """2-D affine map f(p) = M[:, :2] @ p + M[:, 2] with M of shape (2, 3)."""

    coefficients: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.coefficients, dtype=float).reshape(2, 3)
        if not np.all(np.isfinite(m)):
            raise ValueError("affine coefficients must be finite")
        object.__setattr__(self, "coefficients", m)

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls(_IDENTITY_23.copy())

    @classmethod
    def translation(cls, tx: float, ty: float) -> "AffineTransform":
        m = _IDENTITY_23.copy()
        m[0, 2] = tx
        m[1, 2] = ty
        return cls(m)

    def apply(self, points) -> np.ndarray:
        return _hom(_as_points(points)) @ self.coefficients.T

    def inverse(self) -> "AffineTransform":
        lin = self.coefficients[:, :2]
        det = lin[0, 0] * lin[1, 1] - lin[0, 1] * lin[1, 0]
        if abs(det) < 1e-12:
            raise SingularFitError("affine linear block is singular")
        inv_lin = np.array([[lin[1, 1], -lin[0, 1]], [-lin[1, 0], lin[0, 0]]]) / det
        inv_t = -inv_lin @ self.coefficients[:, 2]
        return AffineTransform(np.concatenate([inv_lin, inv_t[:, None]], axis=1))

    def compose(self, other: "AffineTransform") -> "AffineTransform":
        """self after other: (self ∘ other)(p) = self(other(p))."""
        lin = self.coefficients[:, :2] @ other.coefficients[:, :2]
        t = self.coefficients[:, :2] @ other.coefficients[:, 2] + self.coefficients[:, 2]
        return AffineTransform(np.concatenate([lin, t[:, None]], axis=1))


@dataclass(frozen=True)
class ProjectiveTransform:
    """Planar homography; matrix is (3, 3) with the last entry fixed to 1."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=float).reshape(3, 3)
        if not np.all(np.isfinite(m)):
            raise ValueError("homography must be finite")
        if abs(m[2, 2]) < 1e-12:
            raise SingularFitError("homography has vanishing scale entry")
        m = m / m[2, 2]
        if abs(np.linalg.det(m)) < 1e-12:
            raise SingularFitError("homography is singular")
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "ProjectiveTransform":
        return cls(np.eye(3))

    def apply(self, points) -> np.ndarray:
        out = _hom(_as_points(points)) @ self.matrix.T
        w = out[:, 2]
        if np.any(np.abs(w) < 1e-12):
            raise DegenerateInputError("point maps to infinity under homography")
        return out[:, :2] / w[:, None]

    def inverse(self) -> "ProjectiveTransform":
        return ProjectiveTransform(np.linalg.inv(self.matrix))


def _tps_kernel(d2: np.ndarray) -> np.ndarray:
    """U(r) = r^2 log(r^2) evaluated on squared distances, with U(0) = 0."""
    out = np.zeros_like(d2)
    nz = d2 > 0.0
    out[nz] = d2[nz] * np.log(d2[nz])
    return out


@dataclass(frozen=True)
class TpsTransform:
    """Thin-plate-spline map anchored at ``source_points``.

    f(p) = affine_part @ (x, y, 1) + sum_k w_k U(|p - source_k|), where the
    affine part already contains the identity (the system is solved in
    displacement form, so an exact-identity fit yields exactly zero weights
    and the exact identity affine).
    """

    source_points: np.ndarray     # (n, 2)
    nonlinear_weights: np.ndarray  # (n, 2)
    affine_part: np.ndarray       # (2, 3)
    regularization: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "source_points", _as_points(self.source_points))
        w = np.asarray(self.nonlinear_weights, dtype=float)
        object.__setattr__(self, "nonlinear_weights", w)
        object.__setattr__(self, "affine_part",
                           np.asarray(self.affine_part, dtype=float).reshape(2, 3))
        if self.regularization < 0:
            raise ValueError("regularization must be >= 0")

    def apply(self, points) -> np.ndarray:
        return tps_eval(self, points)


def fit_affine(src: LandmarkSet, dst: LandmarkSet) -> AffineTransform:
    """Least-squares affine taking src landmarks onto dst landmarks."""
    s = src.points if isinstance(src, LandmarkSet) else _as_points(src)
    d = dst.points if isinstance(dst, LandmarkSet) else _as_points(dst)
    if len(s) != len(d):
        raise ValueError(f"point counts differ: {len(s)} vs {len(d)}")
    if len(s) < 3:
        raise ValueError("affine fit needs at least 3 correspondences")
    design = _hom(s)
    # Displacement form: dst = src + X @ B, so an exact-identity fit produces
    # exactly zero displacement coefficients.
    sol, _, rank, _ = np.linalg.lstsq(design, d - s, rcond=None)
    if rank < 3:
        raise SingularFitError("source points are collinear or degenerate")
    return AffineTransform(sol.T + _IDENTITY_23)


def _normalizer(points: np.ndarray) -> np.ndarray:
    """Hartley similarity: centroid to origin, mean distance to sqrt(2)."""
    centroid = points.mean(axis=0)
    mean_dist = np.mean(np.linalg.norm(points - centroid, axis=1))
    if mean_dist < 1e-12:
        raise SingularFitError("all points coincide")
    s = np.sqrt(2.0) / mean_dist
    return np.array([[s, 0.0, -s * centroid[0]],
                     [0.0, s, -s * centroid[1]],
                     [0.0, 0.0, 1.0]])


def fit_projective(src: LandmarkSet, dst: LandmarkSet) -> ProjectiveTransform:
    """Least-squares homography via the normalized DLT; exact for 4 points."""
    s = src.points if isinstance(src, LandmarkSet) else _as_points(src)
    d = dst.points if isinstance(dst, LandmarkSet) else _as_points(dst)
    if len(s) != len(d):
        raise ValueError(f"point counts differ: {len(s)} vs {len(d)}")
    if len(s) < 4:
        raise ValueError("projective fit needs at least 4 correspondences")
    t1, t2 = _normalizer(s), _normalizer(d)
    sn = (_hom(s) @ t1.T)[:, :2]
    dn = (_hom(d) @ t2.T)[:, :2]
    rows = []
    for (x, y), (xp, yp) in zip(sn, dn):
        rows.append([x, y, 1.0, 0.0, 0.0, 0.0, -xp * x, -xp * y, -xp])
        rows.append([0.0, 0.0, 0.0, x, y, 1.0, -yp * x, -yp * y, -yp])
    a = np.asarray(rows)
    _, sv, vh = np.linalg.svd(a)
    if sv[7] < 1e-10 * sv[0]:
        raise SingularFitError("degenerate correspondences (collinear subset)")
    h = np.linalg.inv(t2) @ vh[-1].reshape(3, 3) @ t1
    if abs(h[2, 2]) < 1e-12:
        raise SingularFitError("homography scale entry vanished")
    return ProjectiveTransform(h / h[2, 2])


def tps_solve(source, target, regularization: float = 0.0) -> TpsTransform:
    """Solve the TPS system [K + reg*I, P; P^T, 0] mapping source -> target.

    With ``regularization`` 0 the returned map interpolates the targets
    exactly (up to solver precision).  Raises SingularFitError on duplicate
    source points (when unregularized) and on singular systems.
    """
    src = _as_points(source)
    tgt = _as_points(target)
    if len(src) != len(tgt):
        raise ValueError(f"point counts differ: {len(src)} vs {len(tgt)}")
    if len(src) < 3:
        raise ValueError("TPS needs at least 3 control points")
    if regularization < 0:
        raise ValueError("regularization must be >= 0")
    n = len(src)
    diff = src[:, None, :] - src[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    if regularization == 0.0:
        off = d2 + np.eye(n)
        if np.any(off == 0.0):
            raise SingularFitError("duplicate source points (retry with regularization > 0)")
    kern = _tps_kernel(d2) + regularization * np.eye(n)
    p = _hom(src)
    lhs = np.zeros((n + 3, n + 3))
    lhs[:n, :n] = kern
    lhs[:n, n:] = p
    lhs[n:, :n] = p.T
    rhs = np.zeros((n + 3, 2))
    rhs[:n] = tgt - src
    try:
        sol = _solve_refined(lhs, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularFitError(f"TPS system is singular: {exc}") from exc
    if not np.all(np.isfinite(sol)):
        raise SingularFitError("TPS solve produced non-finite coefficients")
    return TpsTransform(source_points=src.copy(),
                        nonlinear_weights=sol[:n],
                        affine_part=sol[n:].T + _IDENTITY_23,
                        regularization=regularization)


def tps_eval(t: TpsTransform, points) -> np.ndarray:
    """Evaluate a TPS map at arbitrary points, shape (n, 2) in, (n, 2) out."""
    pts = _as_points(points)
    diff = pts[:, None, :] - t.source_points[None, :, :]
    d2 = np.einsum("ijk,ijk->ij", diff, diff)
    return _hom(pts) @ t.affine_part.T + _tps_kernel(d2) @ t.nonlinear_weights


@dataclass(frozen=True)
class WarpGrid:
    """Per-output-pixel input coordinates (backward map) for the sampler."""

    height: int
    width: int
    coords: np.ndarray            # (height, width, 2) of (x, y)

    def __post_init__(self):
        c = np.asarray(self.coords, dtype=float)
        if c.shape != (self.height, self.width, 2):
            raise ValueError(f"coords shape {c.shape} does not match "
                             f"({self.height}, {self.width}, 2)")
        if not np.all(np.isfinite(c)):
            raise ValueError("grid coordinates must be finite")
        object.__setattr__(self, "coords", c)

    @classmethod
    def identity(cls, height: int, width: int) -> "WarpGrid":
        return make_grid(AffineTransform.identity(), height, width)

    def evaluate(self, points) -> np.ndarray:
        """Bilinear interpolation of the grid map at normalized output coords.

        Extrapolates linearly outside the outermost pixel centers (the edge
        cells' bilinear patches are extended), which keeps Newton iterations
        well-behaved near the frame.
        """
        pts = _as_points(points)
        value, _ = self._patch(pts)
        return value

    def _patch(self, pts: np.ndarray):
        """Bilinear value and Jacobian (d input coord / d output coord)."""
        h, w = self.height, self.width
        if h < 2 or w < 2:
            raise NotInvertibleError("grid evaluation needs at least 2x2 nodes")
        pc = (pts[:, 0] + 1.0) * (w - 1) / 2.0
        pr = (pts[:, 1] + 1.0) * (h - 1) / 2.0
        j = np.clip(np.floor(pc).astype(int), 0, w - 2)
        i = np.clip(np.floor(pr).astype(int), 0, h - 2)
        a = pc - j
        b = pr - i
        c00 = self.coords[i, j]
        c01 = self.coords[i, j + 1]
        c10 = self.coords[i + 1, j]
        c11 = self.coords[i + 1, j + 1]
        a_ = a[:, None]
        b_ = b[:, None]
        value = ((1 - b_) * ((1 - a_) * c00 + a_ * c01)
                 + b_ * ((1 - a_) * c10 + a_ * c11))
        dval_da = (1 - b_) * (c01 - c00) + b_ * (c11 - c10)
        dval_db = (1 - a_) * (c10 - c00) + a_ * (c11 - c01)
        jac = np.stack([dval_da * (w - 1) / 2.0, dval_db * (h - 1) / 2.0], axis=2)
        return value, jac


def apply_transform(transform, points) -> np.ndarray:
    """Evaluate any supported transform (or callable) at points."""
    if hasattr(transform, "apply"):
        return transform.apply(points)
    if isinstance(transform, WarpGrid):
        return transform.evaluate(points)
    if callable(transform):
        return _as_points(transform(_as_points(points)))
    raise TypeError(f"unsupported transform type {type(transform)!r}")


def make_grid(transform, height: int, width: int) -> WarpGrid:
    """Dense backward-mapping grid: transform applied to every output pixel center."""
    if height < 1 or width < 1:
        raise ValueError("grid dimensions must be >= 1")
    lattice = pixel_centers(height, width)
    coords = apply_transform(transform, lattice)
    return WarpGrid(height, width, coords.reshape(height, width, 2))


def tps_from_stn_params(predicted_source, grid_size: int,
                        regularization: float = DEFAULT_STN_REGULARIZATION) -> TpsTransform:
    """TPS whose domain is the fixed regular lattice and whose range are the
    network-predicted source points (backward map for the sampler)."""
    pred = _as_points(predicted_source)
    if grid_size < 2:
        raise ValueError("grid_size must be >= 2")
    if len(pred) != grid_size * grid_size:
        raise ValueError(f"expected {grid_size * grid_size} predicted points, got {len(pred)}")
    return tps_solve(regular_lattice(grid_size), pred, regularization)


def invert_warp(grid: WarpGrid, point, tol: float = 1e-3,
                max_iter: int = 20) -> np.ndarray:
    """Find the output coordinate whose grid-mapped input coordinate is ``point``.

    Coarse search over grid nodes followed by Gauss-Newton refinement of the
    local bilinear patch.  Raises NotInvertibleError if no preimage within
    ``tol`` (normalized units) is found.
    """
    out = invert_warp_batch(grid, np.asarray(point, dtype=float)[None, :],
                            tol=tol, max_iter=max_iter)
    return out[0]


def invert_warp_batch(grid: WarpGrid, points, tol: float = 1e-3,
                      max_iter: int = 20, starts: int = 5) -> np.ndarray:
    """Vectorized warp inversion for many points against one grid."""
    pts = _as_points(points)
    m = len(pts)
    nodes = grid.coords.reshape(-1, 2)
    node_uv = pixel_centers(grid.height, grid.width)
    d2 = ((pts[:, None, :] - nodes[None, :, :]) ** 2).sum(axis=2)
    k = min(starts, d2.shape[1])
    order = np.argpartition(d2, k - 1, axis=1)[:, :k]

    best_u = np.zeros((m, 2))
    best_res = np.full(m, np.inf)
    for s in range(k):
        u = node_uv[order[:, s]].copy()
        target = pts
        for _ in range(max_iter):
            val, jac = grid._patch(u)
            resid = target - val
            # 2x2 solve with damping guard against locally singular patches
            a, b = jac[:, 0, 0], jac[:, 0, 1]
            c, d = jac[:, 1, 0], jac[:, 1, 1]
            det = a * d - b * c
            det = np.where(np.abs(det) < 1e-14, np.where(det < 0, -1e-14, 1e-14), det)
            du = (d * resid[:, 0] - b * resid[:, 1]) / det
            dv = (-c * resid[:, 0] + a * resid[:, 1]) / det
            step = np.stack([du, dv], axis=1)
            norm = np.linalg.norm(step, axis=1, keepdims=True)
            step = np.where(norm > 0.5, step * (0.5 / np.maximum(norm, 0.5)), step)
            u = np.clip(u + step, -1.0, 1.0)
        val, _ = grid._patch(u)
        res = np.linalg.norm(pts - val, axis=1)
        better = res < best_res
        best_u[better] = u[better]
        best_res[better] = res[better]
    if np.any(best_res > tol):
        worst = int(np.argmax(best_res))
        raise NotInvertibleError(
            f"warp inversion failed for point {pts[worst]} (residual {best_res[worst]:.3g})")
    return best_u
