"""Alignment strength metric, alignment losses with learnable per-landmark
weights and template, and the five baseline alignment methods.

The ANME metric scores how tightly a corpus of deformed landmark sets
clusters around its per-landmark mean, normalized by mean inter-pupil
distance: lower means stronger alignment.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .errors import DegenerateInputError, EmptySelectionError
from .geometry import (LandmarkSet, WarpGrid, apply_transform, fit_affine,
                       invert_warp_batch, make_grid, tps_solve)
from .sampler import Image, bilinear_forward, sample_bilinear

LMK_EPS = 1e-8
FRONTAL_YAW_LIMIT = 15.0
FIVE_POINT_INDICES = (0, 1, 2, 3, 4)
METHOD_NAMES = ("none", "affine2d", "stn-proj", "stn-tps-2", "stn-tps-8", "full-align")


# ---------------------------------------------------------------------------
# domain types


@dataclass(frozen=True)
class Template:
    """Common output-space landmark configuration faces are pulled toward."""

    points: np.ndarray            # (S, 2)
    learnable: bool = False

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2:
            raise ValueError(f"template points must be (n, 2), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("template points must be finite")
        if np.any(np.abs(pts) > 1.0):
            raise ValueError("template points must lie inside [-1, 1]^2")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return len(self.points)

    def subset(self, indices) -> "Template":
        return Template(self.points[list(indices)], self.learnable)


def save_template(path, template: Template) -> None:
    payload = {"points": [[float(f"{v:.9g}") for v in p] for p in template.points],
               "learnable": bool(template.learnable)}
    with open(path, "w") as fh:
        json.dump(payload, fh)


def load_template(path) -> Template:
    with open(path) as fh:
        payload = json.load(fh)
    return Template(np.array(payload["points"], dtype=float), bool(payload["learnable"]))


class AlignWeights:
    """Per-landmark loss weights alpha = sigmoid(raw), structurally in (0, 1).

    Raw parameters start at 0 (alpha = 0.5), an unbiased midpoint between
    ignoring a landmark and fully constraining it.
    """

    def __init__(self, count: int, learnable: bool = True, raw=None):
        if raw is None:
            raw = np.zeros(count)
        raw = np.asarray(raw, dtype=float)
        if raw.shape != (count,):
            raise ValueError(f"raw weights must have shape ({count},)")
        self.raw = Tensor(raw, requires_grad=learnable)

    @classmethod
    def from_alpha(cls, alpha, count: int, learnable: bool = False) -> "AlignWeights":
        a = np.broadcast_to(np.asarray(alpha, dtype=float), (count,))
        if np.any(a <= 0.0) or np.any(a >= 1.0):
            raise ValueError("alpha values must lie strictly in (0, 1)")
        return cls(count, learnable=learnable, raw=np.log(a / (1.0 - a)))

    def __len__(self):
        return len(self.raw.data)

    @property
    def learnable(self) -> bool:
        return self.raw.requires_grad

    def alphas(self) -> Tensor:
        """Effective weights as a graph node."""
        return ad.sigmoid(self.raw)

    def values(self) -> np.ndarray:
        """Effective weights as a plain array."""
        return 1.0 / (1.0 + np.exp(-self.raw.data))


@dataclass(frozen=True)
class LossReport:
    """One training step's loss decomposition.

    Invariants: l_align = l_lmk + l_reg and total = l_fr + lam * l_align.
    """

    l_fr: float
    l_lmk: float
    l_reg: float
    l_align: float
    total: float
    lam: float

    def __post_init__(self):
        for name in ("l_fr", "l_lmk", "l_reg", "l_align", "total", "lam"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} is not finite")
        if self.l_lmk < 0 or self.l_reg < 0:
            raise ValueError("l_lmk and l_reg must be non-negative")

    def as_dict(self) -> dict:
        return {"l_fr": self.l_fr, "l_lmk": self.l_lmk, "l_reg": self.l_reg,
                "l_align": self.l_align, "total": self.total, "lambda": self.lam}


@dataclass(frozen=True)
class AlignmentMethod:
    """One of the five alignment methods, plus where it is applied.

    kind: none | affine2d | stn-proj | stn-tps | full-align
    apply_at: input (warp the image) or fmap (warp the stage-0 feature map).
    """

    kind: str
    grid_size: int | None = None
    apply_at: str = "input"

    def __post_init__(self):
        if self.kind not in ("none", "affine2d", "stn-proj", "stn-tps", "full-align"):
            raise ValueError(f"unknown alignment method kind {self.kind!r}")
        if self.kind == "stn-tps":
            if self.grid_size is None or self.grid_size < 2:
                raise ValueError("stn-tps needs grid_size >= 2")
        elif self.grid_size is not None:
            raise ValueError(f"{self.kind} takes no grid_size")
        if self.apply_at not in ("input", "fmap"):
            raise ValueError("apply_at must be 'input' or 'fmap'")

    @property
    def is_stn(self) -> bool:
        return self.kind in ("stn-proj", "stn-tps")

    @property
    def cli_name(self) -> str:
        if self.kind == "stn-tps":
            return f"stn-tps-{self.grid_size}"
        return self.kind

    @classmethod
    def parse(cls, name: str, apply_at: str = "input") -> "AlignmentMethod":
        name = name.strip().lower()
        if name.startswith("stn-tps-"):
            return cls("stn-tps", int(name[len("stn-tps-"):]), apply_at)
        return cls(name, None, apply_at)


# ---------------------------------------------------------------------------
# metric


def _stack_deformed(deformed, eye_indices):
    if isinstance(deformed, np.ndarray):
        pts = np.asarray(deformed, dtype=float)
        if pts.ndim != 3 or pts.shape[2] != 2:
            raise ValueError("deformed array must be (samples, landmarks, 2)")
        if eye_indices is None:
            raise ValueError("eye_indices required with array input")
        return pts, tuple(eye_indices)
    sets = list(deformed)
    if not sets:
        raise ValueError("no landmark sets given")
    eyes = sets[0].eye_indices
    count = len(sets[0])
    for s in sets:
        if len(s) != count or s.eye_indices != eyes:
            raise ValueError("landmark sets disagree on size or eye indices")
    return np.stack([s.points for s in sets]), eyes


def anme(deformed, eye_indices=None) -> float:
    """Alignment normalized mean error over a corpus of deformed landmarks.

    Mean Euclidean spread of each landmark around its per-landmark corpus
    mean, divided by the mean inter-pupil distance of the corpus.  Accepts a
    list of LandmarkSet or a raw (N, S, 2) array with explicit eye indices.
    """
    pts, eyes = _stack_deformed(deformed, eye_indices)
    n = pts.shape[0]
    if n < 2:
        raise ValueError("ANME needs at least 2 samples")
    i, j = eyes
    d = float(np.mean(np.linalg.norm(pts[:, i] - pts[:, j], axis=1)))
    if d <= 1e-9:
        raise DegenerateInputError("inter-pupil normalizer is degenerate")
    spread = np.linalg.norm(pts - pts.mean(axis=0, keepdims=True), axis=2)
    return float(spread.sum() / (pts.shape[0] * pts.shape[1]) / d)


# ---------------------------------------------------------------------------
# losses


def warp_template(template: Template, transform) -> np.ndarray:
    """Backward-map evaluation at each template point: the input-image
    coordinate that lands at T^s after warping."""
    return apply_transform(transform, template.points)


def lmk_loss(warped_template, gt, weights: AlignWeights) -> Tensor:
    """Weighted mean landmark distance between warped template and ground truth.

    (1/(N*S)) * sum_i sum_s alpha_s * sqrt(||W(T^s; I_i) - x_i^s||^2 + eps^2).
    Differentiable through warped_template (warp parameters and template) and
    through the weights.
    """
    warped = Tensor._coerce(warped_template)
    if warped.data.ndim == 2:
        warped = ad.reshape(warped, (1,) + warped.data.shape)
    if isinstance(gt, LandmarkSet):
        gt = gt.points[None]
    elif isinstance(gt, (list, tuple)) and gt and isinstance(gt[0], LandmarkSet):
        gt = np.stack([g.points for g in gt])
    gt = np.asarray(gt, dtype=float)
    if gt.ndim == 2:
        gt = gt[None]
    if gt.shape != warped.data.shape:
        raise ValueError(f"shape mismatch: warped {warped.data.shape} vs gt {gt.shape}")
    n, s = gt.shape[0], gt.shape[1]
    if len(weights) != s:
        raise ValueError(f"expected {s} weights, got {len(weights)}")
    res = warped - Tensor(gt)
    dist = ad.sqrt(ad.tsum(ad.square(res), axis=2) + LMK_EPS ** 2)
    return ad.tsum(dist * weights.alphas()) * (1.0 / (n * s))


def reg_loss(weights: AlignWeights) -> Tensor:
    """sum_s (1 - alpha_s)^2; keeps the weights from collapsing to zero."""
    return ad.tsum(ad.square(1.0 - weights.alphas()))


def total_loss(l_fr, l_lmk, l_reg, lam: float) -> LossReport:
    """Assemble the loss report: total = l_fr + lam * (l_lmk + l_reg)."""
    if lam < 0:
        raise ValueError("lambda must be >= 0")

    def _scalar(v):
        return float(v.data) if isinstance(v, Tensor) else float(v)

    fr, lk, rg = _scalar(l_fr), _scalar(l_lmk), _scalar(l_reg)
    align = lk + rg
    return LossReport(fr, lk, rg, align, fr + lam * align, lam)


# ---------------------------------------------------------------------------
# fixed templates and method application


def compute_fixed_template(records, mode: str = "dense",
                           yaw_limit: float = FRONTAL_YAW_LIMIT) -> Template:
    """Per-landmark mean over near-frontal samples (|yaw_proxy| <= yaw_limit).

    mode 'dense' keeps every landmark; 'five-point' keeps the canonical
    eyes/nose/mouth subset.
    """
    if mode not in ("dense", "five-point"):
        raise ValueError("mode must be 'dense' or 'five-point'")
    frontal = [r for r in records if abs(r.yaw_proxy) <= yaw_limit]
    if not frontal:
        raise EmptySelectionError(f"no samples with |yaw| <= {yaw_limit}")
    pts = np.stack([r.landmarks.points for r in frontal]).mean(axis=0)
    if mode == "five-point":
        pts = pts[list(FIVE_POINT_INDICES)]
    return Template(pts, learnable=False)


@dataclass
class MethodContext:
    """What apply_method needs beyond the sample itself.

    template_five/template_dense for the deterministic methods; locnet and
    warper for trained STN variants; stage0 (image -> feature Image) when
    applying at the feature map.
    """

    template_five: Template | None = None
    template_dense: Template | None = None
    locnet: object = None
    warper: object = None
    stage0: object = None


def method_warp(method: AlignmentMethod, image: Image, gt: LandmarkSet,
                 context: MethodContext):
    """Grid and deformed landmarks for one sample under one method."""
    h, w = image.height, image.width
    if method.kind == "none":
        return None, gt
    if method.kind == "affine2d":
        fwd = fit_affine(gt.points[list(FIVE_POINT_INDICES)],
                         context.template_five.points)
        grid = make_grid(fwd.inverse(), h, w)
        return grid, LandmarkSet(fwd.apply(gt.points), gt.eye_indices)
    if method.kind == "full-align":
        tps = tps_solve(context.template_dense.points, gt.points, regularization=0.0)
        grid = make_grid(tps, h, w)
        return grid, LandmarkSet(context.template_dense.points.copy(), gt.eye_indices)
    params = predict_warp_params(method, image, context)
    grid = WarpGrid(h, w, context.warper.grid(Tensor(params[None])).data[0])
    return grid, LandmarkSet(invert_warp_batch(grid, gt.points), gt.eye_indices)


def method_grid(method: AlignmentMethod, image: Image, gt: LandmarkSet,
                context: MethodContext):
    """The sampling grid a method induces for one sample (None for 'none')."""
    return method_warp(method, image, gt, context)[0]


def predict_warp_params(method: AlignmentMethod, image: Image,
                        context: MethodContext) -> np.ndarray:
    """LocNet parameter prediction for one sample, outside the graph."""
    with ad.no_grad():
        x = Tensor(image.data.transpose(2, 0, 1)[None])
        out = context.locnet.forward(x).data[0]
    if method.kind == "stn-tps":
        return out.reshape(-1, 2)
    return out


def apply_method(method: AlignmentMethod, image: Image, gt: LandmarkSet,
                 context: MethodContext):
    """Warp one sample by the given method.

    Returns (warped Image, deformed LandmarkSet): the warped image or stage-0
    feature map, and where the ground-truth landmarks end up in output space.
    """
    grid, deformed = method_warp(method, image, gt, context)
    source = context.stage0(image) if method.apply_at == "fmap" else image
    if grid is None:
        return source, deformed
    return sample_bilinear(source, grid), deformed


def batch_warp_images(images: np.ndarray, grids: np.ndarray) -> np.ndarray:
    """Plain (non-graph) batched warp used by deterministic preprocessing."""
    return bilinear_forward(images, grids)
