"""Deterministic synthetic face-proxy dataset with exact landmark annotations.

Identity lives in the landmark geometry (a per-identity perturbation of a
shared face layout) and in per-landmark blob intensities.  Pose is an exact
similarity-plus-tilt transform of the base landmarks, and images are rendered
from the transformed landmarks, so ground truth is exact by construction.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np

from .errors import PoseOutOfBoundsError
from .geometry import LandmarkSet, ProjectiveTransform, load_landmarks, save_landmarks
from .pgmio import read_pgm, write_pgm
from .sampler import Image

SHAPE_STD = 0.06
INTENSITY_LOW = 0.65
INTENSITY_HIGH = 0.65
BLOB_SIGMA_PX = 1.5
LINE_SIGMA_PX = 0.7
LINE_STRENGTH = 0.35
NOISE_STD = 0.02
CONTOUR_JITTER_STD = 0.06
OUTLIER_PROB = 0.08
OUTLIER_RANGE = (0.2, 0.4)
LANDMARK_BOUND = 0.95


@dataclass(frozen=True)
class IdentitySpec:
    """Geometry and appearance parameters of one synthetic identity."""

    id: int
    base_landmarks: LandmarkSet
    blob_intensities: np.ndarray
    edge_set: tuple

    def __post_init__(self):
        inten = np.asarray(self.blob_intensities, dtype=float)
        if len(inten) != len(self.base_landmarks):
            raise ValueError("one intensity per landmark required")
        if np.any(inten <= 0):
            raise ValueError("blob intensities must be positive")
        if np.any(np.abs(self.base_landmarks.points) > 0.7):
            raise ValueError("base landmarks must lie within [-0.7, 0.7]^2")
        object.__setattr__(self, "blob_intensities", inten)
        object.__setattr__(self, "edge_set", tuple(tuple(e) for e in self.edge_set))


@dataclass(frozen=True)
class Pose:
    """In-plane pose: rotation (degrees), scale, translation, projective tilt.

    rotation_deg doubles as the yaw proxy; tilt adds the two projective
    degrees of freedom beyond a similarity.
    """

    rotation_deg: float = 0.0
    scale: float = 1.0
    translation: tuple = (0.0, 0.0)
    tilt: tuple = (0.0, 0.0)

    @classmethod
    def identity(cls) -> "Pose":
        return cls()


@dataclass(frozen=True)
class SampleRecord:
    identity: int
    pose: Pose
    image: Image
    landmarks: LandmarkSet
    yaw_proxy: float


def mean_face_layout(landmark_count: int) -> np.ndarray:
    """Shared canonical layout: eyes, nose, mouth pair, then a contour chain."""
    if landmark_count < 6:
        raise ValueError("need at least 6 landmarks")
    five = np.array([
        [-0.32, -0.30],
        [0.32, -0.30],
        [0.00, 0.02],
        [-0.22, 0.34],
        [0.22, 0.34],
    ])
    m = landmark_count - 5
    phi = np.linspace(0.08 * np.pi, 0.92 * np.pi, m)
    contour = np.stack([0.52 * np.cos(phi), 0.03 + 0.60 * np.sin(phi)], axis=1)
    return np.concatenate([five, contour], axis=0)


def contour_indices(landmark_count: int) -> tuple:
    """Indices of the contour chain (everything after the five-point set)."""
    return tuple(range(5, landmark_count))


def _edges(landmark_count: int) -> tuple:
    edges = [(0, 2), (1, 2), (2, 3), (2, 4), (3, 4)]
    edges.extend((i, i + 1) for i in range(5, landmark_count - 1))
    return tuple(edges)


def gen_identities(count: int, landmark_count: int, seed: int) -> list:
    """Identity specs: mean layout plus per-identity shape perturbation."""
    if count < 2:
        raise ValueError("need at least 2 identities")
    if landmark_count < 6:
        raise ValueError("need at least 6 landmarks")
    rng = np.random.default_rng(seed)
    mean = mean_face_layout(landmark_count)
    edges = _edges(landmark_count)
    specs = []
    for i in range(count):
        pts = np.clip(mean + rng.normal(0.0, SHAPE_STD, mean.shape), -0.7, 0.7)
        # Uniform intensities keep identity carried by geometry alone, so
        # alignment that distorts geometry measurably costs accuracy.
        inten = rng.uniform(INTENSITY_LOW, INTENSITY_HIGH, landmark_count)
        specs.append(IdentitySpec(i, LandmarkSet(pts), inten, edges))
    return specs


def pose_transform(pose: Pose) -> ProjectiveTransform:
    """Similarity (rotation, scale, translation) composed with projective tilt."""
    th = np.deg2rad(pose.rotation_deg)
    c, s = np.cos(th), np.sin(th)
    tx, ty = pose.translation
    t1, t2 = pose.tilt
    h = np.array([
        [pose.scale * c, -pose.scale * s, tx],
        [pose.scale * s, pose.scale * c, ty],
        [t1, t2, 1.0],
    ])
    return ProjectiveTransform(h)


def _pose_jacobian(transform: ProjectiveTransform, points: np.ndarray) -> np.ndarray:
    """Local 2x2 Jacobians of the pose map at each point (normalized coords)."""
    h = transform.matrix
    ph = np.concatenate([points, np.ones((len(points), 1))], axis=1)
    uvw = ph @ h.T
    u, v, w = uvw[:, 0], uvw[:, 1], uvw[:, 2]
    jac = np.empty((len(points), 2, 2))
    jac[:, 0, 0] = (h[0, 0] * w - u * h[2, 0]) / w ** 2
    jac[:, 0, 1] = (h[0, 1] * w - u * h[2, 1]) / w ** 2
    jac[:, 1, 0] = (h[1, 0] * w - v * h[2, 0]) / w ** 2
    jac[:, 1, 1] = (h[1, 1] * w - v * h[2, 1]) / w ** 2
    return jac


def render_sample(spec: IdentitySpec, pose: Pose, image_size: int,
                  rng: np.random.Generator | None = None,
                  noise_std: float = NOISE_STD,
                  shape_offsets: np.ndarray | None = None) -> SampleRecord:
    """Render one sample image from the pose-transformed landmarks.

    `shape_offsets` is an optional per-sample deformation added in the
    face's own frame before the pose (expression-like wobble); the saved
    landmarks are exact positions of the deformed geometry.  The image is
    a sum of Gaussian blobs (deformed by the local pose Jacobian, hence
    anisotropic) at the landmarks, soft line segments along the edge set,
    and additive noise, clamped to [-1, 1].
    """
    if not (0.5 <= pose.scale <= 1.5):
        raise ValueError("scale must lie in [0.5, 1.5]")
    if abs(pose.rotation_deg) > 60.0:
        raise ValueError("|rotation| must be <= 60 degrees")
    base = spec.base_landmarks.points
    if shape_offsets is not None:
        base = base + shape_offsets
    transform = pose_transform(pose)
    pts = transform.apply(base)
    if np.any(np.abs(pts) > LANDMARK_BOUND):
        raise PoseOutOfBoundsError(
            f"pose pushes a landmark outside [-{LANDMARK_BOUND}, {LANDMARK_BOUND}]^2")

    size = int(image_size)
    half = (size - 1) / 2.0
    px = (pts + 1.0) * half                       # landmark pixel positions
    xs = np.arange(size, dtype=float)
    gx, gy = np.meshgrid(xs, xs)                  # gy rows, gx cols
    field_img = np.zeros((size, size))

    jac = _pose_jacobian(transform, base)
    for k in range(len(pts)):
        cov = (BLOB_SIGMA_PX ** 2) * (jac[k] @ jac[k].T)
        icov = np.linalg.inv(cov)
        dx = gx - px[k, 0]
        dy = gy - px[k, 1]
        quad = icov[0, 0] * dx * dx + 2 * icov[0, 1] * dx * dy + icov[1, 1] * dy * dy
        field_img += spec.blob_intensities[k] * np.exp(-0.5 * quad)

    for a, b in spec.edge_set:
        pa, pb = px[a], px[b]
        seg = pb - pa
        seg_len2 = seg @ seg
        if seg_len2 < 1e-12:
            continue
        t = ((gx - pa[0]) * seg[0] + (gy - pa[1]) * seg[1]) / seg_len2
        t = np.clip(t, 0.0, 1.0)
        dist2 = (gx - (pa[0] + t * seg[0])) ** 2 + (gy - (pa[1] + t * seg[1])) ** 2
        field_img += LINE_STRENGTH * np.exp(-0.5 * dist2 / LINE_SIGMA_PX ** 2)

    img = -1.0 + 2.0 * np.minimum(field_img, 1.0)
    if noise_std > 0:
        if rng is None:
            rng = np.random.default_rng(0)
        img = img + rng.normal(0.0, noise_std, img.shape)
    img = np.clip(img, -1.0, 1.0)
    return SampleRecord(spec.id, pose, Image(img),
                        LandmarkSet(pts, spec.base_landmarks.eye_indices),
                        float(pose.rotation_deg))


@dataclass(frozen=True)
class DatasetConfig:
    identities: int = 100
    train_per_id: int = 20
    test_per_id: int = 6
    landmark_count: int = 16
    image_size: int = 32
    seed: int = 0
    rotation_range: tuple = (-45.0, 45.0)
    gallery_rotation_range: tuple = (-10.0, 10.0)
    scale_range: tuple = (0.8, 1.2)
    translation_range: tuple = (-0.1, 0.1)
    tilt_std: float = 0.04
    noise_std: float = NOISE_STD
    contour_jitter_std: float = CONTOUR_JITTER_STD
    outlier_prob: float = OUTLIER_PROB
    outlier_range: tuple = OUTLIER_RANGE
    landmark_noise_std: float = 0.0

    def record_count(self) -> int:
        return self.identities * (self.train_per_id + self.test_per_id)


def _draw_pose(rng: np.random.Generator, cfg: DatasetConfig, rotation_range) -> Pose:
    return Pose(
        rotation_deg=float(rng.uniform(*rotation_range)),
        scale=float(rng.uniform(*cfg.scale_range)),
        translation=(float(rng.uniform(*cfg.translation_range)),
                     float(rng.uniform(*cfg.translation_range))),
        tilt=(float(rng.normal(0.0, cfg.tilt_std)),
              float(rng.normal(0.0, cfg.tilt_std))),
    )


def _render_with_retry(spec, rng, cfg, rotation_range, max_tries=100) -> SampleRecord:
    chain = contour_indices(cfg.landmark_count)
    for _ in range(max_tries):
        pose = _draw_pose(rng, cfg, rotation_range)
        offsets = None
        if cfg.contour_jitter_std > 0 or cfg.outlier_prob > 0:
            # Contour points wobble per sample (expression-like); the five
            # inner points stay put so inter-pupil geometry is untouched.
            offsets = np.zeros((cfg.landmark_count, 2))
            offsets[list(chain)] = rng.normal(
                0.0, cfg.contour_jitter_std, (len(chain), 2))
            if rng.uniform() < cfg.outlier_prob:
                # Occasional large excursion of one contour point: a sparse,
                # clearly visible deformation no global per-landmark weight
                # can discount sample-by-sample.
                k = chain[rng.integers(len(chain))]
                ang = rng.uniform(0.0, 2.0 * np.pi)
                mag = rng.uniform(*cfg.outlier_range)
                offsets[k] += mag * np.array([np.cos(ang), np.sin(ang)])
        try:
            return render_sample(spec, pose, cfg.image_size, rng, cfg.noise_std,
                                 shape_offsets=offsets)
        except PoseOutOfBoundsError:
            continue
    raise PoseOutOfBoundsError("could not draw an in-bounds pose; ranges too wide")


def gen_dataset(cfg: DatasetConfig, output_dir) -> dict:
    """Write PGM images, landmark JSONs, and the manifest; returns the manifest.

    Splits: per-identity train samples, then one near-frontal gallery sample
    and probe samples for the test protocol.
    """
    os.makedirs(os.path.join(output_dir, "images"), exist_ok=True)
    os.makedirs(os.path.join(output_dir, "landmarks"), exist_ok=True)
    rng = np.random.default_rng(cfg.seed)
    # Separate stream for label jitter so the rendered pixels do not depend
    # on the annotation-noise setting.
    label_rng = np.random.default_rng([cfg.seed, 1])
    specs = gen_identities(cfg.identities, cfg.landmark_count, cfg.seed)

    records = []
    for spec in specs:
        plan = [("train", cfg.rotation_range)] * cfg.train_per_id
        if cfg.test_per_id > 0:
            plan.append(("gallery", cfg.gallery_rotation_range))
            plan.extend([("probe", cfg.rotation_range)] * (cfg.test_per_id - 1))
        for k, (split, rot_range) in enumerate(plan):
            rec = _render_with_retry(spec, rng, cfg, rot_range)
            stem = f"id{spec.id:04d}_{k:03d}_{split}"
            img_rel = f"images/{stem}.pgm"
            lmk_rel = f"landmarks/{stem}.json"
            write_pgm(os.path.join(output_dir, img_rel), rec.image)
            saved = rec.landmarks
            if cfg.landmark_noise_std > 0:
                # Optional annotation jitter: rendering stays exact, only the
                # saved coordinates move.
                noisy = saved.points + label_rng.normal(
                    0.0, cfg.landmark_noise_std, saved.points.shape)
                saved = LandmarkSet(noisy, saved.eye_indices)
            save_landmarks(os.path.join(output_dir, lmk_rel), saved)
            records.append({
                "path": img_rel,
                "landmarks_path": lmk_rel,
                "identity": spec.id,
                "split": split,
                "yaw_proxy": float(f"{rec.yaw_proxy:.9g}"),
            })

    manifest = {"seed": cfg.seed, "landmark_count": cfg.landmark_count,
                "records": records}
    with open(os.path.join(output_dir, "manifest.json"), "w") as fh:
        json.dump(manifest, fh, indent=1, sort_keys=True)
    return manifest


@dataclass(frozen=True)
class LoadedRecord:
    """One dataset record with image and landmarks materialized."""

    identity: int
    split: str
    yaw_proxy: float
    image: Image
    landmarks: LandmarkSet


def load_dataset(manifest_path) -> list:
    """Load every record referenced by a manifest into memory."""
    root = os.path.dirname(os.path.abspath(manifest_path))
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    out = []
    for rec in manifest["records"]:
        image = read_pgm(os.path.join(root, rec["path"]))
        landmarks = load_landmarks(os.path.join(root, rec["landmarks_path"]))
        out.append(LoadedRecord(int(rec["identity"]), rec["split"],
                                float(rec["yaw_proxy"]), image, landmarks))
    return out
