"""Joint alignment/recognition training and evaluation.

A run trains a recognition network (and, for STN methods, a localisation
network plus optional learnable template and per-landmark weights) on the
synthetic dataset, then reports rank-1 identification per yaw bucket and the
ANME of the method's deformed landmarks on the probe set.
"""

from __future__ import annotations

import json
import os
import time
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import nets
from .alignment import (AlignWeights, AlignmentMethod, LossReport, Template,
                        anme, compute_fixed_template, lmk_loss, load_template,
                        reg_loss, save_template, total_loss)
from .autodiff import Tensor
from .errors import NanLossError, NotInvertibleError
from .geometry import (LandmarkSet, WarpGrid, fit_affine, invert_warp_batch,
                       make_grid, tps_solve)
from .sampler import bilinear_forward
from .stn import ProjWarper, TpsWarper, warp
from .synthdata import load_dataset

YAW_BUCKETS = ((0.0, 15.0), (15.0, 30.0), (30.0, 90.0))
FIVE = (0, 1, 2, 3, 4)


@dataclass(frozen=True)
class ExperimentConfig:
    """Everything one training run depends on."""

    data_dir: str
    method: str = "stn-tps-4"
    apply_at: str = "input"
    lam: float = 3.0
    template_mode: str = "learnable"        # fixed | learnable | fixed-from-learned
    template_path: str | None = None        # required for fixed-from-learned
    weights_mode: str = "learnable"         # learnable | fixed
    weights_value: float = 0.5              # alpha used when weights_mode == fixed
    grid_size: int = 4                      # used when method == "stn-tps"
    epochs: int = 8
    batch_size: int = 64
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 5e-4
    margin: float = 0.35
    scale: float = 64.0
    embedding_dim: int = 32
    rec_channels: tuple = (8, 16, 32, 64)
    loc_channels: tuple = (4, 8, 16)
    seed: int = 0
    log_align_terms: bool = True

    def resolved_method(self) -> AlignmentMethod:
        name = self.method
        if name == "stn-tps":
            name = f"stn-tps-{self.grid_size}"
        return AlignmentMethod.parse(name, self.apply_at)

    def validate(self) -> None:
        method = self.resolved_method()
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.lam > 0 and not method.is_stn:
            raise ValueError(f"lambda > 0 requires an STN method, got {method.cli_name}")
        if self.template_mode not in ("fixed", "learnable", "fixed-from-learned"):
            raise ValueError(f"unknown template_mode {self.template_mode!r}")
        if self.template_mode == "fixed-from-learned" and not self.template_path:
            raise ValueError("template_mode fixed-from-learned needs template_path")
        if self.weights_mode not in ("learnable", "fixed"):
            raise ValueError(f"unknown weights_mode {self.weights_mode!r}")
        if not (0.0 < self.weights_value < 1.0):
            raise ValueError("weights_value must lie in (0, 1)")
        if self.epochs < 0 or self.batch_size < 2:
            raise ValueError("epochs must be >= 0 and batch_size >= 2")


@dataclass
class RunResult:
    """Outcome of one training run.

    wall_clock is reported separately (stdout and a timing sidecar) and is
    excluded from the result JSON so reruns are byte-identical.
    """

    config: dict
    seed: int
    epoch_reports: list
    rank1_overall: float
    rank1_buckets: dict
    anme: float
    wall_clock: float = 0.0

    def __post_init__(self):
        for name, v in [("rank1_overall", self.rank1_overall)] + list(self.rank1_buckets.items()):
            if not (0.0 <= v <= 1.0):
                raise ValueError(f"rank-1 {name} out of [0, 1]: {v}")
        if self.anme < 0:
            raise ValueError("ANME must be >= 0")

    def to_json_dict(self) -> dict:
        return _round_floats({
            "config": self.config,
            "seed": self.seed,
            "epochs": [r.as_dict() for r in self.epoch_reports],
            "rank1_overall": self.rank1_overall,
            "rank1_buckets": self.rank1_buckets,
            "anme": self.anme,
        })


def _round_floats(obj):
    """9-significant-digit float policy for everything we serialize."""
    if isinstance(obj, float):
        return float(f"{obj:.9g}")
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_round_floats(v) for v in obj]
    return obj


def write_result_json(path, result: RunResult) -> None:
    with open(path, "w") as fh:
        json.dump(result.to_json_dict(), fh, sort_keys=True, separators=(",", ":"))


def bucket_name(lo: float, hi: float) -> str:
    return f"yaw{int(lo):02d}to{int(hi):02d}"


class _Data:
    """Dataset records flattened into arrays for batched training."""

    def __init__(self, records):
        if not records:
            raise ValueError("empty dataset")
        self.images = np.stack([r.image.data.transpose(2, 0, 1) for r in records])
        self.landmarks = np.stack([r.landmarks.points for r in records])
        self.yaw = np.array([r.yaw_proxy for r in records])
        self.split = np.array([r.split for r in records])
        ids = np.array([r.identity for r in records])
        self.classes = np.unique(ids)
        lookup = {c: i for i, c in enumerate(self.classes)}
        self.labels = np.array([lookup[i] for i in ids])
        self.eye_indices = records[0].landmarks.eye_indices
        self.records = records
        self.train_idx = np.flatnonzero(self.split == "train")
        self.gallery_idx = np.flatnonzero(self.split == "gallery")
        self.probe_idx = np.flatnonzero(self.split == "probe")

    @property
    def image_hw(self):
        return self.images.shape[2], self.images.shape[3]


class Trainer:
    """One experiment: build, train, evaluate, checkpoint."""

    def __init__(self, cfg: ExperimentConfig):
        cfg.validate()
        self.cfg = cfg
        self.method = cfg.resolved_method()
        self.data = _Data(load_dataset(os.path.join(cfg.data_dir, "manifest.json")))
        h, w = self.data.image_hw

        train_records = [self.data.records[i] for i in self.data.train_idx]
        self.template_dense_fixed = compute_fixed_template(train_records, "dense")
        self.template_five = compute_fixed_template(train_records, "five-point")

        seeds = np.random.SeedSequence(cfg.seed).spawn(4)
        rec_seed, loc_seed, cls_seed, shuffle_seed = [
            int(s.generate_state(1)[0]) for s in seeds]
        self.shuffle_rng = np.random.default_rng(shuffle_seed)

        self.recnet = nets.build_recnet(
            cfg.embedding_dim, channels=cfg.rec_channels, seed=rec_seed)
        cls_rng = np.random.default_rng(cls_seed)
        self.class_weights = Tensor(
            cls_rng.standard_normal((len(self.data.classes), cfg.embedding_dim))
            / np.sqrt(cfg.embedding_dim), requires_grad=True)
        self.amcfg = nets.AmSoftmaxConfig(cfg.margin, cfg.scale, len(self.data.classes))

        self.locnet = None
        self.warper = None
        if self.method.is_stn:
            if self.method.kind == "stn-tps":
                g = self.method.grid_size
                self.warper = TpsWarper(g, h, w)
                head_dim = 2 * g * g
                bound = None
            else:
                self.warper = ProjWarper(h, w)
                head_dim = 8
                # Keep each projective offset below 0.45 so the perspective
                # row can never zero the homogeneous coordinate on the image
                # square (worst corner: 1 - 2*0.45 > 0).
                bound = 0.45
            self.locnet = nets.build_locnet(
                self.method.grid_size or 2, channels=cfg.loc_channels,
                head_dim=head_dim, seed=loc_seed, output_bound=bound)

        self._init_alignment_state()
        self._precompute_method_warps()

    # -- construction helpers -------------------------------------------

    def _init_alignment_state(self):
        cfg = self.cfg
        n_lmk = self.data.landmarks.shape[1]
        if cfg.template_mode == "fixed-from-learned":
            tpl = load_template(cfg.template_path)
            if len(tpl) != n_lmk:
                raise ValueError("loaded template size does not match dataset")
            init = tpl.points
        else:
            init = self.template_dense_fixed.points
        learn_template = (cfg.template_mode == "learnable"
                          and self.method.is_stn and cfg.lam > 0)
        self.template = Tensor(init.copy(), requires_grad=learn_template)

        learn_weights = (cfg.weights_mode == "learnable"
                         and self.method.is_stn and cfg.lam > 0)
        if cfg.weights_mode == "fixed":
            self.weights = AlignWeights.from_alpha(cfg.weights_value, n_lmk,
                                                   learnable=learn_weights)
        else:
            self.weights = AlignWeights(n_lmk, learnable=learn_weights)

    def _precompute_method_warps(self):
        """Per-sample grids and deformed landmarks for deterministic methods."""
        self.fixed_grids = None
        self.deformed_points = None
        kind = self.method.kind
        if kind not in ("affine2d", "full-align"):
            return
        h, w = self.data.image_hw
        m = len(self.data.records)
        grids = np.empty((m, h, w, 2))
        deformed = np.empty_like(self.data.landmarks)
        for i, pts in enumerate(self.data.landmarks):
            if kind == "affine2d":
                fwd = fit_affine(pts[list(FIVE)], self.template_five.points)
                grids[i] = make_grid(fwd.inverse(), h, w).coords
                deformed[i] = fwd.apply(pts)
            else:
                tps = tps_solve(self.template_dense_fixed.points, pts, 0.0)
                grids[i] = make_grid(tps, h, w).coords
                deformed[i] = self.template_dense_fixed.points
        self.fixed_grids = grids
        self.deformed_points = deformed
        if self.method.apply_at == "input":
            # Warp once up front; training then sees the aligned images.
            self.data.images = bilinear_forward(self.data.images, grids)

    def parameters(self):
        params = list(self.recnet.parameters()) + [self.class_weights]
        if self.locnet is not None:
            params.extend(self.locnet.parameters())
        if self.template.requires_grad:
            params.append(self.template)
        if self.weights.learnable:
            params.append(self.weights.raw)
        return params

    def _set_training(self, flag: bool):
        self.recnet.set_training(flag)
        if self.locnet is not None:
            self.locnet.set_training(flag)

    # -- forward paths ---------------------------------------------------

    def _stn_offsets(self, x: Tensor) -> Tensor:
        out = self.locnet.forward(x)
        if self.method.kind == "stn-tps":
            return ad.reshape(out, (out.data.shape[0], -1, 2))
        return out

    def _embed(self, idx, collect_offsets=None) -> Tensor:
        """Embeddings for a batch of record indices, via the method's path."""
        x = Tensor(self.data.images[idx])
        kind = self.method.kind
        at_fmap = self.method.apply_at == "fmap"

        if kind == "none" or (kind in ("affine2d", "full-align") and not at_fmap):
            return self.recnet.forward(x)
        if kind in ("affine2d", "full-align"):
            fmap = self.recnet.stage0_tap(x)
            warped = warp(fmap, Tensor(self.fixed_grids[idx]))
            return self.recnet.forward_from_stage0(warped)

        offsets = self._stn_offsets(x)
        if collect_offsets is not None:
            collect_offsets.append(offsets)
        grids = self.warper.grid(offsets)
        if at_fmap:
            fmap = self.recnet.stage0_tap(x)
            return self.recnet.forward_from_stage0(warp(fmap, grids))
        return self.recnet.forward(warp(x, grids))

    def _batch_losses(self, idx):
        """Total loss tensor plus the step's LossReport."""
        collected = [] if self.method.is_stn else None
        emb = self._embed(idx, collect_offsets=collected)
        l_fr = nets.am_softmax_loss(emb, self.class_weights,
                                    self.data.labels[idx], self.amcfg)
        lam = self.cfg.lam
        if self.method.is_stn and lam > 0:
            offsets = collected[0]
            warped_tpl = self.warper.warp_points(offsets, self.template)
            l_lmk = lmk_loss(warped_tpl, self.data.landmarks[idx], self.weights)
            l_reg = reg_loss(self.weights)
            total = l_fr + lam * (l_lmk + l_reg)
            report = total_loss(l_fr, l_lmk, l_reg, lam)
            return total, report
        if self.method.is_stn and self.cfg.log_align_terms:
            # Report-only evaluation; must not touch the training graph.
            with ad.no_grad():
                warped_tpl = self.warper.warp_points(
                    Tensor(collected[0].data), Tensor(self.template.data))
                l_lmk = float(lmk_loss(warped_tpl, self.data.landmarks[idx],
                                       AlignWeights(len(self.weights), False,
                                                    self.weights.raw.data)).data)
                l_reg = float(reg_loss(self.weights).data)
        else:
            l_lmk = l_reg = 0.0
        return l_fr, total_loss(l_fr, l_lmk, l_reg, lam)

    # -- training ----------------------------------------------------------

    def train(self, log=print) -> RunResult:
        cfg = self.cfg
        started = time.perf_counter()
        opt = nets.SGD(self.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay)
        reports = []
        for epoch in range(cfg.epochs):
            self._set_training(True)
            opt.lr = nets.lr_at_epoch(cfg.lr, epoch, cfg.epochs)
            order = self.shuffle_rng.permutation(self.data.train_idx)
            sums = np.zeros(3)
            batches = 0
            for start in range(0, len(order), cfg.batch_size):
                idx = order[start:start + cfg.batch_size]
                if len(idx) < 2:
                    continue
                total, report = self._batch_losses(idx)
                for term, value in (("total", report.total), ("l_fr", report.l_fr),
                                    ("l_lmk", report.l_lmk)):
                    if not np.isfinite(value):
                        raise NanLossError(epoch, term, value)
                total.backward()
                opt.step()
                if self.template.requires_grad:
                    np.clip(self.template.data, -1.0, 1.0, out=self.template.data)
                sums += (report.l_fr, report.l_lmk, report.l_reg)
                batches += 1
            mean = sums / max(batches, 1)
            epoch_report = total_loss(mean[0], mean[1], mean[2], cfg.lam)
            reports.append(epoch_report)
            if log:
                log(f"epoch {epoch + 1}/{cfg.epochs} lr {opt.lr:.4g} "
                    f"total {epoch_report.total:.4f} fr {epoch_report.l_fr:.4f} "
                    f"lmk {epoch_report.l_lmk:.4f} reg {epoch_report.l_reg:.4f}")

        rank1_overall, rank1_buckets, final_anme = self.evaluate()
        wall = time.perf_counter() - started
        return RunResult(config=_config_dict(cfg), seed=cfg.seed,
                         epoch_reports=reports, rank1_overall=rank1_overall,
                         rank1_buckets=rank1_buckets, anme=final_anme,
                         wall_clock=wall)

    # -- evaluation ----------------------------------------------------------

    def _eval_embeddings(self, indices, batch=128):
        """Embeddings (unit rows) and, for STN methods, per-sample grids."""
        embs = []
        grids_out = {}
        self._set_training(False)
        with ad.no_grad():
            for start in range(0, len(indices), batch):
                idx = indices[start:start + batch]
                if self.method.is_stn:
                    x = Tensor(self.data.images[idx])
                    offsets = self._stn_offsets(x)
                    grids = self.warper.grid(offsets).data
                    for j, rec_i in enumerate(idx):
                        grids_out[int(rec_i)] = grids[j]
                    if self.method.apply_at == "fmap":
                        fmap = self.recnet.stage0_tap(x)
                        emb = self.recnet.forward_from_stage0(
                            warp(fmap, Tensor(grids)))
                    else:
                        emb = self.recnet.forward(warp(x, Tensor(grids)))
                else:
                    emb = self._embed(idx)
                embs.append(emb.data)
        embs = np.concatenate(embs, axis=0)
        norms = np.linalg.norm(embs, axis=1, keepdims=True)
        embs = embs / np.maximum(norms, 1e-12)
        return embs, grids_out

    def evaluate(self):
        """Rank-1 (overall and per |yaw| bucket) and probe-set ANME."""
        data = self.data
        gal_idx, probe_idx = data.gallery_idx, data.probe_idx
        if len(gal_idx) == 0 or len(probe_idx) == 0:
            raise ValueError("dataset has no gallery/probe records")
        gal_emb, _ = self._eval_embeddings(gal_idx)
        probe_emb, probe_grids = self._eval_embeddings(probe_idx)
        sims = probe_emb @ gal_emb.T
        pred = data.labels[gal_idx][np.argmax(sims, axis=1)]
        correct = pred == data.labels[probe_idx]
        rank1_overall = float(np.mean(correct))

        buckets = {}
        yaw = np.abs(data.yaw[probe_idx])
        for lo, hi in YAW_BUCKETS:
            mask = (yaw > lo) & (yaw <= hi) if lo > 0 else (yaw <= hi)
            if np.any(mask):
                buckets[bucket_name(lo, hi)] = float(np.mean(correct[mask]))

        deformed = self._probe_deformed(probe_idx, probe_grids)
        final_anme = anme(deformed, data.eye_indices)
        return rank1_overall, buckets, final_anme

    def _probe_deformed(self, probe_idx, probe_grids) -> np.ndarray:
        """Deformed landmark positions of every probe under this method."""
        kind = self.method.kind
        if kind == "none":
            return self.data.landmarks[probe_idx].copy()
        if kind in ("affine2d", "full-align"):
            return self.deformed_points[probe_idx].copy()
        h, w = self.data.image_hw
        out = np.empty_like(self.data.landmarks[probe_idx])
        for j, rec_i in enumerate(probe_idx):
            grid = WarpGrid(h, w, probe_grids[int(rec_i)])
            try:
                out[j] = invert_warp_batch(grid, self.data.landmarks[rec_i])
            except NotInvertibleError:
                # Extreme warps can fold over; score the best preimage found.
                out[j] = invert_warp_batch(grid, self.data.landmarks[rec_i],
                                           tol=1e9)
        return out

    # -- persistence ---------------------------------------------------------

    def state_tensors(self) -> dict:
        tensors = dict(self.recnet.named_params())
        tensors.update(self.recnet.named_buffers())
        if self.locnet is not None:
            tensors.update(self.locnet.named_params())
            tensors.update(self.locnet.named_buffers())
        tensors["class_weights"] = self.class_weights
        tensors["align.raw_weights"] = self.weights.raw
        tensors["align.template"] = self.template
        return tensors

    def save_checkpoint(self, path) -> None:
        nets.save_checkpoint(path, _config_dict(self.cfg), self.state_tensors())

    def learned_template(self) -> Template:
        return Template(np.clip(self.template.data, -1.0, 1.0),
                        learnable=self.template.requires_grad)

    def restore(self, tensors: dict) -> None:
        """Load checkpoint arrays into the live parameters and buffers."""
        for name, target in self.state_tensors().items():
            if name not in tensors:
                raise KeyError(f"checkpoint is missing tensor {name!r}")
            value = tensors[name]
            dest = target.data if isinstance(target, Tensor) else target
            if dest.shape != value.shape:
                raise ValueError(f"{name}: shape {value.shape} != {dest.shape}")
            dest[...] = value


def _config_dict(cfg: ExperimentConfig) -> dict:
    out = asdict(cfg)
    out["rec_channels"] = list(cfg.rec_channels)
    out["loc_channels"] = list(cfg.loc_channels)
    return out


def config_from_dict(raw: dict) -> ExperimentConfig:
    raw = dict(raw)
    for key in ("rec_channels", "loc_channels"):
        if key in raw:
            raw[key] = tuple(raw[key])
    return ExperimentConfig(**raw)


def load_trainer(checkpoint_path, data_dir=None) -> Trainer:
    """Rebuild a Trainer from a checkpoint (optionally pointing at new data)."""
    config, tensors = nets.load_checkpoint(checkpoint_path)
    if data_dir is not None:
        config = dict(config, data_dir=data_dir)
    trainer = Trainer(config_from_dict(config))
    trainer.restore(tensors)
    return trainer


def run_experiment(cfg: ExperimentConfig, out_dir=None, log=print) -> RunResult:
    """Train, evaluate, and (optionally) persist result/checkpoint/template."""
    trainer = Trainer(cfg)
    result = trainer.train(log=log)
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        write_result_json(os.path.join(out_dir, "result.json"), result)
        trainer.save_checkpoint(os.path.join(out_dir, "checkpoint.bin"))
        save_template(os.path.join(out_dir, "template_learned.json"),
                      trainer.learned_template())
        with open(os.path.join(out_dir, "timing.json"), "w") as fh:
            json.dump({"wall_clock_seconds": result.wall_clock}, fh)
    if log:
        log(f"rank1 {result.rank1_overall:.4f} anme {result.anme:.5f} "
            f"wall {result.wall_clock:.1f}s")
    return result
