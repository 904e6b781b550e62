"""Experiment drivers: lambda sweeps, baseline-method comparisons, ablations,
the finite-difference gradient-check suite, and the warp demo.

Multi-run commands fan (config, seed) pairs across a small thread pool capped
by BALIGN_THREADS (default 1) and aggregate rows in sorted order, so outputs
are independent of scheduling.
"""

from __future__ import annotations

import csv
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import replace

import numpy as np

from . import nets
from .alignment import (AlignWeights, AlignmentMethod, MethodContext, Template,
                        apply_method, lmk_loss, method_warp, reg_loss)
from .autodiff import Tensor
from .geometry import load_landmarks
from .pgmio import read_pgm, write_pgm
from .sampler import bilinear_backward, bilinear_forward
from .stn import TpsWarper, warp
from .svg import overlay_plot, scatter_plot
from .synthdata import mean_face_layout
from .train import ExperimentConfig, RunResult, Trainer, run_experiment

FD_STEP = 1e-5
GRAD_TOLERANCES = {"sampler": 1e-4}
GRAD_DEFAULT_TOL = 1e-3


def _fmt9(v) -> str:
    return f"{float(v):.9g}"


def write_csv(path, fieldnames, rows) -> None:
    """CSV with all floats rendered at 9 significant digits."""
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt9(v) if isinstance(v, float) else v
                             for k, v in row.items()})


def worker_count(n_jobs: int) -> int:
    env = os.environ.get("BALIGN_THREADS", "1")
    try:
        cap = int(env)
    except ValueError:
        raise ValueError(f"BALIGN_THREADS must be an integer, got {env!r}")
    return max(1, min(cap, n_jobs))


def _run_matrix(jobs, out_root, log=print):
    """jobs: list of (key, ExperimentConfig). Returns {key: RunResult}."""

    def one(item):
        key, cfg = item
        run_dir = os.path.join(out_root, key) if out_root else None
        prefix = f"[{key}] "
        sublog = (lambda msg: log(prefix + msg)) if log else None
        return key, run_experiment(cfg, out_dir=run_dir, log=sublog)

    workers = worker_count(len(jobs))
    if workers == 1:
        results = [one(j) for j in jobs]
    else:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, jobs))
    return dict(results)


def _bucket_columns(results) -> list:
    names = set()
    for r in results:
        names.update(r.rank1_buckets)
    return sorted(names)


def _result_row(result: RunResult, buckets) -> dict:
    row = {"anme": result.anme, "rank1_overall": result.rank1_overall}
    for b in buckets:
        row[f"rank1_{b}"] = result.rank1_buckets.get(b, float("nan"))
    return row


def _mean(values):
    return float(np.mean(values))


# ---------------------------------------------------------------------------
# lambda sweep


def sweep_lambda(base_cfg: ExperimentConfig, lambdas, seeds, out_dir, log=print):
    """Train every (lambda, seed) pair; emit per-run CSV rows and the
    rank-1 versus ANME scatter over per-lambda means."""
    lambdas = [float(v) for v in lambdas]
    if len(lambdas) < 2:
        raise ValueError("need at least 2 lambda values")
    if len(set(lambdas)) != len(lambdas):
        raise ValueError("duplicate lambda values")
    if not base_cfg.resolved_method().is_stn:
        raise ValueError("lambda sweep needs an STN method")
    os.makedirs(out_dir, exist_ok=True)

    jobs = [(f"lam{lam:g}_seed{seed}", replace(base_cfg, lam=lam, seed=seed))
            for lam in lambdas for seed in seeds]
    results = _run_matrix(jobs, out_dir, log=log)

    buckets = _bucket_columns(results.values())
    rows = []
    for lam in lambdas:
        for seed in seeds:
            r = results[f"lam{lam:g}_seed{seed}"]
            rows.append({"lambda": lam, "seed": seed, **_result_row(r, buckets)})
    fields = ["lambda", "seed", "anme", "rank1_overall"] + [f"rank1_{b}" for b in buckets]
    write_csv(os.path.join(out_dir, "sweep_lambda.csv"), fields, rows)

    points = []
    for lam in lambdas:
        rs = [results[f"lam{lam:g}_seed{seed}"] for seed in seeds]
        points.append((_mean([r.anme for r in rs]),
                       _mean([r.rank1_overall for r in rs]),
                       f"lambda={lam:g}"))
    scatter_plot(os.path.join(out_dir, "sweep_lambda.svg"), points,
                 "ANME", "rank-1", "alignment strength sweep")
    return rows


# ---------------------------------------------------------------------------
# baseline methods


def run_baselines(base_cfg: ExperimentConfig, methods, seeds, out_dir,
                  apply_ats=("input", "fmap"), log=print):
    """Every (method, apply_at) combination, lambda = 0 throughout.

    The main CSV holds one mean row per combination; a per-seed CSV sits
    alongside it.
    """
    for name in methods:
        AlignmentMethod.parse(name)
    os.makedirs(out_dir, exist_ok=True)

    jobs = []
    for name in methods:
        for at in apply_ats:
            for seed in seeds:
                cfg = replace(base_cfg, method=name, apply_at=at, lam=0.0, seed=seed)
                jobs.append((f"{name}_{at}_seed{seed}", cfg))
    results = _run_matrix(jobs, out_dir, log=log)

    buckets = _bucket_columns(results.values())
    mean_rows, seed_rows = [], []
    for name in methods:
        for at in apply_ats:
            rs = []
            for seed in seeds:
                r = results[f"{name}_{at}_seed{seed}"]
                rs.append(r)
                seed_rows.append({"method": name, "apply_at": at, "seed": seed,
                                  **_result_row(r, buckets)})
            mean_row = {"method": name, "apply_at": at,
                        "anme": _mean([r.anme for r in rs]),
                        "rank1_overall": _mean([r.rank1_overall for r in rs])}
            for b in buckets:
                mean_row[f"rank1_{b}"] = _mean(
                    [r.rank1_buckets.get(b, float("nan")) for r in rs])
            mean_rows.append(mean_row)

    fields = ["method", "apply_at", "anme", "rank1_overall"] + \
        [f"rank1_{b}" for b in buckets]
    write_csv(os.path.join(out_dir, "baselines.csv"), fields, mean_rows)
    write_csv(os.path.join(out_dir, "baselines_seeds.csv"),
              ["method", "apply_at", "seed"] + fields[2:], seed_rows)

    points = [(row["anme"], row["rank1_overall"], f"{row['method']}@{row['apply_at']}")
              for row in mean_rows]
    scatter_plot(os.path.join(out_dir, "baselines.svg"), points,
                 "ANME", "rank-1", "alignment methods", connect=False)
    return mean_rows


# ---------------------------------------------------------------------------
# ablations


def run_ablation(base_cfg: ExperimentConfig, axis: str, seeds, out_dir, log=print):
    """weights: fixed alpha 0.5 vs learnable alpha (with a per-landmark dump).
    template: fixed T_fix, learnable T, then the learned T frozen (T_fix_dagger).
    """
    if axis not in ("weights", "template"):
        raise ValueError("axis must be 'weights' or 'template'")
    if not base_cfg.resolved_method().is_stn or base_cfg.lam <= 0:
        raise ValueError("ablations need an STN method with lambda > 0")
    os.makedirs(out_dir, exist_ok=True)

    if axis == "weights":
        arms = [("fixed_alpha", replace(base_cfg, weights_mode="fixed")),
                ("learnable_alpha", replace(base_cfg, weights_mode="learnable"))]
        jobs = [(f"{arm}_seed{seed}", replace(cfg, seed=seed))
                for arm, cfg in arms for seed in seeds]
        results = _run_matrix(jobs, out_dir, log=log)
        alpha_rows = []
        for seed in seeds:
            ckpt = os.path.join(out_dir, f"learnable_alpha_seed{seed}", "checkpoint.bin")
            _, tensors = nets.load_checkpoint(ckpt)
            alphas = 1.0 / (1.0 + np.exp(-tensors["align.raw_weights"]))
            for i, a in enumerate(alphas):
                alpha_rows.append({"seed": seed, "landmark": i, "alpha": float(a)})
        write_csv(os.path.join(out_dir, "learned_alphas.csv"),
                  ["seed", "landmark", "alpha"], alpha_rows)
        arm_names = [a for a, _ in arms]
    else:
        fix_jobs = [(f"t_fix_seed{seed}",
                     replace(base_cfg, template_mode="fixed", seed=seed))
                    for seed in seeds]
        learn_jobs = [(f"t_learn_seed{seed}",
                       replace(base_cfg, template_mode="learnable", seed=seed))
                      for seed in seeds]
        results = _run_matrix(fix_jobs + learn_jobs, out_dir, log=log)
        dagger_jobs = []
        for seed in seeds:
            tpl = os.path.join(out_dir, f"t_learn_seed{seed}", "template_learned.json")
            dagger_jobs.append((f"t_fix_dagger_seed{seed}",
                                replace(base_cfg, template_mode="fixed-from-learned",
                                        template_path=tpl, seed=seed)))
        results.update(_run_matrix(dagger_jobs, out_dir, log=log))
        arm_names = ["t_fix", "t_learn", "t_fix_dagger"]

    buckets = _bucket_columns(results.values())
    mean_rows, seed_rows = [], []
    for arm in arm_names:
        rs = []
        for seed in seeds:
            r = results[f"{arm}_seed{seed}"]
            rs.append(r)
            seed_rows.append({"arm": arm, "seed": seed, **_result_row(r, buckets)})
        row = {"arm": arm,
               "anme": _mean([r.anme for r in rs]),
               "rank1_overall": _mean([r.rank1_overall for r in rs])}
        for b in buckets:
            row[f"rank1_{b}"] = _mean([r.rank1_buckets.get(b, float("nan")) for r in rs])
        mean_rows.append(row)

    fields = ["arm", "anme", "rank1_overall"] + [f"rank1_{b}" for b in buckets]
    write_csv(os.path.join(out_dir, f"ablate_{axis}.csv"), fields, mean_rows)
    write_csv(os.path.join(out_dir, f"ablate_{axis}_seeds.csv"),
              ["arm", "seed"] + fields[1:], seed_rows)
    return mean_rows


# ---------------------------------------------------------------------------
# gradient checking


def _fd_grad(f, arr, indices=None, h=FD_STEP):
    """Central finite differences of scalar f() over selected flat indices."""
    flat = arr.reshape(-1)
    if indices is None:
        indices = range(flat.size)
    grad = np.zeros(flat.size)
    checked = np.zeros(flat.size, dtype=bool)
    for i in indices:
        orig = flat[i]
        flat[i] = orig + h
        fp = f()
        flat[i] = orig - h
        fm = f()
        flat[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
        checked[i] = True
    return grad.reshape(arr.shape), checked.reshape(arr.shape)


def _max_rel_err(analytic, fd, checked) -> float:
    a = analytic[checked]
    f = fd[checked]
    return float(np.max(np.abs(a - f) / np.maximum.reduce(
        [np.abs(a), np.abs(f), np.full_like(a, 1e-3)])))


def _degrid(positions, size):
    """Nudge normalized coords whose pixel positions sit near the integer
    lattice, so finite differencing never straddles a bilinear cell edge."""
    px = (positions + 1.0) * (size - 1) / 2.0
    near = np.abs(px - np.round(px)) < 1e-3
    return positions + np.where(near, 4e-3, 0.0)


def _check_sampler(rng):
    maps = rng.uniform(-1, 1, (2, 2, 8, 8))
    grids = _degrid(rng.uniform(-0.9, 0.9, (2, 5, 5, 2)), 8)
    w = rng.standard_normal((2, 2, 5, 5))

    def loss():
        return float((bilinear_forward(maps, grids) * w).sum())

    grad_maps, grad_grids = bilinear_backward(w, maps, grids)
    fd_m, chk_m = _fd_grad(loss, maps)
    fd_g, chk_g = _fd_grad(loss, grids)
    return max(_max_rel_err(grad_maps, fd_m, chk_m),
               _max_rel_err(grad_grids, fd_g, chk_g))


def _check_tps_warp(rng):
    warper = TpsWarper(3, 8, 8)
    image = rng.uniform(-1, 1, (1, 1, 8, 8))
    offsets = rng.normal(0.0, 0.08, (1, 9, 2))
    w = rng.standard_normal((1, 1, 8, 8))

    def loss_np():
        g = warper.grid(Tensor(offsets))
        return float((bilinear_forward(image, g.data) * w).sum())

    t_off = Tensor(offsets.copy(), requires_grad=True)
    out = warp(Tensor(image), warper.grid(t_off))
    (out * Tensor(w)).sum().backward()
    fd, chk = _fd_grad(loss_np, offsets)
    return _max_rel_err(t_off.grad, fd, chk)


def _check_lmk_loss(rng):
    warper = TpsWarper(3, 8, 8)
    offsets = rng.normal(0.0, 0.08, (2, 9, 2))
    template = rng.uniform(-0.7, 0.7, (6, 2))
    raw = rng.normal(0.0, 0.5, 6)
    gt = rng.uniform(-0.8, 0.8, (2, 6, 2))

    def loss_np():
        wts = AlignWeights(6, learnable=False, raw=raw)
        wt = warper.warp_points(Tensor(offsets), Tensor(template))
        return float(lmk_loss(wt, gt, wts).data)

    t_off = Tensor(offsets.copy(), requires_grad=True)
    t_tpl = Tensor(template.copy(), requires_grad=True)
    wts = AlignWeights(6, learnable=True, raw=raw.copy())
    lmk_loss(warper.warp_points(t_off, t_tpl), gt, wts).backward()

    errs = []
    for arr, grad in ((offsets, t_off.grad), (template, t_tpl.grad),
                      (raw, wts.raw.grad)):
        fd, chk = _fd_grad(loss_np, arr)
        errs.append(_max_rel_err(grad, fd, chk))
    return max(errs)


def _check_reg_loss(rng):
    raw = rng.normal(0.0, 1.0, 8)

    def loss_np():
        return float(reg_loss(AlignWeights(8, learnable=False, raw=raw)).data)

    wts = AlignWeights(8, learnable=True, raw=raw.copy())
    reg_loss(wts).backward()
    fd, chk = _fd_grad(loss_np, raw)
    return _max_rel_err(wts.raw.grad, fd, chk)


def _check_am_softmax(rng):
    emb = rng.standard_normal((4, 8))
    cls = rng.standard_normal((5, 8))
    labels = rng.integers(0, 5, 4)
    cfg = nets.AmSoftmaxConfig(0.35, 64.0, 5)

    def loss_np():
        return float(nets.am_softmax_loss(Tensor(emb), Tensor(cls), labels, cfg).data)

    t_emb = Tensor(emb.copy(), requires_grad=True)
    t_cls = Tensor(cls.copy(), requires_grad=True)
    nets.am_softmax_loss(t_emb, t_cls, labels, cfg).backward()
    fd_e, chk_e = _fd_grad(loss_np, emb)
    fd_c, chk_c = _fd_grad(loss_np, cls)
    return max(_max_rel_err(t_emb.grad, fd_e, chk_e),
               _max_rel_err(t_cls.grad, fd_c, chk_c))


def _check_end_to_end(rng):
    """Miniature joint pipeline: warp, recognition loss, and alignment loss."""
    size = 12
    images = rng.uniform(-1, 1, (2, 1, size, size))
    gt = rng.uniform(-0.6, 0.6, (2, 4, 2))
    labels = np.array([0, 1])
    warper = TpsWarper(2, size, size)
    locnet = nets.build_locnet(2, channels=(3,), head_dim=8, seed=11)
    recnet = nets.build_recnet(4, channels=(3, 5), seed=12)
    # Nudge the zero-init head so sampling positions are generic (the
    # identity warp would pin every tap to the non-smooth lattice points).
    head_rng = np.random.default_rng(13)
    locnet.head.weight.data[...] = head_rng.normal(0.0, 0.05, locnet.head.weight.data.shape)
    locnet.head.bias.data[...] = head_rng.normal(0.0, 0.02, locnet.head.bias.data.shape)
    cls = Tensor(rng.standard_normal((2, 4)) / 2.0, requires_grad=True)
    template = Tensor(rng.uniform(-0.6, 0.6, (4, 2)), requires_grad=True)
    weights = AlignWeights(4, learnable=True)
    amcfg = nets.AmSoftmaxConfig(0.35, 64.0, 2)

    def total():
        x = Tensor(images)
        off = locnet.forward(x).reshape(-1, 4, 2)
        grid = warper.grid(off)
        emb = recnet.forward(warp(x, grid))
        l_fr = nets.am_softmax_loss(emb, cls, labels, amcfg)
        l_lmk = lmk_loss(warper.warp_points(off, template), gt, weights)
        l_rg = reg_loss(weights)
        return l_fr + 3.0 * (l_lmk + l_rg)

    loss = total()
    loss.backward()

    def loss_np():
        return float(total().data)

    checks = [
        (recnet.stage0.layers[0][1].weight, [0, 5, 11, 20]),
        (recnet.fc.weight, [0, 7, 13]),
        (locnet.head.weight, [0, 1, 5]),
        (locnet.backbone.layers[0][1].weight, [0, 9, 17]),
        (template, [0, 3, 6]),
        (weights.raw, [0, 2]),
        (cls, [0, 5]),
    ]
    errs = []
    for tensor, idxs in checks:
        fd, chk = _fd_grad(loss_np, tensor.data, indices=idxs)
        errs.append(_max_rel_err(tensor.grad, fd, chk))
    return max(errs)


def grad_check(seed: int = 0):
    """Finite-difference verification of every differentiable component.

    Returns (report rows, all_passed).  Relative error is
    |analytic - fd| / max(|analytic|, |fd|, 1e-3) with h = 1e-5.
    """
    components = [
        ("sampler", _check_sampler),
        ("tps_grid_warp", _check_tps_warp),
        ("lmk_loss", _check_lmk_loss),
        ("reg_loss", _check_reg_loss),
        ("am_softmax", _check_am_softmax),
        ("end_to_end", _check_end_to_end),
    ]
    rows = []
    ok = True
    for name, fn in components:
        rng = np.random.default_rng(seed)
        err = fn(rng)
        tol = GRAD_TOLERANCES.get(name, GRAD_DEFAULT_TOL)
        passed = bool(err < tol)
        ok = ok and passed
        rows.append({"component": name, "max_rel_err": err,
                     "tolerance": tol, "passed": passed})
    return rows, ok


# ---------------------------------------------------------------------------
# warp demo


def warp_demo(image_path, landmarks_path, method_name, out_path,
              grid_size: int = 4, checkpoint=None, data_dir=None):
    """Warp one sample by one method; write the PGM and a landmark overlay SVG.

    Without a checkpoint, STN methods use a freshly built LocNet, whose
    zero-initialized head yields the identity warp.
    """
    image = read_pgm(image_path)
    gt = load_landmarks(landmarks_path)
    method = AlignmentMethod.parse(method_name)

    dense = Template(mean_face_layout(len(gt)))
    context = MethodContext(template_five=dense.subset(range(5)),
                            template_dense=dense)
    if method.is_stn:
        if checkpoint:
            from .train import load_trainer
            trainer = load_trainer(checkpoint, data_dir=data_dir)
            if trainer.method.kind != method.kind:
                raise ValueError("checkpoint was trained with a different method")
            context.locnet, context.warper = trainer.locnet, trainer.warper
        else:
            if method.kind == "stn-tps":
                g = method.grid_size or grid_size
                context.warper = TpsWarper(g, image.height, image.width)
                head_dim = 2 * g * g
            else:
                from .stn import ProjWarper
                context.warper = ProjWarper(image.height, image.width)
                head_dim = 8
            context.locnet = nets.build_locnet(method.grid_size or 2,
                                               head_dim=head_dim, seed=0)

    grid, deformed = method_warp(method, image, gt, context)
    warped, _ = apply_method(method, image, gt, context)
    write_pgm(out_path, warped)
    svg_path = os.path.splitext(str(out_path))[0] + ".svg"
    overlay_plot(svg_path, gt.points, deformed.points,
                 None if grid is None else grid.coords,
                 title=f"method {method.cli_name}")
    return out_path, svg_path
