"""The balign command line.

Subcommands: gen-data, train, eval, sweep-lambda, baselines, ablate,
grad-check, warp-demo.  Experiment settings come from an optional --config
JSON file with per-flag overrides on top.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from . import experiments
from .alignment import METHOD_NAMES
from .synthdata import DatasetConfig, gen_dataset
from .train import (ExperimentConfig, config_from_dict, load_trainer,
                    run_experiment)

CONFIG_OVERRIDES = ("method", "lam", "apply_at", "grid_size", "epochs",
                    "batch_size", "lr", "seed", "template_mode",
                    "template_path", "weights_mode", "weights_value",
                    "embedding_dim")


def _csv_list(cast):
    def parse(text):
        return [cast(v) for v in text.split(",") if v]
    return parse


def _add_config_args(p, with_seed=True):
    p.add_argument("--config", help="JSON file of experiment-config fields")
    p.add_argument("--data", help="dataset directory (holds manifest.json)")
    p.add_argument("--method", help="none|affine2d|stn-proj|stn-tps-N|full-align")
    p.add_argument("--lambda", dest="lam", type=float,
                   help="alignment loss strength")
    p.add_argument("--apply-at", dest="apply_at", choices=("input", "fmap"))
    p.add_argument("--grid-size", dest="grid_size", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--template-mode", dest="template_mode",
                   choices=("fixed", "learnable", "fixed-from-learned"))
    p.add_argument("--template-path", dest="template_path")
    p.add_argument("--weights-mode", dest="weights_mode",
                   choices=("fixed", "learnable"))
    p.add_argument("--weights-value", dest="weights_value", type=float)
    p.add_argument("--embedding-dim", dest="embedding_dim", type=int)
    if with_seed:
        p.add_argument("--seed", type=int)


def build_experiment_config(args) -> ExperimentConfig:
    base = {}
    if args.config:
        with open(args.config) as fh:
            base = json.load(fh)
        if "lambda" in base:
            base["lam"] = base.pop("lambda")
    if args.data:
        base["data_dir"] = args.data
    if "data_dir" not in base:
        raise SystemExit("error: no dataset; pass --data or set data_dir in --config")
    cfg = config_from_dict(base)
    updates = {name: getattr(args, name) for name in CONFIG_OVERRIDES
               if getattr(args, name, None) is not None}
    return replace(cfg, **updates) if updates else cfg


def cmd_gen_data(args) -> int:
    base = {}
    if args.config:
        with open(args.config) as fh:
            base = json.load(fh)
    for key, val in (("identities", args.ids), ("train_per_id", args.train_per_id),
                     ("test_per_id", args.test_per_id), ("landmark_count", args.landmarks),
                     ("image_size", args.size), ("seed", args.seed)):
        if val is not None:
            base[key] = val
    for key in ("rotation_range", "gallery_rotation_range", "scale_range",
                "translation_range"):
        if key in base:
            base[key] = tuple(base[key])
    cfg = DatasetConfig(**base)
    gen_dataset(cfg, args.out)
    print(f"wrote {cfg.record_count()} records under {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = build_experiment_config(args)
    cfg.validate()
    run_experiment(cfg, out_dir=args.out)
    return 0


def cmd_eval(args) -> int:
    trainer = load_trainer(args.checkpoint, data_dir=args.data)
    rank1, buckets, anme_val = trainer.evaluate()
    report = {"rank1_overall": float(f"{rank1:.9g}"),
              "rank1_buckets": {k: float(f"{v:.9g}") for k, v in sorted(buckets.items())},
              "anme": float(f"{anme_val:.9g}")}
    text = json.dumps(report, sort_keys=True)
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(text + "\n")
    print(text)
    return 0


def cmd_sweep_lambda(args) -> int:
    cfg = build_experiment_config(args)
    experiments.sweep_lambda(cfg, args.lambdas, args.seeds, args.out)
    print(f"sweep results under {args.out}")
    return 0


def cmd_baselines(args) -> int:
    cfg = build_experiment_config(args)
    ats = ("input", "fmap") if args.at == "both" else (args.at,)
    experiments.run_baselines(cfg, args.methods, args.seeds, args.out, apply_ats=ats)
    print(f"baseline results under {args.out}")
    return 0


def cmd_ablate(args) -> int:
    cfg = build_experiment_config(args)
    experiments.run_ablation(cfg, args.axis, args.seeds, args.out)
    print(f"ablation results under {args.out}")
    return 0


def cmd_grad_check(args) -> int:
    rows, ok = experiments.grad_check(args.seed)
    for row in rows:
        status = "pass" if row["passed"] else "FAIL"
        print(f"{row['component']:<16} max_rel_err {row['max_rel_err']:.3e} "
              f"(tol {row['tolerance']:g}) {status}")
    print("gradient check:", "PASS" if ok else "FAIL")
    return 0 if ok else 1


def cmd_warp_demo(args) -> int:
    pgm, svg = experiments.warp_demo(args.image, args.landmarks, args.method,
                                     args.out, grid_size=args.grid_size,
                                     checkpoint=args.checkpoint, data_dir=args.data)
    print(f"wrote {pgm} and {svg}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="balign",
        description="Joint face alignment/recognition benchmark on synthetic data.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic face dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--config", help="JSON file of dataset-config fields")
    p.add_argument("--ids", type=int)
    p.add_argument("--train-per-id", dest="train_per_id", type=int)
    p.add_argument("--test-per-id", dest="test_per_id", type=int)
    p.add_argument("--landmarks", type=int)
    p.add_argument("--size", type=int)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one configuration")
    _add_config_args(p)
    p.add_argument("--out", help="directory for result.json and checkpoint.bin")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on its dataset")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="override the dataset directory")
    p.add_argument("--out", help="write the eval report JSON here too")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep-lambda", help="train over a range of lambda values")
    _add_config_args(p, with_seed=False)
    p.add_argument("--out", required=True)
    p.add_argument("--lambdas", type=_csv_list(float), default=[0.0, 1.0, 3.0, 5.0, 7.0])
    p.add_argument("--seeds", type=_csv_list(int), default=[0, 1, 2])
    p.set_defaults(func=cmd_sweep_lambda)

    p = sub.add_parser("baselines", help="compare alignment methods at lambda 0")
    _add_config_args(p, with_seed=False)
    p.add_argument("--out", required=True)
    p.add_argument("--methods", type=_csv_list(str), default=list(METHOD_NAMES))
    p.add_argument("--seeds", type=_csv_list(int), default=[0, 1, 2])
    p.add_argument("--at", choices=("input", "fmap", "both"), default="both")
    p.set_defaults(func=cmd_baselines)

    p = sub.add_parser("ablate", help="ablate learnable weights or template")
    _add_config_args(p, with_seed=False)
    p.add_argument("--out", required=True)
    p.add_argument("--axis", required=True, choices=("weights", "template"))
    p.add_argument("--seeds", type=_csv_list(int), default=[0, 1, 2])
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("grad-check", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_grad_check)

    p = sub.add_parser("warp-demo", help="warp one sample and plot the landmarks")
    p.add_argument("--image", required=True)
    p.add_argument("--landmarks", required=True)
    p.add_argument("--method", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--grid-size", dest="grid_size", type=int, default=4)
    p.add_argument("--checkpoint")
    p.add_argument("--data", help="dataset directory, needed with --checkpoint")
    p.set_defaults(func=cmd_warp_demo)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
