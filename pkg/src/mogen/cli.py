"""Command-line entry point.

Exit codes: 0 success, 1 validation error (bad flags, illegal signal
combination), 2 runtime error (missing files, failed training).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys

import numpy as np

from .amg import LAYOUT_EXCLUSION, LEGAL_CONFIGS, SignalError, SignalSet
from .boxes import parse_boxes
from .checkpoint import CheckpointError, load_model
from .config import ModelConfig, tiny_config
from .data import DatasetError, MocaConfig, generate_dataset, load_dataset, read_ppm, save_dataset, write_ppm
from .evaluate import (AblationEntry, dump_attention, feature_distribution, generate_for,
                       run_ablation, write_csv)
from .metrics import evaluate
from .model import MoGenModel
from .rsa import ContractError
from .train import (TrainConfig, TrainingError, pretrain_config, resume_state, save_state,
                    start_state, stage_items, train_steps)

log = logging.getLogger("mogen")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.format_usage()}{self.prog}: error: {message}")


def _configs(text):
    out = tuple(c.strip() for c in text.split(",") if c.strip())
    bad = [c for c in out if c not in LEGAL_CONFIGS]
    if bad or not out:
        raise argparse.ArgumentTypeError(f"signal configurations must be among {sorted(LEGAL_CONFIGS)}")
    return out


def build_parser():
    p = _Parser(prog="mogen", description="Desk-scale multi-object generator.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen-data", help="render a procedural dataset")
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--dir", required=True)
    g.add_argument("--min-objects", type=int, default=1)
    g.add_argument("--max-objects", type=int, default=6)
    g.add_argument("--image-size", type=int, default=32)

    def training(name, help, stage):
        t = sub.add_parser(name, help=help)
        t.add_argument("--data", required=True)
        t.add_argument("--out", required=True)
        if stage != "pretrain":
            t.add_argument("--base", help="checkpoint of the previous stage")
        t.add_argument("--resume", help="continue an interrupted run from its checkpoint")
        t.add_argument("--steps", type=int, default=3000)
        t.add_argument("--batch-size", type=int, default=16)
        lr = pretrain_config() if stage == "pretrain" else TrainConfig()
        t.add_argument("--lr-start", type=float, default=lr.lr_start)
        t.add_argument("--lr-end", type=float, default=lr.lr_end)
        t.add_argument("--seed", type=int, default=0)
        t.add_argument("--save-every", type=int, default=0)
        t.add_argument("--lr-log", help="CSV of per-step learning rate and loss")
        if stage == "pretrain":
            t.add_argument("--dtype", choices=("float32", "float64"), default="float32")
            t.add_argument("--tiny", action="store_true", help="use the tiny test configuration")
        if stage == "amg":
            t.add_argument("--signal-configs", type=_configs, default=tuple(LEGAL_CONFIGS))
            t.add_argument("--augment-prob", type=float, default=0.5)
        t.set_defaults(stage=stage)

    training("pretrain", "stage 0: backbone and text table", "pretrain")
    training("train-rsa", "stage 1: semantic anchors on a frozen backbone", "rsa")
    training("train-amg", "stage 2: multi-modal guidance on frozen backbone and anchors", "amg")

    s = sub.add_parser("sample", help="generate one image")
    s.add_argument("--ckpt", help="model checkpoint (default: untrained model)")
    s.add_argument("--prompt", required=True)
    s.add_argument("--boxes", help="x0,y0,x1,y1;... normalized")
    s.add_argument("--structure", help="structure reference .ppm")
    s.add_argument("--objects", help="comma-separated object reference .ppm files")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--steps", type=int, default=50)
    s.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="metric report on a dataset")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--signals", choices=sorted(LEGAL_CONFIGS), default="T")
    e.add_argument("--steps", type=int, default=50)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--limit", type=int)
    e.add_argument("--out", required=True, help="per-item CSV")

    a = sub.add_parser("ablate", help="metric rows for the ablation matrix")
    a.add_argument("--data", required=True)
    a.add_argument("--baseline")
    a.add_argument("--rsa")
    a.add_argument("--amg-only")
    a.add_argument("--full")
    a.add_argument("--signals", type=_configs, default=("T",))
    a.add_argument("--steps", type=int, default=50)
    a.add_argument("--seed", type=int, default=0)
    a.add_argument("--limit", type=int)
    a.add_argument("--out", required=True)

    d = sub.add_parser("diagnose", help="phrase attention map and feature histograms")
    d.add_argument("--ckpt", required=True)
    d.add_argument("--prompt", required=True)
    d.add_argument("--attention-out", required=True)
    d.add_argument("--data", help="dataset whose images feed the feature histograms")
    d.add_argument("--features-out")
    d.add_argument("--t", type=int, help="noise step for the histograms (default: T/2)")
    d.add_argument("--limit", type=int, default=16)
    d.add_argument("--seed", type=int, default=0)

    c = sub.add_parser("grad-check", help="finite-difference audit of all parameter groups")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--max-entries", type=int, default=8)
    c.add_argument("--tol", type=float, default=1e-6)
    return p


def _limit(items, n):
    return items if n is None else items[:n]


def cmd_gen_data(args):
    cfg = MocaConfig(image_size=args.image_size, min_objects=args.min_objects,
                     max_objects=args.max_objects)
    if args.n < 0:
        raise ValueError("--n must be non-negative")
    manifest = save_dataset(generate_dataset(args.n, args.seed, cfg), args.dir)
    print(f"wrote {args.n} items to {manifest}")


def _write_lr_log(path, state):
    rows = [{"step": i, "lr": repr(lr), "loss": repr(loss)}
            for i, (lr, loss) in enumerate(zip(state.lrs, state.losses))]
    write_csv(path, ["step", "lr", "loss"], rows)


def cmd_train(args):
    items = load_dataset(args.data)
    if not items:
        raise TrainingError(f"dataset {args.data} is empty")
    if args.resume:
        state = resume_state(args.resume)
        if state.config.stage != args.stage:
            raise TrainingError(f"{args.resume} holds a {state.config.stage} run")
    else:
        kw = dict(stage=args.stage, steps=args.steps, lr_start=args.lr_start, lr_end=args.lr_end,
                  batch_size=args.batch_size, seed=args.seed)
        if args.stage == "amg":
            kw.update(signal_configs=args.signal_configs, augment_prob=args.augment_prob)
        if args.stage == "pretrain":
            kw.update(dtype=args.dtype)
            model = MoGenModel(tiny_config() if args.tiny else ModelConfig(), seed=args.seed,
                               dtype=np.dtype(args.dtype))
        else:
            if not args.base:
                raise TrainingError(f"{args.stage} needs --base (the previous stage's checkpoint)")
            model, _, _ = load_model(args.base)
            if args.stage == "rsa" and model.rsa is None:
                model.enable_rsa()
            elif args.stage == "amg" and model.amg is None:
                model.enable_amg()
        state = start_state(model, TrainConfig(**kw))
    data = stage_items(items, args.stage)
    every = args.save_every or state.config.steps
    while state.step < state.config.steps:
        train_steps(state, data, every)
        save_state(args.out, state)
    if state.step == 0:
        save_state(args.out, state)
    if args.lr_log:
        _write_lr_log(args.lr_log, state)
    final = state.losses[-1] if state.losses else float("nan")
    print(f"{args.stage}: {state.step} steps, final loss {final:.5f}, saved {args.out}")


def _model(path, seed=0):
    if path:
        return load_model(path)[0]
    return MoGenModel(ModelConfig(), seed=seed)


def cmd_sample(args):
    boxes = parse_boxes(args.boxes) if args.boxes else []
    if boxes and args.structure:
        raise SignalError(LAYOUT_EXCLUSION)
    structure = read_ppm(args.structure) if args.structure else None
    objects = [read_ppm(p) for p in args.objects.split(",") if p] if args.objects else []
    signals = SignalSet(structure=structure, objects=objects, boxes=boxes)
    model = _model(args.ckpt)
    if not signals.is_empty() and model.amg is None:
        raise SignalError("this checkpoint has no guidance module; drop the control signals")
    img = model.generate([args.prompt], None if signals.is_empty() else [signals],
                         n_steps=args.steps, seed=args.seed)
    write_ppm(args.out, img[0])
    print(f"wrote {args.out}")


def cmd_eval(args):
    model = _model(args.ckpt)
    items = _limit(load_dataset(args.data), args.limit)
    rep = evaluate(generate_for(model, items, args.signals, args.steps, args.seed), items)
    fields = ["item", "target_count", "detected", "spatial_sim", "img_sim"]
    write_csv(args.out, fields, [{k: (f"{v:.6f}" if isinstance(v, float) else v) for k, v in r.items()}
                                 for r in rep.rows])
    print(json.dumps({"numerical": rep.numerical, "spatial_sim": rep.spatial_sim,
                      "appearance_sim": rep.appearance_sim, "img_sim": rep.img_sim}))


def cmd_ablate(args):
    matrix = [AblationEntry(name, rsa, amg, path) for name, rsa, amg, path in (
        ("baseline", False, False, args.baseline), ("rsa-only", True, False, args.rsa),
        ("amg-only", False, True, args.amg_only), ("full", True, True, args.full)) if path]
    if not matrix:
        raise ValueError("give at least one of --baseline, --rsa, --amg-only, --full")
    items = _limit(load_dataset(args.data), args.limit)
    rows = run_ablation(matrix, items, args.out, args.signals, args.steps, args.seed)
    for r in rows:
        print(f"{r['config']:>9} {r['signals']:>6} numerical {r['numerical']} spatial {r['spatial_sim']}")


def cmd_diagnose(args):
    model = _model(args.ckpt)
    dump_attention(args.prompt, model, args.attention_out)
    print(f"wrote {args.attention_out}")
    if args.features_out:
        if not args.data:
            raise ValueError("--features-out needs --data")
        items = _limit(load_dataset(args.data), args.limit)
        feature_distribution(model, [it.annotation.text for it in items],
                             np.stack([it.image for it in items]), args.features_out,
                             t=args.t or model.cfg.T // 2, seed=args.seed)
        print(f"wrote {args.features_out}")


def cmd_grad_check(args):
    from .gradaudit import run_audit

    report, groups = run_audit(args.seed, max_entries=args.max_entries)
    for g, err in sorted(groups.items()):
        print(f"{g:<12} {err:.3e}")
    print(f"max relative error {report.max_error:.3e} over {len(report.errors)} tensors")
    if report.max_error >= args.tol:
        raise TrainingError(f"gradient check failed: {report.max_error:.3e} >= {args.tol:g}")


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_train, "train-rsa": cmd_train,
            "train-amg": cmd_train, "sample": cmd_sample, "eval": cmd_eval,
            "ablate": cmd_ablate, "diagnose": cmd_diagnose, "grad-check": cmd_grad_check}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        COMMANDS[args.command](args)
    except (SignalError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CheckpointError, DatasetError, TrainingError, ContractError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
