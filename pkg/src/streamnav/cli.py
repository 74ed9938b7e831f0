"""Command-line entry points: train, eval, ablate, mask-dump.

Every verb is deterministic given (config, seed): rerunning writes
byte-identical files. Outputs land only under --out. Exit codes: 0 success,
2 configuration problem (bad file, unknown key, checkpoint mismatch,
usage), 3 numeric abort (non-finite loss or gradient).
"""

import argparse
import csv
import math
import os
import sys

import numpy as np

from . import harness as hn
from . import metrics as mx
from .autodiff import NumericError
from .checkpoint import CheckpointError, load_checkpoint, restore_model, \
    save_checkpoint
from .config import ConfigError, RunConfig, config_hash, default_config, \
    load_config
from .layout import build_layout, build_mask, mask_to_ascii, mask_to_pgm
from .policy import StreamPolicy
from .training import run_training

_EVAL_FIELDS = ("stratum", "episodes", "sr", "spl", "osr", "ne", "ndtw")


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def _write_csv(path, fieldnames, rows):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(fieldnames)
        for row in rows:
            w.writerow([_fmt(row[k]) for k in fieldnames])


def _load_cfg(args) -> RunConfig:
    return load_config(args.config) if args.config else default_config()


def _restore(cfg: RunConfig, path) -> StreamPolicy:
    arrays, _ = load_checkpoint(path, expect_hash=config_hash(cfg))
    model = StreamPolicy(cfg.policy_config(), seed=0,
                         teacher_seed=cfg.get("training", "teacher_seed"))
    restore_model(model, arrays)
    return model


# ------------------------------------------------------------------ train

def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    if args.variant:
        cfg.values["training"]["variant"] = args.variant
    os.makedirs(args.out, exist_ok=True)
    ckpt_path = args.checkpoint or os.path.join(args.out, "model.ckpt")
    log_path = os.path.join(args.out, "train_log.csv")

    samples = hn.training_samples(cfg, args.seed)
    weights = cfg.loss_weights()
    model = StreamPolicy(
        cfg.policy_config() if weights.predictive else _nonpredictive(cfg),
        seed=int(hn.rng_stream(args.seed, hn._K_INIT).integers(2 ** 32)),
        teacher_seed=cfg.get("training", "teacher_seed"))

    steps_per_epoch = max(1, math.ceil(
        len(samples) / cfg.get("training", "batch_size")))
    rows = []
    last_good = {k: v.copy() for k, v in model.params.items()}

    def on_row(row):
        rows.append(row)
        if row["step"] % steps_per_epoch == 0:
            last_good.clear()
            last_good.update({k: v.copy() for k, v in model.params.items()})

    fields = ("step", "nav_loss", "l2d", "l3d", "loss_all")
    try:
        run_training(model, samples, weights,
                     epochs=cfg.get("training", "epochs"),
                     batch_size=cfg.get("training", "batch_size"),
                     lr=cfg.get("training", "lr"),
                     variant=cfg.get("training", "variant"),
                     seed=int(hn.rng_stream(args.seed, hn._K_SHUFFLE)
                              .integers(2 ** 32)),
                     log=on_row)
    except NumericError as e:
        # abort, but leave the last epoch-boundary parameters on disk
        model.params = last_good
        save_checkpoint(ckpt_path, model, config_hash(cfg))
        _write_csv(log_path, fields, rows)
        print(f"numeric abort: {e}; last-good checkpoint at {ckpt_path}",
              file=sys.stderr)
        return 3

    save_checkpoint(ckpt_path, model, config_hash(cfg))
    _write_csv(log_path, fields, rows)
    print(ckpt_path)
    print(log_path)
    return 0


def _nonpredictive(cfg: RunConfig):
    pc = cfg.policy_config()
    return type(pc)(**{**pc.__dict__, "predictive": False})


# ------------------------------------------------------------------- eval

def _metric_rows(overall, strata, results, maps, refs):
    rows = [{"stratum": "overall", "episodes": len(results),
             "sr": overall.sr, "spl": overall.spl, "osr": overall.osr,
             "ne": overall.ne, "ndtw": overall.ndtw}]
    for name, idx in strata.items():
        if idx:
            sub = mx.compute_metrics([results[i] for i in idx],
                                     [maps[i] for i in idx],
                                     references=[refs[i] for i in idx])
            vals = dict(sr=sub.sr, spl=sub.spl, osr=sub.osr, ne=sub.ne,
                        ndtw=sub.ndtw)
        else:
            vals = dict(sr=float("nan"), spl=float("nan"), osr=float("nan"),
                        ne=float("nan"), ndtw=float("nan"))
        rows.append({"stratum": name, "episodes": len(idx), **vals})
    return rows


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    os.makedirs(args.out, exist_ok=True)
    suite = hn.eval_suite(cfg, args.seed)
    if args.expert:
        overall, strata, results = hn.evaluate_expert(cfg, suite)
    else:
        if not args.checkpoint:
            raise ConfigError("eval needs --checkpoint (or --expert)")
        model = _restore(cfg, args.checkpoint)
        overall, strata, results = hn.evaluate_model(model.agent(), cfg, suite)
    maps = [gmap for gmap, _ in suite]
    refs = [mx.expert_reference(gmap) for gmap in maps]
    rows = _metric_rows(overall, strata, results, maps, refs)
    out_path = os.path.join(args.out, "eval_metrics.csv")
    _write_csv(out_path, _EVAL_FIELDS, rows)
    print(out_path)
    return 0


# ----------------------------------------------------------------- ablate

def cmd_ablate(args) -> int:
    cfg = _load_cfg(args)
    os.makedirs(args.out, exist_ok=True)
    rows = hn.run_ablation(cfg, args.seed, replicates=args.replicates,
                           log=lambda r: print(
                               f"{r['cell']} rep{r['replicate']} "
                               f"sr={r['sr']:.3f}", file=sys.stderr))
    rows = rows + hn.ablation_means(rows)
    fields = list(rows[0].keys())
    out_path = os.path.join(args.out, "ablate.csv")
    _write_csv(out_path, fields, rows)
    print(out_path)
    return 0


# -------------------------------------------------------------- mask-dump

def cmd_mask_dump(args) -> int:
    cfg = _load_cfg(args)
    os.makedirs(args.out, exist_ok=True)
    pc = cfg.policy_config()
    lay = build_layout(args.turns, args.len_instruction, args.len_memory,
                       pc.len_ctxt, pc.n_a, pc.queries_per_modality,
                       with_queries=not args.no_queries)
    mask = build_mask(lay, args.variant or "strict",
                      isolated_queries=pc.isolated_queries)
    if args.format == "pgm":
        text, ext = mask_to_pgm(mask), "pgm"
    else:
        text, ext = mask_to_ascii(mask), "txt"
    out_path = os.path.join(args.out, f"mask_{args.variant or 'strict'}.{ext}")
    with open(out_path, "w", encoding="utf-8") as fh:
        fh.write(text)
    print(out_path)
    return 0


# ------------------------------------------------------------------- main

def _parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(
        prog="streamnav",
        description="streaming navigation policy: training and evaluation")
    sub = ap.add_subparsers(dest="verb", required=True)

    def common(p):
        p.add_argument("--config", help="INI config file (defaults apply)")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default="runs")

    p = sub.add_parser("train", help="train a policy, write checkpoint + log")
    common(p)
    p.add_argument("--checkpoint", help="checkpoint path (default: OUT/model.ckpt)")
    p.add_argument("--variant", choices=("strict", "leaky", "noiso"),
                   help="override the training mask variant")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on held-out episodes")
    common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--expert", action="store_true",
                   help="score the planning oracle instead of a checkpoint")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("ablate", help="mask and loss ablation grid")
    common(p)
    p.add_argument("--replicates", type=int, default=5,
                   help="training replicates per cell")
    p.set_defaults(fn=cmd_ablate)

    p = sub.add_parser("mask-dump", help="render an attention mask")
    common(p)
    p.add_argument("--variant", choices=("strict", "leaky", "noiso"),
                   default="strict")
    p.add_argument("--format", choices=("ascii", "pgm"), default="ascii")
    p.add_argument("--turns", type=int, default=2)
    p.add_argument("--len-instruction", type=int, default=6)
    p.add_argument("--len-memory", type=int, default=0)
    p.add_argument("--no-queries", action="store_true")
    p.set_defaults(fn=cmd_mask_dump)
    return ap


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, CheckpointError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except NumericError as e:
        print(f"numeric abort: {e}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
