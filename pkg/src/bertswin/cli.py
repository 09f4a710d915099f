"""Command-line entry point: ``bertswin <subcommand> ...``.

Exit codes: 0 success, 1 configuration/usage error, 2 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import BertsWinError, ConfigError


class _UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        sys.stderr.write(f"{self.prog}: error: {message}\n")
        raise _UsageError(message)


def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="flat TOML run config (key = value)")
    p.add_argument("--seed", type=int, help="override the run seed")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="bertswin", description="Desk-scale BertsWin MAE experiments on synthetic phantoms.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="write phantom volumes, label maps and norm stats")
    _common(p, config=False)
    p.add_argument("--n", type=int, default=4, help="number of subjects (default 4)")
    p.add_argument("--size", type=int, default=32)
    p.add_argument("--patch", type=int, default=8)

    p = sub.add_parser("pretrain", help="run one pretraining job")
    _common(p)
    p.add_argument("--steps", type=int, help="override the step budget")
    p.add_argument("--resume", help="checkpoint directory to resume from")

    p = sub.add_parser("compare", help="train several configs and report steps-to-target")
    _common(p)
    p.add_argument("configs", nargs="*", help="configs to compare (default: the five desk cells)")
    p.add_argument("--metric", default="masked_l2", choices=("masked_l2", "mvc_soft", "mvc_surf", "loss"))
    p.add_argument("--target", type=float, default=0.5, help="validation target value (default 0.5)")
    p.add_argument("--baseline", help="run name used as the speedup reference")
    p.add_argument("--steps", type=int, help="override the step budget of every run")

    p = sub.add_parser("flops", help="analytic GFLOPs report")
    p.add_argument("--volume", type=int, help="volume side (default: the full comparison grid)")
    p.add_argument("--patch", type=int, default=16)
    p.add_argument("--csv", action="store_true", help="emit CSV instead of aligned text")
    p.add_argument("--policy", choices=("table", "executed"), default="table")

    p = sub.add_parser("probe", help="embedding-space probes of a trained encoder")
    _common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--n-phantoms", type=int, default=12)
    p.add_argument("--n-boot", type=int, default=9999)

    p = sub.add_parser("decompose", help="MVC decomposition of two volume files")
    p.add_argument("a")
    p.add_argument("b")
    p.add_argument("--sub-patch", type=int, default=0, help="also report the blockwise MVC loss")

    p = sub.add_parser("seg-probe", help="train a segmentation head on frozen encoder tokens")
    _common(p, config=False)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--head", choices=("linear", "two_layer"), default="linear")
    p.add_argument("--steps", type=int, default=500)
    p.add_argument("--n-train", type=int, default=16)
    p.add_argument("--n-val", type=int, default=8)
    return parser


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def _load_config(args):
    from .harness import RunConfig

    cfg = RunConfig.load(args.config) if getattr(args, "config", None) else RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.out:
        changes["out_dir"] = args.out
    if getattr(args, "steps", None) is not None:
        changes["steps"] = args.steps
    return cfg.replace(**changes) if changes else cfg


def cmd_gen_data(args) -> int:
    from .synthvol import compute_norm_stats, gen_phantom, write_volume

    out = Path(args.out or "data")
    out.mkdir(parents=True, exist_ok=True)
    seed = args.seed or 0
    vols = []
    for i in range(args.n):
        for side, variant in (("right", 0), ("left", 1)):
            v, m = gen_phantom(seed + i, args.size, side, args.patch, variant=variant)
            write_volume(out / f"{i:03d}_{side}.vol", v)
            write_volume(out / f"{i:03d}_{side}_seg.vol", m)
            vols.append(v)
    stats = compute_norm_stats(vols)
    (out / "norm_stats.txt").write_text(stats.to_text(), encoding="utf-8")
    print(f"wrote {2 * args.n} volumes and label maps to {out}")
    return 0


def cmd_pretrain(args) -> int:
    from .harness import run_pretrain, train_loss_reduction

    cfg = _load_config(args)
    res = run_pretrain(cfg, resume=args.resume)
    print(f"steps {res.step}  train loss drop {train_loss_reduction(res.metrics):.1%}"
          f"{'  (early stop)' if res.stopped_early else ''}")
    print(f"checkpoint {res.checkpoint}  sha256 {res.checkpoint_hash}")
    return 0


def cmd_compare(args) -> int:
    from .harness import RunConfig, convergence_report, desk_cells, format_report, run_pretrain

    base = _load_config(args)
    if args.configs:
        cells = {Path(c).stem: RunConfig.load(c) for c in args.configs}
        if args.steps is not None:
            cells = {k: v.replace(steps=args.steps) for k, v in cells.items()}
    else:
        cells = desk_cells(base)
    out = Path(args.out or base.out_dir)
    runs = {}
    for name, cfg in cells.items():
        runs[name] = run_pretrain(cfg, out / name).metrics
    baseline = args.baseline or ("sparse-l2-adamw" if "sparse-l2-adamw" in runs else None)
    rep = convergence_report(runs, args.metric, args.target, baseline=baseline)
    out.mkdir(parents=True, exist_ok=True)
    (out / "compare.json").write_text(json.dumps(rep, indent=2, sort_keys=True), encoding="utf-8")
    print(format_report(rep), end="")
    return 0


def cmd_flops(args) -> int:
    from .complexity import ArchParams, MODEL_FAMILY, crossover_table, family_config, flops_model, format_table

    arch = ArchParams(token_policy=args.policy, vit_decoder="mae_transformer" if args.policy == "table" else "conv")
    if args.volume is None:
        rows = crossover_table(arch=arch)["rows"]
    else:
        if args.volume % args.patch:
            raise ConfigError(f"volume {args.volume} not divisible by patch {args.patch}")
        rows = [flops_model(family_config(n, args.volume, args.patch), arch, label=n) for n in MODEL_FAMILY]
    print(format_table(rows, csv=args.csv), end="")
    return 0


def cmd_probe(args) -> int:
    from .analytics import effective_rank, mann_whitney_u, probe_report_json, probe_report_text, probe_suite
    from .harness import load_model, probe_embeddings

    _, model, stats, _ = load_model(args.checkpoint)
    seed = args.seed or 0
    E = probe_embeddings(model, stats, args.n_phantoms, seed)
    results = probe_suite(E, seed=seed, n_boot=args.n_boot)
    r_eff = effective_rank(E)
    print(probe_report_text(results, dim=E.vectors.shape[1], r_eff=r_eff), end="")
    by = {r.name: r for r in results}
    u, p = mann_whitney_u(by["Intra-Patient"].samples, by["Inter-Patient"].samples)
    print(f"Intra vs Inter Mann-Whitney U = {u:.1f}, p = {p:.3g}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "probe.jsonl").write_text(probe_report_json(results), encoding="utf-8")
        (out / "probe_summary.json").write_text(json.dumps(
            {"dim": int(E.vectors.shape[1]), "effective_rank": r_eff, "intra_vs_inter_u": u,
             "intra_vs_inter_p": p}, sort_keys=True), encoding="utf-8")
    return 0


def cmd_decompose(args) -> int:
    from .losses import MvcWeights, mvc_decompose, mvc_loss
    from .synthvol import read_volume

    a, b = read_volume(args.a), read_volume(args.b)
    xa = a.data if hasattr(a, "data") else a.labels.astype(float)
    xb = b.data if hasattr(b, "data") else b.labels.astype(float)
    if xa.shape != xb.shape:
        raise ConfigError(f"volume shapes differ: {xa.shape} vs {xb.shape}")
    c = mvc_decompose(xa, xb)
    out = {"brightness": c.brightness, "contrast": c.contrast, "structure": c.structure, "mse": c.mse,
           "rho": c.rho}
    if args.sub_patch:
        out["mvc_loss"] = float(mvc_loss(xa, xb, args.sub_patch, MvcWeights()).item())
    print(json.dumps(out, sort_keys=True))
    return 0


def cmd_seg_probe(args) -> int:
    from .analytics import probe_head_train
    from .harness import eval_phantom_seeds, load_model, seg_probe_data

    _, model, stats, _ = load_model(args.checkpoint)
    seed = args.seed or 0
    seeds = eval_phantom_seeds(args.n_train + args.n_val, seed)
    feats, labels = seg_probe_data(model, stats, seeds)
    n = args.n_train
    res = probe_head_train(feats[:n], labels[:n], head=args.head, steps=args.steps, seed=seed,
                           val_features=feats[n:], val_labels=labels[n:])
    names = {0: "background", 1: "bone", 2: "soft"}
    for c, d in res.dice.items():
        print(f"{names.get(c, c):<12} dice {d:.4f}")
    print(f"final train loss {res.losses[-1]:.4f}")
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "seg_probe.json").write_text(json.dumps(
            {"head": args.head, "dice": {names[c]: d for c, d in res.dice.items()},
             "final_loss": res.losses[-1]}, sort_keys=True), encoding="utf-8")
    return 0


COMMANDS = {"gen-data": cmd_gen_data, "pretrain": cmd_pretrain, "compare": cmd_compare, "flops": cmd_flops,
            "probe": cmd_probe, "decompose": cmd_decompose, "seg-probe": cmd_seg_probe}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except _UsageError:
        return 1
    except SystemExit as exc:          # --help
        return int(exc.code or 0)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 1
    except (BertsWinError, OSError, RuntimeError, ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
