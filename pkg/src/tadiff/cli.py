"""Command-line entry point: gen-data, train, eval, ablate, report.

Exit codes: 0 on success, 1 for usage/config problems, 2 for runtime or
data problems.
"""

from __future__ import annotations

import argparse
import json
import os
import re
import sys
from collections import Counter

from .ablation import run_ablation, run_step_sweep, write_ablation_csv, \
    write_sweep_csv
from .config import RunConfig, load_config, save_resolved_config
from .data import generate_dataset, video_domain, video_method, load_manifest
from .errors import ConfigError, DataError
from .evaluation import csv_header, csv_row, write_results_csv
from .reporting import write_report
from .runner import run_evaluation, run_training


class _Parser(argparse.ArgumentParser):
    """Argparse reports usage errors via exit code 2; remap them to the
    config-error path (exit 1)."""

    def error(self, message):
        raise ConfigError(message)


def build_parser() -> _Parser:
    parser = _Parser(prog="tadiff",
                     description="Temporal manipulation localization with "
                                 "diffusion-refined features")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    def common(p: argparse.ArgumentParser):
        p.add_argument("--config", help="JSON run-config file")
        p.add_argument("--out", help="output directory override")
        p.add_argument("--seed", type=int,
                       help="master seed override (data + training)")

    p_gen = sub.add_parser("gen-data", help="generate the synthetic dataset")
    common(p_gen)

    p_train = sub.add_parser("train", help="train a localizer")
    common(p_train)
    p_train.add_argument("--protocol",
                         help="protocol whose train split to use")
    p_train.add_argument("--steps", type=int,
                         help="diffusion step count override")
    p_train.add_argument("--tadiff", choices=("on", "off"),
                         help="toggle the refinement chain")
    p_train.add_argument("--resume", help="checkpoint to continue from")

    p_eval = sub.add_parser("eval", help="evaluate a checkpoint")
    common(p_eval)
    p_eval.add_argument("--checkpoint", required=True)
    p_eval.add_argument("--protocol", help="evaluation protocol")

    p_abl = sub.add_parser("ablate",
                           help="toggle-grid ablation or step sweep")
    common(p_abl)
    p_abl.add_argument("--protocol", help="restrict to one protocol")
    p_abl.add_argument("--sweep-steps", dest="sweep_steps",
                       help="A..B step sweep instead of the toggle grid")

    p_rep = sub.add_parser("report",
                           help="summarize a run directory with figures")
    p_rep.add_argument("--config", help="JSON run-config file")
    p_rep.add_argument("--out", help="run directory to summarize")
    return parser


def _load_run_config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig()
    if getattr(args, "out", None):
        cfg.out_dir = args.out
    if getattr(args, "seed", None) is not None:
        cfg.train.seed = args.seed
        cfg.data.synthetic.master_seed = args.seed
    if getattr(args, "protocol", None):
        cfg.eval.protocol = args.protocol
    if getattr(args, "steps", None) is not None:
        cfg.diffusion.steps = args.steps
    if getattr(args, "tadiff", None):
        enabled = args.tadiff == "on"
        cfg.diffusion.noise = enabled
        cfg.diffusion.denoise = enabled
    return cfg


def _echo_config(cfg: RunConfig) -> None:
    os.makedirs(cfg.out_dir, exist_ok=True)
    digest = save_resolved_config(
        os.path.join(cfg.out_dir, "resolved_config.json"), cfg
    )
    print(f"config sha256 {digest}")


def cmd_gen_data(args) -> None:
    cfg = _load_run_config(args)
    manifest_path = generate_dataset(cfg.data.synthetic, cfg.out_dir)
    cfg.data.manifest = manifest_path
    _echo_config(cfg)
    videos = load_manifest(manifest_path)
    counts = Counter(
        (video_method(v), video_domain(v)) for v in videos
    )
    for (method, domain), n in sorted(counts.items()):
        print(f"mechanism {method} (domain {domain}): {n} videos")
    held_out = sorted({m for m, d in counts if d == "open-world"})
    if held_out:
        print(f"held out from closed-domain training: {', '.join(held_out)}")
    print(f"manifest written to {manifest_path}")


def cmd_train(args) -> None:
    cfg = _load_run_config(args)
    _echo_config(cfg)
    result = run_training(cfg, resume=args.resume)
    if result.stats:
        print(f"epoch {result.stats[-1].epoch}: "
              f"loss {result.stats[-1].loss:.6f}")
    print(f"checkpoint written to {result.checkpoint_path}")


def cmd_eval(args) -> None:
    cfg = _load_run_config(args)
    report = run_evaluation(args.checkpoint, cfg,
                            protocol=getattr(args, "protocol", None))
    os.makedirs(cfg.out_dir, exist_ok=True)
    _echo_config(cfg)
    write_results_csv(os.path.join(cfg.out_dir, "results.csv"), [report])
    with open(os.path.join(cfg.out_dir, "report.json"), "w",
              encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    print(csv_header())
    print(csv_row(report))


def _parse_sweep(spec: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)\.\.(\d+)", spec)
    if not m:
        raise ConfigError(
            f"--sweep-steps expects A..B with integers, got {spec!r}"
        )
    lo, hi = int(m.group(1)), int(m.group(2))
    if lo > hi:
        raise ConfigError(f"--sweep-steps range is empty: {spec}")
    return lo, hi


def cmd_ablate(args) -> None:
    cfg = _load_run_config(args)
    if getattr(args, "protocol", None):
        cfg.ablate.protocols = [args.protocol]
        cfg.ablate.sweep_protocol = args.protocol
    _echo_config(cfg)
    if args.sweep_steps:
        lo, hi = _parse_sweep(args.sweep_steps)
        rows = run_step_sweep(cfg, lo, hi)
        path = os.path.join(cfg.out_dir, "sweep.csv")
        write_sweep_csv(path, rows)
        for r in rows:
            print(f"S={r['steps']}: avg AP {r['ap_avg']:.2f}, "
                  f"avg AR {r['ar_avg']:.2f}")
    else:
        rows = run_ablation(cfg)
        path = os.path.join(cfg.out_dir, "ablation.csv")
        write_ablation_csv(path, rows)
        for r in rows:
            print(f"{r['protocol']} noise={'on' if r['noise'] else 'off'} "
                  f"denoise={'on' if r['denoise'] else 'off'}: "
                  f"avg AP {r['ap_avg']:.2f}, avg AR {r['ar_avg']:.2f}")
    print(f"wrote {path}")


def cmd_report(args) -> None:
    if args.out:
        run_dir = args.out
    elif args.config:
        run_dir = load_config(args.config).out_dir
    else:
        run_dir = RunConfig().out_dir
    summary = write_report(run_dir)
    print(f"wrote {summary}")


_HANDLERS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "report": cmd_report,
}


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _HANDLERS[args.command](args)
        return 0
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
