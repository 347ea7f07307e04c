"""Command-line interface: attack / evaluate / report subcommands."""
from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

from .pipeline import RunManifest, emit_report, evaluate_run, load_run_config, run_pipeline


def _apply_overrides(cfg, args) -> None:
    updates = {}
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.mask_mode is not None:
        updates["mask_mode"] = args.mask_mode
    if args.top_n is not None:
        updates["top_n"] = args.top_n
    if args.text_attack:
        updates["text_attack"] = True
    if updates:
        cfg.attack = dataclasses.replace(cfg.attack, **updates)
    if args.out is not None:
        cfg.output_dir = Path(args.out)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="diffattack")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, needs_config in (("attack", True), ("evaluate", True), ("report", False)):
        p = sub.add_parser(name)
        p.add_argument("--config", type=Path, required=needs_config)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--mask-mode", dest="mask_mode", choices=("none", "soft", "hard"), default=None)
        p.add_argument("--top-n", dest="top_n", type=int, default=None)
        p.add_argument("--text-attack", dest="text_attack", action="store_true")
        p.add_argument("--out", type=Path, default=None)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.command == "report":
        out = args.out
        if out is None and args.config is not None:
            out = load_run_config(args.config).output_dir
        if out is None:
            print("report needs --out (or --config pointing at the run)", file=sys.stderr)
            return 2
        manifest = RunManifest.from_json((Path(out) / "manifest.json").read_text(encoding="utf-8"))
        emit_report(manifest, Path(out) / "reports", run_dir=Path(out))
        return 0

    cfg = load_run_config(args.config)
    _apply_overrides(cfg, args)
    if args.command == "attack":
        manifest = run_pipeline(cfg)
    else:
        manifest = evaluate_run(cfg)
    failures = len(manifest.failures)
    if failures:
        print(f"{failures} image(s) failed", file=sys.stderr)
    return 0 if failures == 0 else 1


if __name__ == "__main__":
    raise SystemExit(main())
