"""Command line entry point: ``oshp <subcommand> ...``.

Outputs go where ``--out`` points; relative paths are resolved against
``$OSHP_OUTPUT_ROOT`` when that variable is set.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

from .config import load_config
from .data import (DatasetManifest, FoldSpec, build_meta_test_list, count_evaluations, load_test_list,
                   save_test_list, tailor_dataset)
from .errors import ConfigError, ContractError, CoverageError, SamplingError
from .evaluation import PROTOCOLS, EvalReport, OraclePredictor, run_meta_test
from .synthetic import SyntheticConfig, generate_synthetic_dataset

OUTPUT_ROOT_ENV = "OSHP_OUTPUT_ROOT"


class UsageError(Exception):
    pass


def _out(path: str) -> Path:
    p = Path(path)
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not p.is_absolute():
        p = Path(root) / p
    return p


def _parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def _overrides(pairs: Sequence[str]) -> dict:
    out = {}
    for item in pairs:
        if "=" not in item:
            raise UsageError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        out[key.strip()] = _parse_value(value)
    return out


def _write_run_manifest(out_dir: Path, command: str, seed, config: dict, argv: Sequence[str]) -> None:
    out_dir.mkdir(parents=True, exist_ok=True)
    doc = {"command": command, "seed": seed, "argv": list(argv), "config": config}
    (out_dir / "run.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def cmd_gen_synthetic(args, argv) -> int:
    sizes = dict(SyntheticConfig().split_sizes)
    for key in sizes:
        value = getattr(args, key)
        if value is not None:
            sizes[key] = value
    kwargs = {"image_size": args.image_size, "split_sizes": sizes}
    if args.classes:
        kwargs["class_names"] = args.classes.split(",")
    config = SyntheticConfig(**kwargs)
    out = _out(args.out)
    manifest = generate_synthetic_dataset(config, args.seed, out)
    if args.novel:
        fold = FoldSpec.identity(manifest.class_names, args.novel.split(","), args.fold_name)
        fold.save(out / "fold.json")
    _write_run_manifest(out, "gen-synthetic", args.seed,
                        {"class_names": config.class_names, "image_size": config.image_size,
                         "split_sizes": sizes, "novel": args.novel}, argv)
    print(f"wrote {sum(sizes.values())} images to {out}")
    return 0


def cmd_tailor(args, argv) -> int:
    manifest = DatasetManifest.load(args.manifest)
    fold = FoldSpec.load(args.fold)
    out = _out(args.out)
    tailored = tailor_dataset(manifest, fold, args.phase, out)
    print(f"wrote {len(tailored.entries)} {args.phase} entries to {out / 'manifest.jsonl'}")
    return 0


def cmd_make_testlist(args, argv) -> int:
    manifest = DatasetManifest.load(args.manifest)
    fold = FoldSpec.load(args.fold)
    pairs = build_meta_test_list(manifest, fold, args.min_evals, args.seed)
    out = _out(args.out)
    save_test_list(pairs, out)
    counts = count_evaluations(manifest, pairs)
    print(f"wrote {len(pairs)} pairs to {out}; evaluations per class: {dict(sorted(counts.items()))}")
    return 0


def cmd_train(args, argv) -> int:
    from .trainer import state_digest, train

    overrides = _overrides(args.set or [])
    if args.seed is not None:
        overrides["rng_seed"] = args.seed
    if args.epochs is not None:
        overrides["max_epoch"] = args.epochs
    config = load_config(args.config, overrides)
    manifest = DatasetManifest.load(args.manifest)
    out = _out(args.out)
    _write_run_manifest(out, "train", config.rng_seed, config.to_dict(), argv)
    state = train(config, manifest, out)
    print(f"checkpoint {out / 'checkpoint.pt'} sha256 {state_digest(state)}")
    return 0


def cmd_eval(args, argv) -> int:
    manifest = DatasetManifest.load(args.manifest)
    fold = FoldSpec.load(args.fold)
    pairs = load_test_list(args.test_list)
    if args.oracle:
        model = OraclePredictor()
    elif args.checkpoint:
        from .trainer import Parser, load_checkpoint
        model = Parser(load_checkpoint(args.checkpoint), args.head)
    else:
        raise UsageError("eval needs --checkpoint or --oracle")
    protocols = PROTOCOLS if args.protocol == "both" else (args.protocol,)
    report = EvalReport()
    dump = _out(args.dump_masks) if args.dump_masks else None
    for protocol in protocols:
        report.add(args.fold_name or fold.name, protocol, run_meta_test(model, manifest, pairs, protocol, fold, dump))
    out = _out(args.out)
    report.save(out)
    _write_run_manifest(out.parent, "eval", None, {"checkpoint": args.checkpoint, "oracle": args.oracle,
                                                   "protocols": list(protocols), "head": args.head}, argv)
    print(report.to_table())
    return 0


def cmd_report(args, argv) -> int:
    report = EvalReport()
    for path in args.reports:
        report = report.merge(EvalReport.load(path))
    if args.out:
        report.save(_out(args.out))
    print(report.to_table())
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="oshp", description="One-shot human parsing toolkit.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-synthetic", help="render a synthetic part-labelled dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--image-size", type=int, default=64)
    g.add_argument("--classes", help="comma-separated part classes")
    for split in SyntheticConfig().split_sizes:
        g.add_argument(f"--{split.replace('_', '-')}", dest=split, type=int, metavar="N")
    g.add_argument("--novel", help="comma-separated novel classes; writes fold.json")
    g.add_argument("--fold-name", default="fold1")
    g.set_defaults(func=cmd_gen_synthetic)

    t = sub.add_parser("tailor", help="remap masks for one fold and phase")
    t.add_argument("--manifest", required=True)
    t.add_argument("--fold", required=True)
    t.add_argument("--phase", required=True, choices=("meta_train", "meta_test"))
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_tailor)

    m = sub.add_parser("make-testlist", help="build the fixed meta-test pair list")
    m.add_argument("--manifest", required=True)
    m.add_argument("--fold", required=True)
    m.add_argument("--min-evals", type=int, default=150)
    m.add_argument("--seed", type=int, default=0)
    m.add_argument("--out", required=True)
    m.set_defaults(func=cmd_make_testlist)

    r = sub.add_parser("train", help="meta-train a model")
    r.add_argument("--manifest", required=True)
    r.add_argument("--config", help="TOML file with [train], [encoder] and [augment] sections")
    r.add_argument("--seed", type=int)
    r.add_argument("--epochs", type=int)
    r.add_argument("--set", action="append", metavar="KEY=VALUE",
                   help="override a config key, e.g. --set encoder.width=8 (repeatable)")
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="meta-test a checkpoint")
    e.add_argument("--manifest", required=True)
    e.add_argument("--fold", required=True)
    e.add_argument("--test-list", required=True)
    src = e.add_mutually_exclusive_group(required=True)
    src.add_argument("--checkpoint")
    src.add_argument("--oracle", action="store_true", help="score the ground truth itself")
    e.add_argument("--protocol", choices=PROTOCOLS + ("both",), default="both")
    e.add_argument("--head", choices=("npm", "agm"), help="inference head (default: from the config)")
    e.add_argument("--fold-name", help="column name in the report (default: the fold's name)")
    e.add_argument("--dump-masks", metavar="DIR")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    rep = sub.add_parser("report", help="merge eval reports and print the table")
    rep.add_argument("reports", nargs="+")
    rep.add_argument("--out")
    rep.set_defaults(func=cmd_report)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, argv)
    except (UsageError, ConfigError, ContractError, CoverageError, SamplingError, ValueError,
            FileNotFoundError) as exc:
        sub = parser._subparsers._group_actions[0].choices[args.command]
        sub.print_usage(sys.stderr)
        print(f"oshp {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
