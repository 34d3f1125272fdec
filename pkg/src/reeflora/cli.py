"""Command-line entry point.

Exit codes: 0 success, 1 runtime or data error, 2 usage error. Reports go
to stdout as JSON unless ``--out`` names a file; ``--pretty`` prints a
human-readable table instead.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .attribution import grad_cam
from .checkpoint import Checkpoint
from .config import dump_config, load_run_config
from .data import (Manifest, SplitSpec, build_manifest, channel_histogram, composition_report, read_raster,
                   scan_sources, split_grouped, tile_directory)
from .errors import ReefError
from .head import class_index
from .lora import count_trainable
from .train import evaluate, rank_sweep, train

MODE_ALIASES = {"mixup": "mixup", "season": "season_transfer", "season_transfer": "season_transfer",
                "site": "site_holdout", "site_holdout": "site_holdout"}


def dumps(obj) -> str:
    """The one JSON encoding used for every machine-readable output."""
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _emit(args, payload: dict, pretty=None) -> None:
    text = pretty() if (getattr(args, "pretty", False) and pretty) else dumps(payload)
    out = getattr(args, "out", None)
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)


def _csv_list(text: str) -> list[str]:
    return [t.strip() for t in text.split(",") if t.strip()]


# -- subcommands -----------------------------------------------------------------

def cmd_tile(args) -> int:
    m = tile_directory(args.img_dir, args.out_dir, args.tile)
    _emit(args, {"manifest": str(Path(args.out_dir) / "manifest.jsonl"), "sources": len(m.source_ids()),
                 "tiles": len(m)})
    return 0


def cmd_manifest(args) -> int:
    m = build_manifest(scan_sources(args.img_dir), args.tile)
    text = m.to_jsonl()
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_split(args) -> int:
    manifest = Manifest.read(args.manifest)
    ratios = tuple(float(r) for r in _csv_list(args.ratios))
    spec = SplitSpec(mode=MODE_ALIASES[args.mode], ratios=ratios, seed=args.seed,
                     holdout_sites=tuple(_csv_list(args.holdout)) if args.holdout else (),
                     train_season=args.train_season)
    parts = split_grouped(manifest, spec)
    src = Path(args.manifest)
    out_dir = Path(args.out_dir) if args.out_dir else src.parent
    summary = {"mode": spec.mode, "seed": spec.seed}
    for name, part in zip(("train", "val", "test"), parts):
        path = out_dir / f"{src.stem}.{name}.jsonl"
        if out_dir != src.parent:
            part = _rebase(part, src.parent, out_dir)
        part.write(path)
        summary[name] = {"path": str(path), "images": len(part.source_ids()), "tiles": len(part),
                         "sites": part.sites()}
    _emit(args, summary)
    return 0


def _rebase(m: Manifest, old_root: Path, new_root: Path) -> Manifest:
    """Rewrite relative tile paths so they still resolve from ``new_root``."""
    recs = []
    for r in m.records:
        p = Path(r.tile_path)
        if not p.is_absolute():
            p = Path(os.path.relpath((old_root / p).resolve(), new_root.resolve()))
        recs.append(replace(r, tile_path=p.as_posix()))
    return m.subset(recs)


def _run_config(args):
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"train.seed={args.seed}")
    if getattr(args, "threshold", None) is not None:
        overrides.append(f"train.threshold={args.threshold}")
    return load_run_config(args.config, overrides)


def cmd_train(args) -> int:
    cfg = _run_config(args)
    out_dir = Path(args.out_dir or cfg.data.out_dir)
    result = train(cfg.model, cfg.lora, cfg.train, Manifest.read(args.train_manifest),
                   Manifest.read(args.val_manifest), out_dir)
    _emit(args, {
        "out_dir": str(out_dir),
        "latest": str(out_dir / "latest.ckpt"),
        "best": str(out_dir / "best.ckpt") if result.best else None,
        "iterations": result.latest.iteration,
        "final_loss": result.log[-1]["loss"] if result.log else None,
        "best_val_match_ratio": result.latest.best_val_match_ratio,
        "trainable_params": count_trainable(cfg.model, cfg.lora).trainable,
        "evals": result.evals,
    })
    return 0


def cmd_eval(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    report = evaluate(ckpt, Manifest.read(args.manifest), args.threshold)

    def pretty():
        head = "Match Ratio | Micro F1 | Macro F1 | " + " | ".join(report.class_names)
        return head + "\n" + report.table_row() + "\n"

    _emit(args, report.to_dict(), pretty)
    return 0


def cmd_sweep(args) -> int:
    cfg = _run_config(args)
    d = cfg.data
    missing = [k for k in ("train_manifest", "val_manifest", "test_manifest") if not getattr(d, k)]
    if missing:
        raise ReefError(f"{args.config}: [data] needs {', '.join(missing)} for sweep-rank")
    ranks = [int(r) for r in _csv_list(args.ranks)]
    out_dir = Path(args.out_dir or d.out_dir)
    table = rank_sweep(cfg.model, cfg.lora, cfg.train, ranks, Manifest.read(d.train_manifest),
                       Manifest.read(d.val_manifest), Manifest.read(d.test_manifest), out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "sweep.json").write_text(dumps(table.to_dict()), encoding="utf-8")
    (out_dir / "sweep.csv").write_text(table.to_csv(), encoding="utf-8")
    _emit(args, table.to_dict(), table.to_csv)
    return 0


def cmd_attribute(args) -> int:
    ckpt = Checkpoint.load(args.checkpoint)
    idx = class_index(args.class_name)
    heat = grad_cam(ckpt.model(), read_raster(args.tile), idx, args.layer, tile_ref=str(args.tile))
    png = Path(args.heatmap or Path(args.tile).with_name(f"{Path(args.tile).stem}.cam.{heat.class_name}.png"))
    png_path, side = heat.save(png)
    payload = heat.sidecar()
    payload.update({"png": str(png_path), "sidecar": str(side)})
    _emit(args, payload)
    return 0


def cmd_histogram(args) -> int:
    hist = channel_histogram(Manifest.read(args.manifest), args.sample, args.seed)
    if args.csv:
        Path(args.csv).parent.mkdir(parents=True, exist_ok=True)
        Path(args.csv).write_text(hist.to_csv(), encoding="utf-8")
    _emit(args, hist.to_dict(), hist.to_csv)
    return 0


def cmd_report(args) -> int:
    rep = composition_report(Manifest.read(args.manifest))

    def pretty():
        names = rep["class_names"]
        lines = ["site  tiles  " + "  ".join(f"{n:>6}" for n in names)]
        for row in rep["sites"]:
            lines.append(f"{row['site']:<5} {row['tiles']:>5}  " +
                         "  ".join(f"{row['percent'][n]:>5.1f}%" for n in names))
        return "\n".join(lines) + "\n"

    _emit(args, rep, pretty)
    return 0


def cmd_params(args) -> int:
    cfg = _run_config(args)
    budget = count_trainable(cfg.model, cfg.lora)
    payload = budget.to_dict()
    if not args.layers:
        payload.pop("layers")
    payload["rank"] = cfg.lora.rank
    payload["targets"] = list(cfg.lora.targets)
    payload["trainable_millions"] = round(budget.trainable / 1e6, 2)

    def pretty():
        return (f"trainable {budget.trainable:,} ({budget.trainable / 1e6:.2f}M)\n"
                f"frozen    {budget.frozen:,}\ntotal     {budget.total:,}\n")

    _emit(args, payload, pretty)
    return 0


def cmd_config(args) -> int:
    if not args.dump_defaults:
        raise ReefError("config: nothing to do (use --dump-defaults)")
    sys.stdout.write(dump_config())
    return 0


# -- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="reeflora", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")

    def add(name, func, help_):
        sp = sub.add_parser(name, help=help_)
        sp.set_defaults(func=func)
        return sp

    def with_out(sp, pretty=True):
        sp.add_argument("--out", help="write the report to this file instead of stdout")
        if pretty:
            sp.add_argument("--pretty", action="store_true", help="human-readable output")
        return sp

    def with_config(sp):
        sp.add_argument("config", help="run configuration file ([model] [lora] [train] [data])")
        sp.add_argument("--set", action="append", metavar="SECTION.KEY=VALUE", help="override a config value")
        return sp

    sp = with_out(add("tile", cmd_tile, "cut source images into tiles and write a manifest"), pretty=False)
    sp.add_argument("img_dir")
    sp.add_argument("out_dir")
    sp.add_argument("--tile", type=int, default=512)

    sp = add("manifest", cmd_manifest, "plan a manifest for a directory of images without writing tiles")
    sp.add_argument("img_dir")
    sp.add_argument("--tile", type=int, default=512)
    sp.add_argument("--out")

    sp = with_out(add("split", cmd_split, "split a manifest by source image"), pretty=False)
    sp.add_argument("manifest")
    sp.add_argument("--mode", choices=sorted(MODE_ALIASES), default="mixup")
    sp.add_argument("--holdout", help="comma-separated site codes for --mode site")
    sp.add_argument("--train-season", choices=("dry", "wet"), default="dry")
    sp.add_argument("--ratios", default="0.7,0.1,0.2")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out-dir")

    sp = with_out(with_config(add("train", cmd_train, "train adapters and head")), pretty=False)
    sp.add_argument("train_manifest")
    sp.add_argument("val_manifest")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out-dir")

    sp = with_out(add("eval", cmd_eval, "evaluate a checkpoint on a manifest"))
    sp.add_argument("checkpoint")
    sp.add_argument("manifest")
    sp.add_argument("--threshold", type=float, default=0.5)

    sp = with_out(with_config(add("sweep-rank", cmd_sweep, "train once per adapter rank")))
    sp.add_argument("--ranks", default="0,3,6,12,24")
    sp.add_argument("--seed", type=int)
    sp.add_argument("--out-dir")

    sp = with_out(add("attribute", cmd_attribute, "Grad-CAM heatmap for one tile and class"), pretty=False)
    sp.add_argument("checkpoint")
    sp.add_argument("tile")
    sp.add_argument("--class", dest="class_name", required=True, help="HLC, CPC, DDC, RBL, CPT, DSE, PRD or PHY")
    sp.add_argument("--layer", type=int, help="block index (default: last)")
    sp.add_argument("--heatmap", help="PNG path for the heatmap")

    sp = with_out(add("histogram", cmd_histogram, "per-channel pixel histograms over sampled tiles"))
    sp.add_argument("manifest")
    sp.add_argument("--sample", type=int, default=1038)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--csv", help="also write channel,bin,count CSV here")

    sp = with_out(add("report", cmd_report, "per-site label composition"))
    sp.add_argument("manifest")

    sp = with_out(with_config(add("params", cmd_params, "trainable-parameter accounting")))
    sp.add_argument("--layers", action="store_true", help="include the per-layer breakdown")

    sp = add("config", cmd_config, "configuration helpers")
    sp.add_argument("--dump-defaults", action="store_true")
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ReefError, OSError) as exc:
        print(f"reeflora {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
