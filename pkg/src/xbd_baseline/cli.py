"""Command-line entry point: ``xbd-baseline {split,analyze,train,evaluate,predict}``."""

from __future__ import annotations

import argparse
import logging
import os
import sys
from collections import defaultdict
from pathlib import Path

from . import ingest, training
from .metrics import evaluate_dataset

log = logging.getLogger("xbd_baseline")


def _data_root(args) -> str:
    root = args.data_root or os.environ.get(training.DATA_ROOT_ENV, "")
    if not root:
        raise FileNotFoundError(f"no data root given (use --data-root or ${training.DATA_ROOT_ENV})")
    if not Path(root).is_dir():
        raise FileNotFoundError(f"data root {root} does not exist")
    return root


def _pairs(args) -> list[ingest.PairRecord]:
    if args.manifest and Path(args.manifest).is_file():
        return ingest.read_pair_manifest(args.manifest)
    return ingest.load_manifest(_data_root(args), cache=args.manifest or None)


def cmd_split(args) -> int:
    pairs = _pairs(args)
    if args.mode == "original":
        split = ingest.make_original_split(pairs)
    else:
        split = ingest.make_disjoint_split(ingest.events_from_pairs(pairs), pairs)
    if args.val_fraction > 0:
        split = ingest.with_validation(split, args.val_fraction, args.seed)
    ingest.write_split(args.out, split)

    print(f"mode {split.mode}")
    for subset in ("train", "val", "test"):
        members = split.pairs.get(subset, [])
        print(f"{subset}: {len(members)} pairs")
        per_event = defaultdict(int)
        for p in members:
            per_event[p.event_name] += 1
        for event in sorted(per_event):
            print(f"  {event:<22} {per_event[event]}")
    if split.mode == "original":
        by_source = defaultdict(int)
        for p in pairs:
            by_source[p.subset] += 1
        print("source subsets: " + " ".join(f"{s}={by_source.get(s, 0)}" for s in ingest.SUBSETS))
    return 0


def cmd_analyze(args) -> int:
    root = _data_root(args)
    if args.split:
        split = ingest.read_split(args.split)
        pairs = [p for ps in split.pairs.values() for p in ps]
    else:
        pairs = [p for p in _pairs(args) if p.subset != "holdout"]
    by_event = defaultdict(list)
    for p in pairs:
        by_event[p.event_name].append(p)

    def rasters(recs):
        for rec in recs:
            yield ingest.load_label_raster(rec.label_path(root, "post"))

    rows = ingest.analyze_distributions({ev: rasters(recs) for ev, recs in by_event.items()})
    ingest.write_distribution_table(args.out, rows)
    print(Path(args.out).read_text(), end="")
    return 0


def cmd_train(args) -> int:
    config = training.TrainConfig.from_file(args.config)
    if args.data_root:
        config.data_root = args.data_root
    if args.out_dir:
        config.out_dir = args.out_dir
    if not config.data_root or not Path(config.data_root).is_dir():
        raise FileNotFoundError(f"data root {config.data_root!r} does not exist")
    result = training.train(config)
    print(f"trained {result.meta.step} steps; best loss {min(result.val_losses):.6f}; "
          f"checkpoints in {result.out_dir}")
    return 0


def _label_for(labels_dir: Path, tile: str):
    json_path = labels_dir / f"{tile}_post_disaster.json"
    if json_path.is_file():
        return ingest.load_label_raster(json_path)
    for name in (f"{tile}_damage.png", f"{tile}.png"):
        if (labels_dir / name).is_file():
            return training.read_mask(labels_dir / name)
    return None


def cmd_evaluate(args) -> int:
    pred_dir, labels_dir = Path(args.pred), Path(args.labels)
    for d in (pred_dir, labels_dir):
        if not d.is_dir():
            raise FileNotFoundError(f"directory {d} does not exist")
    tiles = sorted(p.name[: -len("_damage.png")] for p in pred_dir.glob("*_damage.png"))
    if not tiles:
        raise FileNotFoundError(f"no *_damage.png predictions in {pred_dir}")
    missing = [t for t in tiles if _label_for(labels_dir, t) is None]
    if missing:
        raise FileNotFoundError(f"no labels for tiles: {', '.join(missing[:20])}")

    preds = ((t, training.read_mask(pred_dir / f"{t}_damage.png")) for t in tiles)
    labels = ((t, _label_for(labels_dir, t)) for t in tiles)
    event_of = (lambda t: t.rsplit("_", 1)[0]) if args.per_event else None
    report = evaluate_dataset(preds, labels, event_of)
    print(report.text())
    print(report.CSV_HEADER)
    print(report.csv_row())
    if args.out:
        Path(args.out).write_text(report.CSV_HEADER + "\n" + report.csv_row() + "\n")
    return 0


def cmd_predict(args) -> int:
    root = _data_root(args)
    model, _, _ = training.load_checkpoint(args.ckpt)
    if args.split:
        recs = ingest.read_split(args.split).pairs[args.subset]
    else:
        recs = [p for p in ingest.discover_pairs(root, [args.subset])]
    external = None
    if args.loc_strategy == "external":
        if not args.external_masks:
            raise ValueError("--loc-strategy external needs --external-masks")
        ext_dir = Path(args.external_masks)
        external = {r.tile_id: training.read_mask(ext_dir / f"{r.tile_id}_localization.png") for r in recs}

    def pairs():
        for rec in recs:
            yield training.load_pair(root, rec)[0]

    written = training.predict_to_files(model, pairs(), args.out, args.loc_strategy, args.threshold, external)
    print(f"wrote {len(written) // 2} tiles to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="xbd-baseline", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def data_opts(p):
        p.add_argument("--data-root", default="", help=f"xBD root (default ${training.DATA_ROOT_ENV})")
        p.add_argument("--manifest", default="", help="cached pair manifest (read if present, else written)")

    p = sub.add_parser("split", help="write a train/val/test split manifest")
    data_opts(p)
    p.add_argument("--mode", choices=("original", "disjoint"), required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--val-fraction", type=float, default=0.1)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("analyze", help="per-event damage class distribution table")
    data_opts(p)
    p.add_argument("--split", default="", help="restrict to the pairs of a split manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_analyze)

    p = sub.add_parser("train", help="train from a key = value config file")
    p.add_argument("--config", required=True)
    p.add_argument("--data-root", default="")
    p.add_argument("--out-dir", default="")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score exported masks against labels")
    p.add_argument("--pred", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--per-event", action="store_true")
    p.add_argument("--out", default="")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("predict", help="export localization and damage masks")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data-root", default="")
    p.add_argument("--split", default="")
    p.add_argument("--subset", default="test")
    p.add_argument("--out", required=True)
    p.add_argument("--loc-strategy", choices=("channel", "otsu", "external"), default="channel")
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--external-masks", default="")
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (OSError, ValueError) as exc:
        print(f"xbd-baseline {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
