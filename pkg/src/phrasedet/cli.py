"""Command line entry point.

Exit codes: 0 success, 1 usage or configuration error, 2 data error,
3 numerical failure.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import evaluation as ev
from .config import ConfigError, RunConfig, load_config
from .dataset import CorpusFormatError, ImageStore, export_corpus, generate_corpus, ingest
from .geometry import InvalidBox
from .labeling import Corpus
from .model import ModelConfig, PhraseRegionModel
from .neuralcore.checkpoint import CheckpointError, load_into, read_checkpoint
from .selfcheck import run_gradcheck
from .textsim import EmptyPhrase, normalize
from .training import NumericalError, Trainer, train_loop

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
SPLITS = ("train", "val", "test")

log = logging.getLogger("phrasedet")


class UsageError(Exception):
    pass


def _config(args) -> RunConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides += [f"run.seed={args.seed}", f"sampling.seed={args.seed}"]
    return load_config(args.config, overrides)


def _split(cfg: RunConfig, split: str, data_dir: str | None = None) -> tuple[Corpus, ImageStore]:
    root = Path(data_dir or cfg.run.data_dir) / split
    ann = root / "annotations.jsonl"
    if not ann.is_file():
        raise CorpusFormatError(f"missing annotation file {ann}")
    corpus = ingest(ann, root)
    return corpus, ImageStore(root, corpus=corpus)


def _load_model(checkpoint: str) -> PhraseRegionModel:
    header, _ = read_checkpoint(checkpoint)
    model = PhraseRegionModel(ModelConfig.from_dict(header["meta"]["model"]))
    load_into(model.store, checkpoint)
    return model


# -- commands ------------------------------------------------------------------------------

def cmd_gen_data(args) -> int:
    cfg = _config(args)
    out = Path(args.out or cfg.run.data_dir)
    sizes = {"train": cfg.run.n_train, "val": cfg.run.n_val, "test": cfg.run.n_test}
    for k, split in enumerate(SPLITS):
        if sizes[split] <= 0:
            continue
        data = generate_corpus(cfg.data, sizes[split], seed=cfg.run.seed * len(SPLITS) + k,
                               exclude_held_out=(split == "train"), prefix=split)
        export_corpus(out / split, data.corpus, data.pixels)
        print(f"{split}: {sizes[split]} images -> {out / split}")
    cfg.save(out / "config.cfg")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.no_finetune_visual:
        cfg = cfg.with_overrides([("rates.finetune_visual", "false")])
    if args.no_prune_ambiguous:
        cfg = cfg.with_overrides([("labels.prune_ambiguous", "false")])
    if args.steps is not None:
        cfg = cfg.with_overrides([("run.steps", str(args.steps))])
    corpus, images = _split(cfg, "train", args.data)
    out = Path(args.out or cfg.run.run_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.save(out / "config.cfg")
    model = PhraseRegionModel(cfg.model, seed=cfg.run.seed)
    trainer = Trainer(model, corpus, images, cfg.train)
    reports = train_loop(trainer, cfg.run.steps, out, cfg.run.checkpoint_every, resume=args.resume)
    last = reports[-1] if reports else None
    if last is not None:
        print(f"step {last.step} objective {last.objective:.6f} -> {out / 'last.npz'}")
    return EXIT_OK


def cmd_localize(args) -> int:
    cfg = _config(args)
    corpus, images = _split(cfg, args.split, args.data)
    try:
        rec = corpus.image(args.image_id)
    except KeyError:
        raise UsageError(f"unknown image id '{args.image_id}'") from None
    model = _load_model(args.checkpoint)
    ranked = ev.localize(model, rec, images[rec.image_id], normalize(args.phrase),
                         cfg.run.nms_iou, args.k)
    for sb in ranked:
        b = sb.box
        print(f"{b.x1:g} {b.y1:g} {b.x2:g} {b.y2:g} {sb.score:.6f}")
    return EXIT_OK


def _queries(cfg: RunConfig, corpus: Corpus, level: int) -> ev.QuerySet:
    return ev.build_query_set(corpus, level, cfg.run.query_seed)


def cmd_detect(args) -> int:
    cfg = _config(args)
    corpus, images = _split(cfg, args.split, args.data)
    model = _load_model(args.checkpoint)
    dets = ev.run_detection(model, corpus, images, _queries(cfg, corpus, args.level),
                            cfg.run.nms_iou, cfg.run.top_k)
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    ev.write_detections(args.out, dets)
    print(f"{len(dets)} detections -> {args.out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    cfg = _config(args)
    if not args.checkpoint and not args.dump:
        raise UsageError("evaluate needs --checkpoint or --dump")
    corpus, images = _split(cfg, args.split, args.data)
    report = ev.EvaluationReport(random=ev.random_baseline(corpus), oracle=ev.oracle_baseline(corpus))
    model = _load_model(args.checkpoint) if args.checkpoint else None
    if model is not None:
        cases = ev.localization_cases(model, corpus, images, cfg.run.nms_iou, max(ev.DEFAULT_KS))
        report.localization = ev.localization_recall(cases)
    queries = _queries(cfg, corpus, args.level)
    if args.dump:
        dets = ev.read_detections(args.dump)
    else:
        dets = ev.run_detection(model, corpus, images, queries, cfg.run.nms_iou, cfg.run.top_k)
    ev.evaluate_detection(dets, corpus, queries, ev.DEFAULT_DET_IOUS, report)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report.write(out / "report.txt")
    ev.emit_pr_curves(report, out)
    for t in ev.DEFAULT_DET_IOUS:
        print(f"level {args.level} IoU {t}: mAP {report.mAP[(args.level, t)]:.4f} "
              f"gAP {report.gAP[(args.level, t)]:.4f}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    rep = run_gradcheck(tuple(args.seeds), composed=not args.layers_only)
    for line in rep.lines():
        print(line)
    print(f"{'PASS' if rep.passed else 'FAIL'} in {rep.seconds:.1f}s")
    return EXIT_OK if rep.passed else EXIT_NUMERIC


# -- parser --------------------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="phrasedet", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="key = value config file")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
        sp.add_argument("--seed", type=int, help="sets run.seed and sampling.seed")
        if data:
            sp.add_argument("--data", help="data directory (default: run.data_dir)")

    sp = sub.add_parser("gen-data", help="generate the synthetic corpus")
    common(sp, data=False)
    sp.add_argument("--out", help="output directory (default: run.data_dir)")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train a model")
    common(sp)
    sp.add_argument("--out", help="run directory (default: run.run_dir)")
    sp.add_argument("--steps", type=int)
    sp.add_argument("--resume", help="checkpoint to continue from")
    sp.add_argument("--no-finetune-visual", action="store_true")
    sp.add_argument("--no-prune-ambiguous", action="store_true")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("localize", help="top-k boxes for one phrase on one image")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="test", choices=SPLITS)
    sp.add_argument("--image-id", required=True)
    sp.add_argument("--phrase", required=True)
    sp.add_argument("-k", type=int, default=10)
    sp.set_defaults(func=cmd_localize)

    sp = sub.add_parser("detect", help="write a detection dump for a query set")
    common(sp)
    sp.add_argument("--checkpoint", required=True)
    sp.add_argument("--split", default="test", choices=SPLITS)
    sp.add_argument("--level", type=int, default=0, choices=(0, 1, 2))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("evaluate", help="localization and detection metrics")
    common(sp)
    sp.add_argument("--checkpoint")
    sp.add_argument("--dump", help="detection dump from 'detect'")
    sp.add_argument("--split", default="test", choices=SPLITS)
    sp.add_argument("--level", type=int, default=0, choices=(0, 1, 2))
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("gradcheck", help="finite-difference check of every layer")
    sp.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2, 3, 4])
    sp.add_argument("--layers-only", action="store_true")
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError, EmptyPhrase) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (CorpusFormatError, CheckpointError, InvalidBox, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
