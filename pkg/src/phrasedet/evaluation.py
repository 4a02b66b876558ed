"""Localization recall, detection AP/mAP/gAP, query sets and proposal baselines.

AP uses the all-points precision envelope. Detections are matched greedily in
descending score order (ties keep input order); each detection takes the
highest-IoU ground truth not yet matched on its image and is a true positive
when that IoU reaches the threshold.
"""
from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .geometry import Box, ScoredBox, boxes_to_array, iou_matrix, nms_indices
from .labeling import Corpus, ImageRecord
from .neuralcore import no_tape
from .textsim import NormalizedPhrase, normalize

DEFAULT_KS = tuple(range(1, 11))
DEFAULT_LOC_IOUS = (0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7)
DEFAULT_DET_IOUS = (0.3, 0.5, 0.7)


# -- scoring helpers -----------------------------------------------------------------------

def score_proposals(model, rec: ImageRecord, pixels: np.ndarray,
                    phrases: Sequence[NormalizedPhrase]) -> np.ndarray:
    """Scores (n_proposals, n_phrases) of every proposal on ``rec``."""
    if not rec.proposals:
        raise ValueError(f"{rec.image_id}: no proposals to score")
    with no_tape():
        return model.scores(pixels, boxes_to_array(rec.proposals), list(phrases))


def ranked_boxes(boxes: np.ndarray, scores: np.ndarray, nms_iou: float,
                 top_k: int | None) -> list[ScoredBox]:
    keep = nms_indices(boxes, scores, nms_iou, top_k)
    return [ScoredBox(Box(*boxes[i]), float(scores[i])) for i in keep]


def localize(model, rec: ImageRecord, pixels: np.ndarray, phrase: NormalizedPhrase,
             nms_iou: float = 0.3, top_k: int = 10) -> list[ScoredBox]:
    s = score_proposals(model, rec, pixels, [phrase])[:, 0]
    return ranked_boxes(boxes_to_array(rec.proposals), s, nms_iou, top_k)


# -- localization -------------------------------------------------------------------------------

@dataclass
class LocalizationReport:
    recall: dict[tuple[int, float], float]
    median_iou: float
    mean_iou: float
    n_cases: int

    def at(self, k: int, thr: float) -> float:
        return self.recall[(k, thr)]


@dataclass
class LocalizationCase:
    image_id: str
    phrase: NormalizedPhrase
    ranked: list[ScoredBox]
    gt: np.ndarray


def localization_recall(cases: Sequence[LocalizationCase], ks: Sequence[int] = DEFAULT_KS,
                        iou_thresholds: Sequence[float] = DEFAULT_LOC_IOUS) -> LocalizationReport:
    """A case counts at (k, t) when any top-k box reaches IoU t with any of its GT boxes."""
    if not cases:
        return LocalizationReport({(k, t): 0.0 for k in ks for t in iou_thresholds}, 0.0, 0.0, 0)
    kmax = max(ks)
    best = np.zeros((len(cases), kmax))  # best GT overlap of the box at each rank
    for i, c in enumerate(cases):
        if len(c.gt) == 0:
            raise ValueError(f"case {c.image_id}/{c.phrase} has no ground truth")
        boxes = boxes_to_array(sb.box for sb in c.ranked[:kmax])
        if len(boxes):
            best[i, :len(boxes)] = iou_matrix(boxes, c.gt).max(axis=1)
    recall = {}
    for k in ks:
        topk = best[:, :k].max(axis=1)
        for t in iou_thresholds:
            recall[(k, t)] = float(np.mean(topk >= t))
    top1 = best[:, 0]
    return LocalizationReport(recall, float(np.median(top1)), float(np.mean(top1)), len(cases))


def localization_precision(cases: Sequence[LocalizationCase], k: int, thr: float) -> float:
    """Mean fraction of the top-k boxes that reach IoU ``thr`` with some GT box."""
    vals = []
    for c in cases:
        boxes = boxes_to_array(sb.box for sb in c.ranked[:k])
        hits = (iou_matrix(boxes, c.gt).max(axis=1) >= thr).sum() if len(boxes) else 0
        vals.append(hits / k)
    return float(np.mean(vals)) if vals else 0.0


def localization_cases(model, corpus: Corpus, images, nms_iou: float = 0.3,
                       top_k: int = 10) -> list[LocalizationCase]:
    """Every annotated (image, phrase) pair as a query on its own image."""
    cases = []
    for rec in corpus.images:
        phrases = list(rec.phrases)
        if not phrases:
            continue
        s = score_proposals(model, rec, images[rec.image_id], phrases)
        boxes = boxes_to_array(rec.proposals)
        for j, t in enumerate(phrases):
            cases.append(LocalizationCase(rec.image_id, t, ranked_boxes(boxes, s[:, j], nms_iou, top_k),
                                          rec.gt_array(t)))
    return cases


def _case_overlaps(corpus: Corpus) -> list[np.ndarray]:
    out = []
    for rec in corpus.images:
        if not rec.proposals:
            raise ValueError(f"{rec.image_id}: no proposals")
        props = boxes_to_array(rec.proposals)
        for t in rec.phrases:
            out.append(iou_matrix(props, rec.gt_array(t)).max(axis=1))
    return out


def random_baseline(corpus: Corpus, ks: Sequence[int] = DEFAULT_KS,
                    iou_thresholds: Sequence[float] = DEFAULT_LOC_IOUS) -> LocalizationReport:
    """Exact expectation of picking k proposals uniformly without replacement."""
    ovs = _case_overlaps(corpus)
    recall = {}
    for k in ks:
        for t in iou_thresholds:
            vals = []
            for ov in ovs:
                n, h = len(ov), int((ov >= t).sum())
                kk = min(k, n)
                miss = math.comb(n - h, kk) / math.comb(n, kk)
                vals.append(1.0 - miss)
            recall[(k, t)] = float(np.mean(vals)) if vals else 0.0
    if not ovs:
        return LocalizationReport(recall, 0.0, 0.0, 0)
    vals = np.concatenate(ovs)
    wts = np.concatenate([np.full(len(o), 1.0 / len(o)) for o in ovs])
    order = np.argsort(vals, kind="stable")
    cum = np.cumsum(wts[order])
    median = float(vals[order][np.searchsorted(cum, cum[-1] / 2)])
    mean = float(np.mean([o.mean() for o in ovs]))
    return LocalizationReport(recall, median, mean, len(ovs))


def oracle_baseline(corpus: Corpus, ks: Sequence[int] = DEFAULT_KS,
                    iou_thresholds: Sequence[float] = DEFAULT_LOC_IOUS) -> LocalizationReport:
    """Always pick the proposal overlapping a GT box the most."""
    ovs = _case_overlaps(corpus)
    best = np.array([o.max() for o in ovs]) if ovs else np.zeros(0)
    recall = {(k, t): float(np.mean(best >= t)) if len(best) else 0.0
              for k in ks for t in iou_thresholds}
    if not len(best):
        return LocalizationReport(recall, 0.0, 0.0, 0)
    return LocalizationReport(recall, float(np.median(best)), float(np.mean(best)), len(best))


# -- detection --------------------------------------------------------------------------------

@dataclass
class QuerySet:
    level: int
    entries: list[tuple[str, NormalizedPhrase, bool]]
    seed: int | None = None

    def phrases(self) -> list[NormalizedPhrase]:
        return list(dict.fromkeys(t for _, t, _ in self.entries))


def build_query_set(corpus: Corpus, level: int, rng: np.random.Generator | int | None = 0,
                    negative_ratio: int = 5, min_negatives: int = 20) -> QuerySet:
    """Level 0: positive pairs only. Level 1: as many negatives as positives per
    phrase. Level 2: max(ratio * positives, min_negatives) negatives per phrase.
    Negatives are capped by availability; stuff phrases are dropped at levels 1-2.
    """
    if level not in (0, 1, 2):
        raise ValueError(f"query level must be 0, 1 or 2, got {level}")
    seed = rng if isinstance(rng, int) else None
    rng = np.random.default_rng(rng) if not isinstance(rng, np.random.Generator) else rng
    positives: dict[NormalizedPhrase, list[str]] = {}
    for rec in corpus.images:
        for t in rec.phrases:
            positives.setdefault(t, []).append(rec.image_id)
    entries: list[tuple[str, NormalizedPhrase, bool]] = []
    if level == 0:
        for rec in corpus.images:
            entries.extend((rec.image_id, t, True) for t in rec.phrases)
        return QuerySet(0, entries, seed)
    all_ids = [r.image_id for r in corpus.images]
    for t, pos_ids in positives.items():
        if t in corpus.stuff_phrases:
            continue
        pos_set = set(pos_ids)
        neg_ids = [i for i in all_ids if i not in pos_set]
        want = len(pos_ids) if level == 1 else max(negative_ratio * len(pos_ids), min_negatives)
        n_neg = min(want, len(neg_ids))
        picks = rng.choice(len(neg_ids), size=n_neg, replace=False) if n_neg else []
        entries.extend((i, t, True) for i in pos_ids)
        entries.extend((neg_ids[j], t, False) for j in sorted(int(p) for p in picks))
    return QuerySet(level, entries, seed)


@dataclass(frozen=True)
class Detection:
    image_id: str
    phrase: NormalizedPhrase
    box: Box
    score: float

    def to_json(self) -> str:
        return json.dumps({"image_id": self.image_id, "phrase": self.phrase.text,
                           "box": self.box.to_list(), "score": self.score})

    @classmethod
    def from_json(cls, line: str) -> "Detection":
        d = json.loads(line)
        return cls(d["image_id"], normalize(d["phrase"]), Box.from_list(d["box"]), float(d["score"]))


def run_detection(model, corpus: Corpus, images, queries: QuerySet, nms_iou: float = 0.3,
                  max_per_query: int = 10) -> list[Detection]:
    by_image: dict[str, list[NormalizedPhrase]] = {}
    for image_id, t, _ in queries.entries:
        by_image.setdefault(image_id, []).append(t)
    recs = {r.image_id: r for r in corpus.images}
    dets = []
    for image_id, phrases in by_image.items():
        rec = recs[image_id]
        phrases = list(dict.fromkeys(phrases))
        s = score_proposals(model, rec, images[image_id], phrases)
        boxes = boxes_to_array(rec.proposals)
        for j, t in enumerate(phrases):
            for sb in ranked_boxes(boxes, s[:, j], nms_iou, max_per_query):
                dets.append(Detection(image_id, t, sb.box, sb.score))
    return dets


def write_detections(path: str | os.PathLike, dets: Iterable[Detection]) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dets:
            fh.write(d.to_json() + "\n")


def read_detections(path: str | os.PathLike) -> list[Detection]:
    with open(path, encoding="utf-8") as fh:
        return [Detection.from_json(line) for line in fh if line.strip()]


@dataclass
class PRCurve:
    recall: np.ndarray
    precision: np.ndarray  # precision envelope, non-increasing in recall
    ap: float | None


def _ranked_outcomes(dets: Sequence[tuple], gt: Mapping, iou_threshold: float) -> np.ndarray:
    """TP flags for detections given as (key, box_array_row, score) in ranked order."""
    matched = {key: np.zeros(len(g), dtype=bool) for key, g in gt.items()}
    tp = np.zeros(len(dets), dtype=bool)
    for i, (key, box, _) in enumerate(dets):
        g = gt.get(key)
        if g is None or len(g) == 0:
            continue
        ov = iou_matrix(box[None, :], g)[0]
        ov[matched[key]] = -1.0
        j = int(np.argmax(ov))
        if ov[j] >= iou_threshold:
            tp[i] = True
            matched[key][j] = True
    return tp


def _curve(tp: np.ndarray, npos: int) -> PRCurve:
    if npos == 0:
        return PRCurve(np.zeros(0), np.zeros(0), None)
    ctp = np.cumsum(tp)
    rec = ctp / npos
    prec = ctp / np.arange(1, len(tp) + 1)
    env = prec.copy()
    for i in range(len(env) - 2, -1, -1):
        env[i] = max(env[i], env[i + 1])
    mrec = np.concatenate([[0.0], rec])
    ap = float(np.sum((mrec[1:] - mrec[:-1]) * env)) if len(tp) else 0.0
    return PRCurve(rec, env, ap)


def _sorted(dets: Sequence[tuple]) -> list[tuple]:
    order = np.argsort(-np.array([d[2] for d in dets], dtype=np.float64), kind="stable")
    return [dets[i] for i in order]


def average_precision(dets: Sequence[tuple[str, Box | np.ndarray, float]],
                      gt: Mapping[str, np.ndarray], iou_threshold: float) -> PRCurve:
    """AP of one phrase: ``dets`` are (image_id, box, score), ``gt`` maps image_id to (n, 4)."""
    items = [(k, np.asarray(b.to_list() if isinstance(b, Box) else b, dtype=np.float64), s)
             for k, b, s in dets]
    ranked = _sorted(items)
    npos = int(sum(len(g) for g in gt.values()))
    return _curve(_ranked_outcomes(ranked, gt, iou_threshold), npos)


def mean_ap(aps: Mapping[NormalizedPhrase, float | None] | Sequence[float]) -> float:
    vals = [a for a in (aps.values() if isinstance(aps, Mapping) else aps) if a is not None]
    if not vals:
        raise ValueError("mean AP over an empty phrase set")
    return float(np.mean(vals))


def query_ground_truth(corpus: Corpus, queries: QuerySet) -> dict[tuple[str, NormalizedPhrase], np.ndarray]:
    recs = {r.image_id: r for r in corpus.images}
    return {(i, t): recs[i].gt_array(t) for i, t, _ in queries.entries}


def per_phrase_ap(dets: Sequence[Detection], gt: Mapping[tuple[str, NormalizedPhrase], np.ndarray],
                  iou_threshold: float) -> dict[NormalizedPhrase, float | None]:
    by_phrase: dict[NormalizedPhrase, list] = {}
    gt_by_phrase: dict[NormalizedPhrase, dict[str, np.ndarray]] = {}
    for (image_id, t), g in gt.items():
        gt_by_phrase.setdefault(t, {})[image_id] = g
    for d in dets:
        by_phrase.setdefault(d.phrase, []).append((d.image_id, d.box, d.score))
    return {t: average_precision(by_phrase.get(t, []), g, iou_threshold).ap
            for t, g in gt_by_phrase.items()}


def global_ap(dets: Sequence[Detection], gt: Mapping[tuple[str, NormalizedPhrase], np.ndarray],
              iou_threshold: float) -> PRCurve:
    """AP over the pooled ranking of every detection; GT pools are per (image, phrase)."""
    items = [((d.image_id, d.phrase), d.box.as_array(), d.score) for d in dets]
    ranked = _sorted(items)
    npos = int(sum(len(g) for g in gt.values()))
    return _curve(_ranked_outcomes(ranked, gt, iou_threshold), npos)


# -- reports ----------------------------------------------------------------------------------

@dataclass
class EvaluationReport:
    localization: LocalizationReport | None = None
    random: LocalizationReport | None = None
    oracle: LocalizationReport | None = None
    ap: dict[tuple[int, float], dict[NormalizedPhrase, float | None]] = field(default_factory=dict)
    mAP: dict[tuple[int, float], float] = field(default_factory=dict)
    gAP: dict[tuple[int, float], float] = field(default_factory=dict)
    curves: dict[tuple[int, float], PRCurve] = field(default_factory=dict)

    def to_kv(self) -> dict[str, str]:
        out: dict[str, str] = {}
        for name, rep in (("loc", self.localization), ("random", self.random), ("oracle", self.oracle)):
            if rep is None:
                continue
            out[f"{name}.n_cases"] = str(rep.n_cases)
            out[f"{name}.median_iou"] = repr(rep.median_iou)
            out[f"{name}.mean_iou"] = repr(rep.mean_iou)
            for (k, t), v in sorted(rep.recall.items()):
                out[f"{name}.recall@{k}.iou{t}"] = repr(v)
        for (lvl, t), v in sorted(self.mAP.items()):
            out[f"det.level{lvl}.iou{t}.mAP"] = repr(v)
        for (lvl, t), v in sorted(self.gAP.items()):
            out[f"det.level{lvl}.iou{t}.gAP"] = repr(v)
        return out

    def write(self, path: str | os.PathLike) -> None:
        Path(path).write_text("".join(f"{k}={v}\n" for k, v in self.to_kv().items()))


def evaluate_detection(dets: Sequence[Detection], corpus: Corpus, queries: QuerySet,
                       iou_thresholds: Sequence[float] = DEFAULT_DET_IOUS,
                       report: EvaluationReport | None = None) -> EvaluationReport:
    report = report or EvaluationReport()
    gt = query_ground_truth(corpus, queries)
    allowed = set(gt)
    dets = [d for d in dets if (d.image_id, d.phrase) in allowed]
    for t in iou_thresholds:
        key = (queries.level, t)
        aps = per_phrase_ap(dets, gt, t)
        report.ap[key] = aps
        report.mAP[key] = mean_ap(aps)
        curve = global_ap(dets, gt, t)
        report.gAP[key] = curve.ap if curve.ap is not None else 0.0
        report.curves[key] = curve
    return report


def emit_pr_curves(report: EvaluationReport, out_dir: str | os.PathLike) -> list[Path]:
    """One CSV (recall, precision envelope) per (level, IoU threshold) of the gAP ranking."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for (lvl, t), curve in sorted(report.curves.items()):
        p = out / f"pr_level{lvl}_iou{t}.csv"
        with open(p, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["recall", "precision"])
            for r, pr in zip(curve.recall, curve.precision):
                w.writerow([repr(float(r)), repr(float(pr))])
        paths.append(p)
    return paths
