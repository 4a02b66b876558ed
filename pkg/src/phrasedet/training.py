"""Weighted three-part loss, full objective, sampling and the training loop."""
from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .geometry import Box, boxes_to_array
from .labeling import Corpus, ImageRecord, LabelConfig, RegionTextLabel, label_matrix
from .model import PhraseRegionModel, dynamic_regularizer, image_to_input, score_matrix
from .neuralcore import Tape, Tensor, adam_step, ops, sgd_momentum_step, weight_decay_penalty
from .neuralcore.checkpoint import load_into, save_checkpoint
from .textsim import NormalizedPhrase

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "objective", "L_pos", "L_neg", "L_rest", "decay", "dynamic", "wall_ms")


class NumericalError(RuntimeError):
    pass


@dataclass(frozen=True)
class LossWeights:
    lambda_pos: float = 1.0
    lambda_neg: float = 0.7
    lambda_rest: float = 0.3
    beta1: float = 5e-4
    beta2: float = 1e-8

    def __post_init__(self):
        if min(self.lambda_pos, self.lambda_neg, self.lambda_rest, self.beta1, self.beta2) < 0:
            raise ValueError("loss weights must be non-negative")

    def check_balanced(self) -> None:
        if not (math.isclose(self.lambda_pos, 1.0) and
                math.isclose(self.lambda_neg + self.lambda_rest, 1.0)):
            raise ValueError("balanced mode needs lambda_pos = lambda_neg + lambda_rest = 1")


@dataclass(frozen=True)
class SamplingConfig:
    top_k_proposals: int = 50
    extra_random_proposals: int = 50
    proposal_pool: int = 1000
    rest_phrase_count: int = 32
    images_per_step: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.top_k_proposals + self.extra_random_proposals > self.proposal_pool:
            raise ValueError("top_k_proposals + extra_random_proposals exceeds proposal_pool")


@dataclass(frozen=True)
class LearningRates:
    visual_pre_roi: float = 1e-3
    visual_post_roi: float = 1e-3
    remainder: float = 1e-4
    momentum: float = 0.9
    finetune_visual: bool = True

    def __post_init__(self):
        if min(self.visual_pre_roi, self.visual_post_roi, self.remainder) < 0:
            raise ValueError("learning rates must be non-negative")


@dataclass(frozen=True)
class TrainConfig:
    labels: LabelConfig = field(default_factory=LabelConfig)
    weights: LossWeights = field(default_factory=LossWeights)
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    rates: LearningRates = field(default_factory=LearningRates)


# -- sampling ------------------------------------------------------------------------------

def sample_proposals(rec: ImageRecord, cfg: SamplingConfig, rng: np.random.Generator) -> list[Box]:
    """Annotated regions, the top-k proposals by objectness and extra random ones."""
    props = list(rec.proposals)
    obj = np.asarray(rec.objectness if rec.objectness else [0.0] * len(props))
    order = np.argsort(-obj, kind="stable")[:cfg.proposal_pool]
    wanted = cfg.top_k_proposals + cfg.extra_random_proposals
    if len(order) < wanted:
        log.warning("%s: proposal pool of %d smaller than requested %d; taking all",
                    rec.image_id, len(order), wanted)
    top = order[:cfg.top_k_proposals]
    rest = order[cfg.top_k_proposals:]
    k = min(cfg.extra_random_proposals, len(rest))
    extra = np.sort(rng.choice(rest, size=k, replace=False)) if k else np.array([], dtype=int)
    chosen = [props[i] for i in np.concatenate([top, extra]).astype(int)]
    return list(dict.fromkeys(list(rec.annotated_regions) + chosen))


def rest_phrase_draws(corpus: Corpus, rec: ImageRecord, count: int,
                      rng: np.random.Generator) -> list[NormalizedPhrase]:
    """``count`` frequency-proportional draws, with replacement, from phrases not on ``rec``."""
    if count <= 0:
        return []
    own = set(rec.phrases)
    cands = [t for t in corpus.freq if t not in own]
    if not cands:
        return []
    p = np.array([corpus.freq[t] for t in cands], dtype=np.float64)
    draws = rng.choice(len(cands), size=count, replace=True, p=p / p.sum())
    return [cands[i] for i in draws]


def sample_rest_phrases(corpus: Corpus, rec: ImageRecord, count: int,
                        rng: np.random.Generator) -> list[NormalizedPhrase]:
    """Rest phrases for one image: the draws with duplicates collapsed, in first-draw order."""
    return list(dict.fromkeys(rest_phrase_draws(corpus, rec, count, rng)))


# -- losses ----------------------------------------------------------------------------------

@dataclass
class ImageLoss:
    loss: Tensor
    parts: dict[str, float]
    counts: dict[str, int]


def loss_weight_matrix(labels: np.ndarray, is_rest: np.ndarray, freq: np.ndarray,
                       weights: LossWeights) -> tuple[np.ndarray, np.ndarray, dict[str, np.ndarray]]:
    """Per-entry weights so that sum(W * ce) equals the three-part image loss.

    Returns ``(W, targets, masks)``; a subset that is empty gets no weight.
    """
    pos = labels == RegionTextLabel.POSITIVE
    neg_any = labels == RegionTextLabel.NEGATIVE
    neg = neg_any & ~is_rest[None, :]
    rest = neg_any & is_rest[None, :]
    w = np.zeros(labels.shape)
    if pos.any():
        w[pos] = weights.lambda_pos / pos.sum()
    if neg.any():
        w[neg] = weights.lambda_neg / neg.sum()
    if rest.any():
        fr = np.broadcast_to(freq[None, :], labels.shape)
        w[rest] = weights.lambda_rest * fr[rest] / fr[rest].sum()
    return w, pos.astype(np.float64), {"pos": pos, "neg": neg, "rest": rest}


def image_loss_from_scores(scores: Tensor, labels: np.ndarray, is_rest: np.ndarray,
                           freq: np.ndarray, weights: LossWeights) -> ImageLoss | None:
    """Three-part weighted loss of one image; None when no effective pair exists."""
    w, targets, masks = loss_weight_matrix(labels, is_rest, freq, weights)
    counts = {k: int(m.sum()) for k, m in masks.items()}
    if not any(counts.values()):
        return None
    ce = ops.logistic_cross_entropy(scores, targets)
    loss = ops.weighted_sum(ce, w)
    parts = {}
    fr = np.broadcast_to(freq[None, :], labels.shape)
    for k, m in masks.items():
        if not m.any():
            parts[k] = 0.0
        elif k == "rest":
            parts[k] = float(np.sum(ce.data[m] * fr[m]) / fr[m].sum())
        else:
            parts[k] = float(ce.data[m].mean())
    return ImageLoss(loss, parts, counts)


@dataclass
class ImageBatchItem:
    rec: ImageRecord
    pixels: np.ndarray
    regions: list[Box]
    rest_phrases: list[NormalizedPhrase]


def per_image_loss(item: ImageBatchItem, model: PhraseRegionModel, corpus: Corpus,
                   labels_cfg: LabelConfig, weights: LossWeights,
                   classifiers: tuple[Tensor, Tensor] | None = None,
                   col_index: dict[NormalizedPhrase, int] | None = None) -> ImageLoss | None:
    """Loss of one image over its sampled regions and phrases.

    ``classifiers`` are precomputed (w, b) rows for a step's unique phrases,
    addressed through ``col_index``; computed here when omitted.
    """
    own = list(item.rec.phrases)
    rest = [t for t in item.rest_phrases if t not in set(own)]
    if len(rest) != len(item.rest_phrases):
        raise ValueError("rest phrases must not be annotated on the image")
    cols = own + rest
    if classifiers is None:
        w_all, b_all = model.classifiers(cols)
        rows = np.arange(len(cols))
    else:
        w_all, b_all = classifiers
        rows = np.array([col_index[t] for t in cols], dtype=np.intp)
    w = ops.take_rows(w_all, rows)
    b = ops.take_rows(b_all, rows)
    boxes = boxes_to_array(item.regions)
    labels = label_matrix(item.rec, boxes, cols, labels_cfg)
    phi = model.visual.forward(image_to_input(item.pixels), boxes)
    scores = score_matrix(phi, w, b)
    is_rest = np.array([False] * len(own) + [True] * len(rest))
    freq = np.array([corpus.freq.get(t, 0) for t in cols], dtype=np.float64)
    return image_loss_from_scores(scores, labels, is_rest, freq, weights)


@dataclass
class Objective:
    value: Tensor
    image_losses: list[ImageLoss]
    decay: Tensor
    dynamic: Tensor


def full_objective(items: Sequence[ImageBatchItem], model: PhraseRegionModel, corpus: Corpus,
                   cfg: TrainConfig) -> Objective | None:
    """Mean image loss + beta1 * weight decay + beta2 * mean dynamic regularizer."""
    phrases = list(dict.fromkeys(t for it in items for t in list(it.rec.phrases) + it.rest_phrases))
    col_index = {t: i for i, t in enumerate(phrases)}
    w_all, b_all = model.classifiers(phrases)
    losses = []
    for it in items:
        il = per_image_loss(it, model, corpus, cfg.labels, cfg.weights, (w_all, b_all), col_index)
        if il is not None:
            losses.append(il)
    if not losses:
        return None
    total = losses[0].loss
    for il in losses[1:]:
        total = total + il.loss
    mean_loss = total * (1.0 / len(losses))
    decay = weight_decay_penalty(model.store)
    dynamic = dynamic_regularizer(w_all, b_all) * (1.0 / len(phrases))
    value = mean_loss + cfg.weights.beta1 * decay + cfg.weights.beta2 * dynamic
    return Objective(value, losses, decay, dynamic)


# -- steps and loop ----------------------------------------------------------------------------

VISUAL_GROUPS = ("visual_pre_roi", "visual_post_roi")


@dataclass
class StepReport:
    step: int
    objective: float
    parts: dict[str, float]
    decay: float
    dynamic: float
    grad_norms: dict[str, float]
    wall_ms: float
    skipped: bool = False

    def log_line(self) -> str:
        vals = [str(self.step)] + [repr(float(v)) for v in (
            self.objective, self.parts["pos"], self.parts["neg"], self.parts["rest"],
            self.decay, self.dynamic)] + [f"{self.wall_ms:.1f}"]
        return "\t".join(vals)


def make_batch(corpus: Corpus, images, cfg: TrainConfig, rng: np.random.Generator,
               indices: Sequence[int]) -> list[ImageBatchItem]:
    items = []
    for i in indices:
        rec = corpus.images[i]
        regions = sample_proposals(rec, cfg.sampling, rng)
        rest = sample_rest_phrases(corpus, rec, cfg.sampling.rest_phrase_count, rng)
        items.append(ImageBatchItem(rec, images[rec.image_id], regions, rest))
    return items


def train_step(items: Sequence[ImageBatchItem], model: PhraseRegionModel, corpus: Corpus,
               cfg: TrainConfig, step: int = 0) -> StepReport:
    """One forward/backward/update.

    Visual groups are updated by SGD with momentum at their own rates (and
    frozen entirely when visual finetuning is off); everything else by Adam.
    """
    t0 = time.perf_counter()
    store = model.store
    rates = cfg.rates
    store.zero_grad()
    store.set_trainable(VISUAL_GROUPS, rates.finetune_visual)
    with Tape() as tape:
        obj = full_objective(items, model, corpus, cfg)
        if obj is None:
            tape.nodes.clear()
            return StepReport(step, float("nan"), {"pos": 0.0, "neg": 0.0, "rest": 0.0}, 0.0, 0.0,
                              {}, (time.perf_counter() - t0) * 1e3, skipped=True)
        value = obj.value.item()
        if not math.isfinite(value):
            raise NumericalError(f"step {step}: non-finite objective {value}")
        tape.backward(obj.value)
    grad_norms = {}
    for group in ("visual_pre_roi", "visual_post_roi", "remainder"):
        sq = [float(np.sum(p.grad ** 2)) for p in store.group(group) if p.grad is not None]
        grad_norms[group] = math.sqrt(sum(sq))
        if not math.isfinite(grad_norms[group]):
            raise NumericalError(f"step {step}: non-finite gradient in {group}")
    if rates.finetune_visual:
        sgd_momentum_step(store.group("visual_pre_roi"), rates.visual_pre_roi, rates.momentum)
        sgd_momentum_step(store.group("visual_post_roi"), rates.visual_post_roi, rates.momentum)
    adam_step([p for p in store.group("remainder") if p.requires_grad], rates.remainder)
    parts = {}
    for key in ("pos", "neg", "rest"):
        vals = [il.parts[key] for il in obj.image_losses if il.counts[key]]
        parts[key] = float(np.mean(vals)) if vals else 0.0
    store.zero_grad()
    return StepReport(step, value, parts, float(obj.decay.data), float(obj.dynamic.data), grad_norms,
                      (time.perf_counter() - t0) * 1e3)


class Trainer:
    """Seeded, resumable training over one corpus.

    All randomness flows from a single generator whose state is stored in
    every checkpoint, so a resumed run continues the uninterrupted sequence.
    """

    def __init__(self, model: PhraseRegionModel, corpus: Corpus, images, cfg: TrainConfig):
        self.model = model
        self.corpus = corpus
        self.images = images
        self.cfg = cfg
        self.rng = np.random.default_rng(cfg.sampling.seed)
        self.step = 0

    def next_batch(self) -> list[ImageBatchItem]:
        n = len(self.corpus)
        k = min(self.cfg.sampling.images_per_step, n)
        idx = np.sort(self.rng.choice(n, size=k, replace=False))
        return make_batch(self.corpus, self.images, self.cfg, self.rng, idx)

    def run_step(self) -> StepReport:
        items = self.next_batch()
        self.step += 1
        return train_step(items, self.model, self.corpus, self.cfg, self.step)

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.model.store, {
            "step": self.step,
            "rng_state": self.rng.bit_generator.state,
            "model": self.model.cfg.to_dict(),
        })

    def restore(self, path: str | Path) -> None:
        meta = load_into(self.model.store, path)
        self.step = int(meta["step"])
        self.rng.bit_generator.state = meta["rng_state"]


def train_loop(trainer: Trainer, steps: int, out_dir: str | Path, checkpoint_every: int = 0,
               resume: str | Path | None = None,
               on_eval: Callable[[Trainer], dict] | None = None, eval_every: int = 0,
               log_wall_time: bool = True) -> list[StepReport]:
    """Run until ``trainer.step == steps``, appending to ``metrics.tsv``.

    Checkpoints go to ``ckpt_<step>.npz`` plus ``last.npz``. ``on_eval``
    results are appended to ``val.tsv``.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics = out / "metrics.tsv"
    if resume is not None:
        trainer.restore(resume)
        kept = []
        if metrics.exists():
            for line in metrics.read_text().splitlines()[1:]:
                if line and int(line.split("\t")[0]) <= trainer.step:
                    kept.append(line)
        metrics.write_text("\t".join(LOG_COLUMNS) + "\n" + "".join(k + "\n" for k in kept))
    else:
        metrics.write_text("\t".join(LOG_COLUMNS) + "\n")
    reports = []
    with open(metrics, "a") as fh:
        while trainer.step < steps:
            rep = trainer.run_step()
            if not log_wall_time:
                rep.wall_ms = 0.0
            reports.append(rep)
            fh.write(rep.log_line() + "\n")
            fh.flush()
            if checkpoint_every and trainer.step % checkpoint_every == 0:
                trainer.save(out / f"ckpt_{trainer.step:06d}.npz")
            if on_eval is not None and eval_every and trainer.step % eval_every == 0:
                res = on_eval(trainer)
                with open(out / "val.tsv", "a") as vf:
                    vf.write(f"{trainer.step}\t" + "\t".join(f"{k}={v!r}" for k, v in sorted(res.items())) + "\n")
    trainer.save(out / "last.npz")
    return reports
