"""Desk-scale train-and-evaluate runs shared by the scripts and the acceptance suite."""
from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

from . import evaluation as ev
from .dataset import SceneSpec, SyntheticData, generate_corpus
from .model import ModelConfig, PhraseRegionModel, TextPathwayConfig
from .training import TrainConfig, Trainer, train_loop


@dataclass(frozen=True)
class DeskSetup:
    n_train: int = 500
    n_test: int = 100
    train_seed: int = 1
    test_seed: int = 2
    steps: int = 1000
    scene: SceneSpec = field(default_factory=SceneSpec)
    text: TextPathwayConfig = field(default_factory=TextPathwayConfig.desk)
    train: TrainConfig = field(default_factory=TrainConfig)

    @property
    def model(self) -> ModelConfig:
        return ModelConfig(text=self.text)


def desk_corpora(setup: DeskSetup) -> tuple[SyntheticData, SyntheticData]:
    train = generate_corpus(setup.scene, setup.n_train, seed=setup.train_seed, prefix="train")
    test = generate_corpus(setup.scene, setup.n_test, seed=setup.test_seed, prefix="test")
    return train, test


@dataclass
class DeskResult:
    seed: int
    prune_ambiguous: bool
    localization: ev.LocalizationReport
    random: ev.LocalizationReport
    oracle: ev.LocalizationReport
    train_seconds: float
    total_seconds: float
    final_objective: float
    model: PhraseRegionModel | None = field(default=None, repr=False)

    def recall(self, k: int = 1, thr: float = 0.5) -> float:
        return self.localization.at(k, thr)

    def summary(self) -> str:
        return (f"seed={self.seed} prune={self.prune_ambiguous} recall@1/0.5={self.recall():.4f} "
                f"random={self.random.at(1, 0.5):.4f} oracle={self.oracle.at(1, 0.5):.4f} "
                f"train_s={self.train_seconds:.0f} total_s={self.total_seconds:.0f}")


def desk_run(setup: DeskSetup, seed: int, prune_ambiguous: bool = True,
             data: tuple[SyntheticData, SyntheticData] | None = None,
             out_dir: str | Path | None = None,
             progress: Callable[[str], None] | None = None) -> DeskResult:
    """Generate (or reuse) the corpora, train one model, evaluate localization on the test split.

    ``seed`` drives model initialization and batch sampling; the corpora are fixed by ``setup``.
    """
    t0 = time.perf_counter()
    train, test = data if data is not None else desk_corpora(setup)
    cfg = dataclasses.replace(
        setup.train,
        labels=dataclasses.replace(setup.train.labels, prune_ambiguous=prune_ambiguous),
        sampling=dataclasses.replace(setup.train.sampling, seed=seed))
    model = PhraseRegionModel(setup.model, seed=seed)
    trainer = Trainer(model, train.corpus, train.pixels, cfg)
    t1 = time.perf_counter()
    if out_dir is not None:
        reports = train_loop(trainer, setup.steps, out_dir, log_wall_time=False)
    else:
        reports = []
        while trainer.step < setup.steps:
            reports.append(trainer.run_step())
            if progress is not None and trainer.step % 100 == 0:
                progress(f"step {trainer.step} objective {reports[-1].objective:.4f}")
    train_seconds = time.perf_counter() - t1
    cases = ev.localization_cases(model, test.corpus, test.pixels)
    return DeskResult(seed, prune_ambiguous, ev.localization_recall(cases),
                      ev.random_baseline(test.corpus), ev.oracle_baseline(test.corpus),
                      train_seconds, time.perf_counter() - t0,
                      reports[-1].objective if reports else float("nan"), model)

