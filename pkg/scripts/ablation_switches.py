"""Turn off one training ingredient at a time: ambiguous pruning, rest phrases, visual finetuning."""
import argparse
import dataclasses
import sys

from phrasedet.experiment import DeskSetup, desk_corpora, desk_run


def variants(base: DeskSetup) -> dict[str, DeskSetup]:
    t = base.train
    return {
        "full": base,
        "no-prune": dataclasses.replace(base, train=dataclasses.replace(
            t, labels=dataclasses.replace(t.labels, prune_ambiguous=False))),
        "no-rest": dataclasses.replace(base, train=dataclasses.replace(
            t, sampling=dataclasses.replace(t.sampling, rest_phrase_count=0))),
        "frozen-visual": dataclasses.replace(base, train=dataclasses.replace(
            t, rates=dataclasses.replace(t.rates, finetune_visual=False))),
    }


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=1000)
    args = ap.parse_args()
    base = DeskSetup(steps=args.steps)
    data = desk_corpora(base)
    for name, setup in variants(base).items():
        res = desk_run(setup, args.seed, setup.train.labels.prune_ambiguous, data=data)
        print(f"{name:14s} recall@1/0.5={res.recall():.4f} median_iou={res.localization.median_iou:.4f}",
              flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
