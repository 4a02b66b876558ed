"""Sweep the ambiguity similarity threshold tau on the desk-scale corpus."""
import argparse
import dataclasses
import sys

from phrasedet.experiment import DeskSetup, desk_corpora, desk_run


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--taus", type=float, nargs="+", default=[0.1, 0.2, 0.3, 0.5, 0.7])
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=1000)
    args = ap.parse_args()
    base = DeskSetup(steps=args.steps)
    data = desk_corpora(base)
    print("tau\trecall@1/0.5\trecall@10/0.5\tmedian_iou")
    for tau in args.taus:
        train = dataclasses.replace(base.train, labels=dataclasses.replace(base.train.labels, tau=tau))
        res = desk_run(dataclasses.replace(base, train=train), args.seed, data=data)
        loc = res.localization
        print(f"{tau}\t{loc.at(1, 0.5):.4f}\t{loc.at(10, 0.5):.4f}\t{loc.median_iou:.4f}", flush=True)
    return 0


if __name__ == "__main__":
    sys.exit(main())
