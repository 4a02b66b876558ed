"""Desk-scale run: 500 train / 100 test images, default hyperparameters, localization report."""
import argparse
import sys
from pathlib import Path

from phrasedet import evaluation as ev
from phrasedet.experiment import DeskSetup, desk_run


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--steps", type=int, default=1000)
    ap.add_argument("--out", default="runs/e2e")
    args = ap.parse_args()
    res = desk_run(DeskSetup(steps=args.steps), args.seed, out_dir=args.out)
    report = ev.EvaluationReport(localization=res.localization, random=res.random, oracle=res.oracle)
    report.write(Path(args.out) / "report.txt")
    print(res.summary())
    ratio = res.recall() / max(res.random.at(1, 0.5), 1e-12)
    print(f"trained / random = {ratio:.1f}x; oracle = {res.oracle.at(1, 0.5):.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
