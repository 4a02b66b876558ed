"""Train with ambiguous-phrase pruning on and off over several seeds; report recall@1 at IoU 0.5."""
import argparse
import statistics
import sys

from phrasedet.experiment import DeskSetup, desk_corpora, desk_run


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    ap.add_argument("--steps", type=int, default=1000)
    args = ap.parse_args()
    setup = DeskSetup(steps=args.steps)
    data = desk_corpora(setup)
    recalls = {True: [], False: []}
    for seed in args.seeds:
        for prune in (True, False):
            res = desk_run(setup, seed, prune, data=data, progress=lambda m: print("  " + m, flush=True))
            recalls[prune].append(res.recall())
            print(res.summary(), flush=True)
    on, off = statistics.median(recalls[True]), statistics.median(recalls[False])
    print(f"median recall@1/0.5: pruning on {on:.4f}, off {off:.4f}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
