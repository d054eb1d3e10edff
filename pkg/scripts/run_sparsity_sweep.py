"""Sweep the sparsity ratio at fixed FLOPs for one and four active experts.

    python scripts/run_sparsity_sweep.py --steps 2000 --seeds 1,2,3
"""

import argparse
import csv
import sys

from samroute.experiments import SWEEP_SRS, best_sr, diminishing_returns, run_arms, sweep_configs


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=2000)
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--ks", default="1,4")
    p.add_argument("--out", default=None, help="optional CSV of per-seed losses")
    args = p.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]
    rows = []
    for k in (int(x) for x in args.ks.split(",")):
        res = run_arms(lambda s: sweep_configs(k, args.steps, s), seeds,
                       log=lambda m: print(f"k={k} {m}", file=sys.stderr, flush=True))
        med = {sr: res[sr].median for sr in SWEEP_SRS}
        print(f"k={k} " + " ".join(f"SR{sr}={med[sr]:.6f}" for sr in SWEEP_SRS)
              + f" best_SR={best_sr(med)} diminishing={diminishing_returns(med)}")
        rows += [(k, sr, seed, loss) for sr in SWEEP_SRS for seed, loss in zip(seeds, res[sr].losses)]
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["k", "sparsity_ratio", "seed", "final_task_loss"])
            for k, sr, seed, loss in rows:
                w.writerow([k, sr, seed, repr(loss)])


if __name__ == "__main__":
    main()
