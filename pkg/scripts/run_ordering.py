"""Train the four FLOP-matched ordering arms over several seeds and report medians.

    python scripts/run_ordering.py --steps 5000 --seeds 1,2,3 --out ordering.csv
"""

import argparse
import csv
import sys

from samroute.experiments import ORDERING_ARMS, ordering_configs, ordering_holds, run_arms


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--steps", type=int, default=5000)
    p.add_argument("--seeds", default="1,2,3")
    p.add_argument("--sam-router", default="sam_nonshared", choices=("sam_shared", "sam_nonshared"))
    p.add_argument("--out", default=None, help="optional CSV of per-seed losses")
    args = p.parse_args()
    seeds = [int(s) for s in args.seeds.split(",")]

    res = run_arms(lambda s: ordering_configs(args.steps, s, args.sam_router), seeds,
                   log=lambda m: print(m, file=sys.stderr, flush=True))
    for arm in ORDERING_ARMS:
        r = res[arm]
        print(f"{arm:8s} median={r.median:.6f} " + " ".join(f"{x:.6f}" for x in r.losses))
    ok = ordering_holds({a: res[a].median for a in ORDERING_ARMS})
    print("ordering dense >= switch >= sam_k2 >= sam_k4:", "holds" if ok else "violated")
    if args.out:
        with open(args.out, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["arm", "seed", "final_task_loss"])
            for arm in ORDERING_ARMS:
                for seed, loss in zip(seeds, res[arm].losses):
                    w.writerow([arm, seed, repr(loss)])


if __name__ == "__main__":
    main()
