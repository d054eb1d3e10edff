"""Cross-device message counts per policy as k grows (synthetic routing).

    python scripts/comm_decoupling.py --config configs/comm.cfg --n-tokens 100000
"""

import argparse

from samroute.cli import simulate_comm_rows
from samroute.config import load_config


def main():
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--config", required=True)
    p.add_argument("--n-tokens", type=int, default=100_000)
    p.add_argument("--k-list", default="1,2,4,8")
    args = p.parse_args()
    cfg = load_config(args.config)
    ks = [int(x) for x in args.k_list.split(",")]
    reports = simulate_comm_rows(cfg, args.n_tokens, ks)
    base = {r.policy: r.cross_device_messages for r in reports if r.k == 1}
    print(f"{'policy':14s} {'k':>2s} {'messages':>10s} {'vs k=1':>7s}")
    for r in reports:
        ratio = r.cross_device_messages / base[r.policy] if base.get(r.policy) else float("nan")
        print(f"{r.policy:14s} {r.k:2d} {r.cross_device_messages:10d} {ratio:7.3f}")


if __name__ == "__main__":
    main()
