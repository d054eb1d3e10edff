"""Command-line front end.

    samroute train         --config cfg --out metrics.csv [--seed N]
    samroute route         --config cfg < vector.txt
    samroute simulate-comm --config cfg [--n-tokens N] [--k-list 1,2,4,8] [--out comm.csv]
    samroute flops         --config cfg
    samroute gradcheck     --config cfg

Exit codes: 0 success, 1 usage or config error, 2 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import sys
from contextlib import contextmanager
from pathlib import Path

import numpy as np

from . import cost
from .config import ConfigError, ExperimentConfig, load_config
from .gradcheck import GradCheckTooLarge, gradcheck_config
from .parallel import CommModel, comm_cost, synthetic_routing
from .routers import KINDS, SAM_KINDS, init_router, route, route_batch
from .tensor import Rng, gaussian
from .train import METRIC_COLUMNS, NumericalError, build_layer, train

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2
COMM_COLUMNS = ("policy", "k", "n_tokens", "cross_device_messages", "cross_device_bytes", "seed")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return str(int(v))
    if isinstance(v, (int, np.integer)):
        return str(int(v))
    return repr(float(v))


@contextmanager
def _output(path):
    if path is None or path == "-":
        yield sys.stdout
    else:
        with open(path, "w", newline="") as fh:
            yield fh


def _load(args) -> ExperimentConfig:
    return load_config(args.config, seed=args.seed)


def cmd_train(args) -> int:
    cfg = _load(args)
    with _output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(METRIC_COLUMNS)
        result = train(cfg, on_row=lambda row: w.writerow([fmt(row[c]) for c in METRIC_COLUMNS]),
                       keep_rows=False)
    summary = sys.stdout if args.out not in (None, "-") else sys.stderr
    print(f"final_task_loss={fmt(result.final_eval_loss)} sparsity_ratio={fmt(cfg.sparsity_ratio)} "
          f"policy={cfg.router} k={cfg.k} seed={cfg.seed}", file=summary)
    return EXIT_OK


def _read_vector(stream, n: int) -> np.ndarray:
    text = stream.read().replace(",", " ").split()
    try:
        v = np.array([float(t) for t in text], dtype=np.float64)
    except ValueError as e:
        raise UsageError(f"could not parse input vector: {e}") from None
    if v.size != n:
        raise UsageError(f"input vector has {v.size} entries, config d_model is {n}")
    if not np.all(np.isfinite(v)):
        raise UsageError("input vector has non-finite entries")
    return v


def _vec(v) -> str:
    return " ".join(fmt(x) for x in v)


def cmd_route(args) -> int:
    cfg = _load(args)
    layer = build_layer(cfg)
    h = _read_vector(sys.stdin, cfg.d_model)
    d = route(layer.router, layer.topo, h, cfg.k)
    print(f"seed: {cfg.seed}")
    print(f"policy: {cfg.router}")
    print(f"k: {cfg.k}")
    if d.group_scores is not None:
        label = "switch router" if cfg.router == "sam_nonshared" else "sum of in-group top-k"
        print(f"group_scores: {_vec(d.group_scores)}  # {label}")
        print(f"selected_group: {d.selected_group}")
    else:
        print("selected_group: none")
    if cfg.router == "sam_nonshared":
        print(f"expert_scores: {_vec(d.expert_scores)}  # mixture router of group {d.selected_group}")
    else:
        print(f"expert_scores: {_vec(d.expert_scores)}  # all experts")
    print(f"selected_experts: {' '.join(str(i) for i in d.selected_experts)}")
    print(f"combine_weights: {_vec(d.combine_weights)}")
    return EXIT_OK


def _parse_k_list(text: str) -> list[int]:
    try:
        ks = [int(t) for t in text.split(",") if t.strip()]
    except ValueError:
        raise UsageError(f"--k-list must be comma-separated integers, got {text!r}") from None
    if not ks or min(ks) < 1:
        raise UsageError("--k-list needs positive integers")
    return ks


def simulate_comm_rows(cfg: ExperimentConfig, n_tokens: int, ks: list[int], routing: str = "synthetic"):
    """One CommReport per (policy, k); switch only at k=1."""
    topo = cfg.topology
    model = CommModel(cfg.d_model, cfg.bytes_per_element)
    rng = Rng(cfg.seed).child(7)
    H = None
    if routing == "router":
        H = gaussian(rng.child(0), max(n_tokens, 1) * cfg.d_model).reshape(-1, cfg.d_model)[:n_tokens]
    reports = []
    for policy in KINDS:
        for k in ks:
            if policy == "switch" and k != 1:
                continue
            if policy in SAM_KINDS and k > topo.experts_per_group:
                raise UsageError(f"k={k} exceeds experts_per_group={topo.experts_per_group} for {policy}")
            if k > topo.n_expert:
                raise UsageError(f"k={k} exceeds n_expert={topo.n_expert}")
            if routing == "synthetic":
                r = synthetic_routing(policy, topo, n_tokens, k, rng)
            else:
                params = init_router(policy, topo, cfg.d_model, Rng(cfg.seed).child(8), 1.0)
                r = route_batch(params, topo, H, k)
            reports.append(comm_cost(r, topo, model, policy))
    return reports


def cmd_simulate_comm(args) -> int:
    cfg = _load(args)
    if args.n_tokens < 0:
        raise UsageError("--n-tokens must be >= 0")
    ks = _parse_k_list(args.k_list)
    reports = simulate_comm_rows(cfg, args.n_tokens, ks, args.routing)
    with _output(args.out) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(COMM_COLUMNS)
        for rep in reports:
            w.writerow([rep.policy, rep.k, rep.n_tokens, rep.cross_device_messages,
                        rep.cross_device_bytes, cfg.seed])
    return EXIT_OK


def cmd_flops(args) -> int:
    cfg = _load(args)
    s = cost.summarize(cfg)
    rows = [
        ("seed", cfg.seed), ("policy", cfg.router), ("k", s.k), ("n_expert", s.n_expert),
        ("d_model", s.d_model), ("d_ffn", s.d_ffn), ("flops_per_token", s.flops_per_token),
        ("params_per_layer", s.params), ("params_per_layer_nominal", s.params_nominal),
        ("router_params", s.router_params), ("sparsity_ratio", s.sparsity_ratio),
    ]
    width = max(len(k) for k, _ in rows)
    for key, val in rows:
        print(f"{key:<{width}}  {val}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    cfg = _load(args)
    try:
        report = gradcheck_config(cfg, n_tokens=args.n_tokens, corrupt=args.corrupt_gradient)
    except GradCheckTooLarge as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    print(f"seed: {cfg.seed}")
    print(f"policy: {cfg.router}")
    for line in report.lines():
        print(line)
    ok = report.passed(args.tol)
    print(f"max_rel_err={report.max_error:.3e} tol={args.tol:.0e} checked={report.checked} "
          f"{'PASS' if ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="samroute", description="Hierarchical expert routing experiments.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp):
        sp.add_argument("--config", required=True, help="key = value experiment config")
        sp.add_argument("--seed", type=int, default=None, help="override the config seed")

    sp = sub.add_parser("train", help="train and write per-step metrics CSV")
    common(sp)
    sp.add_argument("--out", default=None, help="CSV path (default stdout)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("route", help="route one vector read from stdin and print the trace")
    common(sp)
    sp.set_defaults(func=cmd_route)

    sp = sub.add_parser("simulate-comm", help="count cross-device traffic per policy and k")
    common(sp)
    sp.add_argument("--n-tokens", type=int, default=100_000)
    sp.add_argument("--k-list", default="1,2,4,8")
    sp.add_argument("--routing", choices=("synthetic", "router"), default="synthetic",
                    help="uniform random decisions, or random-weight routers on Gaussian tokens")
    sp.add_argument("--out", default=None)
    sp.set_defaults(func=cmd_simulate_comm)

    sp = sub.add_parser("flops", help="print FLOPs, parameter counts and sparsity ratio")
    common(sp)
    sp.set_defaults(func=cmd_flops)

    sp = sub.add_parser("gradcheck", help="finite-difference check of all gradients")
    common(sp)
    sp.add_argument("--n-tokens", type=int, default=8)
    sp.add_argument("--tol", type=float, default=1e-5)
    sp.add_argument("--corrupt-gradient", action="store_true", help=argparse.SUPPRESS)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        if args.seed is not None and not 0 <= args.seed < 2**64:
            raise UsageError("--seed must be an unsigned 64-bit integer")
        if not Path(args.config).is_file():
            raise UsageError(f"config file not found: {args.config}")
        return args.func(args)
    except UsageError as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NumericalError as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
