"""Command-line surface.

Subcommands: train (weights + metadata sidecar), verify (exhaustive
certificate), certify (one strategy), sweep (CSV over models x
strategies), stats (interpretation statistics). Exit codes: 0 success,
2 usage errors including unknown strategies, 3 missing or corrupt weight
files, 4 enumeration budget refusals.

Sweep reports are byte-reproducible: run timings go to a sidecar
<out>.timing.csv rather than the main CSV.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .brute import DEFAULT_BUDGET, BudgetExceededError, brute_force_bound
from .certificates import Certificate
from .cubic import cubic_bound
from .metrics import interpretation_stats, normalized_bound
from .model import WeightFileError, decompose_paths, load_metadata, load_model
from .subcubic import ATTN_VARIANTS, EU_VARIANTS, QkDecomps, StrategyConfig, subcubic_bound
from .training import TrainConfig, train

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_WEIGHTS = 3
EXIT_BUDGET = 4

SWEEP_COLUMNS = [
    "model_path",
    "seed",
    "strategy_id",
    "bound",
    "exact",
    "normalized",
    "flops",
    "unexplained_dims",
    "sigma_ratio",
]


def _worker_cap(requested: int | None) -> int:
    cap = os.environ.get("MAXK_THREADS")
    limit = int(cap) if cap else (os.cpu_count() or 1)
    if requested is None:
        return max(1, limit)
    return max(1, min(requested, limit))


def _emit(cert: Certificate, out: str | None) -> None:
    text = cert.to_json()
    if out:
        Path(out).write_text(text + "\n")
    else:
        print(text)


def _cmd_train(args) -> int:
    config = TrainConfig(
        seed=args.seed,
        steps=args.steps,
        batch_size=args.batch_size,
        lr=args.lr,
        d_vocab=args.d_vocab,
        d_model=args.d_model,
        n_ctx=args.n_ctx,
    )
    result = train(config, args.out)
    summary = {
        "out": str(args.out),
        "final_train_loss": result.final_loss,
        "tail_mean_train_loss": result.tail_mean_loss(),
        "tail_mean_train_accuracy": result.tail_mean_accuracy(),
    }
    print(json.dumps(summary, indent=2, sort_keys=True))
    return EXIT_OK


def _cmd_verify(args) -> int:
    params = load_model(args.model)
    cert = brute_force_bound(params, threads=_worker_cap(args.threads), budget=args.budget)
    _emit(cert, args.out)
    return EXIT_OK


def _strategy_from_args(args) -> StrategyConfig | str:
    if args.strategy == "cubic":
        return "cubic"
    if args.strategy == "brute_force":
        return "brute_force"
    return StrategyConfig(
        eu_variant=args.eu,
        attn_variant=args.attn,
        combine_mean_diff=args.combine == "on",
    )


def _cmd_certify(args) -> int:
    params = load_model(args.model)
    strategy = _strategy_from_args(args)
    if strategy == "brute_force":
        cert = brute_force_bound(params, budget=args.budget)
    elif strategy == "cubic":
        cert = cubic_bound(params)
    else:
        cert = subcubic_bound(params, strategy)
    _emit(cert, args.out)
    return EXIT_OK


def _cmd_stats(args) -> int:
    params = load_model(args.model)
    stats = interpretation_stats(decompose_paths(params))
    payload = stats.to_dict()
    if payload["sigma_ratio"] == float("inf"):
        payload["sigma_ratio"] = "inf"
    text = json.dumps(payload, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return EXIT_OK


def sweep_strategy_list(all_strategies: bool, names: list[str]) -> list[str]:
    if all_strategies:
        return ["brute_force", "cubic"] + [s.strategy_id for s in StrategyConfig.all_strategies()]
    if not names:
        raise ValueError("pass --all-strategies or at least one --strategy")
    return names


def _certify_for_sweep(params, decomps, exact_cert, strategy_id):
    if strategy_id == "brute_force":
        return exact_cert
    if strategy_id == "cubic":
        return cubic_bound(params)
    return subcubic_bound(params, StrategyConfig.from_id(strategy_id), decomps=decomps)


def run_sweep(model_paths, strategy_ids, out_path, budget=DEFAULT_BUDGET, threads=None):
    """One CSV row per (model, strategy), emitted in lexicographic model
    order and catalog strategy order regardless of completion order."""
    out_path = Path(out_path)
    rows = {}
    timings = {}
    workers = _worker_cap(threads)
    for model_path in sorted(str(p) for p in model_paths):
        params = load_model(model_path)
        metadata = load_metadata(model_path) or {}
        seed = metadata.get("config", {}).get("seed", "")
        paths = decompose_paths(params)
        decomps = QkDecomps(paths)
        stats = interpretation_stats(paths)
        exact_cert = brute_force_bound(params, threads=workers, budget=budget)

        def one(strategy_id, params=params, decomps=decomps, exact_cert=exact_cert):
            started = time.perf_counter()
            cert = _certify_for_sweep(params, decomps, exact_cert, strategy_id)
            return strategy_id, cert, time.perf_counter() - started

        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(one, strategy_ids))
        for strategy_id, cert, elapsed in results:
            sigma = stats.sigma_ratio
            rows[(model_path, strategy_id)] = {
                "model_path": model_path,
                "seed": seed,
                "strategy_id": strategy_id,
                "bound": repr(cert.bound),
                "exact": repr(exact_cert.bound),
                "normalized": repr(normalized_bound(cert, exact_cert.bound)),
                "flops": cert.flops,
                "unexplained_dims": cert.unexplained_dims,
                "sigma_ratio": "inf" if sigma == float("inf") else repr(sigma),
            }
            timings[(model_path, strategy_id)] = elapsed

    ordered_keys = [
        (model, strategy)
        for model in sorted({k[0] for k in rows})
        for strategy in strategy_ids
    ]
    with out_path.open("w", newline="") as handle:
        writer = csv.DictWriter(handle, fieldnames=SWEEP_COLUMNS)
        writer.writeheader()
        for key in ordered_keys:
            writer.writerow(rows[key])
    timing_path = Path(str(out_path) + ".timing.csv")
    with timing_path.open("w", newline="") as handle:
        writer = csv.writer(handle)
        writer.writerow(["model_path", "strategy_id", "wall_seconds"])
        for key in ordered_keys:
            writer.writerow([key[0], key[1], repr(timings[key])])
    return out_path


def _cmd_sweep(args) -> int:
    models_dir = Path(args.models_dir)
    model_paths = sorted(models_dir.glob("*.maxk"))
    if not model_paths:
        print(f"no .maxk files under {models_dir}", file=sys.stderr)
        return EXIT_USAGE
    try:
        strategy_ids = sweep_strategy_list(args.all_strategies, args.strategy or [])
        for sid in strategy_ids:
            if sid not in ("brute_force", "cubic"):
                StrategyConfig.from_id(sid)
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE
    run_sweep(model_paths, strategy_ids, args.out, budget=args.budget, threads=args.threads)
    print(f"wrote {args.out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="maxk", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="train a model and write the weight file")
    p_train.add_argument("--seed", type=int, default=0)
    p_train.add_argument("--d-vocab", type=int, default=64)
    p_train.add_argument("--d-model", type=int, default=32)
    p_train.add_argument("--n-ctx", type=int, default=4)
    p_train.add_argument("--steps", type=int, default=3000)
    p_train.add_argument("--batch-size", type=int, default=128)
    p_train.add_argument("--lr", type=float, default=1e-3)
    p_train.add_argument("--out", required=True)
    p_train.set_defaults(func=_cmd_train)

    p_verify = sub.add_parser("verify", help="exhaustive accuracy certificate")
    p_verify.add_argument("--model", required=True)
    p_verify.add_argument("--threads", type=int, default=None)
    p_verify.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    p_verify.add_argument("--out", default=None)
    p_verify.set_defaults(func=_cmd_verify)

    p_certify = sub.add_parser("certify", help="one proof strategy's certificate")
    p_certify.add_argument("--model", required=True)
    p_certify.add_argument("--strategy", required=True, choices=["brute_force", "cubic", "subcubic"])
    p_certify.add_argument("--eu", default="max_diff_exact", choices=list(EU_VARIANTS))
    p_certify.add_argument("--attn", default="max_diff_exact", choices=list(ATTN_VARIANTS))
    p_certify.add_argument("--combine", default="on", choices=["on", "off"])
    p_certify.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    p_certify.add_argument("--out", default=None)
    p_certify.set_defaults(func=_cmd_certify)

    p_sweep = sub.add_parser("sweep", help="CSV report over models x strategies")
    p_sweep.add_argument("--models-dir", required=True)
    p_sweep.add_argument("--all-strategies", action="store_true")
    p_sweep.add_argument("--strategy", action="append", help="strategy id, repeatable")
    p_sweep.add_argument("--out", required=True)
    p_sweep.add_argument("--budget", type=int, default=DEFAULT_BUDGET)
    p_sweep.add_argument("--threads", type=int, default=None)
    p_sweep.set_defaults(func=_cmd_sweep)

    p_stats = sub.add_parser("stats", help="interpretation statistics as JSON")
    p_stats.add_argument("--model", required=True)
    p_stats.add_argument("--out", default=None)
    p_stats.set_defaults(func=_cmd_stats)
    return parser



def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except WeightFileError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_WEIGHTS
    except BudgetExceededError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_BUDGET
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
