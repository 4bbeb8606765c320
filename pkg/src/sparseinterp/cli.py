"""Command-line entry point: ``sparseinterp <command> [options]``.

Failures print one ``error: {json}`` line on stderr and exit with status 2.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import torch

from . import experiments as ex
from . import plots
from .data import make_task
from .gradsuite import run_suite
from .train import (
    TrainConfig,
    evaluate,
    load_checkpoint,
    save_checkpoint,
    set_deterministic,
    train,
    write_history,
)

SPEC_COMMANDS = {
    "tradeoff": ex.cmd_tradeoff,
    "ablate-interp": ex.cmd_ablate_interp,
    "ablate-interp-cls": ex.cmd_ablate_interp_classification,
    "grid-ablation": ex.cmd_grid_ablation,
    "lambda-sparsity": ex.cmd_lambda_sparsity,
    "block-sparsity": ex.cmd_block_sparsity,
    "stability": ex.cmd_stability,
    "prune-compat": ex.cmd_prune_compat,
}


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparseinterp")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--deterministic", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train one model from a JSON config")
    t.add_argument("--config", type=Path)
    t.add_argument("--out", type=Path, required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--log-every", type=int, default=0)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", type=Path, required=True)
    e.add_argument("--n-samples", type=int, default=256)
    e.add_argument("--repeats", type=int, default=1)
    e.add_argument("--mode", choices=("infer", "soft"), default="infer")
    e.add_argument("--no-grid", action="store_true")
    e.add_argument("--resolution", type=int)
    e.add_argument("--seed", type=int, default=12345)

    for name in SPEC_COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", type=Path, help="experiment spec JSON")
        s.add_argument("--out", type=Path, required=True)
        s.add_argument("--cache", type=Path, help="trained-model cache directory (default OUT/runs)")
        s.add_argument("--seed", type=int, action="append", help="override the seed set (repeatable)")
        s.add_argument("--no-plots", action="store_true")

    b = sub.add_parser("cpu-bench")
    b.add_argument("--out", type=Path, required=True)
    b.add_argument("--channels", type=int, default=256)
    b.add_argument("--size", type=int, default=64)
    b.add_argument("--sparsity", type=float, action="append")
    b.add_argument("--bench-threads", type=int, action="append")
    b.add_argument("--repetitions", type=int, default=7)
    b.add_argument("--no-plots", action="store_true")

    g = sub.add_parser("grad-check")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tol", type=float, default=1e-2)
    return p


def _spec(args) -> ex.ExperimentSpec:
    spec = ex.ExperimentSpec.from_json(args.config) if args.config else ex.ExperimentSpec()
    if args.seed:
        spec.seeds = list(args.seed)
    return spec


def _plot(name: str, res: dict, out: Path, spec: ex.ExperimentSpec) -> None:
    ylabel = "mIoU (%)" if spec.task == "segmentation" else "accuracy (%)"
    if name in ("tradeoff", "ablate-interp"):
        plots.tradeoff(res["curves"], out / f"{name}.png", ylabel)
    elif name == "lambda-sparsity" and res["points"]:
        plots.scatter(res["points"], "sparsity", "lambda", out / "lambda_sparsity.png", f"r = {res['pearson']:.3f}")
    elif name == "block-sparsity" and res["rows"]:
        plots.block_bars(res["rows"][-1], out / "block_sparsity.png")


def run(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    torch.set_num_threads(args.threads)
    set_deterministic(args.deterministic)

    if args.command == "train":
        cfg = TrainConfig.from_json(args.config) if args.config else TrainConfig()
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.net.seed = args.seed
        net, hist = train(cfg, log_every=args.log_every)
        args.out.mkdir(parents=True, exist_ok=True)
        save_checkpoint(net, args.out / "model.ckpt")
        write_history(hist, args.out / "history.csv")
        (args.out / "config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1))
        print(json.dumps({"checkpoint": str(args.out / "model.ckpt"), **{k: hist[-1][k] for k in ("L_task", "L_sparse")}}))
    elif args.command == "eval":
        net = load_checkpoint(args.checkpoint)
        r = evaluate(net, make_task(net.cfg.task), args.n_samples, args.mode, args.repeats,
                     grid=not args.no_grid, seed=args.seed, resolution=args.resolution)
        print(json.dumps({"metric_mean": r.metric_mean, "metric_std": r.metric_std, "flops_mean": r.flops_mean,
                          "flops_std": r.flops_std, "dense_flops": r.dense_flops, "sparsity": r.sparsity}))
    elif args.command in SPEC_COMMANDS:
        spec = _spec(args)
        cache = ex.RunCache(args.cache or args.out / "runs")
        res = SPEC_COMMANDS[args.command](spec, args.out, cache)
        if not args.no_plots:
            _plot(args.command, res, args.out, spec)
        print(json.dumps({"out": str(args.out), "command": args.command}))
    elif args.command == "cpu-bench":
        res = ex.cmd_cpu_bench(args.out, ((args.channels, args.size),),
                               tuple(args.sparsity or (0.0, 0.5, 0.75, 0.9)), tuple(args.bench_threads or (1,)),
                               args.repetitions)
        if not args.no_plots:
            plots.speedup(res["rows"], args.out / "cpu_bench.png")
        for r in res["rows"]:
            print(json.dumps(r))
    elif args.command == "grad-check":
        results = run_suite(args.seed, args.tol)
        for r in results:
            print(f"{'PASS' if r.passed else 'FAIL'} {r.op} {list(r.shape)} rel_err={r.report.max_rel_error:.2e}")
        return 0 if all(r.passed for r in results) else 1
    return 0


def main(argv: list[str] | None = None) -> int:
    try:
        return run(argv)
    except SystemExit:
        raise
    except Exception as err:  # noqa: BLE001 - surfaced as a structured error line
        print("error: " + json.dumps({"type": type(err).__name__, "message": str(err)}), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
