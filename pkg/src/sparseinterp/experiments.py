"""Desk-scale analyses: each ``cmd_*`` trains (or reuses) models and writes CSVs.

Trained models are cached on disk keyed by a hash of their full training
config, so commands that share runs (the tradeoff sweep and the sparsity
ladder, for instance) train each model once.
"""

from __future__ import annotations

import copy
import csv
import hashlib
import json
import logging
import math
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .blocks import BlockConfig, NetConfig, ToyNet
from .data import make_task
from .interp import InterpConfig, Interpolator
from .sparse_exec import LayerSpec, bench_conv, count_flops, plan_from_mask
from .tensor import ConvParams
from .train import (
    EvalResult,
    TrainConfig,
    TrainingDiverged,
    evaluate,
    global_unstructured_prune,
    load_checkpoint,
    save_checkpoint,
    train,
    write_history,
)

log = logging.getLogger(__name__)

METHODS = ("ours", "deterministic", "relu", "uniform", "uniform_grid", "fill_zeros", "reuse", "plain", "avg", "baseline")
INTERP_VARIANTS = ("rbf", "plain", "avg", "fill_zeros", "reuse")


class SeedMismatchError(ValueError):
    pass


# ----------------------------------------------------------------------------
# specs and configs


@dataclass
class ExperimentSpec:
    name: str = "tradeoff"
    task: str = "segmentation"
    methods: list[str] = field(default_factory=lambda: ["ours", "uniform"])
    gammas: dict[str, list[float]] = field(default_factory=dict)  # per-method ladder; "default" as fallback
    resolutions: list[int] = field(default_factory=lambda: [32, 28, 24, 16])
    grid_strides: list[int] = field(default_factory=lambda: [2, 3, 5, 7])
    prune_ratios: list[float] = field(default_factory=lambda: [0.0, 0.25, 0.5])
    seeds: list[int] = field(default_factory=lambda: [0])
    repeats: int = 1
    iters: int = 1000
    n_eval: int = 256
    eval_seed: int = 12345
    base: dict = field(default_factory=dict)  # TrainConfig overrides, may include "net"

    def __post_init__(self) -> None:
        unknown = set(self.methods) - set(METHODS)
        if unknown:
            raise ValueError(f"unknown methods {sorted(unknown)}")
        if not self.seeds:
            raise ValueError("an experiment needs at least one seed")
        if self.repeats < 1:
            raise ValueError("repeats must be >= 1")

    def ladder(self, method: str) -> list[float]:
        if method in self.gammas:
            return list(self.gammas[method])
        return list(self.gammas.get("default", DEFAULT_GAMMAS))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentSpec":
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "ExperimentSpec":
        return cls.from_dict(json.loads(Path(path).read_text()))

    @property
    def hash(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).hexdigest()[:12]


DEFAULT_GAMMAS = [0.0, 5e-7, 1.5e-6, 3e-6]
# the un-normalised classification toy diverges late in training at the segmentation rate
CLASSIFICATION_LR = 0.003
# single large steps still kill its ReLUs late in training; cap the update
CLASSIFICATION_CLIP = 1.0


def toy_net(task: str, **kw) -> NetConfig:
    """Default toy architectures: window radius and grid stride scaled to 32x32 inputs."""
    if task == "segmentation":
        block = dict(channels=16, layout="two", interp=InterpConfig(kind="rbf", radius=3), grid_stride=7)
        net = dict(task=task, width=16, depth=3)
    else:
        block = dict(channels=16, layout="two", interp=InterpConfig(kind="rbf", radius=5), grid_stride=2)
        net = dict(task=task, width=16, depth=2, stages=2)
    over = kw.pop("block", {})
    if "width" in kw and "channels" not in over:
        block["channels"] = kw["width"]
    block.update(over)
    if isinstance(block.get("interp"), dict):
        block["interp"] = InterpConfig(**block["interp"])
    net.update(kw)
    return NetConfig(block=BlockConfig(**block), **net)


def make_config(spec: ExperimentSpec, method: str, knob: float | None, seed: int) -> TrainConfig:
    """Training config for one cell of an experiment grid."""
    base = copy.deepcopy(spec.base)
    net_over = base.pop("net", {})
    block_over = dict(net_over.pop("block", {}))
    interp_over = dict(block_over.pop("interp", {}))
    gamma = 0.0
    resolution = None
    if method in ("ours", "deterministic", "relu"):
        block_over["method"] = method
        gamma = float(knob)
    elif method in ("fill_zeros", "reuse", "plain", "avg"):
        block_over["method"] = "ours"
        interp_over["kind"] = method
        gamma = float(knob)
    elif method == "uniform":
        block_over["method"] = "none"
        resolution = int(knob)
    elif method == "uniform_grid":
        block_over["method"] = "grid"
        block_over["grid_stride"] = int(knob)
    elif method == "baseline":
        block_over["method"] = "none"
    else:
        raise ValueError(f"unknown method {method!r}")
    net = toy_net(spec.task, seed=seed, **net_over)
    block = asdict(net.block)
    block["interp"] = {**block["interp"], **interp_over}
    block.update(block_over)
    net.block = BlockConfig(**block)
    cfg = dict(task=spec.task, gamma=gamma, total_iters=spec.iters, seed=seed, data_seed=0,
               resolution=resolution, net=net)
    if spec.task == "classification":
        cfg["lr"] = CLASSIFICATION_LR
        cfg["clip_norm"] = CLASSIFICATION_CLIP
    cfg.update(base)
    return TrainConfig(**cfg)


def knob_values(spec: ExperimentSpec, method: str) -> list[float]:
    if method == "uniform":
        return list(spec.resolutions)
    if method == "uniform_grid":
        return list(spec.grid_strides)
    if method == "baseline":
        return [0.0]
    return spec.ladder(method)


def knob_name(method: str) -> str:
    return {"uniform": "resolution", "uniform_grid": "stride", "baseline": "none"}.get(method, "gamma")


# ----------------------------------------------------------------------------
# run cache


def config_key(cfg: TrainConfig) -> str:
    blob = json.dumps({"cfg": cfg.to_dict(), "version": __version__}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:16]


class RunCache:
    """Train-once store of checkpoints and histories keyed by config hash."""

    def __init__(self, root: str | Path | None):
        self.root = Path(root) if root else None
        self._mem: dict[str, tuple[ToyNet, list[dict]]] = {}
        if self.root:
            self.root.mkdir(parents=True, exist_ok=True)

    def get(self, cfg: TrainConfig) -> tuple[ToyNet, list[dict]]:
        key = config_key(cfg)
        if key in self._mem:
            return self._mem[key]
        if self.root and (self.root / f"{key}.ckpt").exists():
            net = load_checkpoint(self.root / f"{key}.ckpt")
            hist = json.loads((self.root / f"{key}.history.json").read_text())
        else:
            log.info("training %s (%s)", key, json.dumps(cfg.to_dict(), sort_keys=True))
            net, hist = train(cfg)
            if self.root:
                tmp = self.root / f"{key}.ckpt.tmp"
                save_checkpoint(net, tmp)
                (self.root / f"{key}.history.json").write_text(json.dumps(hist))
                write_history(hist, self.root / f"{key}.history.csv")
                (self.root / f"{key}.config.json").write_text(json.dumps(cfg.to_dict(), sort_keys=True, indent=1))
                os.replace(tmp, self.root / f"{key}.ckpt")
        self._mem[key] = (net, hist)
        return net, hist


# ----------------------------------------------------------------------------
# rows and CSV output


@dataclass
class ResultRow:
    method: str
    knob: str
    value: float
    metric_mean: float
    flops_mean: float
    metric_std: float = 0.0
    flops_std: float = 0.0
    sparsity: dict[str, float] = field(default_factory=dict)
    lambdas: dict[str, float] = field(default_factory=dict)
    seeds: tuple[int, ...] = ()
    repeats: int = 1

    @property
    def mean_sparsity(self) -> float:
        return float(np.mean(list(self.sparsity.values()))) if self.sparsity else 0.0

    def to_dict(self) -> dict:
        d = {"method": self.method, "knob": self.knob, "value": self.value, "metric_mean": self.metric_mean}
        if self.repeats > 1:
            d["metric_std"] = self.metric_std
        d["flops_mean"] = self.flops_mean
        if self.repeats > 1:
            d["flops_std"] = self.flops_std
        d["mean_sparsity"] = self.mean_sparsity
        d.update({f"sparsity_{k}": v for k, v in sorted(self.sparsity.items())})
        d.update({f"lambda_{k}": v for k, v in sorted(self.lambdas.items())})
        return d


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(round(v, 10)) if math.isfinite(v) else str(v)
    return str(v)


def write_csv(path: str | Path, rows: list[dict], spec: ExperimentSpec | None = None, extra: str = "") -> Path:
    """CSV with a metadata comment line and a header row; columns are the union of row keys."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols: list[str] = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    meta = f"# spec_hash={spec.hash if spec else 'none'} seeds={','.join(map(str, spec.seeds)) if spec else 'none'} version={__version__}"
    if extra:
        meta += f" {extra}"
    with open(path, "w", newline="") as f:
        f.write(meta + "\n")
        w = csv.writer(f, lineterminator="\n")
        w.writerow(cols)
        for r in rows:
            w.writerow([_fmt(r.get(c, "")) for c in cols])
    return path


def read_csv(path: str | Path) -> tuple[str, list[dict]]:
    lines = Path(path).read_text().splitlines()
    meta = lines[0]
    return meta, list(csv.DictReader(lines[1:]))


def check_paired(runs: dict[str, tuple[int, ...]]) -> None:
    """Refuse to compare runs trained on different seed sets."""
    sets = {tuple(sorted(v)) for v in runs.values()}
    if len(sets) > 1:
        raise SeedMismatchError(f"runs use different seed sets: {runs}")


# ----------------------------------------------------------------------------
# shared evaluation


def lambda_map(net: ToyNet) -> dict[str, float]:
    return {f"b{b}.conv{i + 1}": lam for b, i, lam in net.lambdas()}


def _eval(net: ToyNet, cfg: TrainConfig, spec: ExperimentSpec, **kw) -> EvalResult:
    task = make_task(cfg.task, cfg.data_seed)
    return evaluate(net, task, n_samples=spec.n_eval, repeats=kw.pop("repeats", spec.repeats),
                    tau=cfg.tau_final, threshold=cfg.threshold, seed=spec.eval_seed,
                    resolution=cfg.resolution, **kw)


def run_cell(spec: ExperimentSpec, cache: RunCache, method: str, value: float) -> ResultRow:
    """Train and evaluate one (method, knob) cell over all seeds; averages across seeds."""
    metrics, flops, mstd, fstd, sps, lams = [], [], [], [], [], []
    for seed in spec.seeds:
        cfg = make_config(spec, method, value, seed)
        net, _ = cache.get(cfg)
        r = _eval(net, cfg, spec)
        metrics.append(r.metric_mean)
        flops.append(r.flops_mean)
        mstd.append(r.metric_std)
        fstd.append(r.flops_std)
        sps.append(r.sparsity)
        lams.append(lambda_map(net))
    keys = sps[0].keys()
    lkeys = lams[0].keys()
    return ResultRow(
        method, knob_name(method), float(value),
        float(np.mean(metrics)), float(np.mean(flops)),
        float(np.mean(mstd)), float(np.mean(fstd)),
        {k: float(np.mean([s[k] for s in sps])) for k in keys},
        {k: float(np.mean([l[k] for l in lams])) for k in lkeys},
        tuple(spec.seeds), spec.repeats,
    )


def per_seed_results(spec: ExperimentSpec, cache: RunCache, method: str, value: float) -> list[tuple[int, EvalResult, ToyNet, TrainConfig]]:
    out = []
    for seed in spec.seeds:
        cfg = make_config(spec, method, value, seed)
        net, _ = cache.get(cfg)
        out.append((seed, _eval(net, cfg, spec), net, cfg))
    return out


# ----------------------------------------------------------------------------
# matched-metric comparison


def pareto_front(points: list[tuple[float, float]]) -> list[tuple[float, float]]:
    """(flops, metric) points not dominated by a cheaper, at-least-as-good point."""
    front = []
    best = -math.inf
    for f, m in sorted(points):
        if m > best:
            front.append((f, m))
            best = m
    return front


def flops_at_metric(points: list[tuple[float, float]], target: float, tol: float = 0.5) -> float:
    """FLOPs needed to reach ``target`` along the piecewise-linear Pareto front.

    Targets up to ``tol`` outside the front's metric range snap to its end
    points.  A target further above is never reached (inf); one further below
    could be reached more cheaply than any measured point, so it is NaN.
    """
    front = pareto_front(points)
    lo, hi = front[0][1], front[-1][1]
    if target > hi + tol:
        return math.inf
    if target < lo - tol:
        return math.nan
    if target <= lo:
        return front[0][0]
    if target >= hi:
        return front[-1][0]
    for (f0, m0), (f1, m1) in zip(front, front[1:]):
        if m0 <= target <= m1:
            return f0 + (target - m0) / (m1 - m0) * (f1 - f0)
    return math.nan  # unreachable: the front is monotone


def metric_at_flops(points: list[tuple[float, float]], flops: float) -> float:
    front = pareto_front(points)
    if flops < front[0][0] or flops > front[-1][0]:
        return math.nan
    for (f0, m0), (f1, m1) in zip(front, front[1:]):
        if f0 <= flops <= f1:
            return m0 + (flops - f0) / (f1 - f0) * (m1 - m0) if f1 > f0 else max(m0, m1)
    return front[0][1]


def matched_points(curves: dict[str, list[tuple[float, float]]], reference: str,
                   operating: list[tuple[float, float]], tol: float = 0.5) -> list[dict]:
    """Compare methods at the reference's operating points (flops, metric).

    The reference is charged what its model measured; every other method is
    charged the FLOPs its Pareto front needs to reach the same metric.
    """
    rows = []
    for ref, t in operating:
        row = {"target_metric": t}
        for name, pts in curves.items():
            row[f"flops_{name}"] = ref if name == reference else flops_at_metric(pts, t, tol)
        for name in curves:
            if name != reference:
                other = row[f"flops_{name}"]
                row[f"ratio_{name}"] = other / ref if ref and not math.isnan(other) else math.nan
        rows.append(row)
    return rows


# ----------------------------------------------------------------------------
# commands


def cmd_tradeoff(spec: ExperimentSpec, out: str | Path, cache: RunCache) -> dict:
    """FLOPs-vs-metric rows per (method, knob); matched comparison when several methods."""
    rows: list[ResultRow] = []
    for method in spec.methods:
        for v in knob_values(spec, method):
            rows.append(run_cell(spec, cache, method, v))
    check_paired({r.method: r.seeds for r in rows})
    out = Path(out)
    write_csv(out / "tradeoff.csv", [r.to_dict() for r in rows], spec, "command=tradeoff")
    curves = {m: [(r.flops_mean, r.metric_mean) for r in rows if r.method == m] for m in spec.methods}
    result = {"rows": rows, "curves": curves, "matched": []}
    if len(spec.methods) >= 2:
        ref = spec.methods[0]
        ref_rows = sorted((r for r in rows if r.method == ref), key=lambda r: r.value)
        # operating points: the reference's sparsified models (knob > 0), lowest FLOPs last
        ops = [(r.flops_mean, r.metric_mean) for r in ref_rows if r.value > 0] or [
            (r.flops_mean, r.metric_mean) for r in ref_rows]
        result["matched"] = matched_points(curves, ref, ops)
        write_csv(out / "tradeoff_matched.csv", result["matched"], spec, f"command=tradeoff reference={ref}")
    if "uniform" in spec.methods and "uniform_grid" in spec.methods:
        eq = []
        for f, m in curves["uniform"]:
            eq.append({"flops": f, "metric_downsample": m, "metric_grid": metric_at_flops(curves["uniform_grid"], f)})
        result["uniform_equivalence"] = eq
        write_csv(out / "uniform_equivalence.csv", eq, spec, "command=tradeoff")
    return result


def with_interp(net: ToyNet, kind: str) -> ToyNet:
    """Copy of ``net`` whose interpolators are replaced by fresh ones of ``kind``."""
    twin = copy.deepcopy(net)
    for b in twin.blocks:
        if not b.masked:
            continue
        cfg = InterpConfig(kind=kind, radius=b.cfg.interp.radius, eps=b.cfg.interp.eps)
        b.interps = torch.nn.ModuleList(Interpolator(cfg) for _ in b.kernel_sizes)
    return twin


def cmd_ablate_interp(spec: ExperimentSpec, out: str | Path, cache: RunCache) -> dict:
    """Interpolation variants trained over the same γ ladder; matched against RBF."""
    variants = [m for m in spec.methods if m in ("ours", "plain", "avg", "fill_zeros", "reuse")] or ["ours", "fill_zeros", "reuse"]
    rows = [run_cell(spec, cache, m, g) for m in variants for g in spec.ladder(m)]
    check_paired({r.method: r.seeds for r in rows})
    out = Path(out)
    dict_rows = [{**r.to_dict(), "variant": "rbf" if r.method == "ours" else r.method} for r in rows]
    # full-mask sanity: one set of trained weights, every interpolator, all-ones masks
    cfg0 = make_config(spec, variants[0], spec.ladder(variants[0])[0], spec.seeds[0])
    net0, _ = cache.get(cfg0)
    sanity = []
    for kind in INTERP_VARIANTS:
        r = _eval(with_interp(net0, kind), cfg0, spec, force_mask=1.0, repeats=1)
        sanity.append({"variant": kind, "metric_mean": r.metric_mean, "flops_mean": r.flops_mean})
    curves = {r_m: [(r.flops_mean, r.metric_mean) for r in rows if r.method == r_m] for r_m in variants}
    ref_rows = [r for r in rows if r.method == variants[0] and r.value > 0]
    matched = matched_points(curves, variants[0], [(r.flops_mean, r.metric_mean) for r in ref_rows]) if len(variants) > 1 else []
    write_csv(out / "ablate_interp.csv", dict_rows, spec, "command=ablate-interp")
    write_csv(out / "ablate_interp_fullmask.csv", sanity, spec, "command=ablate-interp")
    if matched:
        write_csv(out / "ablate_interp_matched.csv", matched, spec, "command=ablate-interp reference=rbf")
    return {"rows": rows, "sanity": sanity, "matched": matched, "curves": curves}


def cmd_ablate_interp_classification(spec: ExperimentSpec, out: str | Path, cache: RunCache) -> dict:
    """Accuracy with and without interpolation at equal γ (classification toy)."""
    rows = []
    for g in spec.ladder("ours"):
        rbf = run_cell(spec, cache, "ours", g)
        fz = run_cell(spec, cache, "fill_zeros", g)
        rows.append({"gamma": g, "acc_rbf": rbf.metric_mean, "acc_fill_zeros": fz.metric_mean,
                     "delta": fz.metric_mean - rbf.metric_mean,
                     "sparsity_rbf": rbf.mean_sparsity, "sparsity_fill_zeros": fz.mean_sparsity})
    write_csv(Path(out) / "ablate_interp_classification.csv", rows, spec, "command=ablate-interp")
    return {"rows": rows}


def cmd_grid_ablation(spec: ExperimentSpec, out: str | Path, cache: RunCache, swing: float = 5.0) -> dict:
    """Grid stride ladder plus "off"; stochastic-eval std and an instability flag."""
    g = spec.ladder("ours")[-1]
    rows = []
    for s in list(spec.grid_strides) + [None]:
        cell = copy.deepcopy(spec)
        cell.base.setdefault("net", {}).setdefault("block", {})["grid_stride"] = s
        metrics, stds, flops, diverged = [], [], [], False
        for seed in spec.seeds:
            cfg = make_config(cell, "ours", g, seed)
            try:
                net, _ = cache.get(cfg)
            except TrainingDiverged:
                diverged = True
                continue
            r = _eval(net, cfg, cell, repeats=max(spec.repeats, 5))
            metrics.append(r.metric_mean)
            stds.append(r.metric_std)
            flops.append(r.flops_mean)
        unstable = diverged or (len(metrics) > 1 and max(metrics) - min(metrics) > swing)
        rows.append({
            "stride": "off" if s is None else s,
            "metric_mean": float(np.mean(metrics)) if metrics else math.nan,
            "eval_std": float(np.mean(stds)) if stds else math.nan,
            "flops_mean": float(np.mean(flops)) if flops else math.nan,
            "unstable": int(unstable),
        })
    write_csv(Path(out) / "grid_ablation.csv", rows, spec, f"command=grid-ablation gamma={g}")
    return {"rows": rows}


def pearson(x, y) -> float:
    x, y = np.asarray(x, float), np.asarray(y, float)
    if len(x) < 2 or x.std() == 0 or y.std() == 0:
        return math.nan
    return float(np.corrcoef(x, y)[0, 1])


def lambda_sparsity_points(net: ToyNet, cfg: TrainConfig, spec: ExperimentSpec) -> list[dict]:
    r = _eval(net, cfg, spec, repeats=1)
    pts = []
    for b in net.blocks:
        if not b.masked:
            continue
        for i, it in enumerate(b.interps):
            if it.kind != "rbf":
                continue
            pts.append({"block": b.index, "conv": i + 1, "sparsity": r.sparsity[f"b{b.index}.m{b.groups[i]}"],
                        "lambda": it.lam.item()})
    return pts


def cmd_lambda_sparsity(spec: ExperimentSpec, out: str | Path, cache: RunCache) -> dict:
    """λ against mask sparsity for every RBF interpolator across the γ ladder."""
    pts = []
    for g in spec.ladder("ours"):
        for seed in spec.seeds:
            cfg = make_config(spec, "ours", g, seed)
            net, _ = cache.get(cfg)
            for p in lambda_sparsity_points(net, cfg, spec):
                pts.append({"gamma": g, "seed": seed, **p})
    r = pearson([p["sparsity"] for p in pts], [p["lambda"] for p in pts])
    write_csv(Path(out) / "lambda_sparsity.csv", pts, spec, f"command=lambda-sparsity task={spec.task} pearson={r!r}")
    return {"points": pts, "pearson": r}


def block_sparsity_row(net: ToyNet, cfg: TrainConfig, spec: ExperimentSpec) -> dict:
    r = _eval(net, cfg, spec, repeats=1)
    row = {}
    for b in net.blocks:
        if not b.masked:
            continue
        first = r.sparsity.get(f"b{b.index}.m0", 0.0)
        # later convs: mean over their distinct masks
        later = sorted({b.groups[i] for i in range(1, len(b.kernel_sizes))})
        rest = float(np.mean([r.sparsity[f"b{b.index}.m{g}"] for g in later]))
        row[f"b{b.index}.conv1"] = first
        row[f"b{b.index}.conv{'23' if len(b.kernel_sizes) == 3 else '2'}"] = rest
    return row


def depth_trend(row: dict) -> float:
    """Least-squares slope of per-block mean sparsity against block index."""
    blocks = sorted({k.split(".")[0] for k in row}, key=lambda s: int(s[1:]))
    if len(blocks) < 2:
        return math.nan
    ys = [np.mean([v for k, v in row.items() if k.startswith(b + ".")]) for b in blocks]
    return float(np.polyfit(np.arange(len(ys)), ys, 1)[0])


def cmd_block_sparsity(spec: ExperimentSpec, out: str | Path, cache: RunCache) -> dict:
    rows, trends = [], []
    for g in spec.ladder("ours"):
        for seed in spec.seeds:
            cfg = make_config(spec, "ours", g, seed)
            net, _ = cache.get(cfg)
            row = block_sparsity_row(net, cfg, spec)
            rows.append(row)
            trends.append({"gamma": g, "seed": seed, "depth_slope": depth_trend(row),
                           "later_ge_first": int(all(
                               row[k] >= row[k.replace(k.split(".")[1], "conv1")] for k in row if not k.endswith("conv1")))})
    write_csv(Path(out) / "block_sparsity.csv", rows, spec, "command=block-sparsity")
    write_csv(Path(out) / "block_sparsity_trend.csv", trends, spec, "command=block-sparsity")
    return {"rows": rows, "trends": trends}


def stability_rows(net: ToyNet, cfg: TrainConfig, spec: ExperimentSpec, repeats: int = 5) -> list[dict]:
    rows = []
    for grid in (True, False):
        r = _eval(net, cfg, spec, repeats=repeats, grid=grid)
        rows.append({"grid": int(grid), "metric_mean": r.metric_mean, "metric_std": r.metric_std,
                     "flops_mean": r.flops_mean, "flops_std": r.flops_std,
                     "flops_rel_std": r.flops_std / r.flops_mean if r.flops_mean else math.nan})
    return rows


def cmd_stability(spec: ExperimentSpec, out: str | Path, cache: RunCache, repeats: int = 5) -> dict:
    g = spec.ladder("ours")[-1]
    rows = []
    for method in [m for m in spec.methods if m in ("ours", "deterministic")] or ["ours"]:
        for seed in spec.seeds:
            cfg = make_config(spec, method, g, seed)
            net, _ = cache.get(cfg)
            rows.extend({"method": method, "seed": seed, **r} for r in stability_rows(net, cfg, spec, repeats))
    write_csv(Path(out) / "stability.csv", rows, spec, f"command=stability gamma={g} repeats={repeats}")
    return {"rows": rows}


def random_mask(h: int, w: int, sparsity: float, seed: int = 0) -> torch.Tensor:
    """Hard (1,1,h,w) mask with exactly round((1-sparsity)*h*w) ones."""
    n = h * w
    keep = int(round((1 - sparsity) * n))
    perm = torch.randperm(n, generator=torch.Generator().manual_seed(seed))
    m = torch.zeros(n)
    m[perm[:keep]] = 1
    return m.view(1, 1, h, w)


def cpu_bench_row(channels: int, size: int, sparsity: float, threads: int, repetitions: int = 7, seed: int = 0) -> dict:
    g = torch.Generator().manual_seed(seed)
    x = torch.randn(1, channels, size, size, generator=g)
    p = ConvParams(torch.randn(channels, channels, 3, 3, generator=g) * 0.05, None, 1, 1)
    m = random_mask(size, size, sparsity, seed)
    rep = bench_conv(x, p, plan_from_mask(m), repetitions=repetitions, threads=threads)
    led = count_flops([LayerSpec("conv", 3, channels, channels, size, size, mask="m")], {"m": m})
    theo = led.theoretical_speedup
    return {
        "channels": channels, "size": size, "sparsity": sparsity, "threads": threads,
        "dense_ms": rep.dense_im2col.median_ms, "dense_mad_ms": rep.dense_im2col.mad_ms,
        "direct_ms": rep.dense_direct.median_ms,
        "sparse_ms": rep.sparse.median_ms, "sparse_mad_ms": rep.sparse.mad_ms,
        "theo_speedup": theo, "real_speedup": rep.real_speedup, "gap_ratio": rep.real_speedup / theo,
    }


def cmd_cpu_bench(out: str | Path, shapes=((256, 64),), sparsities=(0.0, 0.5, 0.75, 0.9), threads=(1,),
                  repetitions: int = 7) -> dict:
    rows = [cpu_bench_row(c, s, sp, t, repetitions) for c, s in shapes for t in threads for sp in sparsities]
    write_csv(Path(out) / "cpu_bench.csv", rows, None, "command=cpu-bench")
    return {"rows": rows}


def cmd_prune_compat(spec: ExperimentSpec, out: str | Path, cache: RunCache) -> dict:
    """Prune-ratio ladder on a dense baseline and a masked model (top of the γ ladder)."""
    g = spec.ladder("ours")[-1]
    rows = []
    for label, method, knob in (("baseline", "baseline", 0.0), ("masked", "ours", g)):
        for seed in spec.seeds:
            cfg = make_config(spec, method, knob, seed)
            net, _ = cache.get(cfg)
            for ratio in spec.prune_ratios:
                pruned = global_unstructured_prune(net, ratio) if ratio > 0 else net
                r = _eval(pruned, cfg, spec)
                rows.append({"model": label, "seed": seed, "ratio": ratio, "metric_mean": r.metric_mean,
                             "flops_mean": r.flops_mean})
    write_csv(Path(out) / "prune_compat.csv", rows, spec, f"command=prune-compat gamma={g}")
    return {"rows": rows}
