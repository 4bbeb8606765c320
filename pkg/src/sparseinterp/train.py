"""Training, evaluation, pruning and checkpointing for the toy networks."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import __version__
from .blocks import ForwardCtx, NetConfig, ToyNet, masks_by_key
from .checkpoint import CheckpointError, decode, encode
from .data import make_task
from .sampler import SamplerConfig, alpha_for, sparse_loss, temperature_at
from .sparse_exec import count_flops
from .tensor import SGD, backward

log = logging.getLogger(__name__)


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, value: float):
        super().__init__(f"non-finite loss {value} at iteration {iteration}")
        self.iteration = iteration


@dataclass
class TrainConfig:
    task: str = "segmentation"
    gamma: float = 1e-4
    total_iters: int = 3000
    lr: float = 0.05
    lr_schedule: str = "step"  # "constant" | "step"
    lr_steps: tuple[float, ...] = (0.67, 0.9)  # fractions of total_iters where lr /= 10
    momentum: float = 0.9
    weight_decay: float = 1e-4
    batch_size: int = 8
    clip_norm: float | None = None  # global gradient-norm cap; None = off
    seed: int = 0  # model init and Gumbel noise
    data_seed: int = 0  # task generator
    resolution: int | None = None  # train/eval input side; None = native (uniform-sampling baseline)
    tau0: float = 1.0
    tau_final: float = 0.01
    threshold: float = 0.5
    net: NetConfig = field(default_factory=NetConfig)

    def __post_init__(self) -> None:
        if isinstance(self.net, dict):
            self.net = NetConfig(**self.net)
        self.lr_steps = tuple(self.lr_steps)
        if self.gamma < 0:
            raise ValueError(f"gamma must be >= 0, got {self.gamma}")
        if self.lr_schedule not in ("constant", "step"):
            raise ValueError(f"unknown lr schedule {self.lr_schedule!r}")
        if self.clip_norm is not None and self.clip_norm <= 0:
            raise ValueError(f"clip_norm must be > 0, got {self.clip_norm}")
        self.net.task = self.task

    @property
    def sampler(self) -> SamplerConfig:
        return SamplerConfig(
            tau0=self.tau0,
            alpha=alpha_for(self.total_iters, self.tau0, self.tau_final),
            tau_final=self.tau_final,
            threshold=self.threshold,
            grid_stride=self.net.block.grid_stride,
            seed=self.seed,
        )

    def lr_at(self, it: int) -> float:
        if self.lr_schedule == "constant":
            return self.lr
        drops = sum(it >= f * self.total_iters for f in self.lr_steps)
        return self.lr * 0.1**drops

    def to_dict(self) -> dict:
        d = asdict(self)
        if d["clip_norm"] is None:
            del d["clip_norm"]  # keeps run-cache keys of unclipped configs stable
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown TrainConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


def set_deterministic(on: bool = True) -> None:
    torch.set_flush_denormal(True)
    if on:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)


def total_loss(task_loss: torch.Tensor, pis: list, gamma: float) -> torch.Tensor:
    if task_loss.numel() != 1:
        raise ValueError("task loss must be a scalar")
    if gamma == 0 or not pis:
        return task_loss
    return task_loss + gamma * sparse_loss(pis)


def _task_loss(task: str, logits: torch.Tensor, y: torch.Tensor) -> torch.Tensor:
    return F.cross_entropy(logits, y)


def run_net(net: ToyNet, x: torch.Tensor, ctx: ForwardCtx, resolution: int | None) -> torch.Tensor:
    """Forward with optional input downsampling; segmentation logits return at native size."""
    size = x.shape[-2:]
    if resolution and resolution != size[0]:
        x = F.interpolate(x, size=(resolution, resolution), mode="bilinear", align_corners=False, antialias=True)
    out = net(x, ctx)
    if net.cfg.task == "segmentation" and out.shape[-2:] != size:
        out = F.interpolate(out, size=size, mode="bilinear", align_corners=False)
    return out


def _block_sparsity(records) -> dict[str, float]:
    return {f"b{r.block}.m{r.group}": float((r.mask < 0.5).float().mean()) for r in records}


def train(cfg: TrainConfig, log_every: int = 0) -> tuple[ToyNet, list[dict]]:
    """SGD over the total loss with per-iteration temperature annealing."""
    set_deterministic(True)
    net = ToyNet(cfg.net)
    task = make_task(cfg.task, cfg.data_seed)
    scfg = cfg.sampler
    opt = SGD(list(net.parameters()), cfg.lr, cfg.momentum, cfg.weight_decay)
    history = []
    b = cfg.batch_size
    for it in range(cfg.total_iters):
        tau = temperature_at(scfg, it)
        x, y = task.batch(range(it * b, (it + 1) * b))
        ctx = ForwardCtx("train", tau=tau, threshold=cfg.threshold, seed=cfg.seed, step=it)
        logits = run_net(net, x, ctx, cfg.resolution)
        lt = _task_loss(cfg.task, logits, y)
        pis = [r.confidence for r in ctx.records if r.confidence is not None]
        ls = sparse_loss(pis) if pis else torch.zeros(())
        loss = total_loss(lt, pis, cfg.gamma)
        if not math.isfinite(loss.item()):
            raise TrainingDiverged(it, loss.item())
        opt.zero_grad()
        backward(loss)
        if cfg.clip_norm is not None:
            torch.nn.utils.clip_grad_norm_(net.parameters(), cfg.clip_norm)
        opt.step(cfg.lr_at(it))
        row = {"iter": it, "L_task": lt.item(), "L_sparse": ls.item(), "tau": tau}
        row.update({f"sparsity_{k}": v for k, v in _block_sparsity(ctx.records).items()})
        history.append(row)
        if log_every and it % log_every == 0:
            log.info("iter %d loss %.4f sparse %.1f tau %.4f", it, lt.item(), ls.item(), tau)
    return net, history


def write_history(history: list[dict], path: str | Path) -> None:
    if not history:
        return
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=list(history[0]))
        w.writeheader()
        for row in history:
            w.writerow({k: (f"{v:.6g}" if isinstance(v, float) else v) for k, v in row.items()})


# ----------------------------------------------------------------------------
# evaluation


def confusion(pred: torch.Tensor, y: torch.Tensor, k: int) -> torch.Tensor:
    return torch.bincount((y.reshape(-1) * k + pred.reshape(-1)), minlength=k * k).reshape(k, k)


def miou(conf: torch.Tensor) -> float:
    conf = conf.double()
    inter = conf.diag()
    union = conf.sum(0) + conf.sum(1) - inter
    present = union > 0
    return float((inter[present] / union[present]).mean() * 100)


@dataclass
class EvalResult:
    metric_mean: float
    metric_std: float
    flops_mean: float
    flops_std: float
    metrics: list[float]
    flops: list[float]
    dense_flops: float
    sparsity: dict[str, float]

    @property
    def mean_sparsity(self) -> float:
        return float(np.mean(list(self.sparsity.values()))) if self.sparsity else 0.0


def evaluate(
    net: ToyNet,
    task,
    n_samples: int = 256,
    mode: str = "infer",
    repeats: int = 1,
    tau: float = 0.01,
    threshold: float = 0.5,
    grid: bool = True,
    stochastic: bool = True,
    seed: int = 12345,
    resolution: int | None = None,
    batch_size: int = 64,
    force_mask: float | None = None,
) -> EvalResult:
    """Metric (mIoU or accuracy, in %) and per-image MACs over held-out samples.

    ``mode="infer"`` uses hard masks and sparse execution; ``mode="soft"`` runs
    the training-mode composition at temperature ``tau``.  Repeats differ only
    in the Gumbel noise seed.
    """
    torch.set_flush_denormal(True)
    k = net.cfg.n_classes
    metrics, flops = [], []
    sp_acc: dict[str, list[float]] = {}
    dense = 0.0
    binary = net.cfg.block.method != "relu"
    for rep in range(repeats):
        conf = torch.zeros(k, k, dtype=torch.int64)
        correct = total = 0
        macs = 0.0
        dense = 0.0
        for start in range(0, n_samples, batch_size):
            idx = range(start, min(start + batch_size, n_samples))
            x, y = task.eval_batch(idx)
            ctx = ForwardCtx(
                "infer" if mode == "infer" else "train", tau=tau, threshold=threshold, grid=grid,
                stochastic=stochastic, seed=seed + rep, step=start, force_mask=force_mask,
            )
            with torch.no_grad():
                out = run_net(net, x, ctx, resolution)
            pred = out.argmax(1)
            if net.cfg.task == "segmentation":
                conf += confusion(pred, y, k)
            else:
                correct += int((pred == y).sum())
                total += len(y)
            side = resolution or x.shape[-1]
            masks = masks_by_key(ctx.records)
            if mode != "infer":
                masks = {kk: (m >= threshold).float() for kk, m in masks.items()}
            ledger = count_flops(net.layer_specs(side, side, len(idx), binary), masks)
            macs += ledger.total
            dense += ledger.dense
            for kk, v in _block_sparsity(ctx.records).items():
                sp_acc.setdefault(kk, []).append(v * len(idx))
        metrics.append(miou(conf) if net.cfg.task == "segmentation" else 100.0 * correct / total)
        flops.append(macs / n_samples)
    sparsity = {kk: sum(v) / (n_samples * repeats) for kk, v in sp_acc.items()}
    return EvalResult(
        float(np.mean(metrics)), float(np.std(metrics)) if repeats > 1 else 0.0,
        float(np.mean(flops)), float(np.std(flops)) if repeats > 1 else 0.0,
        metrics, flops, dense / n_samples, sparsity,
    )


def mask_binariness(net: ToyNet, task, tau: float, n_samples: int = 64, tol: float = 0.01, seed: int = 999) -> float:
    """Fraction of soft sampler outputs within ``tol`` of 0 or 1 on held-out data."""
    near = count = 0
    for start in range(0, n_samples, 32):
        x, _ = task.eval_batch(range(start, min(start + 32, n_samples)))
        ctx = ForwardCtx("train", tau=tau, seed=seed, step=start)
        with torch.no_grad():
            net(x, ctx)
        for r in ctx.records:
            m = r.sample_mask
            near += int(((m <= tol) | (m >= 1 - tol)).sum())
            count += m.numel()
    return near / count


# ----------------------------------------------------------------------------
# pruning


def prunable_parameters(net: ToyNet) -> list[tuple[str, torch.nn.Parameter]]:
    """Convolution weights of stem, blocks and head; sampler convs excluded."""
    out = []
    for name, p in net.named_parameters():
        if name.endswith("weight") and p.dim() == 4 and ".samplers." not in name and ".interps." not in name:
            out.append((name, p))
    return out


def global_unstructured_prune(net: ToyNet, ratio: float) -> ToyNet:
    """Zero the globally smallest-magnitude ``ratio`` of prunable weights (copy)."""
    if not 0 <= ratio < 1:
        raise ValueError(f"prune ratio must be in [0, 1), got {ratio}")
    pruned = copy.deepcopy(net)
    params = prunable_parameters(pruned)
    flat = torch.cat([p.detach().abs().reshape(-1) for _, p in params])
    n_prune = int(round(ratio * flat.numel()))
    keep = torch.ones_like(flat, dtype=torch.bool)
    if n_prune:
        order = torch.argsort(flat, stable=True)
        keep[order[:n_prune]] = False
    masks = {}
    offset = 0
    with torch.no_grad():
        for name, p in params:
            m = keep[offset : offset + p.numel()].view_as(p)
            offset += p.numel()
            p.mul_(m)
            masks[name] = m
    pruned.prune_masks = masks
    return pruned


def reapply_prune_masks(net: ToyNet) -> None:
    masks = getattr(net, "prune_masks", {})
    params = dict(net.named_parameters())
    with torch.no_grad():
        for name, m in masks.items():
            params[name].mul_(m)


# ----------------------------------------------------------------------------
# checkpoints


def checkpoint_bytes(net: ToyNet) -> bytes:
    meta = {"arch": net.cfg.to_dict(), "version": __version__}
    return encode(dict(net.state_dict()), meta)


def save_checkpoint(net: ToyNet, path: str | Path) -> None:
    Path(path).write_bytes(checkpoint_bytes(net))


def load_checkpoint(path: str | Path, expect: NetConfig | None = None) -> ToyNet:
    tensors, meta = decode(Path(path).read_bytes())
    try:
        cfg = NetConfig(**meta["arch"])
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"bad architecture header: {exc}") from None
    if expect is not None and cfg.to_dict() != expect.to_dict():
        raise CheckpointError("architecture header does not match the expected network")
    net = ToyNet(cfg)
    state = net.state_dict()
    for name, t in state.items():
        if name not in tensors:
            raise CheckpointError(f"entry {name!r} missing from checkpoint")
        if tuple(tensors[name].shape) != tuple(t.shape):
            raise CheckpointError(f"entry {name!r}: shape {tuple(tensors[name].shape)} != {tuple(t.shape)}")
    extra = set(tensors) - set(state)
    if extra:
        raise CheckpointError(f"unexpected entries {sorted(extra)}")
    net.load_state_dict(tensors)
    return net
