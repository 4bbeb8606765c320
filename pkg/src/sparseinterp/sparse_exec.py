"""Masked convolution at inference time, FLOPs accounting and CPU timing."""

from __future__ import annotations

import statistics
import time
from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .sampler import is_hard
from .tensor import ConvParams, Tensor, _check_input, conv2d_direct, conv2d_im2col


@dataclass
class SamplePlan:
    indices: Tensor  # (count, 3) int64 rows of (n, y, x), row-major order
    shape: tuple[int, int, int]  # (N, H', W') of the output grid

    @property
    def count(self) -> int:
        return self.indices.shape[0]


def plan_from_mask(m: Tensor) -> SamplePlan:
    """Enumerate the positions of a hard (N, 1, H, W) mask that are non-zero."""
    if m.dim() != 4 or m.shape[1] != 1:
        raise ValueError(f"mask must be (N, 1, H, W), got {tuple(m.shape)}")
    if not is_hard(m):
        raise ValueError("plan_from_mask needs a hard mask; binarize it first")
    return _plan(m)


def plan_from_support(m: Tensor) -> SamplePlan:
    """Positions where a non-negative (possibly soft) mask is non-zero."""
    return _plan(m)


def _plan(m: Tensor) -> SamplePlan:
    idx = torch.nonzero(m[:, 0] != 0)
    n, h, w = m.shape[0], m.shape[2], m.shape[3]
    return SamplePlan(idx, (n, h, w))


class _Gather:
    """Cached index arithmetic for one (plan, conv geometry) pair."""

    def __init__(self, plan: SamplePlan, p: ConvParams, hp: int, wp: int):
        k, s = p.k, p.stride
        n_idx, y, x = plan.indices.unbind(1)
        dy = torch.arange(k).repeat_interleave(k)
        dx = torch.arange(k).repeat(k)
        rows = y[None, :] * s + dy[:, None]  # (k*k, count)
        cols = x[None, :] * s + dx[:, None]
        self.src = (n_idx[None, :] * hp + rows) * wp + cols  # flat index into (N*Hp*Wp)
        self.dst = (n_idx * plan.shape[1] + y) * plan.shape[2] + x


def sparse_conv2d(x: Tensor, p: ConvParams, plan: SamplePlan, _cache: _Gather | None = None) -> Tensor:
    """Convolution evaluated only at planned output positions; zero elsewhere.

    Input patches of the sampled positions are gathered into a
    (C_in*k*k, count) matrix, multiplied by the reshaped weights and
    scattered into a dense zero buffer.
    """
    ho, wo = _check_input(x, p)
    n = x.shape[0]
    if plan.shape != (n, ho, wo):
        raise ValueError(f"plan grid {plan.shape} does not match output grid {(n, ho, wo)}")
    out = x.new_zeros(p.c_out, n * ho * wo)
    if plan.count:
        idx = plan.indices
        if (idx < 0).any() or (idx[:, 1] >= ho).any() or (idx[:, 2] >= wo).any() or (idx[:, 0] >= n).any():
            raise ValueError("plan entry out of bounds")
        xp = F.pad(x, (p.padding,) * 4)
        hp, wp = xp.shape[2], xp.shape[3]
        g = _cache or _Gather(plan, p, hp, wp)
        flat = xp.transpose(0, 1).reshape(p.c_in, -1)
        cols = flat[:, g.src].reshape(p.c_in * p.k * p.k, -1)  # (C_in*k*k, count)
        vals = torch.matmul(p.weight.reshape(p.c_out, -1), cols)
        if p.bias is not None:
            vals = vals + p.bias[:, None]
        out[:, g.dst] = vals
    return out.view(p.c_out, n, ho, wo).transpose(0, 1)


# ----------------------------------------------------------------------------
# FLOPs ledger (1 multiply-accumulate == 1 unit)


@dataclass
class LayerSpec:
    name: str
    k: int
    c_in: int
    c_out: int
    h_out: int
    w_out: int
    mask: str | None = None  # key into the masks dict; None = dense layer
    mask_channels: int = 0  # outputs of the mask-prediction conv (2 gumbel, 1 relu gate, 0 none)
    mask_c_in: int = 0
    interp_radius: int | None = None  # None = no windowed reconstruction charged
    density: float = 1.0  # fraction of non-zero weights (after pruning)
    batch: int = 1


@dataclass
class LayerFlops:
    name: str
    dense_macs: float
    sparse_macs: float
    mask_macs: float = 0.0
    interp_macs: float = 0.0


@dataclass
class FlopsLedger:
    entries: list[LayerFlops] = field(default_factory=list)

    def add(self, e: LayerFlops) -> None:
        self.entries.append(e)

    @property
    def dense(self) -> float:
        return sum(e.dense_macs for e in self.entries)

    @property
    def sparse(self) -> float:
        return sum(e.sparse_macs for e in self.entries)

    @property
    def mask(self) -> float:
        return sum(e.mask_macs for e in self.entries)

    @property
    def interp(self) -> float:
        return sum(e.interp_macs for e in self.entries)

    @property
    def total(self) -> float:
        """Work actually performed: sparse convs plus mask and reconstruction overhead."""
        return self.sparse + self.mask + self.interp

    @property
    def theoretical_speedup(self) -> float:
        return self.dense / self.total if self.total else float("inf")


def window_counts(m: Tensor, r: int) -> Tensor:
    """Number of non-zero mask positions inside each clipped (2r+1)^2 window."""
    k = 2 * r + 1
    ind = (m != 0).to(torch.float64)
    return F.conv2d(ind, torch.ones(1, 1, k, k, dtype=torch.float64), padding=r)


def count_flops(layers: list[LayerSpec], masks: dict[str, Tensor] | None = None) -> FlopsLedger:
    """Per-layer MAC counts, summed over the batch.

    A masked layer computes its convolution where the mask is non-zero and
    reconstructs where it is below one, charging ``n_window * (C_out + 1)``
    per reconstructed position (numerator per channel plus the weight sum).
    """
    masks = masks or {}
    ledger = FlopsLedger()
    for L in layers:
        per_point = L.k * L.k * L.c_in * L.c_out * L.density
        positions = L.h_out * L.w_out * L.batch
        dense = per_point * positions
        if L.mask is None:
            ledger.add(LayerFlops(L.name, dense, dense))
            continue
        m = masks[L.mask]
        sampled = float((m != 0).sum())
        mask_macs = 9.0 * L.mask_c_in * L.mask_channels * positions
        interp = 0.0
        if L.interp_radius is not None:
            counts = window_counts(m, L.interp_radius)
            need = m < 1
            interp = float((counts * need).sum()) * (L.c_out + 1)
        ledger.add(LayerFlops(L.name, dense, per_point * sampled, mask_macs, interp))
    return ledger


# ----------------------------------------------------------------------------
# Wall-clock benchmark


@dataclass
class Timing:
    median_ms: float
    mad_ms: float


@dataclass
class BenchReport:
    dense_im2col: Timing
    dense_direct: Timing
    sparse: Timing
    threads: int
    count: int

    @property
    def real_speedup(self) -> float:
        return self.dense_im2col.median_ms / self.sparse.median_ms


def _time(fn, repetitions: int, warmup: int) -> Timing:
    for _ in range(warmup):
        fn()
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    med = statistics.median(samples)
    return Timing(med, statistics.median(abs(s - med) for s in samples))


def bench_conv(
    x: Tensor,
    p: ConvParams,
    plan: SamplePlan,
    repetitions: int = 7,
    threads: int = 1,
    warmup: int = 2,
    direct: bool = True,
) -> BenchReport:
    """Median/MAD wall-clock of dense im2col, dense direct and sparse paths."""
    prev = torch.get_num_threads()
    torch.set_num_threads(threads)
    try:
        with torch.no_grad():
            xp_shape = (x.shape[2] + 2 * p.padding, x.shape[3] + 2 * p.padding)
            cache = _Gather(plan, p, *xp_shape) if plan.count else None
            t_im2col = _time(lambda: conv2d_im2col(x, p), repetitions, warmup)
            t_direct = _time(lambda: conv2d_direct(x, p), repetitions, warmup) if direct else Timing(float("nan"), float("nan"))
            t_sparse = _time(lambda: sparse_conv2d(x, p, plan, cache), repetitions, warmup)
    finally:
        torch.set_num_threads(prev)
    return BenchReport(t_im2col, t_direct, t_sparse, threads, plan.count)
