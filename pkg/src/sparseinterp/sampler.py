"""Sampling-mask generation.

Channel 1 of a confidence map is the probability that a position is sampled
(convolution computed there); channel 0 is its complement.  Masks are
(N, 1, H, W) tensors, soft in [0, 1] during training and binary at inference.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .tensor import ConvParams, Tensor, conv2d, softmax2

NOISE_CLAMP = 1e-7


@dataclass
class SamplerConfig:
    tau0: float = 1.0
    alpha: float = 0.995405
    tau_final: float = 0.01
    threshold: float = 0.5
    grid_stride: int | None = None
    seed: int = 0

    def __post_init__(self) -> None:
        if not 0.0 < self.alpha < 1.0:
            raise ValueError(f"alpha must be in (0, 1), got {self.alpha}")
        if self.tau0 <= 0:
            raise ValueError(f"tau0 must be positive, got {self.tau0}")
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"threshold must be in (0, 1), got {self.threshold}")
        if self.grid_stride is not None and self.grid_stride < 1:
            raise ValueError(f"grid stride must be >= 1, got {self.grid_stride}")


@dataclass
class ConfidenceMap:
    """Two-class confidence stored as logits (N, 2, H, W)."""

    logits: Tensor

    @property
    def pi(self) -> Tensor:
        p0, p1 = softmax2(self.logits[:, 0:1], self.logits[:, 1:2])
        return torch.cat([p0, p1], dim=1)

    @property
    def pi1(self) -> Tensor:
        return self.pi[:, 1:2]

    @property
    def log_pi(self) -> Tensor:
        return F.log_softmax(self.logits, dim=1)


def predict_confidence(x: Tensor, conv: ConvParams) -> ConfidenceMap:
    if conv.c_out != 2 or conv.k != 3 or conv.padding != 1:
        raise ValueError(
            f"confidence conv must be 3x3, padding 1, 2 outputs; got C_out={conv.c_out}, k={conv.k}, padding={conv.padding}"
        )
    return ConfidenceMap(conv2d(x, conv))


def gumbel_noise(shape, generator: torch.Generator | None = None, dtype=torch.float32) -> Tensor:
    u = torch.rand(tuple(shape), generator=generator, dtype=dtype)
    u = u.clamp(NOISE_CLAMP, 1.0 - NOISE_CLAMP)
    return -torch.log(-torch.log(u))


def _log_pi(pi: ConfidenceMap | Tensor) -> Tensor:
    if isinstance(pi, ConfidenceMap):
        return pi.log_pi
    return torch.log(pi)


def gumbel_softmax_mask(
    pi: ConfidenceMap | Tensor,
    tau: float,
    noise: Tensor | None = None,
    generator: torch.Generator | None = None,
) -> Tensor:
    """Relaxed two-class sample; returns the class-1 probability (N, 1, H, W).

    Uses ``+log(pi)`` in the logits so that higher confidence means a higher
    sampling probability.  ``noise`` (N, 2, H, W) is treated as a constant.
    """
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    lp = _log_pi(pi)
    if noise is None:
        noise = gumbel_noise(lp.shape, generator, dtype=lp.dtype)
    z = (lp + noise.to(lp.dtype)) / tau
    _, m = softmax2(z[:, 0:1], z[:, 1:2])
    return m


def deterministic_mask(pi: ConfidenceMap | Tensor, tau: float) -> Tensor:
    if tau <= 0:
        raise ValueError(f"temperature must be positive, got {tau}")
    lp = _log_pi(pi)
    z = lp / tau
    _, m = softmax2(z[:, 0:1], z[:, 1:2])
    return m


def relu_gate_mask(x: Tensor, conv: ConvParams) -> Tensor:
    if conv.c_out != 1:
        raise ValueError(f"relu gate conv must have one output channel, got {conv.c_out}")
    return torch.relu(conv2d(x, conv))


def grid_offset(extent: int, stride: int) -> int:
    # centre the leftover span so both borders stay within ceil((s-1)/2) of a grid line
    return ((extent - 1) % stride) // 2


def grid_prior_mask(h: int, w: int, stride: int, dtype=torch.float32) -> Tensor:
    """Equal-interval hard mask (1, 1, h, w) with period ``stride``."""
    if stride < 1:
        raise ValueError(f"grid stride must be >= 1, got {stride}")
    m = torch.zeros(1, 1, h, w, dtype=dtype)
    m[:, :, grid_offset(h, stride) :: stride, grid_offset(w, stride) :: stride] = 1
    return m


def combine_masks(ms: Tensor, mg: Tensor) -> Tensor:
    if ms.shape[-2:] != mg.shape[-2:]:
        raise ValueError(f"mask shapes differ: {tuple(ms.shape)} vs {tuple(mg.shape)}")
    mg = mg.to(ms.dtype).expand_as(ms)
    # gradient only reaches ms where it attains the max
    return torch.where(mg > ms, mg, ms)


def binarize(m: Tensor, threshold: float = 0.5) -> Tensor:
    return (m >= threshold).to(m.dtype)


def is_hard(m: Tensor) -> bool:
    return bool(((m == 0) | (m == 1)).all())


def sparsity(m: Tensor, threshold: float = 0.5) -> float:
    """Fraction of unsampled positions: zeros of a hard mask, sub-threshold of a soft one."""
    if is_hard(m):
        return float((m == 0).float().mean())
    return float((m < threshold).float().mean())


def temperature_at(cfg: SamplerConfig, it: int) -> float:
    return cfg.tau0 * cfg.alpha**it


def alpha_for(total_iters: int, tau0: float = 1.0, tau_final: float = 0.01) -> float:
    if total_iters < 1:
        raise ValueError("total_iters must be >= 1")
    return math.exp(math.log(tau_final / tau0) / total_iters)


def sparse_loss(pis: list[ConfidenceMap | Tensor]) -> Tensor:
    """Sum of sampling confidences over layers and positions, averaged over the batch.

    Accepts confidence maps (channel 1 is used) or (N, 1, H, W) gate maps.
    """
    if not pis:
        raise ValueError("sparse_loss needs at least one confidence map")
    total = None
    for p in pis:
        p1 = p.pi1 if isinstance(p, ConfidenceMap) else (p[:, 1:2] if p.shape[1] == 2 else p)
        term = p1.sum() / p1.shape[0]
        total = term if total is None else total + term
    return total
