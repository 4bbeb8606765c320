"""Windowed reconstruction of unsampled feature positions.

All kernels are evaluated over a (2r+1)x(2r+1) window with zero padding,
which clips windows at the border.  Numerator and denominator are formed in
float64: RBF weights of distant samples underflow float32 long before the
ratio stops being meaningful.  Given a (possibly soft) mask ``m`` and
masked features ``ys = m * y``::

    num = K' * ys,   den = |K'| * m,   C = num / (den + eps)
    out = (1 - m) * C + m * ys

where ``K'`` is the window with its centre tap removed.  For a hard mask the
centre never matters (it is zero at unsampled queries, and sampled ones pass
``ys`` through).  For a soft mask it would let a query with a tiny mask
value rebuild itself from its own feature, which hard inference cannot do.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F

from .tensor import Tensor

EPS = 1e-5
DEN_FLOOR = 1e-12  # windows whose summed weight falls below this count as empty
KINDS = ("rbf", "plain", "avg", "fill_zeros", "reuse")


def rbf_weight(p1, p2, lam: float) -> float:
    d2 = sum((a - b) ** 2 for a, b in zip(p1, p2))
    return math.exp(-(lam**2) * d2)


def _offsets(r: int, like: Tensor) -> Tensor:
    return torch.arange(-r, r + 1, dtype=like.dtype, device=like.device)


def rbf_profile(lam: Tensor, r: int) -> Tensor:
    """1-D factor of the separable RBF window, shape (2r+1,)."""
    d = _offsets(r, lam)
    return torch.exp(-(lam**2) * d * d)


def rbf_window(lam: Tensor, r: int) -> Tensor:
    p = rbf_profile(lam, r)
    return p[:, None] * p[None, :]


def _check_radius(r: int) -> None:
    if r < 1:
        raise ValueError(f"interpolation radius must be >= 1, got {r}")


def _depthwise(x: Tensor, kernel: Tensor) -> Tensor:
    c = x.shape[1]
    k = kernel.shape[-1]
    x = x.double()
    w = kernel.double().expand(c, 1, k, k)
    return F.conv2d(x, w, padding=k // 2, groups=c)


def band_matrix(prof: Tensor, n: int) -> Tensor:
    """(n, n) matrix applying the 1-D window ``prof`` with zero padding."""
    r = prof.shape[0] // 2
    i = torch.arange(n)
    d = i[None, :] - i[:, None] + r
    inside = (d >= 0) & (d <= 2 * r)
    return torch.where(inside, prof[d.clamp(0, 2 * r)], torch.zeros((), dtype=prof.dtype))


def _separable(x: Tensor, prof: Tensor) -> Tensor:
    # rank-1 window as two banded matmuls; far cheaper than depthwise conv on CPU
    x, prof = x.double(), prof.double()
    bh = band_matrix(prof, x.shape[2])
    bw = band_matrix(prof, x.shape[3])
    return torch.matmul(torch.matmul(bh, x), bw.T)


def _off_centre(ys: Tensor, m: Tensor, prof: Tensor) -> tuple[Tensor, Tensor]:
    """Separable window sums of ys and m with the centre tap subtracted."""
    centre = prof[prof.shape[0] // 2] ** 2
    num = _separable(ys, prof) - centre * ys.double()
    den = _separable(m, prof) - centre * m.double()
    return num, den


class _SafeRatio(torch.autograd.Function):
    """num / den with 0 where den <= DEN_FLOOR.

    The backward pass uses ``-g * out / den`` instead of ``-g * num / den**2``
    so tiny but non-zero denominators do not overflow through the square.
    """

    @staticmethod
    def forward(ctx, num, den):
        ok = den > DEN_FLOOR
        safe = torch.where(ok, den, torch.ones_like(den))
        out = torch.where(ok, num / safe, torch.zeros_like(num))
        ctx.save_for_backward(out, safe, ok)
        return out

    @staticmethod
    def backward(ctx, g):
        out, safe, ok = ctx.saved_tensors
        zero = torch.zeros_like(g)
        g_num = torch.where(ok, g / safe, zero)
        g_den = torch.where(ok, -g * out / safe, zero)
        # den broadcasts over channels when it comes from a (N,1,H,W) mask
        if g_den.shape != safe.shape:
            g_den = g_den.sum(dim=1, keepdim=True)
        return g_num, g_den


def _ratio(num: Tensor, den: Tensor, eps: float) -> Tensor:
    # float64 keeps far-away RBF weights (exp(-lam^2 d^2)) from underflowing
    return _SafeRatio.apply(num.double(), den.double() + eps)


def compose(ys: Tensor, m: Tensor, c: Tensor) -> Tensor:
    return (1 - m) * c.to(ys.dtype) + m * ys


def interpolate_window(ys: Tensor, m: Tensor, kernel: Tensor, eps: float = EPS) -> Tensor:
    """Reconstruct with an arbitrary (2r+1)x(2r+1) window; |kernel| in the denominator."""
    if kernel.dim() != 2 or kernel.shape[0] != kernel.shape[1] or kernel.shape[0] % 2 == 0:
        raise ValueError(f"window must be square with odd side, got {tuple(kernel.shape)}")
    r = kernel.shape[0] // 2
    _check_radius(r)
    kernel = kernel.clone()
    kernel[r, r] = 0
    num = _depthwise(ys, kernel)
    den = _depthwise(m, kernel.abs())
    return compose(ys, m, _ratio(num, den, eps))


def interpolate_rbf(ys: Tensor, m: Tensor, lam: Tensor, r: int, eps: float = EPS) -> Tensor:
    _check_radius(r)
    prof = rbf_profile(lam.double(), r)
    return compose(ys, m, _ratio(*_off_centre(ys, m, prof), eps))


def interpolate_avg(ys: Tensor, m: Tensor, r: int, eps: float = EPS) -> Tensor:
    _check_radius(r)
    prof = torch.ones(2 * r + 1, dtype=torch.float64)
    return compose(ys, m, _ratio(*_off_centre(ys, m, prof), eps))


def plainconv_interpolate(ys: Tensor, m: Tensor, weights: Tensor, r: int, eps: float = EPS) -> Tensor:
    if weights.shape != (2 * r + 1, 2 * r + 1):
        raise ValueError(f"plain-conv weights must be {(2 * r + 1,) * 2}, got {tuple(weights.shape)}")
    return interpolate_window(ys, m, weights, eps)


def reuse_features_baseline(x: Tensor, ys: Tensor, m: Tensor) -> Tensor:
    if x.shape != ys.shape:
        raise ValueError(f"reuse needs matching feature shapes, got {tuple(x.shape)} vs {tuple(ys.shape)}")
    return m * ys + (1 - m) * x


def fill_zeros_baseline(ys: Tensor, m: Tensor) -> Tensor:
    return m * ys


@dataclass
class InterpConfig:
    kind: str = "rbf"
    radius: int = 7
    lam0: float = 3.0
    eps: float = EPS

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown interpolation kind {self.kind!r}; expected one of {KINDS}")
        _check_radius(self.radius)


class Interpolator(nn.Module):
    """Learnable reconstruction for one masked convolution."""

    def __init__(self, cfg: InterpConfig):
        super().__init__()
        self.kind = cfg.kind
        self.radius = cfg.radius
        self.eps = cfg.eps
        if cfg.kind == "rbf":
            self.lam = nn.Parameter(torch.tensor(float(cfg.lam0)))
        elif cfg.kind == "plain":
            with torch.no_grad():
                init = rbf_window(torch.tensor(1.0), cfg.radius)
            self.weight = nn.Parameter(init)

    @property
    def uses_window(self) -> bool:
        return self.kind in ("rbf", "plain", "avg")

    def forward(self, ys: Tensor, m: Tensor, prev: Tensor | None = None, eps: float | None = None) -> Tensor:
        eps = self.eps if eps is None else eps
        if self.kind == "rbf":
            return interpolate_rbf(ys, m, self.lam, self.radius, eps)
        if self.kind == "plain":
            return plainconv_interpolate(ys, m, self.weight, self.radius, eps)
        if self.kind == "avg":
            return interpolate_avg(ys, m, self.radius, eps)
        if self.kind == "fill_zeros":
            return fill_zeros_baseline(ys, m)
        if prev is None:
            raise ValueError("reuse-features interpolation needs the previous feature map")
        return reuse_features_baseline(prev, ys, m)


def interpolate(ys: Tensor, m: Tensor, kern: Interpolator, prev: Tensor | None = None, eps: float | None = None) -> Tensor:
    return kern(ys, m, prev, eps)
