"""Dense NCHW tensor core.

Tensors are plain ``torch.Tensor`` objects (float32, rank 4) and reverse-mode
differentiation is torch autograd: the graph recorded during the forward pass
is the tape.  This module adds the checked operator surface used by the rest
of the package, two reference convolution algorithms (direct and im2col), a
central-difference gradient checker and a momentum SGD step.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import torch
import torch.nn.functional as F

Tensor = torch.Tensor


@dataclass
class ConvParams:
    weight: Tensor  # (C_out, C_in, k, k)
    bias: Tensor | None = None
    stride: int = 1
    padding: int = 0

    def __post_init__(self) -> None:
        if self.weight.dim() != 4 or self.weight.shape[2] != self.weight.shape[3]:
            raise ValueError(f"conv weight must be (C_out, C_in, k, k), got {tuple(self.weight.shape)}")
        if self.k % 2 != 1:
            raise ValueError(f"kernel size must be odd, got {self.k}")
        if self.stride < 1 or self.padding < 0:
            raise ValueError(f"bad stride/padding {self.stride}/{self.padding}")
        if self.bias is not None and self.bias.shape != (self.c_out,):
            raise ValueError(f"bias shape {tuple(self.bias.shape)} does not match C_out={self.c_out}")

    @property
    def k(self) -> int:
        return self.weight.shape[2]

    @property
    def c_in(self) -> int:
        return self.weight.shape[1]

    @property
    def c_out(self) -> int:
        return self.weight.shape[0]

    def out_size(self, h: int, w: int) -> tuple[int, int]:
        span_h = h + 2 * self.padding - self.k
        span_w = w + 2 * self.padding - self.k
        if span_h < 0 or span_w < 0 or span_h % self.stride or span_w % self.stride:
            raise ValueError(
                f"input {h}x{w} incompatible with k={self.k}, stride={self.stride}, padding={self.padding}"
            )
        return span_h // self.stride + 1, span_w // self.stride + 1


def _check_input(x: Tensor, p: ConvParams) -> tuple[int, int]:
    if x.dim() != 4:
        raise ValueError(f"expected NCHW input, got shape {tuple(x.shape)}")
    if x.shape[1] != p.c_in:
        raise ValueError(
            f"input shape {tuple(x.shape)} incompatible with weight shape {tuple(p.weight.shape)}"
        )
    return p.out_size(x.shape[2], x.shape[3])


def conv2d(x: Tensor, p: ConvParams) -> Tensor:
    """Dense 2-D cross-correlation; differentiable in ``x``, weight and bias."""
    _check_input(x, p)
    return F.conv2d(x, p.weight, p.bias, stride=p.stride, padding=p.padding)


def conv2d_direct(x: Tensor, p: ConvParams) -> Tensor:
    """Shift-and-accumulate convolution: one channel matmul per kernel offset."""
    ho, wo = _check_input(x, p)
    xp = F.pad(x, (p.padding,) * 4)
    s = p.stride
    out = x.new_zeros(x.shape[0], p.c_out, ho, wo)
    for dy in range(p.k):
        for dx in range(p.k):
            patch = xp[:, :, dy : dy + s * (ho - 1) + 1 : s, dx : dx + s * (wo - 1) + 1 : s]
            out = out + torch.einsum("oc,nchw->nohw", p.weight[:, :, dy, dx], patch)
    if p.bias is not None:
        out = out + p.bias.view(1, -1, 1, 1)
    return out


def im2col(x: Tensor, k: int, stride: int, padding: int) -> Tensor:
    """Unfold ``x`` into a (N, C*k*k, H'*W') column matrix (channel-major rows)."""
    n, c, h, w = x.shape
    xp = F.pad(x, (padding,) * 4).contiguous()
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    sn, sc, sh, sw = xp.stride()
    view = xp.as_strided((n, c, k, k, ho, wo), (sn, sc, sh, sw, sh * stride, sw * stride))
    return view.reshape(n, c * k * k, ho * wo)


def conv2d_im2col(x: Tensor, p: ConvParams) -> Tensor:
    ho, wo = _check_input(x, p)
    cols = im2col(x, p.k, p.stride, p.padding)
    out = torch.matmul(p.weight.reshape(p.c_out, -1), cols)
    if p.bias is not None:
        out = out + p.bias.view(1, -1, 1)
    return out.view(x.shape[0], p.c_out, ho, wo)


def softmax2(a: Tensor, b: Tensor) -> tuple[Tensor, Tensor]:
    """Two-class softmax evaluated with max subtraction."""
    if a.shape != b.shape:
        raise ValueError(f"softmax2 operands differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    m = torch.maximum(a, b).detach()
    ea = torch.exp(a - m)
    eb = torch.exp(b - m)
    s = ea + eb
    return ea / s, eb / s


def _broadcast_ok(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape:
        return
    if a.dim() == b.dim() == 4:
        sa, sb = a.shape, b.shape
        if sa[0] == sb[0] and sa[2:] == sb[2:] and (sa[1] == 1 or sb[1] == 1):
            return
    if a.numel() == 1 or b.numel() == 1:
        return
    raise ValueError(f"cannot broadcast {tuple(a.shape)} with {tuple(b.shape)}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _broadcast_ok(a, b)
    return a + b


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; a (N,1,H,W) mask broadcasts over channels."""
    _broadcast_ok(a, b)
    return a * b


def relu(x: Tensor) -> Tensor:
    return torch.relu(x)


def log(x: Tensor) -> Tensor:
    return torch.log(x)


def exp(x: Tensor) -> Tensor:
    return torch.exp(x)


def scale(x: Tensor, c: float) -> Tensor:
    return x * c


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf reachable from a scalar ``loss``.

    Gradients accumulate into existing ``.grad`` buffers.
    """
    if loss.numel() != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")
    loss.reshape(()).backward()


@dataclass
class GradCheckReport:
    max_rel_error: float
    tol: float
    location: tuple[int, tuple[int, ...]] | None = None  # (input index, element index)
    message: str = ""

    @property
    def passed(self) -> bool:
        return math.isfinite(self.max_rel_error) and self.max_rel_error <= self.tol


def grad_check(
    f: Callable[..., Tensor],
    inputs: Sequence[Tensor],
    step: float = 1e-3,
    tol: float = 1e-2,
    floor: float = 1e-3,
) -> GradCheckReport:
    """Compare autograd gradients against central differences.

    The analytic route runs ``f`` on float32 copies of ``inputs``; the
    numeric route perturbs float64 copies, so ``f`` must be dtype-generic.
    Per input the error is ``max|a - n| / max(|a|_inf, |n|_inf, floor)``.
    """
    xs = [x.detach().to(torch.float32).clone().requires_grad_(True) for x in inputs]
    out = f(*xs)
    if out.numel() != 1:
        raise ValueError("grad_check needs a scalar-valued function")
    if not torch.isfinite(out).all():
        return GradCheckReport(math.inf, tol, None, "non-finite function value")
    grads = torch.autograd.grad(out.reshape(()), xs, allow_unused=True)

    worst = GradCheckReport(0.0, tol)
    base = [x.detach().to(torch.float64).clone() for x in inputs]
    for i, x in enumerate(base):
        analytic = grads[i]
        analytic = torch.zeros_like(x) if analytic is None else analytic.to(torch.float64)
        numeric = torch.zeros_like(x)
        flat = x.view(-1)
        for j in range(flat.numel()):
            orig = flat[j].item()
            flat[j] = orig + step
            fp = f(*base).item()
            flat[j] = orig - step
            fm = f(*base).item()
            flat[j] = orig
            numeric.view(-1)[j] = (fp - fm) / (2 * step)
        bad = ~torch.isfinite(analytic) | ~torch.isfinite(numeric)
        if bad.any():
            idx = tuple(int(v) for v in torch.nonzero(bad)[0])
            return GradCheckReport(math.inf, tol, (i, idx), "non-finite gradient")
        diff = (analytic - numeric).abs()
        denom = max(analytic.abs().max().item(), numeric.abs().max().item(), floor)
        err = diff.max().item() / denom
        if err > worst.max_rel_error:
            idx = tuple(int(v) for v in torch.nonzero(diff == diff.max())[0])
            worst = GradCheckReport(err, tol, (i, idx))
    return worst


def sgd_step(
    params: Sequence[Tensor],
    grads: Sequence[Tensor | None],
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
    buffers: dict[int, Tensor] | None = None,
) -> None:
    """In-place momentum SGD: ``buf = m*buf + (g + wd*p)``, ``p -= lr*buf``.

    ``buffers`` maps ``id(param)`` to its momentum buffer and must be reused
    across calls for momentum to persist.
    """
    if buffers is None:
        buffers = {}
    with torch.no_grad():
        for p, g in zip(params, grads):
            if g is None:
                continue
            if g.shape != p.shape:
                raise ValueError(f"grad shape {tuple(g.shape)} != param shape {tuple(p.shape)}")
            d = g + weight_decay * p if weight_decay else g
            if momentum:
                buf = buffers.get(id(p))
                if buf is None:
                    buf = d.clone()
                else:
                    buf.mul_(momentum).add_(d)
                buffers[id(p)] = buf
                d = buf
            p.sub_(lr * d)


@dataclass
class SGD:
    params: list[Tensor]
    lr: float
    momentum: float = 0.0
    weight_decay: float = 0.0
    buffers: dict[int, Tensor] = field(default_factory=dict)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self, lr: float | None = None) -> None:
        sgd_step(
            self.params,
            [p.grad for p in self.params],
            self.lr if lr is None else lr,
            self.momentum,
            self.weight_decay,
            self.buffers,
        )


def kaiming_uniform(shape: Sequence[int], generator: torch.Generator | None = None) -> Tensor:
    """Kaiming-uniform fan-in init for ReLU nets: U(-sqrt(6/fan_in), sqrt(6/fan_in))."""
    fan_in = 1
    for d in shape[1:]:
        fan_in *= d
    bound = math.sqrt(6.0 / fan_in)
    return (torch.rand(tuple(shape), generator=generator) * 2 - 1) * bound
