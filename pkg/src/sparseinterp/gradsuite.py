"""Finite-difference checks over every differentiable op, several shapes each."""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F

from .interp import interpolate_avg, interpolate_rbf, interpolate_window
from .sampler import ConfidenceMap, gumbel_noise, gumbel_softmax_mask, sparse_loss
from .tensor import ConvParams, GradCheckReport, conv2d, grad_check, softmax2

SHAPES = [(1, 1, 4, 4), (1, 2, 5, 5), (2, 1, 3, 6), (1, 3, 6, 3), (2, 2, 4, 5)]


@dataclass
class SuiteResult:
    op: str
    shape: tuple[int, ...]
    report: GradCheckReport

    @property
    def passed(self) -> bool:
        return self.report.passed


def _cases(shape, g):
    n, c, h, w = shape
    y = torch.randn(shape, generator=g)
    m = torch.rand(n, 1, h, w, generator=g) * 0.8 + 0.1
    logits = torch.randn(n, 2, h, w, generator=g)
    noise = gumbel_noise((n, 2, h, w), g)
    wconv = torch.randn(2, c, 3, 3, generator=g) * 0.5
    bconv = torch.randn(2, generator=g)
    wts = torch.rand(3, 3, generator=g) + 0.2
    labels = torch.randint(0, 2, (n, h, w), generator=g)
    lam = torch.tensor(0.9)

    def conv(x, w, b):
        return (conv2d(x, ConvParams(w, b, 1, 1)) ** 2).sum()

    def soft2(a, b):
        p0, p1 = softmax2(a, b)
        return (p0 * torch.arange(1.0, p0.numel() + 1, dtype=p0.dtype).view_as(p0)).sum() + (p1 ** 2).sum()

    def gumbel(lg):
        return (gumbel_softmax_mask(ConfidenceMap(lg), 0.7, noise=noise) ** 2).sum()

    def rbf(y, m, lam):
        return (interpolate_rbf(m * y, m, lam, 1) ** 2).sum()

    def avg(y, m):
        return (interpolate_avg(m * y, m, 1) ** 2).sum()

    def plain(y, m, wts):
        return (interpolate_window(m * y, m, wts, 1e-5) ** 2).sum()

    def losses(lg, scores):
        task = F.cross_entropy(scores, labels)
        return task + 0.3 * sparse_loss([ConfidenceMap(lg)])

    return [
        ("conv", conv, [y, wconv, bconv]),
        ("softmax2", soft2, [logits[:, :1], logits[:, 1:]]),
        ("gumbel_mask", gumbel, [logits]),
        ("interp_rbf", rbf, [y, m, lam]),
        ("interp_plain", plain, [y, m, wts]),
        ("interp_avg", avg, [y, m]),
        ("losses", losses, [logits, torch.randn(n, 2, h, w, generator=g)]),
    ]


def run_suite(seed: int = 0, tol: float = 1e-2, shapes=SHAPES) -> list[SuiteResult]:
    out = []
    for shape in shapes:
        g = torch.Generator().manual_seed(seed + sum(shape))
        for name, f, args in _cases(shape, g):
            out.append(SuiteResult(name, tuple(shape), grad_check(f, args, tol=tol)))
    return out
