"""Masked residual blocks and the two toy networks.

Every masked convolution is computed where its mask is non-zero, multiplied by
the mask and reconstructed by its own interpolator before the next operation
consumes it.  In ``train`` mode convolutions run densely with soft masks; in
``infer`` mode masks are hard (or ReLU-gated) and convolutions go through the
gather/scatter path.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from . import sampler as S
from .interp import InterpConfig, Interpolator
from .sparse_exec import LayerSpec, plan_from_support, sparse_conv2d
from .tensor import ConvParams, Tensor, conv2d, kaiming_uniform

LAYOUTS = ("single", "two", "three")
METHODS = ("ours", "deterministic", "relu", "grid", "none")


@dataclass
class MaskRecord:
    block: int
    group: int  # index of the distinct mask within the block
    convs: tuple[int, ...]
    mask: Tensor  # mask as used (after grid prior), (N,1,H,W)
    sample_mask: Tensor  # sampler output before the grid prior
    confidence: object  # ConfidenceMap, gate map, or None


@dataclass
class ForwardCtx:
    mode: str = "train"  # "train" | "infer"
    tau: float = 1.0
    threshold: float = 0.5
    grid: bool = True
    stochastic: bool = True
    seed: int = 0
    step: int = 0
    force_mask: float | None = None  # override every sampler output (tests/ablation)
    records: list[MaskRecord] = field(default_factory=list)

    def generator(self, layer: int) -> torch.Generator:
        s = np.random.SeedSequence([self.seed, self.step, layer]).generate_state(1)[0]
        return torch.Generator().manual_seed(int(s))


class Conv(nn.Module):
    def __init__(self, c_in: int, c_out: int, k: int, gen: torch.Generator | None = None):
        super().__init__()
        self.weight = nn.Parameter(kaiming_uniform((c_out, c_in, k, k), gen))
        self.bias = nn.Parameter(torch.zeros(c_out))
        self.k = k

    @property
    def params(self) -> ConvParams:
        return ConvParams(self.weight, self.bias, 1, self.k // 2)

    def forward(self, x: Tensor) -> Tensor:
        return conv2d(x, self.params)

    def sparse(self, x: Tensor, m: Tensor) -> Tensor:
        return sparse_conv2d(x, self.params, plan_from_support(m))


class Sampler(nn.Module):
    """Mask generator reading the block input."""

    def __init__(self, c_in: int, method: str, layer_id: int, init_logit: float = 1.0,
                 gen: torch.Generator | None = None):
        super().__init__()
        self.method = method
        self.layer_id = layer_id
        if method in ("ours", "deterministic"):
            self.weight = nn.Parameter(0.1 * kaiming_uniform((2, c_in, 3, 3), gen))
            self.bias = nn.Parameter(torch.tensor([0.0, init_logit]))
        elif method == "relu":
            self.weight = nn.Parameter(0.1 * kaiming_uniform((1, c_in, 3, 3), gen))
            self.bias = nn.Parameter(torch.tensor([1.0]))

    @property
    def out_channels(self) -> int:
        return {"ours": 2, "deterministic": 2, "relu": 1}.get(self.method, 0)

    @property
    def params(self) -> ConvParams:
        return ConvParams(self.weight, self.bias, 1, 1)

    def forward(self, x: Tensor, ctx: ForwardCtx) -> tuple[Tensor, object]:
        n, _, h, w = x.shape
        if self.method == "grid":
            return x.new_zeros(n, 1, h, w), None
        if self.method == "relu":
            g = S.relu_gate_mask(x, self.params)
            return g, g
        conf = S.predict_confidence(x, self.params)
        if self.method == "ours" and ctx.stochastic:
            m = S.gumbel_softmax_mask(conf, ctx.tau, generator=ctx.generator(self.layer_id))
        else:
            m = S.deterministic_mask(conf, ctx.tau)
        if ctx.mode == "infer":
            m = S.binarize(m, ctx.threshold)
        return m, conf


@dataclass
class BlockConfig:
    channels: int = 16
    mid: int | None = None  # bottleneck width; defaults to channels
    layout: str = "two"
    method: str = "ours"
    interp: InterpConfig = field(default_factory=InterpConfig)
    grid_stride: int | None = 11
    init_logit: float = 1.0

    def __post_init__(self) -> None:
        if isinstance(self.interp, dict):
            self.interp = InterpConfig(**self.interp)
        if self.layout not in LAYOUTS:
            raise ValueError(f"unknown layout {self.layout!r}")
        if self.method not in METHODS:
            raise ValueError(f"unknown sampling method {self.method!r}")
        if self.interp.kind == "reuse" and self.width != self.channels:
            raise ValueError("reuse-features needs a width-preserving block (mid == channels)")

    @property
    def width(self) -> int:
        return self.mid or self.channels


class _MaskedBase(nn.Module):
    kernel_sizes: tuple[int, ...] = ()
    groups: tuple[int, ...] = ()

    def _init_masking(self, cfg: BlockConfig, index: int, n_groups: int, gen) -> None:
        self.cfg = cfg
        self.index = index
        self.masked = cfg.method != "none"
        self.samplers = nn.ModuleList(
            Sampler(cfg.channels, cfg.method, 16 * index + j, cfg.init_logit, gen) for j in range(n_groups)
        ) if self.masked else nn.ModuleList()
        self.interps = nn.ModuleList(
            Interpolator(cfg.interp) for _ in self.kernel_sizes
        ) if self.masked else nn.ModuleList()

    def _masks(self, x: Tensor, ctx: ForwardCtx) -> list[Tensor]:
        n, _, h, w = x.shape
        grid = None
        if self._grid_on(ctx):
            grid = S.grid_prior_mask(h, w, self.cfg.grid_stride or 1, dtype=x.dtype)
        masks = []
        for j, smp in enumerate(self.samplers):
            m, conf = smp(x, ctx)
            if ctx.force_mask is not None:
                m = torch.full_like(m, ctx.force_mask)
            sample_mask = m
            if grid is not None:
                m = S.combine_masks(m, grid.expand(n, 1, h, w))
            convs = tuple(i for i, g in enumerate(self.groups) if g == j)
            ctx.records.append(MaskRecord(self.index, j, convs, m, sample_mask, conf))
            masks.append(m)
        return masks

    def _masked_conv(self, i: int, conv: "Conv", h: Tensor, m: Tensor, ctx: ForwardCtx) -> Tensor:
        y = conv.sparse(h, m) if ctx.mode == "infer" else conv(h)
        ys = m * y
        return self.interps[i](ys, m, prev=h, eps=self._eps(ctx))

    def _grid_on(self, ctx: ForwardCtx) -> bool:
        return bool(self.cfg.grid_stride and ctx.grid) or self.cfg.method == "grid"

    def _eps(self, ctx: ForwardCtx) -> float:
        # windows are never empty with the grid prior on, so drop the epsilon then
        return 0.0 if self._grid_on(ctx) else self.cfg.interp.eps

    def layer_specs(self, h: int, w: int, batch: int, prefix: str, binary: bool) -> list[LayerSpec]:
        specs = []
        chans = self.conv_channels()
        seen = set()
        for i, (k, (ci, co)) in enumerate(zip(self.kernel_sizes, chans)):
            name = f"{prefix}b{self.index}.conv{i + 1}"
            density = self.convs[i].weight.ne(0).float().mean().item()
            if not self.masked:
                specs.append(LayerSpec(name, k, ci, co, h, w, density=density, batch=batch))
                continue
            g = self.groups[i]
            first = g not in seen
            seen.add(g)
            radius = self.cfg.interp.radius if self.interps[i].uses_window else None
            nxt = i + 1
            if (binary and radius is not None and nxt < len(self.kernel_sizes)
                    and self.groups[nxt] == g and self.kernel_sizes[nxt] == 1):
                # a 1x1 conv sharing this mask only reads sampled positions
                radius = None
            specs.append(LayerSpec(
                name, k, ci, co, h, w,
                mask=f"{prefix}b{self.index}.m{g}",
                mask_channels=self.samplers[g].out_channels if first else 0,
                mask_c_in=self.cfg.channels,
                interp_radius=radius, density=density, batch=batch,
            ))
        return specs


class MaskedBottleneck(_MaskedBase):
    """1x1 -> 3x3 -> 1x1 residual block with one of three mask layouts."""

    kernel_sizes = (1, 3, 1)

    def __init__(self, cfg: BlockConfig, index: int, gen: torch.Generator | None = None):
        super().__init__()
        c, mid = cfg.channels, cfg.width
        self.convs = nn.ModuleList([Conv(c, mid, 1, gen), Conv(mid, mid, 3, gen), Conv(mid, c, 1, gen)])
        self.groups = {"single": (0, 0, 0), "two": (0, 1, 1), "three": (0, 1, 2)}[cfg.layout]
        self._init_masking(cfg, index, max(self.groups) + 1, gen)

    def conv_channels(self):
        c, mid = self.cfg.channels, self.cfg.width
        return [(c, mid), (mid, mid), (mid, c)]

    def forward(self, x: Tensor, ctx: ForwardCtx) -> Tensor:
        if not self.masked:
            h = F.relu(self.convs[0](x))
            h = F.relu(self.convs[1](h))
            return F.relu(x + self.convs[2](h))
        masks = self._masks(x, ctx)
        h = x
        for i, conv in enumerate(self.convs):
            out = self._masked_conv(i, conv, h, masks[self.groups[i]], ctx)
            h = F.relu(out) if i < 2 else out
        return F.relu(x + h)


class MaskedBasic(_MaskedBase):
    """3x3 -> 3x3 residual block with a separate mask per convolution."""

    kernel_sizes = (3, 3)
    groups = (0, 1)

    def __init__(self, cfg: BlockConfig, index: int, gen: torch.Generator | None = None):
        super().__init__()
        c = cfg.channels
        self.convs = nn.ModuleList([Conv(c, c, 3, gen), Conv(c, c, 3, gen)])
        self._init_masking(cfg, index, 2, gen)

    def conv_channels(self):
        c = self.cfg.channels
        return [(c, c), (c, c)]

    def forward(self, x: Tensor, ctx: ForwardCtx) -> Tensor:
        if not self.masked:
            return F.relu(x + self.convs[1](F.relu(self.convs[0](x))))
        masks = self._masks(x, ctx)
        h = F.relu(self._masked_conv(0, self.convs[0], x, masks[0], ctx))
        return F.relu(x + self._masked_conv(1, self.convs[1], h, masks[1], ctx))


@dataclass
class NetConfig:
    task: str = "segmentation"  # "segmentation" | "classification"
    in_channels: int = 3
    n_classes: int = 3
    width: int = 16
    depth: int = 3  # segmentation: blocks; classification: blocks per stage
    stages: int = 2  # classification only
    block: BlockConfig = field(default_factory=BlockConfig)
    seed: int = 0

    def __post_init__(self) -> None:
        if isinstance(self.block, dict):
            self.block = BlockConfig(**self.block)
        if self.task not in ("segmentation", "classification"):
            raise ValueError(f"unknown task {self.task!r}")

    def to_dict(self) -> dict:
        return asdict(self)


class ToyNet(nn.Module):
    def __init__(self, cfg: NetConfig):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(cfg.seed)
        c = cfg.width
        self.stem = Conv(cfg.in_channels, c, 3, gen)
        blocks = []
        if cfg.task == "segmentation":
            for i in range(cfg.depth):
                blocks.append(MaskedBottleneck(cfg.block, i, gen))
            self.head = Conv(c, cfg.n_classes, 1, gen)
            self.stage_of = [0] * cfg.depth
        else:
            plain = BlockConfig(**{**asdict(cfg.block), "method": "none", "interp": asdict(cfg.block.interp)})
            self.stage_of = []
            for s in range(cfg.stages):
                for j in range(cfg.depth):
                    bc = plain if j == 0 else cfg.block
                    blocks.append(MaskedBasic(bc, len(blocks), gen))
                    self.stage_of.append(s)
            self.head = Conv(c, cfg.n_classes, 1, gen)
        self.blocks = nn.ModuleList(blocks)

    def forward(self, x: Tensor, ctx: ForwardCtx | None = None) -> Tensor:
        ctx = ctx or ForwardCtx(mode="infer", tau=0.01)
        h = F.relu(self.stem(x))
        stage = 0
        for b, s in zip(self.blocks, self.stage_of):
            if s != stage:
                h = F.avg_pool2d(h, 2)
                stage = s
            h = b(h, ctx)
        if self.cfg.task == "classification":
            h = h.mean(dim=(2, 3), keepdim=True)
            return self.head(h)[:, :, 0, 0]
        return self.head(h)

    def sampler_parameters(self) -> list[nn.Parameter]:
        return [p for b in self.blocks for p in b.samplers.parameters()]

    def lambdas(self) -> list[tuple[int, int, float]]:
        """(block, conv, lambda) for every RBF interpolator."""
        out = []
        for b in self.blocks:
            for i, it in enumerate(b.interps):
                if it.kind == "rbf":
                    out.append((b.index, i, float(it.lam.detach())))
        return out

    def layer_specs(self, h: int, w: int, batch: int = 1, binary: bool = True) -> list[LayerSpec]:
        c = self.cfg.width
        dens = lambda conv: conv.weight.ne(0).float().mean().item()
        specs = [LayerSpec("stem", 3, self.cfg.in_channels, c, h, w, density=dens(self.stem), batch=batch)]
        stage = 0
        for b, s in zip(self.blocks, self.stage_of):
            if s != stage:
                h, w = h // 2, w // 2
                stage = s
            specs.extend(b.layer_specs(h, w, batch, "", binary))
        if self.cfg.task == "classification":
            h = w = 1
        specs.append(LayerSpec("head", 1, c, self.cfg.n_classes, h, w, density=dens(self.head), batch=batch))
        return specs


def build_toynet(task: str = "segmentation", width: int = 16, depth: int = 3, layout: str = "two",
                 kernel: InterpConfig | dict | None = None, **kw) -> ToyNet:
    block_kw = {k: kw.pop(k) for k in ("method", "grid_stride", "mid", "init_logit") if k in kw}
    interp = kernel if isinstance(kernel, InterpConfig) else InterpConfig(**(kernel or {}))
    block = BlockConfig(channels=width, layout=layout, interp=interp, **block_kw)
    return ToyNet(NetConfig(task=task, width=width, depth=depth, block=block, **kw))


def masks_by_key(records: list[MaskRecord], prefix: str = "") -> dict[str, Tensor]:
    return {f"{prefix}b{r.block}.m{r.group}": r.mask for r in records}
