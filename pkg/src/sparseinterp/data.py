"""Procedural desk-scale tasks.

Every sample is a pure function of ``(seed, index)``; nothing is stored.

Segmentation: filled blobs (class 1) and one-pixel-wide line segments
(class 2) of equal brightness on a smooth textured background (class 0)
with additive noise.  Classes differ by local shape, not by colour, so
telling them apart needs spatial context, and the thin lines do not survive
downsampling.

Classification: a single shape (disc, square or ring) per canvas; the label
is its type.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

EVAL_OFFSET = 1_000_000_007


def _rng(seed: int, index: int) -> np.random.Generator:
    return np.random.default_rng([seed, index])


def _background(rng: np.random.Generator, size: int, channels: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    img = np.zeros((channels, size, size))
    for c in range(channels):
        for _ in range(3):
            fy, fx = rng.uniform(0.5, 3.0, 2)
            ph = rng.uniform(0, 2 * np.pi)
            img[c] += 0.25 * np.sin(2 * np.pi * (fy * yy + fx * xx) + ph)
    return img


def _line(lab: np.ndarray, rng: np.random.Generator, cls: int) -> None:
    size = lab.shape[0]
    y0, x0 = rng.uniform(2, size - 3, 2)
    ang = rng.uniform(0, np.pi)
    length = rng.uniform(8, 18)
    for t in np.linspace(-length / 2, length / 2, int(length * 3)):
        y = int(round(y0 + t * np.sin(ang)))
        x = int(round(x0 + t * np.cos(ang)))
        if 0 <= y < size and 0 <= x < size:
            lab[y, x] = cls


def _blob(lab: np.ndarray, rng: np.random.Generator, cls: int) -> None:
    size = lab.shape[0]
    yy, xx = np.mgrid[0:size, 0:size]
    cy, cx = rng.uniform(3, size - 4, 2)
    rad = rng.uniform(2.5, 5.5)
    if rng.random() < 0.5:
        inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad**2
    else:
        inside = (np.abs(yy - cy) <= rad * 0.85) & (np.abs(xx - cx) <= rad * 0.85)
    lab[inside] = cls


@dataclass
class SegmentationTask:
    seed: int = 0
    size: int = 32
    channels: int = 3
    noise: float = 0.35
    contrast: float = 1.0
    n_classes: int = 3

    def sample(self, index: int) -> tuple[np.ndarray, np.ndarray]:
        rng = _rng(self.seed, index)
        lab = np.zeros((self.size, self.size), dtype=np.int64)
        for _ in range(rng.integers(1, 3)):
            _blob(lab, rng, 1)
        for _ in range(rng.integers(1, 3)):
            _line(lab, rng, 2)
        img = _background(rng, self.size, self.channels)
        tint = rng.uniform(0.7, 1.0, self.channels)[:, None, None]
        img = img + self.contrast * tint * (lab > 0)[None]
        img = img + rng.normal(0, self.noise, img.shape)
        return img.astype(np.float32), lab

    def batch(self, indices) -> tuple[torch.Tensor, torch.Tensor]:
        xs, ys = zip(*(self.sample(int(i)) for i in indices))
        return torch.from_numpy(np.stack(xs)), torch.from_numpy(np.stack(ys))

    def eval_batch(self, indices) -> tuple[torch.Tensor, torch.Tensor]:
        return self.batch([EVAL_OFFSET + int(i) for i in indices])


@dataclass
class ClassificationTask:
    seed: int = 0
    size: int = 32
    channels: int = 3
    noise: float = 0.35
    contrast: float = 1.0
    n_classes: int = 3

    def sample(self, index: int) -> tuple[np.ndarray, int]:
        rng = _rng(self.seed, index)
        label = int(rng.integers(0, self.n_classes))
        yy, xx = np.mgrid[0 : self.size, 0 : self.size]
        cy, cx = rng.uniform(8, self.size - 9, 2)
        rad = rng.uniform(4.0, 7.0)
        if label == 0:
            inside = (yy - cy) ** 2 + (xx - cx) ** 2 <= rad**2
        elif label == 1:
            inside = (np.abs(yy - cy) <= rad * 0.85) & (np.abs(xx - cx) <= rad * 0.85)
        else:
            d2 = (yy - cy) ** 2 + (xx - cx) ** 2
            inside = (d2 <= rad**2) & (d2 >= (rad - 1.6) ** 2)
        img = _background(rng, self.size, self.channels)
        img = img + self.contrast * inside[None]
        img = img + rng.normal(0, self.noise, img.shape)
        return img.astype(np.float32), label

    def batch(self, indices) -> tuple[torch.Tensor, torch.Tensor]:
        xs, ys = zip(*(self.sample(int(i)) for i in indices))
        return torch.from_numpy(np.stack(xs)), torch.tensor(ys, dtype=torch.int64)

    def eval_batch(self, indices) -> tuple[torch.Tensor, torch.Tensor]:
        return self.batch([EVAL_OFFSET + int(i) for i in indices])


def make_task(name: str, seed: int = 0, **kw):
    if name == "segmentation":
        return SegmentationTask(seed=seed, **kw)
    if name == "classification":
        return ClassificationTask(seed=seed, **kw)
    raise ValueError(f"unknown task {name!r}")
