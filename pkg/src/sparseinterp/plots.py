"""PNG companions to the report CSVs."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _save(fig, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
    return path


def tradeoff(curves: dict[str, list[tuple[float, float]]], path: str | Path, ylabel: str = "mIoU (%)") -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    for name, pts in curves.items():
        pts = sorted(pts)
        ax.plot([f / 1e6 for f, _ in pts], [m for _, m in pts], "o-", label=name)
    ax.set_xlabel("MACs per image (M)")
    ax.set_ylabel(ylabel)
    ax.grid(alpha=0.3)
    ax.legend()
    return _save(fig, Path(path))


def scatter(points: list[dict], x: str, y: str, path: str | Path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.scatter([p[x] for p in points], [p[y] for p in points], s=14)
    ax.set_xlabel(x)
    ax.set_ylabel(y)
    if title:
        ax.set_title(title)
    ax.grid(alpha=0.3)
    return _save(fig, Path(path))


def block_bars(row: dict, path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(max(4, 0.6 * len(row)), 3.5))
    ax.bar(range(len(row)), list(row.values()))
    ax.set_xticks(range(len(row)), list(row), rotation=45, ha="right")
    ax.set_ylabel("sparsity")
    ax.set_ylim(0, 1)
    return _save(fig, Path(path))


def speedup(rows: list[dict], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    sp = [r["sparsity"] for r in rows]
    ax.plot(sp, [r["theo_speedup"] for r in rows], "o--", label="ledger")
    ax.plot(sp, [r["real_speedup"] for r in rows], "o-", label="measured")
    ax.set_xlabel("sparsity")
    ax.set_ylabel("speedup over dense")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(alpha=0.3)
    return _save(fig, Path(path))
