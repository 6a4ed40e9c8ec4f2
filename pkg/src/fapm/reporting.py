"""Diagnostics: score quantiles and block-averaged heatmaps of weight matrices."""

from __future__ import annotations

import enum
import os
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .criteria import score_fapm, score_relative
from .errors import GridTooLarge, InvalidConfig, NoFiniteValues

DEFAULT_QUANTILES = (0.0, 0.25, 0.5, 0.75, 1.0)


class HeatmapSource(str, enum.Enum):
    ABS_PRE = "abs_pre"
    ABS_DELTA = "abs_delta"
    REL_CHANGE = "rel_change"
    FAPM_SCORE = "fapm_score"


@dataclass
class HeatmapGrid:
    cells: np.ndarray
    source: HeatmapSource
    tensor_name: str

    @property
    def rows(self) -> int:
        return self.cells.shape[0]

    @property
    def cols(self) -> int:
        return self.cells.shape[1]


def score_quantiles(values: np.ndarray, qs: Sequence[float] = DEFAULT_QUANTILES) -> list[float]:
    """Linear-interpolation quantiles over the finite entries of ``values``."""
    flat = np.asarray(values, dtype=np.float64).ravel()
    finite = flat[np.isfinite(flat)]
    if finite.size == 0:
        raise NoFiniteValues("no finite values to take quantiles of")
    for q in qs:
        if not 0.0 <= q <= 1.0:
            raise InvalidConfig(f"quantile {q} outside [0, 1]")
    return [float(v) for v in np.quantile(finite, list(qs), method="linear")]


def sentinel_counts(values: np.ndarray) -> tuple[int, int]:
    """Number of +inf and -inf entries."""
    values = np.asarray(values)
    return int(np.count_nonzero(values == np.inf)), int(np.count_nonzero(values == -np.inf))


def _block_edges(length: int, blocks: int) -> np.ndarray:
    base, extra = divmod(length, blocks)
    sizes = np.full(blocks, base, dtype=np.int64)
    sizes[:extra] += 1
    return np.concatenate(([0], np.cumsum(sizes)[:-1]))


def clamp_sentinels(matrix: np.ndarray) -> np.ndarray:
    """Replace +/-inf with the finite max/min of the matrix (0 if none)."""
    m = np.asarray(matrix, dtype=np.float64)
    finite = np.isfinite(m)
    if finite.all():
        return m
    lo, hi = (float(m[finite].min()), float(m[finite].max())) if finite.any() else (0.0, 0.0)
    out = m.copy()
    out[out == np.inf] = hi
    out[out == -np.inf] = lo
    return out


def block_means(matrix: np.ndarray, grid: tuple[int, int], *, source: HeatmapSource | str = HeatmapSource.ABS_PRE,
                tensor_name: str = "") -> HeatmapGrid:
    """Average ``matrix`` over a ``gh x gw`` grid of contiguous blocks.

    Block sizes differ by at most one; leading blocks absorb the remainder.
    """
    m = clamp_sentinels(matrix)
    if m.ndim != 2:
        raise GridTooLarge(f"block means need a 2-D matrix, got shape {m.shape}")
    gh, gw = (int(g) for g in grid)
    rows, cols = m.shape
    if gh < 1 or gw < 1 or gh > rows or gw > cols:
        raise GridTooLarge(f"grid {gh}x{gw} does not fit a {rows}x{cols} matrix")
    r_edges, c_edges = _block_edges(rows, gh), _block_edges(cols, gw)
    sums = np.add.reduceat(np.add.reduceat(m, r_edges, axis=0), c_edges, axis=1)
    heights = np.diff(np.append(r_edges, rows))
    widths = np.diff(np.append(c_edges, cols))
    cells = sums / np.outer(heights, widths)
    return HeatmapGrid(cells, HeatmapSource(source), tensor_name)


def as_matrix(values: np.ndarray) -> np.ndarray:
    """View any tensor as 2-D: rank > 2 folds trailing axes, 1-D becomes a row."""
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 2:
        return values
    if values.ndim < 2:
        return values.reshape(1, -1)
    return values.reshape(values.shape[0], -1)


def heatmap_source(source: HeatmapSource | str, w_pre: np.ndarray, w_ft: np.ndarray | None = None) -> np.ndarray:
    source = HeatmapSource(source)
    w_pre = np.asarray(w_pre, dtype=np.float64)
    if source is HeatmapSource.ABS_PRE:
        return np.abs(w_pre)
    if w_ft is None:
        raise InvalidConfig(f"heatmap source {source.value} needs the fine-tuned tensor")
    delta = np.asarray(w_ft, dtype=np.float64) - w_pre
    if source is HeatmapSource.ABS_DELTA:
        return np.abs(delta)
    if source is HeatmapSource.REL_CHANGE:
        return score_relative(delta, w_pre)
    return score_fapm(delta, w_pre)


def heatmap(name: str, source: HeatmapSource | str, grid: tuple[int, int], w_pre: np.ndarray,
            w_ft: np.ndarray | None = None) -> HeatmapGrid:
    values = heatmap_source(source, w_pre, w_ft)
    return block_means(as_matrix(values), grid, source=source, tensor_name=name)


def to_pgm_bytes(grid: HeatmapGrid) -> bytes:
    """8-bit binary PGM, min-max normalised; a constant grid is all 128."""
    cells = grid.cells
    lo, hi = float(cells.min()), float(cells.max())
    if hi > lo:
        pixels = np.floor((cells - lo) / (hi - lo) * 255.0 + 0.5)
    else:
        pixels = np.full(cells.shape, 128.0)
    header = f"P5 {grid.cols} {grid.rows} 255\n".encode("ascii")
    return header + np.clip(pixels, 0, 255).astype(np.uint8).tobytes()


def to_csv_text(grid: HeatmapGrid) -> str:
    return "".join(",".join(repr(float(v)) for v in row) + "\n" for row in grid.cells)


def emit_heatmap(grid: HeatmapGrid, path: str | os.PathLike, fmt: str = "csv") -> None:
    if fmt == "csv":
        with open(path, "w", newline="") as fh:
            fh.write(to_csv_text(grid))
    elif fmt == "pgm":
        with open(path, "wb") as fh:
            fh.write(to_pgm_bytes(grid))
    else:
        raise InvalidConfig(f"unknown heatmap format {fmt!r}")


def read_csv_grid(path: str | os.PathLike) -> np.ndarray:
    with open(path) as fh:
        return np.array([[float(v) for v in line.split(",")] for line in fh if line.strip()])
