"""Exact-count keep masks from score matrices.

Selection keeps exactly ``k`` entries: the ``k`` largest scores, with ties
going to the lower flattened (row-major) index. That total order makes a
mask a pure function of its scores on every platform.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

import numpy as np

from .errors import KOutOfRange, ShapeMismatch, SparsityOutOfRange
from .tensorstore import Checkpoint, DType, Tensor

# below this many elements a stable full sort is used instead of selection
SORT_CUTOFF = 4096


class Scope(str, enum.Enum):
    LOCAL = "local"
    GLOBAL = "global"


@dataclass
class PruneMask:
    bits: dict[str, np.ndarray] = field(default_factory=dict)
    keep_counts: dict[str, int] = field(default_factory=dict)
    sparsity: float = 0.0
    scope: Scope = Scope.LOCAL

    def to_checkpoint(self) -> Checkpoint:
        """Masks as same-shape F32 tensors of 0.0/1.0."""
        return Checkpoint({k: Tensor.from_f64(v.astype(np.float64), DType.F32) for k, v in self.bits.items()})


def check_sparsity(s: float) -> float:
    s = float(s)
    if not 0.0 <= s <= 1.0:
        raise SparsityOutOfRange(f"sparsity {s} outside [0, 1]")
    return s


def keep_count(n: int, s: float) -> int:
    """``round_half_up((1 - s) * n)`` clamped to ``[0, n]``.

    ``s`` is taken at the decimal value of its shortest repr, so 0.55 means
    exactly 55/100 and ``(1 - 0.55) * 10`` rounds up to 5.
    """
    s = check_sparsity(s)
    exact = (1 - Fraction(repr(s))) * int(n)
    k = int((exact + Fraction(1, 2)) // 1)
    return max(0, min(int(n), k))


def _topk_flat(flat: np.ndarray, k: int, sort_cutoff: int = SORT_CUTOFF) -> np.ndarray:
    n = flat.size
    keep = np.zeros(n, dtype=bool)
    if k == 0:
        return keep
    if k == n:
        keep[:] = True
        return keep
    if n <= sort_cutoff:
        order = np.argsort(-flat, kind="stable")
        keep[order[:k]] = True
        return keep
    threshold = np.partition(flat, n - k)[n - k]
    np.greater(flat, threshold, out=keep)
    need = k - int(np.count_nonzero(keep))
    if need:
        keep[np.flatnonzero(flat == threshold)[:need]] = True
    return keep


def select_topk(scores: np.ndarray, k: int, *, sort_cutoff: int = SORT_CUTOFF) -> np.ndarray:
    """Boolean keep mask with exactly ``k`` True entries."""
    scores = np.asarray(scores, dtype=np.float64)
    if not 0 <= k <= scores.size:
        raise KOutOfRange(f"k={k} outside [0, {scores.size}]")
    return _topk_flat(scores.ravel(), int(k), sort_cutoff).reshape(scores.shape)


def select_local(scores: np.ndarray, s: float) -> np.ndarray:
    return select_topk(scores, keep_count(np.size(scores), s))


def select_global(score_maps: Mapping[str, np.ndarray], s: float) -> PruneMask:
    """One top-k over all tensors pooled in ascending name order.

    Ties go to the earlier tensor name, then the lower flat index.
    FAPM scores carry a per-matrix rescaling, so they are only weakly
    comparable across tensors.
    """
    s = check_sparsity(s)
    names = sorted(score_maps)
    sizes = [np.size(score_maps[n]) for n in names]
    total = int(sum(sizes))
    k = keep_count(total, s)
    if names:
        pooled = np.concatenate([np.asarray(score_maps[n], dtype=np.float64).ravel() for n in names])
    else:
        pooled = np.zeros(0)
    keep = _topk_flat(pooled, k)
    mask = PruneMask(sparsity=s, scope=Scope.GLOBAL)
    start = 0
    for name, size in zip(names, sizes):
        bits = keep[start:start + size].reshape(np.shape(score_maps[name]))
        mask.bits[name] = bits
        mask.keep_counts[name] = int(np.count_nonzero(bits))
        start += size
    return mask


def apply_mask(delta: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Kept entries unchanged, dropped entries exactly +0.0."""
    delta = np.asarray(delta, dtype=np.float64)
    if delta.shape != np.shape(mask):
        raise ShapeMismatch(f"delta shape {delta.shape} vs mask {np.shape(mask)}")
    return np.where(mask, delta, 0.0)
