"""Per-element pruning scores for task-vector matrices.

All scores are binary64. Sentinels replace division by zero: an entry with
zero delta scores 0, and a zero pre-trained weight receiving a nonzero
update scores -inf under ``fapm`` (pruned first) and +inf under
``relative`` (kept first). Finite inputs never produce a NaN score.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Mapping

import numpy as np

from .errors import EmptyTensor, InvalidNorms, MissingNorms, NormLengthMismatch, ShapeMismatch
from .rng import tensor_seed, uniform_block
from .tensorstore import Checkpoint, DType, Tensor

# bincount sums exact integers while partial sums stay below 2**53; with
# 27-bit limbs that allows 2**26 elements per chunk.
_EXACT_CHUNK = 1 << 26


class Criterion(str, enum.Enum):
    FAPM = "fapm"
    MAGNITUDE = "magnitude"
    RELATIVE = "relative"
    WANDA = "wanda"
    RANDOM = "random"


@dataclass
class ScoreMap:
    criterion: Criterion
    scores: dict[str, np.ndarray] = field(default_factory=dict)


def _exact_sum(values: np.ndarray) -> Fraction:
    """Exact sum of finite non-negative doubles as a Fraction.

    Each value is split into a 53-bit integer significand and an exponent;
    significands are summed per exponent in two integer-valued limbs, so
    every floating-point addition along the way is exact.
    """
    total = 0
    for start in range(0, values.size, _EXACT_CHUNK):
        chunk = values[start:start + _EXACT_CHUNK]
        mant, exp = np.frexp(chunk)
        sig = np.ldexp(mant, 53)
        hi = np.floor(np.ldexp(sig, -26))
        lo = sig - np.ldexp(hi, 26)
        emin = int(exp.min())
        bins = exp - emin
        hi_sums = np.bincount(bins, weights=hi)
        lo_sums = np.bincount(bins, weights=lo)
        for e, (h, l) in enumerate(zip(hi_sums.tolist(), lo_sums.tolist())):
            if h or l:
                limb = (int(h) << 26) + int(l)
                shift = e + emin - 53
                total += Fraction(limb << shift) if shift >= 0 else Fraction(limb, 1 << -shift)
    return Fraction(total)


def avg_abs(w: np.ndarray) -> float:
    """Mean of ``|w|``, correctly rounded to binary64."""
    w = np.asarray(w, dtype=np.float64)
    if w.size == 0:
        raise EmptyTensor("cannot average an empty matrix")
    a = np.abs(w).ravel()
    if not np.isfinite(a).all():
        return float(np.mean(a))
    return float(_exact_sum(a) / a.size)


def _check_shapes(delta: np.ndarray, w_pre: np.ndarray) -> None:
    if delta.shape != w_pre.shape:
        raise ShapeMismatch(f"delta shape {delta.shape} vs pre-trained {w_pre.shape}")


def score_fapm(delta: np.ndarray, w_pre: np.ndarray) -> np.ndarray:
    """``|δ| - avg(|w|) * |δ| / |w|`` elementwise, to within a few ulps."""
    delta = np.asarray(delta, dtype=np.float64)
    w_pre = np.asarray(w_pre, dtype=np.float64)
    _check_shapes(delta, w_pre)
    if delta.size == 0:
        return np.zeros(delta.shape)
    ad = np.abs(delta)
    aw = np.abs(w_pre)
    avg = avg_abs(w_pre)
    # |δ|·(|w| - avg)/|w|: the subtraction is exact when |w| is near avg,
    # so the score keeps full relative accuracy where the terms cancel
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        s = ad * ((aw - avg) / aw)
    s[(aw == 0) & (ad != 0)] = -np.inf
    s[ad == 0] = 0.0
    return s


def score_magnitude(delta: np.ndarray) -> np.ndarray:
    return np.abs(np.asarray(delta, dtype=np.float64))


def score_relative(delta: np.ndarray, w_pre: np.ndarray) -> np.ndarray:
    """``|δ| / |w|`` elementwise."""
    delta = np.asarray(delta, dtype=np.float64)
    w_pre = np.asarray(w_pre, dtype=np.float64)
    _check_shapes(delta, w_pre)
    ad = np.abs(delta)
    with np.errstate(divide="ignore", invalid="ignore", over="ignore"):
        s = ad / np.abs(w_pre)
    s[ad == 0] = 0.0
    return s


def score_wanda(delta: np.ndarray, norms: np.ndarray) -> np.ndarray:
    """``|δ[i, j]| * norms[j]``; ``norms`` runs along the second axis."""
    delta = np.asarray(delta, dtype=np.float64)
    norms = np.asarray(norms, dtype=np.float64)
    if delta.ndim < 2 or norms.ndim != 1 or norms.shape[0] != delta.shape[1]:
        raise NormLengthMismatch(
            f"norms of shape {norms.shape} do not match input dimension of {delta.shape}"
        )
    col = norms.reshape((1, -1) + (1,) * (delta.ndim - 2))
    return np.abs(delta) * col


def score_random(shape, global_seed: int, tensor_name: str) -> np.ndarray:
    """Uniform [0, 1) scores from the tensor's own splitmix64 stream."""
    shape = tuple(int(d) for d in shape)
    n = int(np.prod(shape, dtype=np.int64))
    return uniform_block(tensor_seed(global_seed, tensor_name), n).reshape(shape)


# ---------------------------------------------------------------------------
# activation column norms
# ---------------------------------------------------------------------------


@dataclass
class ColumnNorms:
    """Input-activation L2 norms per target tensor (consumed, never computed)."""

    norms: dict[str, np.ndarray]

    def __post_init__(self):
        for name, v in self.norms.items():
            v = np.asarray(v, dtype=np.float64)
            if v.ndim != 1:
                raise InvalidNorms(f"norms for {name!r} must be 1-D, got shape {v.shape}")
            if not np.isfinite(v).all() or (v < 0).any():
                raise InvalidNorms(f"norms for {name!r} must be finite and non-negative")
            self.norms[name] = v

    def get(self, name: str) -> np.ndarray:
        try:
            return self.norms[name]
        except KeyError:
            raise MissingNorms(f"no activation norms for tensor {name!r}") from None

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "ColumnNorms":
        return cls({name: t.to_f64() for name, t in ckpt.items()})

    def to_checkpoint(self) -> Checkpoint:
        return Checkpoint({k: Tensor.from_f64(v, DType.F32) for k, v in self.norms.items()})


def score(criterion: Criterion | str, name: str, delta: np.ndarray, w_pre: np.ndarray | None = None,
          *, seed: int = 0, norms: ColumnNorms | Mapping[str, np.ndarray] | None = None) -> np.ndarray:
    """Dispatch to one criterion for the tensor called ``name``."""
    criterion = Criterion(criterion)
    if criterion is Criterion.FAPM:
        return score_fapm(delta, w_pre)
    if criterion is Criterion.MAGNITUDE:
        return score_magnitude(delta)
    if criterion is Criterion.RELATIVE:
        return score_relative(delta, w_pre)
    if criterion is Criterion.WANDA:
        if norms is None:
            raise MissingNorms("the wanda criterion needs activation norms")
        if isinstance(norms, ColumnNorms):
            column = norms.get(name)
        elif name in norms:
            column = norms[name]
        else:
            raise MissingNorms(f"no activation norms for tensor {name!r}")
        return score_wanda(delta, column)
    return score_random(np.shape(delta), seed, name)
