"""Task-vector algebra: ``ft - pre`` deltas, applying them, LoRA composition."""

from __future__ import annotations

import fnmatch
import json
import warnings
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from .errors import (
    AlignmentError,
    EmptySelection,
    FingerprintMismatch,
    FingerprintMismatchWarning,
    InvariantViolation,
    MissingPair,
    RankMismatch,
)
from .tensorstore import Checkpoint, DType, Tensor

META_FINGERPRINT = "taskvec.base_fingerprint"
META_SOURCE_DTYPES = "taskvec.source_dtypes"


@dataclass(frozen=True)
class TensorFilter:
    """Which tensors take part in a task vector.

    A tensor is selected when it matches ``include_globs`` (empty matches
    everything), matches none of ``exclude_globs``, has at least
    ``min_rank`` dimensions and, with ``float_only``, a floating dtype.
    """

    include_globs: tuple[str, ...] = ()
    exclude_globs: tuple[str, ...] = ()
    min_rank: int = 2
    float_only: bool = True

    def matches_name(self, name: str) -> bool:
        if self.include_globs and not any(fnmatch.fnmatchcase(name, g) for g in self.include_globs):
            return False
        return not any(fnmatch.fnmatchcase(name, g) for g in self.exclude_globs)

    def selects(self, name: str, tensor: Tensor) -> bool:
        if not self.matches_name(name):
            return False
        if tensor.ndim < self.min_rank:
            return False
        return not self.float_only or tensor.dtype.is_float


@dataclass
class TaskVector:
    deltas: dict[str, np.ndarray]
    base_fingerprint: str
    source_dtypes: dict[str, DType] = field(default_factory=dict)

    def __post_init__(self):
        if not self.base_fingerprint:
            raise InvariantViolation("task vector needs a base fingerprint")
        self.deltas = {k: self.deltas[k] for k in sorted(self.deltas)}
        for name in self.deltas:
            self.source_dtypes.setdefault(name, DType.F32)

    def names(self) -> list[str]:
        return list(self.deltas)

    def to_checkpoint(self, dtype: DType = DType.F32) -> Checkpoint:
        """Persist as an ordinary checkpoint with provenance metadata."""
        meta = {
            META_FINGERPRINT: self.base_fingerprint,
            META_SOURCE_DTYPES: json.dumps(
                {k: self.source_dtypes[k].value for k in sorted(self.source_dtypes)},
                separators=(",", ":"),
            ),
        }
        return Checkpoint({k: Tensor.from_f64(v, dtype) for k, v in self.deltas.items()}, meta)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "TaskVector":
        fingerprint = ckpt.metadata.get(META_FINGERPRINT)
        if not fingerprint:
            raise InvariantViolation(f"checkpoint lacks {META_FINGERPRINT!r} metadata")
        dtypes = json.loads(ckpt.metadata.get(META_SOURCE_DTYPES, "{}"))
        return cls(
            {name: t.to_f64() for name, t in ckpt.items()},
            fingerprint,
            {k: DType.parse(v) for k, v in dtypes.items()},
        )


def select_names(ft: Checkpoint, pre: Checkpoint, filt: TensorFilter) -> list[str]:
    """Filter-selected names, checked for presence and shape in both."""
    selected = []
    for name in sorted(set(ft.names()) | set(pre.names())):
        tensor = ft.tensors.get(name) or pre.tensors.get(name)
        if not filt.selects(name, tensor):
            continue
        if name not in ft or name not in pre:
            side = "pre-trained" if name not in pre else "fine-tuned"
            raise AlignmentError(f"tensor {name!r} missing from the {side} checkpoint")
        if ft[name].shape != pre[name].shape:
            raise AlignmentError(
                f"tensor {name!r}: fine-tuned shape {ft[name].shape} vs pre-trained {pre[name].shape}"
            )
        selected.append(name)
    return selected


def diff(ft: Checkpoint, pre: Checkpoint, filt: TensorFilter | None = None) -> TaskVector:
    """ΔW = widen(ft) - widen(pre) for every selected tensor."""
    filt = filt or TensorFilter()
    names = select_names(ft, pre, filt)
    if not names:
        raise EmptySelection("the tensor filter selects nothing")
    deltas = {n: ft[n].to_f64() - pre[n].to_f64() for n in names}
    return TaskVector(deltas, pre.fingerprint(), {n: ft[n].dtype for n in names})


def add_delta(base: np.ndarray, delta: np.ndarray) -> np.ndarray:
    """``base + delta`` that leaves ``base`` untouched where delta is zero.

    Plain addition would turn a stored -0.0 into +0.0.
    """
    return np.where(delta != 0, base + delta, base)


def apply(pre: Checkpoint, tv: TaskVector, *, strict: bool = False) -> Checkpoint:
    """Add ``tv`` onto ``pre``; tensors without a delta are copied bit-exactly."""
    if tv.base_fingerprint != pre.fingerprint():
        msg = (
            f"task vector base {tv.base_fingerprint} does not match "
            f"checkpoint {pre.fingerprint()}"
        )
        if strict:
            raise FingerprintMismatch(msg)
        warnings.warn(msg, FingerprintMismatchWarning, stacklevel=2)
    out = dict(pre.tensors)
    for name, delta in tv.deltas.items():
        if name not in pre:
            raise AlignmentError(f"tensor {name!r} missing from the base checkpoint")
        if pre[name].shape != delta.shape:
            raise AlignmentError(
                f"tensor {name!r}: delta shape {delta.shape} vs base {pre[name].shape}"
            )
        merged = add_delta(pre[name].to_f64(), delta)
        out[name] = Tensor.from_f64(merged, tv.source_dtypes[name])
    return Checkpoint(out, dict(pre.metadata))


def lora_product(b: np.ndarray, a: np.ndarray) -> np.ndarray:
    """B·A accumulated term by term over the inner dimension in binary64.

    Matches a row-by-column loop ``sum_k B[i,k]*A[k,j]`` for k = 0..r-1.
    """
    b = np.asarray(b, dtype=np.float64)
    a = np.asarray(a, dtype=np.float64)
    out = np.zeros((b.shape[0], a.shape[1]), dtype=np.float64)
    for k in range(b.shape[1]):
        out += np.multiply.outer(b[:, k], a[k, :])
    return out


def compose_lora(a_factors: Mapping[str, np.ndarray], b_factors: Mapping[str, np.ndarray],
                 scale: float = 1.0, *, base_fingerprint: str = "lora") -> TaskVector:
    """Dense deltas ``scale * (B @ A)`` keyed by target tensor name."""
    missing = set(a_factors) ^ set(b_factors)
    if missing:
        raise MissingPair(f"adapter factors without a partner: {sorted(missing)}")
    deltas = {}
    for name in sorted(a_factors):
        a = np.asarray(a_factors[name], dtype=np.float64)
        b = np.asarray(b_factors[name], dtype=np.float64)
        if a.ndim != 2 or b.ndim != 2:
            raise RankMismatch(f"{name!r}: LoRA factors must be matrices")
        if b.shape[1] != a.shape[0]:
            raise RankMismatch(f"{name!r}: B is {b.shape}, A is {a.shape}")
        deltas[name] = float(scale) * lora_product(b, a)
    return TaskVector(deltas, base_fingerprint)


def split_adapter(adapter: Checkpoint, a_suffix: str = ".lora_A",
                  b_suffix: str = ".lora_B") -> tuple[dict[str, np.ndarray], dict[str, np.ndarray]]:
    """Split an adapter checkpoint into A/B factor maps keyed by target name.

    Tensor ``<target><a_suffix>`` holds A and ``<target><b_suffix>`` holds B.
    """
    a_factors, b_factors = {}, {}
    for name, tensor in adapter.items():
        if name.endswith(a_suffix):
            a_factors[name[: -len(a_suffix)]] = tensor.to_f64()
        elif name.endswith(b_suffix):
            b_factors[name[: -len(b_suffix)]] = tensor.to_f64()
        else:
            raise MissingPair(f"adapter tensor {name!r} has neither suffix {a_suffix!r} nor {b_suffix!r}")
    return a_factors, b_factors
