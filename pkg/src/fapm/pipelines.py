"""End-to-end flows: prune-and-merge, WiSE-FT, LoRA, sequential chains, sweeps.

Arithmetic is binary64 throughout; every output tensor is cast once, at the
end, to its storage dtype. At kept positions the merged value
``pre + (ft - pre)`` is exactly ``ft``, so it is taken from ``ft`` directly
rather than re-rounded through the delta.
"""

from __future__ import annotations

import csv
import enum
import json
import math
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from .criteria import ColumnNorms, Criterion, score, score_relative
from .errors import (
    AlignmentError,
    AlphaOutOfRange,
    EmptyChain,
    EmptySelection,
    InvalidConfig,
    MissingNorms,
)
from .masking import PruneMask, Scope, check_sparsity, keep_count, select_global, select_topk
from .reporting import DEFAULT_QUANTILES, score_quantiles, sentinel_counts
from .taskvector import TensorFilter, add_delta, compose_lora, select_names
from .tensorstore import Checkpoint, DType, Tensor, load_checkpoint, save_checkpoint

SWEEP_COLUMNS = ("sparsity", "total_elements", "total_kept", "sum_abs_kept", "sum_rel_kept_finite", "wall_ms")


class OneDimPolicy(str, enum.Enum):
    FT = "ft"
    PRE = "pre"


class BasePolicy(str, enum.Enum):
    PREVIOUS_MERGED = "previous_merged"
    ORIGINAL_PRE = "original_pre"


@dataclass(frozen=True)
class PruneConfig:
    criterion: Criterion = Criterion.FAPM
    sparsity: float = 0.9
    scope: Scope = Scope.LOCAL
    filter: TensorFilter = field(default_factory=TensorFilter)
    seed: int = 0
    norms_path: str | None = None
    lora_scale: float = 1.0
    one_dim_policy: OneDimPolicy = OneDimPolicy.FT

    def __post_init__(self):
        object.__setattr__(self, "criterion", Criterion(self.criterion))
        object.__setattr__(self, "scope", Scope(self.scope))
        object.__setattr__(self, "one_dim_policy", OneDimPolicy(self.one_dim_policy))
        object.__setattr__(self, "sparsity", check_sparsity(self.sparsity))
        if self.norms_path is not None and self.criterion is not Criterion.WANDA:
            raise InvalidConfig("norms_path is only meaningful for the wanda criterion")
        if not 0 <= int(self.seed) < 2**64:
            raise InvalidConfig(f"seed {self.seed} is not an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        return {
            "criterion": self.criterion.value,
            "sparsity": self.sparsity,
            "scope": self.scope.value,
            "include": list(self.filter.include_globs),
            "exclude": list(self.filter.exclude_globs),
            "min_rank": self.filter.min_rank,
            "float_only": self.filter.float_only,
            "seed": int(self.seed),
            "norms_path": self.norms_path,
            "lora_scale": self.lora_scale,
            "one_dim_policy": self.one_dim_policy.value,
        }


@dataclass
class TensorReport:
    name: str
    shape: list[int]
    dtype: str
    elements: int
    keep_count: int
    achieved_sparsity: float | None
    sum_abs_kept: float
    sum_rel_kept_finite: float
    score_quantiles: list[float] | None
    pos_inf: int
    neg_inf: int
    max_cast_error: float | None = None


@dataclass
class RunReport:
    pipeline: str
    settings: dict
    tensors: list[TensorReport] = field(default_factory=list)
    copied: dict[str, str] = field(default_factory=dict)
    wall_ms: float = 0.0

    @property
    def total_elements(self) -> int:
        return sum(t.elements for t in self.tensors)

    @property
    def total_kept(self) -> int:
        return sum(t.keep_count for t in self.tensors)

    @property
    def sum_abs_kept(self) -> float:
        return math.fsum(t.sum_abs_kept for t in self.tensors)

    @property
    def sum_rel_kept_finite(self) -> float:
        return math.fsum(t.sum_rel_kept_finite for t in self.tensors)

    def tensor(self, name: str) -> TensorReport:
        for t in self.tensors:
            if t.name == name:
                return t
        raise KeyError(name)

    def to_dict(self, include_timing: bool = True) -> dict:
        return {
            "pipeline": self.pipeline,
            "settings": self.settings,
            "quantile_levels": list(DEFAULT_QUANTILES),
            "tensors": [asdict(t) for t in self.tensors],
            "copied": dict(self.copied),
            "total_elements": self.total_elements,
            "total_kept": self.total_kept,
            "sum_abs_kept": self.sum_abs_kept,
            "sum_rel_kept_finite": self.sum_rel_kept_finite,
            "wall_ms": self.wall_ms if include_timing else None,
        }

    def to_json(self, include_timing: bool = True) -> str:
        return dumps(self.to_dict(include_timing))


def _jsonable(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return "inf" if obj > 0 else ("-inf" if obj < 0 else "nan")
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def dumps(obj) -> str:
    """Strict JSON with sorted keys; non-finite floats become strings."""
    return json.dumps(_jsonable(obj), sort_keys=True, indent=2, allow_nan=False) + "\n"


# ---------------------------------------------------------------------------
# per-tensor machinery
# ---------------------------------------------------------------------------

# A loader returns (pre-trained values, delta, merged value where kept),
# all binary64 and same-shaped.
Loader = Callable[[str], tuple[np.ndarray, np.ndarray, np.ndarray]]


def _map(fn, items: Sequence, threads: int):
    if threads == 1 or len(items) < 2:
        return [fn(x) for x in items]
    workers = threads if threads > 0 else (os.cpu_count() or 1)
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def kept_sums(delta: np.ndarray, w_pre: np.ndarray, keep: np.ndarray) -> tuple[float, float]:
    """Σ|δ| and the finite part of Σ|δ|/|w| over the kept entries."""
    d = delta[keep]
    rel = score_relative(d, w_pre[keep])
    return float(np.sum(np.abs(d))), float(np.sum(rel[np.isfinite(rel)]))


def _tensor_report(name: str, dtype: DType, delta: np.ndarray, w_pre: np.ndarray, scores: np.ndarray,
                   keep: np.ndarray) -> TensorReport:
    n = int(delta.size)
    k = int(np.count_nonzero(keep))
    finite = np.isfinite(scores)
    pos, neg = sentinel_counts(scores)
    sum_abs, sum_rel = kept_sums(delta, w_pre, keep)
    return TensorReport(
        name=name,
        shape=list(delta.shape),
        dtype=dtype.value,
        elements=n,
        keep_count=k,
        achieved_sparsity=(1 - k / n) if n else None,
        sum_abs_kept=sum_abs,
        sum_rel_kept_finite=sum_rel,
        score_quantiles=score_quantiles(scores) if finite.any() else None,
        pos_inf=pos,
        neg_inf=neg,
    )


def _cast(merged: np.ndarray, dtype: DType) -> tuple[Tensor, float]:
    out = Tensor.from_f64(merged, dtype)
    if merged.size == 0:
        return out, 0.0
    back = out.to_f64()
    with np.errstate(invalid="ignore"):
        err = np.where(back == merged, 0.0, np.abs(back - merged))
    return out, float(np.max(err))


def _scores(cfg: PruneConfig, name: str, w: np.ndarray, delta: np.ndarray, norms) -> np.ndarray:
    return score(cfg.criterion, name, delta, w, seed=cfg.seed, norms=norms)


def _resolve_norms(cfg: PruneConfig, norms: ColumnNorms | Mapping | None):
    if cfg.criterion is not Criterion.WANDA:
        return None
    if norms is not None:
        return norms
    if cfg.norms_path is None:
        raise MissingNorms("the wanda criterion needs activation norms (norms_path)")
    return ColumnNorms.from_checkpoint(load_checkpoint(cfg.norms_path))


def _prune_tensors(names: Sequence[str], load: Loader, dtypes: Mapping[str, DType], cfg: PruneConfig,
                   norms, threads: int, keep_masks: bool = False):
    """Score, select and merge each named tensor.

    Returns ``(tensors, reports, masks)``; masks only with ``keep_masks``.
    """
    global_keep = None
    if cfg.scope is Scope.GLOBAL:
        def scores_only(name):
            w, delta, _ = load(name)
            return _scores(cfg, name, w, delta, norms)

        pooled = dict(zip(names, _map(scores_only, names, threads)))
        global_keep = select_global(pooled, cfg.sparsity).bits
        del pooled

    def work(name):
        w, delta, target = load(name)
        scores = _scores(cfg, name, w, delta, norms)
        if global_keep is not None:
            keep = global_keep[name]
        else:
            keep = select_topk(scores, keep_count(delta.size, cfg.sparsity))
        report = _tensor_report(name, dtypes[name], delta, w, scores, keep)
        tensor, report.max_cast_error = _cast(np.where(keep, target, w), dtypes[name])
        return tensor, report, (keep if keep_masks else None)

    results = _map(work, list(names), threads)
    tensors = {n: r[0] for n, r in zip(names, results)}
    reports = [r[1] for r in results]
    masks = PruneMask(sparsity=cfg.sparsity, scope=cfg.scope)
    if keep_masks:
        for n, r in zip(names, results):
            masks.bits[n] = r[2]
            masks.keep_counts[n] = int(np.count_nonzero(r[2]))
    return tensors, reports, masks


def _pair_loader(pre: Checkpoint, ft: Checkpoint) -> Loader:
    def load(name):
        w = pre[name].to_f64()
        f = ft[name].to_f64()
        return w, f - w, f
    return load


def _copy_unselected(pre: Checkpoint, ft: Checkpoint, selected: Iterable[str], policy: OneDimPolicy,
                     out: dict, copied: dict) -> None:
    source, label = (ft, "ft") if policy is OneDimPolicy.FT else (pre, "pre")
    chosen = set(selected)
    for name in sorted(set(pre.names()) | set(ft.names())):
        if name in chosen:
            continue
        if name not in source:
            raise AlignmentError(
                f"unselected tensor {name!r} is missing from the {label} checkpoint named by the one-dim policy"
            )
        out[name] = source[name]
        copied[name] = label


def prune_merge(pre: Checkpoint, ft: Checkpoint, cfg: PruneConfig | None = None, *,
                norms: ColumnNorms | Mapping | None = None, threads: int = 1,
                keep_masks: bool = False, return_masks: bool = False):
    """Prune the task vector ``ft - pre`` under ``cfg`` and merge it onto ``pre``.

    Returns ``(checkpoint, report)``, or ``(checkpoint, report, masks)`` with
    ``return_masks``.
    """
    cfg = cfg or PruneConfig()
    t0 = time.perf_counter()
    norms = _resolve_norms(cfg, norms)
    names = select_names(ft, pre, cfg.filter)
    if not names:
        raise EmptySelection("the tensor filter selects nothing")
    dtypes = {n: ft[n].dtype for n in names}
    tensors, reports, masks = _prune_tensors(names, _pair_loader(pre, ft), dtypes, cfg, norms, threads,
                                             keep_masks or return_masks)
    report = RunReport("prune_merge", cfg.to_dict(), reports)
    _copy_unselected(pre, ft, names, cfg.one_dim_policy, tensors, report.copied)
    report.wall_ms = (time.perf_counter() - t0) * 1e3
    out = Checkpoint(tensors, dict(ft.metadata))
    return (out, report, masks) if return_masks else (out, report)


def wise_ft(pre: Checkpoint, ft: Checkpoint, alpha: float) -> Checkpoint:
    """Linear interpolation ``(1 - alpha) * pre + alpha * ft`` for shared tensors.

    Tensors only present in ``ft`` are copied unchanged.
    """
    alpha = float(alpha)
    if not 0.0 <= alpha <= 1.0:
        raise AlphaOutOfRange(f"alpha {alpha} outside [0, 1]")
    out = {}
    for name, tensor in ft.items():
        if name not in pre:
            out[name] = tensor
            continue
        if pre[name].shape != tensor.shape:
            raise AlignmentError(f"tensor {name!r}: fine-tuned {tensor.shape} vs pre-trained {pre[name].shape}")
        mixed = (1.0 - alpha) * pre[name].to_f64() + alpha * tensor.to_f64()
        out[name] = Tensor.from_f64(mixed, tensor.dtype)
    return Checkpoint(out, dict(ft.metadata))


def lora_prune_merge(pre: Checkpoint, a_factors: Mapping[str, np.ndarray], b_factors: Mapping[str, np.ndarray],
                     cfg: PruneConfig | None = None, *, norms: ColumnNorms | Mapping | None = None,
                     threads: int = 1):
    """Prune ``lora_scale * B @ A`` as a task vector and merge it onto ``pre``.

    Every adapter pair is merged. Pairs whose target name the filter's
    include/exclude globs reject are merged unpruned.
    """
    cfg = cfg or PruneConfig()
    t0 = time.perf_counter()
    norms = _resolve_norms(cfg, norms)
    tv = compose_lora(a_factors, b_factors, cfg.lora_scale, base_fingerprint=pre.fingerprint())
    for name, delta in tv.deltas.items():
        if name not in pre:
            raise AlignmentError(f"adapter targets {name!r}, which the base checkpoint lacks")
        if pre[name].shape != delta.shape:
            raise AlignmentError(f"adapter for {name!r} yields {delta.shape}, base tensor is {pre[name].shape}")

    pruned = [n for n in tv.names() if cfg.filter.matches_name(n)]
    dtypes = {n: pre[n].dtype for n in tv.names()}

    def load(name):
        w = pre[name].to_f64()
        delta = tv.deltas[name]
        return w, delta, add_delta(w, delta)

    out = dict(pre.tensors)
    tensors, reports, _ = _prune_tensors(pruned, load, dtypes, cfg, norms, threads)
    out.update(tensors)
    report = RunReport("lora_prune_merge", cfg.to_dict(), reports)
    for name in tv.names():
        if name not in tensors:
            w, _, target = load(name)
            out[name] = Tensor.from_f64(target, dtypes[name])
            report.copied[name] = "lora_unpruned"
    for name in pre.names():
        if name not in tv.deltas:
            report.copied[name] = "pre"
    report.wall_ms = (time.perf_counter() - t0) * 1e3
    return Checkpoint(out, dict(pre.metadata)), report


def sequential_merge(stages: Sequence[tuple[Checkpoint, PruneConfig]], base: Checkpoint,
                     base_policy: BasePolicy | str = BasePolicy.PREVIOUS_MERGED, *,
                     norms: ColumnNorms | Mapping | None = None, threads: int = 1):
    """Chain prune-and-merge over fine-tuning stages.

    ``previous_merged`` diffs stage i against the output of stage i-1.
    ``original_pre`` diffs every stage against ``base``, prunes each delta
    with ``base`` as the reference weights, and sums the pruned deltas.
    """
    base_policy = BasePolicy(base_policy)
    if not stages:
        raise EmptyChain("sequential merge needs at least one stage")
    if base_policy is BasePolicy.PREVIOUS_MERGED or len(stages) == 1:
        current, reports = base, []
        for ft, cfg in stages:
            current, report = prune_merge(current, ft, cfg, norms=norms, threads=threads)
            reports.append(report)
        return current, reports

    reports = []
    acc: dict[str, np.ndarray] = {}
    out_dtype: dict[str, DType] = {}
    for ft, cfg in stages:
        t0 = time.perf_counter()
        stage_norms = _resolve_norms(cfg, norms)
        names = select_names(ft, base, cfg.filter)
        if not names:
            raise EmptySelection("the tensor filter selects nothing")
        _, stage_reports, masks = _prune_tensors(names, _pair_loader(base, ft), {n: ft[n].dtype for n in names},
                                                 cfg, stage_norms, threads, keep_masks=True)
        for name in names:
            delta = ft[name].to_f64() - base[name].to_f64()
            kept = np.where(masks.bits[name], delta, 0.0)
            acc[name] = acc[name] + kept if name in acc else kept
        out_dtype.update({n: ft[n].dtype for n in names})
        for r in stage_reports:
            r.max_cast_error = None
        report = RunReport("sequential_merge", cfg.to_dict(), stage_reports)
        report.wall_ms = (time.perf_counter() - t0) * 1e3
        reports.append(report)

    last_ft, last_cfg = stages[-1]
    out = {}
    for name, total in sorted(acc.items()):
        tensor, err = _cast(add_delta(base[name].to_f64(), total), out_dtype[name])
        out[name] = tensor
        for r in reports[-1].tensors:
            if r.name == name:
                r.max_cast_error = err
    _copy_unselected(base, last_ft, acc, last_cfg.one_dim_policy, out, reports[-1].copied)
    return Checkpoint(out, dict(last_ft.metadata)), reports


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------


@dataclass
class SweepRow:
    sparsity: float
    total_elements: int
    total_kept: int
    sum_abs_kept: float
    sum_rel_kept_finite: float
    keep_counts: dict[str, int]
    wall_ms: float = 0.0
    masks: dict[str, np.ndarray] | None = None

    def csv_values(self, include_timing: bool = True) -> list[str]:
        return [repr(self.sparsity), str(self.total_elements), str(self.total_kept),
                repr(self.sum_abs_kept), repr(self.sum_rel_kept_finite),
                repr(round(self.wall_ms, 3)) if include_timing else "0"]


def _row_from_report(s: float, report: RunReport) -> SweepRow:
    return SweepRow(s, report.total_elements, report.total_kept, report.sum_abs_kept, report.sum_rel_kept_finite,
                    {t.name: t.keep_count for t in report.tensors}, report.wall_ms)


def sweep(pre: Checkpoint, ft: Checkpoint, criterion: Criterion | str, sparsities: Sequence[float],
          cfg: PruneConfig | None = None, *, norms: ColumnNorms | Mapping | None = None,
          write_dir: str | os.PathLike | None = None, threads: int = 1,
          keep_masks: bool = False) -> list[SweepRow]:
    """One row per sparsity, in input order.

    Scores are computed once per tensor and reused across sparsities. With
    ``write_dir`` each point runs a full :func:`prune_merge` and saves
    ``merged_s<sparsity>.ckpt``. ``keep_masks`` attaches each point's keep
    masks to its row.
    """
    cfg = replace(cfg or PruneConfig(), criterion=Criterion(criterion))
    sparsities = [check_sparsity(s) for s in sparsities]
    if not sparsities:
        return []
    if write_dir is not None:
        rows = []
        os.makedirs(write_dir, exist_ok=True)
        for s in sparsities:
            merged, report, masks = prune_merge(pre, ft, replace(cfg, sparsity=s), norms=norms,
                                                threads=threads, return_masks=True)
            save_checkpoint(merged, os.path.join(write_dir, f"merged_s{s!r}.ckpt"))
            rows.append(_row_from_report(s, report))
            if keep_masks:
                rows[-1].masks = masks.bits
        return rows

    norms = _resolve_norms(cfg, norms)
    names = select_names(ft, pre, cfg.filter)
    if not names:
        raise EmptySelection("the tensor filter selects nothing")
    load = _pair_loader(pre, ft)
    per_point: list[list[tuple[str, int, float, float]]] = [[] for _ in sparsities]
    point_masks: list[dict[str, np.ndarray]] = [{} for _ in sparsities]
    elapsed = [0.0] * len(sparsities)
    totals = {}

    if cfg.scope is Scope.GLOBAL:
        pooled = {}
        for name in names:
            w, delta, _ = load(name)
            pooled[name] = _scores(cfg, name, w, delta, norms)
            totals[name] = delta.size
        for i, s in enumerate(sparsities):
            t0 = time.perf_counter()
            bits = select_global(pooled, s).bits
            for name in names:
                w, delta, _ = load(name)
                per_point[i].append((name, int(np.count_nonzero(bits[name])), *kept_sums(delta, w, bits[name])))
                if keep_masks:
                    point_masks[i][name] = bits[name]
            elapsed[i] += time.perf_counter() - t0
    else:
        for name in names:
            w, delta, _ = load(name)
            scores = _scores(cfg, name, w, delta, norms)
            totals[name] = delta.size
            for i, s in enumerate(sparsities):
                t0 = time.perf_counter()
                keep = select_topk(scores, keep_count(delta.size, s))
                per_point[i].append((name, int(np.count_nonzero(keep)), *kept_sums(delta, w, keep)))
                if keep_masks:
                    point_masks[i][name] = keep
                elapsed[i] += time.perf_counter() - t0

    rows = []
    for s, entries, secs, masks in zip(sparsities, per_point, elapsed, point_masks):
        rows.append(SweepRow(
            sparsity=s,
            total_elements=int(sum(totals.values())),
            total_kept=sum(e[1] for e in entries),
            sum_abs_kept=math.fsum(e[2] for e in entries),
            sum_rel_kept_finite=math.fsum(e[3] for e in entries),
            keep_counts={e[0]: e[1] for e in entries},
            wall_ms=secs * 1e3,
            masks=masks if keep_masks else None,
        ))
    return rows


def write_sweep_csv(rows: Sequence[SweepRow], path: str | os.PathLike, *, include_timing: bool = True,
                    extra: Sequence[tuple[str, Sequence]] = ()) -> None:
    """CSV with the fixed sweep header, plus optional extra ``(column, values)``."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(list(SWEEP_COLUMNS) + [col for col, _ in extra])
        for i, row in enumerate(rows):
            writer.writerow(row.csv_values(include_timing) + [repr(vals[i]) for _, vals in extra])
