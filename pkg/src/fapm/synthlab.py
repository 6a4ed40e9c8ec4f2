"""Deterministic synthetic checkpoints and a two-task forgetting demo.

Every random draw comes from a splitmix64 stream seeded with
``seed XOR fnv1a(stream_name)``, so outputs depend only on the inputs.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from .criteria import Criterion
from .errors import InvalidSpec, SingularSystem
from .masking import check_sparsity
from .pipelines import PruneConfig, SweepRow, dumps, prune_merge, write_sweep_csv
from .rng import normal_block, tensor_seed, uniform_block
from .tensorstore import Checkpoint, DType, Tensor

# ---------------------------------------------------------------------------
# synthetic checkpoints
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Normal:
    mu: float = 0.0
    sigma: float = 1.0


@dataclass(frozen=True)
class Uniform:
    lo: float = 0.0
    hi: float = 1.0


@dataclass(frozen=True)
class Constant:
    value: float = 0.0


@dataclass(frozen=True)
class TensorSpec:
    name: str
    shape: tuple[int, ...]
    dtype: DType = DType.F32
    dist: Normal | Uniform | Constant = Normal()


@dataclass(frozen=True)
class SynthSpec:
    tensors: tuple[TensorSpec, ...]
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict) -> "SynthSpec":
        """Parse ``{"seed": int, "tensors": [{"name", "shape", "dtype", "dist"}]}``.

        ``dist`` is ``{"kind": "normal", "mu", "sigma"}``,
        ``{"kind": "uniform", "lo", "hi"}`` or ``{"kind": "constant", "value"}``.
        """
        try:
            tensors = []
            for entry in data["tensors"]:
                d = dict(entry.get("dist", {"kind": "normal"}))
                kind = d.pop("kind")
                dist = {"normal": Normal, "uniform": Uniform, "constant": Constant}[kind](**d)
                tensors.append(TensorSpec(entry["name"], tuple(entry["shape"]),
                                          DType.parse(entry.get("dtype", "F32")), dist))
            spec = cls(tuple(tensors), int(data.get("seed", 0)))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidSpec(f"bad synthetic spec: {exc!r}") from None
        spec.validate()
        return spec

    def validate(self) -> None:
        names = [t.name for t in self.tensors]
        if len(set(names)) != len(names):
            raise InvalidSpec("duplicate tensor names")
        if not 0 <= self.seed < 2**64:
            raise InvalidSpec(f"seed {self.seed} is not an unsigned 64-bit integer")
        for t in self.tensors:
            if any((not isinstance(d, int)) or d < 0 for d in t.shape):
                raise InvalidSpec(f"{t.name!r}: shape must be non-negative integers")
            if isinstance(t.dist, Normal) and not t.dist.sigma >= 0:
                raise InvalidSpec(f"{t.name!r}: sigma must be >= 0")
            if isinstance(t.dist, Uniform) and not t.dist.lo <= t.dist.hi:
                raise InvalidSpec(f"{t.name!r}: need lo <= hi")


def sample(dist: Normal | Uniform | Constant, n: int, seed: int) -> np.ndarray:
    if isinstance(dist, Normal):
        return dist.mu + dist.sigma * normal_block(seed, n)
    if isinstance(dist, Uniform):
        return dist.lo + (dist.hi - dist.lo) * uniform_block(seed, n)
    return np.full(n, float(dist.value))


def gen_tensor(spec: TensorSpec, seed: int) -> Tensor:
    n = math.prod(spec.shape)
    values = sample(spec.dist, n, tensor_seed(seed, spec.name)).reshape(spec.shape)
    return Tensor.from_f64(values, spec.dtype)


def gen_checkpoint(spec: SynthSpec) -> Checkpoint:
    spec.validate()
    return Checkpoint({t.name: gen_tensor(t, spec.seed) for t in spec.tensors})


def perturbed(base: Checkpoint, sigma: float, seed: int, *, names: Sequence[str] | None = None) -> Checkpoint:
    """``base`` plus N(0, sigma^2) noise on the chosen tensors (all by default)."""
    chosen = set(base.names() if names is None else names)
    out = {}
    for name, t in base.items():
        if name in chosen:
            noise = sigma * normal_block(tensor_seed(seed, name), t.size).reshape(t.shape)
            out[name] = Tensor.from_f64(t.to_f64() + noise, t.dtype)
        else:
            out[name] = t
    return Checkpoint(out, dict(base.metadata))


# ---------------------------------------------------------------------------
# two-task forgetting demo
# ---------------------------------------------------------------------------

_NOISE_SIGMA = 0.05
_SHIFT_SCALE = 1.0


@dataclass(frozen=True)
class DemoConfig:
    d_in: int = 64
    d_out: int = 16
    n_samples: int = 1024
    ridge_lambda: float = 1e-3
    gd_steps: int = 500
    learning_rate: float = 0.05
    sparsities: tuple[float, ...] = (0.5, 0.7, 0.9)
    criteria: tuple[Criterion, ...] = (Criterion.FAPM, Criterion.MAGNITUDE, Criterion.RELATIVE)
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "sparsities", tuple(check_sparsity(s) for s in self.sparsities))
        object.__setattr__(self, "criteria", tuple(Criterion(c) for c in self.criteria))
        if Criterion.WANDA in self.criteria:
            raise InvalidSpec("the demo has no activation norms; wanda is unavailable")
        for key in ("d_in", "d_out", "n_samples", "gd_steps"):
            if int(getattr(self, key)) <= 0:
                raise InvalidSpec(f"{key} must be positive")
        if self.n_samples < 2:
            raise InvalidSpec("n_samples must allow a train and a held-out half")
        if not self.ridge_lambda > 0 or not self.learning_rate > 0:
            raise InvalidSpec("ridge_lambda and learning_rate must be positive")
        if not 0 <= self.seed < 2**64:
            raise InvalidSpec(f"seed {self.seed} is not an unsigned 64-bit integer")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["sparsities"] = list(self.sparsities)
        d["criteria"] = [c.value for c in self.criteria]
        return d


@dataclass
class DemoPoint:
    criterion: str
    sparsity: float
    task_a_mse: float
    task_b_mse: float
    kept_sum_abs: float
    kept_sum_rel: float
    total_elements: int
    total_kept: int


@dataclass
class DemoReport:
    config: dict
    pre_task_a_mse: float
    pre_task_b_mse: float
    ft_task_a_mse: float
    ft_task_b_mse: float
    ridge_residual: float
    gd_monotone: bool
    points: list[DemoPoint] = field(default_factory=list)

    def point(self, criterion: Criterion | str, sparsity: float) -> DemoPoint:
        crit = Criterion(criterion).value
        for p in self.points:
            if p.criterion == crit and p.sparsity == sparsity:
                return p
        raise KeyError((crit, sparsity))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["points"] = [asdict(p) for p in self.points]
        return d

    def to_json(self) -> str:
        return dumps(self.to_dict())

    def write_csvs(self, prefix: str) -> list[str]:
        """One sweep-schema CSV per criterion, plus task MSE columns."""
        paths = []
        for crit in self.config["criteria"]:
            pts = [p for p in self.points if p.criterion == crit]
            rows = [SweepRow(p.sparsity, p.total_elements, p.total_kept, p.kept_sum_abs, p.kept_sum_rel, {})
                    for p in pts]
            path = f"{prefix}{crit}.csv"
            write_sweep_csv(rows, path, include_timing=False,
                            extra=[("task_a_mse", [p.task_a_mse for p in pts]),
                                   ("task_b_mse", [p.task_b_mse for p in pts])])
            paths.append(path)
        return paths


@dataclass
class Task:
    x_train: np.ndarray
    y_train: np.ndarray
    x_test: np.ndarray
    y_test: np.ndarray


def _gaussian(seed: int, stream: str, shape: tuple[int, ...]) -> np.ndarray:
    return normal_block(tensor_seed(seed, stream), math.prod(shape)).reshape(shape)


def make_tasks(cfg: DemoConfig) -> tuple[Task, Task, np.ndarray, np.ndarray]:
    """Two related linear-regression tasks and their ground-truth maps."""
    shape = (cfg.d_out, cfg.d_in)
    w_a = _gaussian(cfg.seed, "truth.a", shape) / math.sqrt(cfg.d_in)
    w_b = w_a + _SHIFT_SCALE * _gaussian(cfg.seed, "truth.b_shift", shape) / math.sqrt(cfg.d_in)
    half = cfg.n_samples // 2
    tasks = []
    for label, w in (("a", w_a), ("b", w_b)):
        x = _gaussian(cfg.seed, f"inputs.{label}", (cfg.n_samples, cfg.d_in))
        y = x @ w.T + _NOISE_SIGMA * _gaussian(cfg.seed, f"noise.{label}", (cfg.n_samples, cfg.d_out))
        tasks.append(Task(x[:half], y[:half], x[half:], y[half:]))
    return tasks[0], tasks[1], w_a, w_b


def mse(w: np.ndarray, x: np.ndarray, y: np.ndarray) -> float:
    r = x @ w.T - y
    return float(np.mean(r * r))


def ridge(x: np.ndarray, y: np.ndarray, lam: float) -> tuple[np.ndarray, float]:
    """Closed-form ridge fit; returns ``(W, relative normal-equation residual)``."""
    gram = x.T @ x + lam * np.eye(x.shape[1])
    rhs = x.T @ y
    try:
        wt = np.linalg.solve(gram, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularSystem(str(exc)) from None
    residual = float(np.max(np.abs(gram @ wt - rhs)) / np.max(np.abs(rhs)))
    if not residual <= 1e-8:
        raise SingularSystem(f"ridge residual {residual:.3e} exceeds 1e-8")
    return wt.T, residual


def gradient_descent(w0: np.ndarray, x: np.ndarray, y: np.ndarray, steps: int, lr: float) -> tuple[np.ndarray, list[float]]:
    """Full-batch GD on ``0.5 * mean_rows ||x W^T - y||^2``; returns the MSE history."""
    w = w0.copy()
    n = x.shape[0]
    history = []
    for _ in range(steps):
        r = x @ w.T - y
        history.append(float(np.mean(r * r)))
        w -= lr * (r.T @ x) / n
    history.append(mse(w, x, y))
    return w, history


def run_cf_demo(cfg: DemoConfig | None = None) -> DemoReport:
    cfg = cfg or DemoConfig()
    task_a, task_b, _, _ = make_tasks(cfg)
    w_pre, residual = ridge(task_a.x_train, task_a.y_train, cfg.ridge_lambda)
    w_ft, history = gradient_descent(w_pre, task_b.x_train, task_b.y_train, cfg.gd_steps, cfg.learning_rate)
    tail = history[len(history) // 10:]
    monotone = all(b <= a for a, b in zip(tail, tail[1:]))

    pre = Checkpoint({"w": Tensor.from_f64(w_pre, DType.F64)})
    ft = Checkpoint({"w": Tensor.from_f64(w_ft, DType.F64)})
    report = DemoReport(
        config=cfg.to_dict(),
        pre_task_a_mse=mse(w_pre, task_a.x_test, task_a.y_test),
        pre_task_b_mse=mse(w_pre, task_b.x_test, task_b.y_test),
        ft_task_a_mse=mse(w_ft, task_a.x_test, task_a.y_test),
        ft_task_b_mse=mse(w_ft, task_b.x_test, task_b.y_test),
        ridge_residual=residual,
        gd_monotone=monotone,
    )
    for crit in cfg.criteria:
        for s in cfg.sparsities:
            merged, run = prune_merge(pre, ft, PruneConfig(criterion=crit, sparsity=s, seed=cfg.seed))
            w = merged["w"].to_f64()
            t = run.tensors[0]
            report.points.append(DemoPoint(
                criterion=crit.value,
                sparsity=s,
                task_a_mse=mse(w, task_a.x_test, task_a.y_test),
                task_b_mse=mse(w, task_b.x_test, task_b.y_test),
                kept_sum_abs=t.sum_abs_kept,
                kept_sum_rel=t.sum_rel_kept_finite,
                total_elements=t.elements,
                total_kept=t.keep_count,
            ))
    return report
