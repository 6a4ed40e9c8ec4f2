import math

import numpy as np
import pytest

from fapm.tensorstore import Checkpoint, DType, Tensor

# (significand bits incl. implicit, min normal exponent, max finite value)
_FORMATS = {
    DType.F16: (11, -14, (2 - 2**-10) * 2**15),
    DType.BF16: (8, -126, (2 - 2**-7) * 2**127),
    DType.F32: (24, -126, (2 - 2**-23) * 2**127),
}


def round_oracle(x: float, dtype: DType) -> float:
    """Round-to-nearest-even of a double into ``dtype`` by explicit scaling.

    The quantum is the format's ulp at ``x``; ``x / q`` is an exact power-of-two
    scaling, and Python's ``round`` is half-to-even.
    """
    if dtype is DType.F64 or math.isnan(x) or math.isinf(x) or x == 0:
        return x
    bits, emin, fmax = _FORMATS[dtype]
    _, e = math.frexp(abs(x))
    q = 2.0 ** (max(e - 1, emin) - (bits - 1))
    r = round(x / q) * q
    if abs(r) > fmax:
        return math.copysign(math.inf, x)
    return r


def ordered_bits(t: Tensor) -> np.ndarray:
    """Map storage bits onto integers whose difference counts ulps (+0 == -0)."""
    width = {DType.F64: np.uint64, DType.F32: np.uint32, DType.F16: np.uint16, DType.BF16: np.uint16}[t.dtype]
    nbits = np.dtype(width).itemsize * 8
    raw = t.data.view(width).astype(np.int64) if nbits < 64 else t.data.view(np.int64)
    if nbits < 64:
        sign = (raw >> (nbits - 1)) & 1
        mag = raw & ((1 << (nbits - 1)) - 1)
        return np.where(sign == 1, -mag, mag)
    return np.where(raw < 0, -(raw & 0x7FFFFFFFFFFFFFFF), raw)


def ulp_distance(a: Tensor, b: Tensor) -> np.ndarray:
    assert a.dtype is b.dtype and a.shape == b.shape
    if a.dtype is DType.F64:
        x, y = ordered_bits(a).astype(object), ordered_bits(b).astype(object)
        return np.abs(x - y)
    return np.abs(ordered_bits(a) - ordered_bits(b))


def random_pair(rng, shapes, dtype=DType.F32, delta_scale=1e-2, names=None):
    """(pre, ft) checkpoints where ft = pre + small noise."""
    names = names or [f"t{i:02d}" for i in range(len(shapes))]
    pre, ft = {}, {}
    for name, shape in zip(names, shapes):
        w = rng.standard_normal(shape)
        pre[name] = Tensor.from_f64(w, dtype)
        ft[name] = Tensor.from_f64(pre[name].to_f64() + delta_scale * rng.standard_normal(shape), dtype)
    return Checkpoint(pre), Checkpoint(ft)


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def worked_example():
    w_pre = np.array([[1.0, 0.1], [-2.0, 0.5]])
    delta = np.array([[0.2, 0.3], [0.1, -0.4]])
    return delta, w_pre


# acceptance criterion outcomes, printed at the end of the session
ACCEPTANCE: dict[int, tuple[str, bool, str]] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, ok, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"[{'PASS' if ok else 'FAIL'}] {number:2d}. {title}: {detail}")
