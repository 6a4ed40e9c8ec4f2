import json
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fapm.errors import InvariantViolation, MalformedHeader, OffsetOverlap, TruncatedData, UnknownDType
from fapm.tensorstore import (
    Checkpoint,
    DType,
    Tensor,
    cast_tensor,
    from_f64,
    load_checkpoint,
    save_checkpoint,
    to_f64,
)

from conftest import round_oracle


def raw_file(path, header: dict | bytes, data: bytes = b"", declared_len=None):
    body = header if isinstance(header, bytes) else json.dumps(header).encode()
    n = len(body) if declared_len is None else declared_len
    path.write_bytes(struct.pack("<Q", n) + body + data)
    return path


class TestRoundtrip:
    def test_single_f32_tensor(self, tmp_path):
        path = raw_file(tmp_path / "one.ckpt",
                        {"w": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]}},
                        np.array([1.0, 2.0], dtype="<f4").tobytes())
        ckpt = load_checkpoint(path)
        assert ckpt.names() == ["w"]
        assert ckpt["w"].dtype is DType.F32
        assert ckpt["w"].to_f64().tolist() == [1.0, 2.0]

    @pytest.mark.parametrize("dtype", list(DType))
    @pytest.mark.parametrize("use_mmap", [False, True])
    def test_all_dtypes_bit_exact(self, tmp_path, rng, dtype, use_mmap):
        raw = rng.integers(0, 256, size=6 * 5 * dtype.itemsize, dtype=np.uint8)
        data = raw.view(dtype.storage).reshape(6, 5)
        ckpt = Checkpoint({"b": Tensor(dtype, data), "a": Tensor.from_f64(rng.standard_normal(3), dtype),
                           "zero": Tensor(dtype, np.zeros((0, 4), dtype=dtype.storage))},
                          {"note": "x"})
        save_checkpoint(ckpt, tmp_path / "c.ckpt")
        back = load_checkpoint(tmp_path / "c.ckpt", use_mmap=use_mmap)
        assert back.bit_equal(ckpt)
        assert back.names() == ["a", "b", "zero"]

    def test_two_saves_byte_identical(self, tmp_path, rng):
        ckpt = Checkpoint.from_arrays({"x": rng.standard_normal((3, 3)), "y": rng.standard_normal(4)}, DType.BF16)
        save_checkpoint(ckpt, tmp_path / "1.ckpt")
        save_checkpoint(ckpt, tmp_path / "2.ckpt")
        assert (tmp_path / "1.ckpt").read_bytes() == (tmp_path / "2.ckpt").read_bytes()

    def test_insertion_order_does_not_matter(self, tmp_path):
        a = Checkpoint.from_arrays({"b": np.ones(2), "a": np.zeros(2)})
        b = Checkpoint.from_arrays({"a": np.zeros(2), "b": np.ones(2)})
        save_checkpoint(a, tmp_path / "a.ckpt")
        save_checkpoint(b, tmp_path / "b.ckpt")
        assert (tmp_path / "a.ckpt").read_bytes() == (tmp_path / "b.ckpt").read_bytes()

    def test_empty_checkpoint(self, tmp_path):
        save_checkpoint(Checkpoint(), tmp_path / "e.ckpt")
        back = load_checkpoint(tmp_path / "e.ckpt")
        assert len(back) == 0 and back.metadata == {}

    def test_layout_is_contiguous_ascending(self, tmp_path):
        ckpt = Checkpoint.from_arrays({"zz": np.ones(3), "aa": np.ones((2, 2))}, DType.F16)
        save_checkpoint(ckpt, tmp_path / "l.ckpt")
        raw = (tmp_path / "l.ckpt").read_bytes()
        (n,) = struct.unpack("<Q", raw[:8])
        assert (8 + n) % 8 == 0
        header = json.loads(raw[8:8 + n])
        assert list(header) == ["aa", "zz"]
        assert header["aa"]["data_offsets"] == [0, 8]
        assert header["zz"]["data_offsets"] == [8, 14]
        assert len(raw) == 8 + n + 14

    @settings(max_examples=40, deadline=None)
    @given(st.lists(st.tuples(st.sampled_from(list(DType)),
                              st.lists(st.integers(0, 4), min_size=0, max_size=3)), max_size=5),
           st.integers(0, 2**32))
    def test_roundtrip_property(self, tmp_path_factory, specs, seed):
        rng = np.random.default_rng(seed)
        tensors = {}
        for i, (dtype, shape) in enumerate(specs):
            count = math.prod(shape)
            raw = rng.integers(0, 256, size=count * dtype.itemsize, dtype=np.uint8)
            tensors[f"t{i}"] = Tensor(dtype, raw.view(dtype.storage).reshape(shape))
        ckpt = Checkpoint(tensors)
        path = tmp_path_factory.mktemp("rt") / "c.ckpt"
        save_checkpoint(ckpt, path)
        assert load_checkpoint(path).bit_equal(ckpt)


class TestMalformed:
    def test_zero_header_length(self, tmp_path):
        with pytest.raises(MalformedHeader):
            load_checkpoint(raw_file(tmp_path / "z.ckpt", b"{}", declared_len=0))

    def test_oversized_header_length(self, tmp_path):
        with pytest.raises(MalformedHeader):
            load_checkpoint(raw_file(tmp_path / "o.ckpt", b"{}", declared_len=10_000))

    def test_bad_json(self, tmp_path):
        with pytest.raises(MalformedHeader):
            load_checkpoint(raw_file(tmp_path / "j.ckpt", b"{not json"))

    def test_short_file(self, tmp_path):
        (tmp_path / "s.ckpt").write_bytes(b"\x01\x00")
        with pytest.raises(MalformedHeader):
            load_checkpoint(tmp_path / "s.ckpt")

    def test_duplicate_names(self, tmp_path):
        body = b'{"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},"w":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}'
        with pytest.raises(MalformedHeader):
            load_checkpoint(raw_file(tmp_path / "d.ckpt", body, bytes(8)))

    def test_size_mismatch(self, tmp_path):
        header = {"w": {"dtype": "F32", "shape": [3], "data_offsets": [0, 8]}}
        with pytest.raises(MalformedHeader):
            load_checkpoint(raw_file(tmp_path / "m.ckpt", header, bytes(12)))

    def test_float_in_shape(self, tmp_path):
        header = {"w": {"dtype": "F32", "shape": [2.0], "data_offsets": [0, 8]}}
        with pytest.raises(MalformedHeader):
            load_checkpoint(raw_file(tmp_path / "f.ckpt", header, bytes(8)))

    def test_overlapping_offsets(self, tmp_path):
        header = {
            "a": {"dtype": "F32", "shape": [2], "data_offsets": [0, 8]},
            "b": {"dtype": "F32", "shape": [2], "data_offsets": [4, 12]},
        }
        with pytest.raises(OffsetOverlap):
            load_checkpoint(raw_file(tmp_path / "ov.ckpt", header, bytes(12)))

    def test_truncated_data(self, tmp_path):
        header = {"a": {"dtype": "F64", "shape": [4], "data_offsets": [0, 32]}}
        with pytest.raises(TruncatedData):
            load_checkpoint(raw_file(tmp_path / "t.ckpt", header, bytes(31)))

    def test_unknown_dtype(self, tmp_path):
        header = {"a": {"dtype": "I8", "shape": [4], "data_offsets": [0, 4]}}
        with pytest.raises(UnknownDType):
            load_checkpoint(raw_file(tmp_path / "u.ckpt", header, bytes(4)))

    def test_reserved_name(self):
        with pytest.raises(InvariantViolation):
            Checkpoint({"__metadata__": Tensor.from_f64([1.0])})

    def test_storage_mismatch(self):
        with pytest.raises(InvariantViolation):
            Tensor(DType.F16, np.zeros(2, dtype=np.float32))


class TestCast:
    def test_one_is_exact_in_f16(self):
        out = cast_tensor(np.array([1.0], dtype="<f4"), DType.F32, DType.F16)
        assert out.dtype == np.dtype("<f2") and float(out[0]) == 1.0

    def test_bytes_input(self):
        out = cast_tensor(np.array([1.5, -2.0], dtype="<f4").tobytes(), DType.F32, DType.F64)
        assert out.tolist() == [1.5, -2.0]

    def test_bad_buffer_length(self):
        with pytest.raises(InvariantViolation):
            cast_tensor(b"\x00\x00\x00", DType.F32, DType.F16)

    def test_f32_to_f16_against_bit_oracle(self, rng):
        x = (rng.standard_normal(5000) * 10.0 ** rng.uniform(-7, 4.5, 5000)).astype(np.float32)
        got = to_f64(cast_tensor(x, DType.F32, DType.F16), DType.F16)
        want = [round_oracle(float(v), DType.F16) for v in x]
        assert got.tolist() == want
        # struct's half packing is an independent IEEE implementation
        finite = np.abs(x) < 65504
        assert got[finite].tolist() == [struct.unpack("<e", struct.pack("<e", float(v)))[0] for v in x[finite]]

    def test_f16_roundtrip_relative_error(self, rng):
        x = (rng.uniform(2**-14, 60000, 10000) * rng.choice([-1, 1], 10000)).astype(np.float32)
        back = cast_tensor(cast_tensor(x, DType.F32, DType.F16), DType.F16, DType.F32)
        rel = np.abs(back.astype(np.float64) - x) / np.abs(x)
        assert rel.max() <= 2.0**-10

    def test_f64_to_bf16_against_oracle(self, rng):
        x = rng.standard_normal(5000) * 10.0 ** rng.uniform(-42, 38, 5000)
        got = to_f64(from_f64(x, DType.BF16), DType.BF16)
        assert got.tolist() == [round_oracle(float(v), DType.BF16) for v in x]

    def test_bf16_no_double_rounding(self):
        # 1 + 2**-8 + 2**-30 is just above a bf16 tie; rounding through F32
        # first would land on the tie and round to even (1.0)
        x = np.array([1 + 2**-8 + 2**-30])
        assert to_f64(from_f64(x, DType.BF16), DType.BF16)[0] == 1 + 2**-7

    def test_bf16_roundtrip_all_finite_patterns(self):
        bits = np.arange(1 << 16, dtype=np.uint32).astype(np.uint16)
        exp = (bits >> 7) & 0xFF
        finite = bits[exp != 0xFF]
        wide = cast_tensor(finite, DType.BF16, DType.F32)
        assert np.array_equal(cast_tensor(wide, DType.F32, DType.BF16), finite)

    def test_f16_roundtrip_all_finite_patterns(self):
        bits = np.arange(1 << 16, dtype=np.uint32).astype(np.uint16)
        finite = bits[((bits >> 10) & 0x1F) != 0x1F].view("<f2")
        wide = cast_tensor(finite, DType.F16, DType.F64)
        assert np.array_equal(cast_tensor(wide, DType.F64, DType.F16).view(np.uint16), finite.view(np.uint16))

    @pytest.mark.parametrize("dtype, big", [(DType.F16, 1e5), (DType.BF16, 1e39)])
    def test_overflow_saturates(self, dtype, big):
        got = to_f64(from_f64(np.array([big, -big]), dtype), dtype)
        assert got.tolist() == [math.inf, -math.inf]

    def test_bf16_nan_stays_nan(self):
        assert math.isnan(to_f64(from_f64(np.array([math.nan]), DType.BF16), DType.BF16)[0])

    def test_f32_widening_exact(self, rng):
        x = rng.standard_normal(1000).astype(np.float32)
        assert np.array_equal(cast_tensor(x, DType.F32, DType.F64).astype(np.float32), x)


class TestFingerprint:
    def test_depends_on_header_only(self):
        a = Checkpoint.from_arrays({"w": np.ones((2, 2))})
        b = Checkpoint.from_arrays({"w": np.zeros((2, 2))})
        c = Checkpoint.from_arrays({"w": np.zeros((2, 3))})
        assert a.fingerprint() == b.fingerprint() != c.fingerprint()
        assert len(a.fingerprint()) == 16
