"""RTEN container: golden bytes, roundtrips, and malformed-input rejection."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from flrp import tensorio

GOLDEN_SINGLE = (
    b"RTEN"
    + b"\x01\x00\x00\x00"  # version 1
    + b"\x01\x00\x00\x00"  # one entry
    + b"\x01" + b"w"  # name
    + b"\x01"  # dtype f32
    + b"\x01"  # rank 1
    + b"\x02\x00\x00\x00"  # extent 2
    + b"\x00\x00\x80\x3f"  # 1.0
    + b"\x00\x00\x00\x40"  # 2.0
)

GOLDEN_EMPTY = b"RTEN" + b"\x01\x00\x00\x00" + b"\x00\x00\x00\x00"


class TestSerialize:
    def test_golden_single_entry(self):
        data = tensorio.dumps({"w": np.array([1.0, 2.0], dtype=np.float32)})
        assert data == GOLDEN_SINGLE

    def test_golden_empty(self):
        data = tensorio.dumps({})
        assert data == GOLDEN_EMPTY
        assert len(data) == 12

    def test_roundtrip_3x3x2(self):
        rng = np.random.default_rng(7)
        t = rng.normal(size=(3, 3, 2)).astype(np.float32)
        out = tensorio.loads(tensorio.dumps({"t": t}))
        assert list(out) == ["t"]
        assert out["t"].shape == (3, 3, 2)
        assert np.array_equal(out["t"], t)

    def test_byte_length_formula(self):
        rng = np.random.default_rng(0)
        entries = {
            "a": rng.normal(size=(2, 3)).astype(np.float32),
            "bb": rng.normal(size=(4,)).astype(np.float32),
            "ccc": rng.normal(size=(2, 2, 2, 2)).astype(np.float32),
        }
        expected = 12 + sum(
            1 + len(name) + 1 + 1 + 4 * arr.ndim + 4 * arr.size for name, arr in entries.items()
        )
        assert len(tensorio.dumps(entries)) == expected

    def test_rejects_long_name(self):
        with pytest.raises(tensorio.TensorFormatError, match="bytes outside"):
            tensorio.dumps({"x" * 256: np.ones(1, np.float32)})

    def test_rejects_empty_name(self):
        with pytest.raises(tensorio.TensorFormatError):
            tensorio.dumps({"": np.ones(1, np.float32)})

    def test_rejects_duplicate_names(self):
        pairs = [("w", np.ones(1, np.float32)), ("w", np.ones(2, np.float32))]
        with pytest.raises(tensorio.TensorFormatError, match="duplicate"):
            tensorio.dumps(pairs)

    def test_rejects_nan(self):
        with pytest.raises(tensorio.TensorFormatError, match="non-finite"):
            tensorio.dumps({"x": np.array([np.nan], dtype=np.float32)})

    def test_preserves_entry_order(self):
        entries = [("z", np.ones(1, np.float32)), ("a", np.ones(1, np.float32))]
        assert list(tensorio.loads(tensorio.dumps(entries))) == ["z", "a"]


class TestDeserialize:
    def test_bad_magic(self):
        with pytest.raises(tensorio.TensorFormatError, match="bad magic"):
            tensorio.loads(b"XXXX" + GOLDEN_SINGLE[4:])

    def test_truncated_entry(self):
        # declared count 2 but bytes end after one entry
        data = bytearray(GOLDEN_SINGLE)
        data[8] = 2
        with pytest.raises(tensorio.TensorFormatError, match="truncated"):
            tensorio.loads(bytes(data))

    def test_truncated_payload(self):
        with pytest.raises(tensorio.TensorFormatError, match="truncated"):
            tensorio.loads(GOLDEN_SINGLE[:-2])

    def test_bad_version(self):
        data = bytearray(GOLDEN_EMPTY)
        data[4] = 9
        with pytest.raises(tensorio.TensorFormatError, match="version"):
            tensorio.loads(bytes(data))

    def test_bad_dtype(self):
        data = bytearray(GOLDEN_SINGLE)
        data[14] = 0x02
        with pytest.raises(tensorio.TensorFormatError, match="dtype"):
            tensorio.loads(bytes(data))

    def test_rank_out_of_range(self):
        rank5 = (
            b"RTEN\x01\x00\x00\x00\x01\x00\x00\x00"
            + b"\x01w\x01\x05"
            + b"\x01\x00\x00\x00" * 5
            + b"\x00\x00\x80\x3f"
        )
        with pytest.raises(tensorio.TensorFormatError, match="rank"):
            tensorio.loads(rank5)

    def test_zero_extent(self):
        data = bytearray(GOLDEN_SINGLE[:24])  # header + descriptor + extent, no payload
        data[16:20] = b"\x00\x00\x00\x00"
        with pytest.raises(tensorio.TensorFormatError, match="zero extent"):
            tensorio.loads(bytes(data))

    def test_non_finite_payload(self):
        data = bytearray(GOLDEN_SINGLE)
        data[-4:] = b"\x00\x00\x80\x7f"  # +inf
        with pytest.raises(tensorio.TensorFormatError, match="non-finite"):
            tensorio.loads(bytes(data))

    def test_trailing_bytes(self):
        with pytest.raises(tensorio.TensorFormatError, match="trailing"):
            tensorio.loads(GOLDEN_SINGLE + b"\x00")


@st.composite
def tensor_entries(draw):
    n = draw(st.integers(0, 4))
    entries = {}
    for i in range(n):
        name = f"t{i}_" + draw(st.text("abcdefgh", min_size=0, max_size=6))
        rank = draw(st.integers(1, 4))
        shape = tuple(draw(st.integers(1, 4)) for _ in range(rank))
        values = draw(
            st.lists(
                st.floats(-1e6, 1e6, width=32, allow_nan=False, allow_infinity=False),
                min_size=int(np.prod(shape)),
                max_size=int(np.prod(shape)),
            )
        )
        entries[name] = np.array(values, dtype=np.float32).reshape(shape)
    return entries


class TestRoundtripProperty:
    @settings(max_examples=60, deadline=None)
    @given(tensor_entries())
    def test_roundtrip_identity(self, entries):
        out = tensorio.loads(tensorio.dumps(entries))
        assert list(out) == list(entries)
        for name in entries:
            assert out[name].dtype == np.float32
            assert out[name].shape == entries[name].shape
            assert np.array_equal(out[name], entries[name])


class TestFiles:
    def test_file_roundtrip(self, tmp_path):
        entries = {"w": np.arange(6, dtype=np.float32).reshape(2, 3)}
        path = tmp_path / "params.rten"
        tensorio.write_rten(path, entries)
        assert path.read_bytes() == tensorio.dumps(entries)
        out = tensorio.read_rten(path)
        assert np.array_equal(out["w"], entries["w"])


class TestCheckTensor:
    def test_casts_to_float32(self):
        out = tensorio.check_tensor([1, 2, 3])
        assert out.dtype == np.float32 and out.shape == (3,)

    def test_rejects_rank_0_and_5(self):
        with pytest.raises(tensorio.TensorFormatError):
            tensorio.check_tensor(np.float32(1.0))
        with pytest.raises(tensorio.TensorFormatError):
            tensorio.check_tensor(np.zeros((1, 1, 1, 1, 1), np.float32))
