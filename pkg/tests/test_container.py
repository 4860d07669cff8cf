import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from deltamerge.container import (Dtype, Tensor, TensorMap, check_homologous,
                                  load_container, save_container)
from deltamerge.errors import ContainerError, HomologyError
from helpers import raw_container


def _write(tmp_path, blob, name="m.ckpt"):
    path = tmp_path / name
    path.write_bytes(blob)
    return path


class TestLoad:
    def test_hand_encoded_f32_tensor(self, tmp_path):
        header = {"w": {"dtype": "F32", "shape": [2, 2], "data_offsets": [0, 16]}}
        data = struct.pack("<4f", 1.0, 2.0, 3.0, 4.0)
        tmap = load_container(_write(tmp_path, raw_container(header, data)))
        assert tmap.names() == ["w"]
        assert tmap["w"].dtype is Dtype.F32
        assert tmap["w"].shape == (2, 2)
        np.testing.assert_array_equal(tmap.array("w"), [[1.0, 2.0], [3.0, 4.0]])

    def test_empty_container(self, tmp_path):
        tmap = load_container(_write(tmp_path, raw_container("{}")))
        assert len(tmap) == 0

    def test_offsets_past_end_of_file(self, tmp_path):
        header = {"w": {"dtype": "F32", "shape": [2, 2], "data_offsets": [0, 16]}}
        path = _write(tmp_path, raw_container(header, b"\x00" * 8))
        with pytest.raises(ContainerError, match="truncated data section"):
            load_container(path)

    def test_overlapping_offsets(self, tmp_path):
        header = {"a": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]},
                  "b": {"dtype": "F32", "shape": [1], "data_offsets": [2, 6]}}
        path = _write(tmp_path, raw_container(header, b"\x00" * 6))
        with pytest.raises(ContainerError, match="overlapping"):
            load_container(path)

    def test_unknown_dtype_tag(self, tmp_path):
        header = {"w": {"dtype": "I8", "shape": [4], "data_offsets": [0, 4]}}
        path = _write(tmp_path, raw_container(header, b"\x00" * 4))
        with pytest.raises(ContainerError, match="unknown dtype tag 'I8'"):
            load_container(path)

    def test_header_length_past_eof(self, tmp_path):
        path = _write(tmp_path, (1000).to_bytes(8, "little") + b"{}")
        with pytest.raises(ContainerError, match="malformed header"):
            load_container(path)

    def test_file_shorter_than_prefix(self, tmp_path):
        with pytest.raises(ContainerError, match="malformed header"):
            load_container(_write(tmp_path, b"\x01\x02"))

    def test_json_garbage(self, tmp_path):
        with pytest.raises(ContainerError, match="malformed header"):
            load_container(_write(tmp_path, raw_container("not json")))

    def test_non_object_header(self, tmp_path):
        with pytest.raises(ContainerError, match="malformed header"):
            load_container(_write(tmp_path, raw_container("[1,2]")))

    def test_duplicate_names(self, tmp_path):
        header = ('{"w":{"dtype":"F32","shape":[1],"data_offsets":[0,4]},'
                  '"w":{"dtype":"F32","shape":[1],"data_offsets":[4,8]}}')
        path = _write(tmp_path, raw_container(header, b"\x00" * 8))
        with pytest.raises(ContainerError, match="duplicate"):
            load_container(path)

    def test_span_shape_mismatch(self, tmp_path):
        header = {"w": {"dtype": "F32", "shape": [3], "data_offsets": [0, 4]}}
        path = _write(tmp_path, raw_container(header, b"\x00" * 4))
        with pytest.raises(ContainerError, match="does not match"):
            load_container(path)

    def test_reversed_offsets(self, tmp_path):
        header = {"w": {"dtype": "F32", "shape": [1], "data_offsets": [8, 4]}}
        path = _write(tmp_path, raw_container(header, b"\x00" * 8))
        with pytest.raises(ContainerError, match="reversed"):
            load_container(path)

    def test_extra_entry_field_rejected(self, tmp_path):
        header = {"w": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4], "x": 1}}
        path = _write(tmp_path, raw_container(header, b"\x00" * 4))
        with pytest.raises(ContainerError, match="exactly"):
            load_container(path)

    def test_empty_shape_rejected(self, tmp_path):
        header = {"w": {"dtype": "F32", "shape": [], "data_offsets": [0, 4]}}
        path = _write(tmp_path, raw_container(header, b"\x00" * 4))
        with pytest.raises(ContainerError, match="shape"):
            load_container(path)

    def test_gaps_between_tensors_are_tolerated(self, tmp_path):
        header = {"a": {"dtype": "F32", "shape": [1], "data_offsets": [0, 4]},
                  "b": {"dtype": "F32", "shape": [1], "data_offsets": [8, 12]}}
        data = struct.pack("<f", 1.0) + b"\xff" * 4 + struct.pack("<f", 2.0)
        tmap = load_container(_write(tmp_path, raw_container(header, data)))
        assert float(tmap.array("b")[0]) == 2.0


class TestRoundTrip:
    def test_round_trip_identity_bytes(self, tmp_path):
        data = struct.pack("<4f", 1.0, 2.0, 3.0, 4.0)
        m = TensorMap([Tensor("w", Dtype.F32, (2, 2), data)])
        save_container(m, tmp_path / "a.ckpt")
        m2 = load_container(tmp_path / "a.ckpt")
        assert m2 == m
        assert m2["w"].data == data

    def test_empty_map_round_trip(self, tmp_path):
        save_container(TensorMap(), tmp_path / "e.ckpt")
        blob = (tmp_path / "e.ckpt").read_bytes()
        assert blob == (2).to_bytes(8, "little") + b"{}"
        assert len(load_container(tmp_path / "e.ckpt")) == 0

    def test_16bit_bit_patterns_survive(self, tmp_path):
        # random uint16 payloads include NaNs with odd payloads; the container
        # must carry them through untouched
        rng = np.random.default_rng(3)
        bits = rng.integers(0, 2**16, size=256, dtype=np.uint16).astype("<u2").tobytes()
        m = TensorMap([Tensor("h", Dtype.F16, (16, 16), bits),
                       Tensor("b", Dtype.BF16, (256,), bits)])
        save_container(m, tmp_path / "p.ckpt")
        m2 = load_container(tmp_path / "p.ckpt")
        assert m2["h"].data == bits
        assert m2["b"].data == bits

    def test_deterministic_serialization(self, tmp_path):
        rng = np.random.default_rng(4)
        m = TensorMap.from_arrays({"z": rng.normal(size=(3, 5)).astype(np.float32),
                                   "a": rng.normal(size=7).astype(np.float32)})
        save_container(m, tmp_path / "one.ckpt")
        save_container(m, tmp_path / "two.ckpt")
        assert (tmp_path / "one.ckpt").read_bytes() == (tmp_path / "two.ckpt").read_bytes()

    @settings(max_examples=40, deadline=None)
    @given(st.lists(
        st.tuples(st.text(alphabet=st.characters(codec="utf-8", exclude_characters="\x00"),
                          min_size=1, max_size=12),
                  st.sampled_from(list(Dtype)),
                  st.lists(st.integers(0, 4), min_size=1, max_size=3)),
        max_size=5, unique_by=lambda t: t[0]))
    def test_round_trip_property(self, tmp_path_factory, entries):
        rng = np.random.default_rng(0)
        tensors = []
        for name, dtype, shape in entries:
            nbytes = int(np.prod(shape)) * dtype.itemsize
            tensors.append(Tensor(name, dtype, tuple(shape),
                                  rng.bytes(nbytes)))
        m = TensorMap(tensors)
        path = tmp_path_factory.mktemp("rt") / "m.ckpt"
        save_container(m, path)
        assert load_container(path) == m


class TestTensor:
    def test_payload_length_checked(self):
        with pytest.raises(ContainerError, match="payload"):
            Tensor("w", Dtype.F32, (2,), b"\x00" * 4)

    def test_shape_non_empty(self):
        with pytest.raises(ContainerError, match="non-empty"):
            Tensor("w", Dtype.F32, (), b"")

    def test_negative_dim_rejected(self):
        with pytest.raises(ContainerError, match="non-negative"):
            Tensor("w", Dtype.F32, (-1,), b"")

    def test_f32_view_is_read_only(self):
        t = Tensor("w", Dtype.F32, (1,), struct.pack("<f", 1.5))
        arr = t.f32()
        assert not arr.flags.writeable

    def test_f16_widening_exact(self):
        vals = np.array([1.0, -2.5, 0.000061035156, 65504.0], dtype=np.float16)
        t = Tensor("h", Dtype.F16, (4,), vals.astype("<f2").tobytes())
        np.testing.assert_array_equal(t.f32(), vals.astype(np.float32))

    def test_bf16_narrow_rounds_to_nearest_even(self):
        # 1.0 + 2^-9 is halfway between bf16 neighbours 1.0 and 1.0078125;
        # round to even picks 1.0. Slightly above goes up.
        arr = np.array([1.0 + 2.0**-9, 1.0 + 2.0**-9 + 2.0**-16], dtype=np.float32)
        t = Tensor.from_f32("b", arr, Dtype.BF16)
        back = t.f32()
        assert back[0] == 1.0
        assert back[1] == np.float32(1.0078125)

    def test_bf16_overflow_to_inf(self):
        t = Tensor.from_f32("b", np.array([3.5e38], dtype=np.float32), Dtype.BF16)
        assert np.isinf(t.f32()[0])

    def test_zero_size_tensor(self, tmp_path):
        m = TensorMap([Tensor("w", Dtype.F32, (0, 4), b"")])
        save_container(m, tmp_path / "z.ckpt")
        assert load_container(tmp_path / "z.ckpt") == m


class TestTensorMap:
    def test_iteration_lexicographic(self):
        m = TensorMap.from_arrays({"b": np.zeros(1, np.float32),
                                   "a": np.zeros(1, np.float32),
                                   "a.1": np.zeros(1, np.float32)})
        assert [t.name for t in m] == ["a", "a.1", "b"]

    def test_duplicate_names_rejected(self):
        t = Tensor("w", Dtype.F32, (1,), b"\x00" * 4)
        with pytest.raises(ContainerError, match="duplicate"):
            TensorMap([t, t])


class TestCheckHomologous:
    def _base(self):
        return TensorMap.from_arrays({"w": np.zeros((2, 2), np.float32)})

    def test_ok(self):
        check_homologous(self._base(), [self._base(), self._base()])

    def test_missing_tensor(self):
        with pytest.raises(HomologyError, match="missing tensor 'w'"):
            check_homologous(self._base(), [TensorMap()])

    def test_extra_tensor(self):
        extra = TensorMap.from_arrays({"w": np.zeros((2, 2), np.float32),
                                       "v": np.zeros(1, np.float32)})
        with pytest.raises(HomologyError, match="extra tensor 'v'"):
            check_homologous(self._base(), [extra])

    def test_shape_mismatch(self):
        other = TensorMap.from_arrays({"w": np.zeros((2, 3), np.float32)})
        with pytest.raises(HomologyError, match="shape mismatch for tensor 'w'"):
            check_homologous(self._base(), [other])

    def test_dtype_mismatch(self):
        other = TensorMap.from_arrays({"w": np.zeros((2, 2), np.float32)}, Dtype.F16)
        with pytest.raises(HomologyError, match="dtype mismatch"):
            check_homologous(self._base(), [other])

    def test_order_insensitive(self):
        good = self._base()
        bad = TensorMap.from_arrays({"w": np.zeros((2, 3), np.float32)})
        for experts in ([good, bad], [bad, good]):
            with pytest.raises(HomologyError):
                check_homologous(self._base(), experts)
