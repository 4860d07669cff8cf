"""Checkpoint container reading and writing.

File layout (everything little-endian):

    bytes 0..8      u64 N, byte length of the JSON header
    bytes 8..8+N    UTF-8 JSON object: name -> {"dtype": "F32"|"F16"|"BF16",
                                                "shape": [ints],
                                                "data_offsets": [begin, end]}
    bytes 8+N..     concatenated raw tensor payloads; data_offsets are
                    relative to byte 8+N and must be non-overlapping and
                    ascending in header order

Headers are always written with sorted keys and no insignificant whitespace,
so saving the same map twice produces identical bytes. Tensor payloads are
kept as raw bytes in memory: a round trip through save/load never rewrites
them, which keeps 16-bit NaN payloads and every other bit pattern intact.
Widening to float32 happens only when arithmetic needs it.
"""

from __future__ import annotations

import enum
import json
import math
import os
import tempfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator, Mapping

import numpy as np

from .errors import ContainerError, HomologyError

FORMAT_VERSION = "1"

_HEADER_LEN_BYTES = 8


class Dtype(enum.Enum):
    F32 = "F32"
    F16 = "F16"
    BF16 = "BF16"

    @property
    def itemsize(self) -> int:
        return 4 if self is Dtype.F32 else 2


def _widen_to_f32(dtype: Dtype, data: bytes, shape: tuple[int, ...]) -> np.ndarray:
    if dtype is Dtype.F32:
        return np.frombuffer(data, dtype="<f4").reshape(shape)
    if dtype is Dtype.F16:
        return np.frombuffer(data, dtype="<f2").astype(np.float32).reshape(shape)
    # BF16 is the top half of an F32 bit pattern; widening is exact.
    bits = np.frombuffer(data, dtype="<u2").astype(np.uint32) << np.uint32(16)
    return bits.view(np.float32).reshape(shape)


def _narrow_from_f32(arr: np.ndarray, dtype: Dtype) -> bytes:
    arr = np.ascontiguousarray(arr, dtype="<f4")
    if dtype is Dtype.F32:
        return arr.tobytes()
    if dtype is Dtype.F16:
        return arr.astype("<f2").tobytes()
    # BF16: round to nearest even on the top 16 bits; NaNs keep their sign,
    # exponent and top payload bits, with the quiet bit forced on.
    bits = arr.view(np.uint32)
    is_nan = (bits & np.uint32(0x7FFFFFFF)) > np.uint32(0x7F800000)
    rounded = (bits + np.uint32(0x7FFF) + ((bits >> np.uint32(16)) & np.uint32(1))) >> np.uint32(16)
    nan_bits = (bits >> np.uint32(16)) | np.uint32(0x0040)
    out = np.where(is_nan, nan_bits, rounded).astype("<u2")
    return out.tobytes()


@dataclass(frozen=True)
class Tensor:
    """One named dense tensor, payload kept as raw little-endian bytes."""

    name: str
    dtype: Dtype
    shape: tuple[int, ...]
    data: bytes

    def __post_init__(self) -> None:
        if not self.shape:
            raise ContainerError(f"tensor '{self.name}': shape must be non-empty")
        if any(not isinstance(d, int) or d < 0 for d in self.shape):
            raise ContainerError(f"tensor '{self.name}': shape must be non-negative integers")
        expected = math.prod(self.shape) * self.dtype.itemsize
        if len(self.data) != expected:
            raise ContainerError(
                f"tensor '{self.name}': payload is {len(self.data)} bytes, "
                f"expected {expected} for shape {list(self.shape)} {self.dtype.value}"
            )

    @property
    def size(self) -> int:
        return math.prod(self.shape)

    def f32(self) -> np.ndarray:
        """Widen to a float32 working array (read-only for F32 views)."""
        return _widen_to_f32(self.dtype, self.data, self.shape)

    @classmethod
    def from_f32(cls, name: str, arr: np.ndarray, dtype: Dtype = Dtype.F32) -> "Tensor":
        """Narrow a float32 working array into a stored tensor (round to nearest even)."""
        return cls(name=name, dtype=dtype, shape=tuple(int(d) for d in arr.shape),
                   data=_narrow_from_f32(arr, dtype))


class TensorMap:
    """Named tensor collection; iteration is always lexicographic by name."""

    def __init__(self, tensors: Iterable[Tensor] = ()) -> None:
        self._tensors: dict[str, Tensor] = {}
        for t in tensors:
            if t.name in self._tensors:
                raise ContainerError(f"duplicate tensor name '{t.name}'")
            self._tensors[t.name] = t

    @classmethod
    def from_arrays(cls, arrays: Mapping[str, np.ndarray],
                    dtypes: Mapping[str, Dtype] | Dtype = Dtype.F32) -> "TensorMap":
        tensors = []
        for name, arr in arrays.items():
            dt = dtypes if isinstance(dtypes, Dtype) else dtypes[name]
            tensors.append(Tensor.from_f32(name, np.asarray(arr, dtype=np.float32), dt))
        return cls(tensors)

    def names(self) -> list[str]:
        return sorted(self._tensors)

    def __iter__(self) -> Iterator[Tensor]:
        for name in self.names():
            yield self._tensors[name]

    def __len__(self) -> int:
        return len(self._tensors)

    def __contains__(self, name: str) -> bool:
        return name in self._tensors

    def __getitem__(self, name: str) -> Tensor:
        return self._tensors[name]

    def array(self, name: str) -> np.ndarray:
        return self._tensors[name].f32()

    def arrays(self) -> dict[str, np.ndarray]:
        return {name: self._tensors[name].f32() for name in self.names()}

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, TensorMap):
            return NotImplemented
        return self.names() == other.names() and all(
            self[n] == other[n] for n in self.names()
        )

    def __repr__(self) -> str:
        return f"TensorMap({len(self)} tensors)"


def load_container(path: str | os.PathLike) -> TensorMap:
    """Read a container file, validating the header and all data offsets."""
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER_LEN_BYTES:
        raise ContainerError("malformed header: file shorter than the 8-byte length prefix")
    header_len = int.from_bytes(raw[:_HEADER_LEN_BYTES], "little")
    data_start = _HEADER_LEN_BYTES + header_len
    if data_start > len(raw):
        raise ContainerError("malformed header: declared header length exceeds file size")

    def _reject_dups(pairs):
        d = {}
        for k, v in pairs:
            if k in d:
                raise ContainerError(f"malformed header: duplicate tensor name '{k}'")
            d[k] = v
        return d

    try:
        header = json.loads(raw[_HEADER_LEN_BYTES:data_start].decode("utf-8"),
                            object_pairs_hook=_reject_dups)
    except ContainerError:
        raise
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ContainerError(f"malformed header: {exc}") from exc
    if not isinstance(header, dict):
        raise ContainerError("malformed header: top level must be a JSON object")

    data_len = len(raw) - data_start
    tensors = []
    prev_end = 0
    for name, entry in header.items():  # header document order
        if not isinstance(entry, dict) or set(entry) != {"dtype", "shape", "data_offsets"}:
            raise ContainerError(
                f"malformed header: tensor '{name}' must have exactly "
                "dtype/shape/data_offsets"
            )
        try:
            dtype = Dtype(entry["dtype"])
        except ValueError:
            raise ContainerError(f"unknown dtype tag '{entry['dtype']}' for tensor '{name}'") from None
        shape = entry["shape"]
        if (not isinstance(shape, list) or not shape
                or any(not isinstance(d, int) or isinstance(d, bool) or d < 0 for d in shape)):
            raise ContainerError(f"malformed header: bad shape for tensor '{name}'")
        offs = entry["data_offsets"]
        if (not isinstance(offs, list) or len(offs) != 2
                or any(not isinstance(o, int) or isinstance(o, bool) or o < 0 for o in offs)):
            raise ContainerError(f"malformed header: bad data_offsets for tensor '{name}'")
        begin, end = offs
        if begin > end:
            raise ContainerError(f"malformed header: data_offsets reversed for tensor '{name}'")
        if end - begin != math.prod(shape) * dtype.itemsize:
            raise ContainerError(
                f"malformed header: data span of tensor '{name}' does not match its shape"
            )
        if end > data_len:
            raise ContainerError(f"truncated data section: tensor '{name}' ends past end of file")
        if begin < prev_end:
            raise ContainerError(f"overlapping or out-of-order offsets at tensor '{name}'")
        prev_end = end
        tensors.append(Tensor(name=name, dtype=dtype, shape=tuple(shape),
                              data=raw[data_start + begin:data_start + end]))
    return TensorMap(tensors)


def save_container(tmap: TensorMap, path: str | os.PathLike) -> None:
    """Write a container file atomically with a canonical (byte-stable) header."""
    header: dict[str, dict] = {}
    chunks: list[bytes] = []
    offset = 0
    for tensor in tmap:  # lexicographic, so offsets ascend in header order
        header[tensor.name] = {
            "dtype": tensor.dtype.value,
            "shape": list(tensor.shape),
            "data_offsets": [offset, offset + len(tensor.data)],
        }
        chunks.append(tensor.data)
        offset += len(tensor.data)
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    blob = len(header_bytes).to_bytes(8, "little") + header_bytes + b"".join(chunks)
    write_file_atomic(path, blob)


def write_file_atomic(path: str | os.PathLike, blob: bytes) -> None:
    """Write via a sibling temp file plus rename so readers never see partial output."""
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=path.name + ".")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(blob)
        os.replace(tmp, path)
    except BaseException:
        try:
            os.unlink(tmp)
        except OSError:
            pass
        raise


def check_homologous(base: TensorMap, experts: Iterable[TensorMap]) -> None:
    """Verify every expert has exactly the base's tensors with equal shape and dtype."""
    base_names = set(base.names())
    for i, expert in enumerate(experts):
        expert_names = set(expert.names())
        for name in sorted(base_names - expert_names):
            raise HomologyError(f"expert {i}: missing tensor '{name}'")
        for name in sorted(expert_names - base_names):
            raise HomologyError(f"expert {i}: unexpected extra tensor '{name}'")
        for name in base.names():
            b, e = base[name], expert[name]
            if b.shape != e.shape:
                raise HomologyError(
                    f"expert {i}: shape mismatch for tensor '{name}' "
                    f"({list(e.shape)} vs {list(b.shape)})"
                )
            if b.dtype is not e.dtype:
                raise HomologyError(
                    f"expert {i}: dtype mismatch for tensor '{name}' "
                    f"({e.dtype.value} vs {b.dtype.value})"
                )
