"""Builders for synthetic checkpoints used across the test suite."""

import json

import numpy as np

from deltamerge.container import Dtype, TensorMap

# Lattice values (multiples of 2^-10, bounded magnitude) stay exact under
# float32 subtraction and addition, so delta round trips like
# base + (expert - base) are bit-identities on them.
LATTICE_STEP = 2.0 ** -10


def lattice_array(rng: np.random.Generator, shape, span: int = 2048) -> np.ndarray:
    return (rng.integers(-span, span + 1, size=shape) * LATTICE_STEP).astype(np.float32)


def lattice_map(rng: np.random.Generator, shapes: dict, dtype: Dtype = Dtype.F32) -> TensorMap:
    return TensorMap.from_arrays(
        {name: lattice_array(rng, shape) for name, shape in shapes.items()}, dtype)


def perturbed(rng: np.random.Generator, base: TensorMap, span: int = 512) -> TensorMap:
    arrays = {}
    dtypes = {}
    for name in base.names():
        arrays[name] = (base.array(name)
                        + lattice_array(rng, base[name].shape, span)).astype(np.float32)
        dtypes[name] = base[name].dtype
    return TensorMap.from_arrays(arrays, dtypes)


def normal_map(rng: np.random.Generator, shapes: dict, scale: float = 0.5) -> TensorMap:
    return TensorMap.from_arrays(
        {name: rng.normal(0.0, scale, size=shape).astype(np.float32)
         for name, shape in shapes.items()})


def raw_container(header, data: bytes = b"") -> bytes:
    """Assemble container bytes from a header (dict or raw str) and payload."""
    if isinstance(header, (bytes, bytearray)):
        blob = bytes(header)
    elif isinstance(header, str):
        blob = header.encode("utf-8")
    else:
        blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return len(blob).to_bytes(8, "little") + blob + data
