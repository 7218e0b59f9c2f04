"""Space-filling-curve serialization: curve encodings, orderings, blocks.

Voxelized points are ordered along a space-filling curve so that block
attention sees spatially coherent chunks. Four schemes are supported; the
``TRANS_*`` variants apply a fixed axis permutation (swap x and y) before
encoding, which yields a genuinely different traversal of the same grid.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass

import numpy as np

from . import accel


class SerializationScheme(enum.Enum):
    Z = "z"
    TRANS_Z = "trans-z"
    HILBERT = "hilbert"
    TRANS_HILBERT = "trans-hilbert"


_TRANS = {SerializationScheme.TRANS_Z, SerializationScheme.TRANS_HILBERT}
_HILBERT = {SerializationScheme.HILBERT, SerializationScheme.TRANS_HILBERT}


@dataclass
class SerialOrder:
    """A curve-sorted permutation of kept points plus block boundaries."""

    scheme: SerializationScheme
    permutation: np.ndarray  # position in sequence -> kept row
    codes: np.ndarray  # per kept row, the curve code
    block_bounds: list[tuple[int, int]]

    def __len__(self) -> int:
        return len(self.permutation)

    @property
    def inverse(self) -> np.ndarray:
        """kept row -> position in sequence."""
        inv = np.empty_like(self.permutation)
        inv[self.permutation] = np.arange(len(self.permutation))
        return inv


def bits_for_voxel_size(voxel_size: float) -> int:
    """Grid bit depth so a unit-scale cloud fits; capped so 3*bits <= 63."""
    bits = int(math.ceil(math.log2(1.0 / voxel_size))) + 1
    return max(1, min(bits, accel.MAX_BITS))


def _check_range(grid: np.ndarray, bits: int) -> None:
    if grid.size and (grid.min() < 0 or grid.max() >= (1 << bits)):
        raise ValueError(
            f"grid index out of range for {bits} bits: "
            f"min={grid.min()}, max={grid.max()}, limit={1 << bits}"
        )


def morton_encode(grid: np.ndarray, bits: int) -> np.ndarray:
    """Interleave grid indices (x least significant) into Z-order codes."""
    if not 1 <= bits <= accel.MAX_BITS:
        raise ValueError(f"bits must be in 1..{accel.MAX_BITS}")
    grid = np.asarray(grid, dtype=np.int64)
    _check_range(grid, bits)
    return accel.morton_encode(
        np.ascontiguousarray(grid[:, 0]),
        np.ascontiguousarray(grid[:, 1]),
        np.ascontiguousarray(grid[:, 2]),
    )


def morton_decode(codes: np.ndarray, bits: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= (1 << (3 * bits))):
        raise ValueError("code out of range")
    gx, gy, gz = accel.morton_decode(np.ascontiguousarray(codes))
    return np.stack([gx, gy, gz], axis=1)


def hilbert_encode(grid: np.ndarray, bits: int) -> np.ndarray:
    """3D Hilbert curve index of each grid cell."""
    if not 1 <= bits <= accel.MAX_BITS:
        raise ValueError(f"bits must be in 1..{accel.MAX_BITS}")
    grid = np.asarray(grid, dtype=np.int64)
    _check_range(grid, bits)
    return accel.hilbert_encode(
        np.ascontiguousarray(grid[:, 0]),
        np.ascontiguousarray(grid[:, 1]),
        np.ascontiguousarray(grid[:, 2]),
        bits,
    )


def hilbert_decode(codes: np.ndarray, bits: int) -> np.ndarray:
    codes = np.asarray(codes, dtype=np.int64)
    if codes.size and (codes.min() < 0 or codes.max() >= (1 << (3 * bits))):
        raise ValueError("code out of range")
    gx, gy, gz = accel.hilbert_decode(np.ascontiguousarray(codes), bits)
    return np.stack([gx, gy, gz], axis=1)


def encode_scheme(grid: np.ndarray, scheme: SerializationScheme, bits: int) -> np.ndarray:
    """Curve codes for grid cells under the given scheme."""
    grid = np.asarray(grid, dtype=np.int64)
    if scheme in _TRANS:
        grid = grid[:, [1, 0, 2]]
    if scheme in _HILBERT:
        return hilbert_encode(grid, bits)
    return morton_encode(grid, bits)


def block_partition(order_len: int, block_size: int) -> list[tuple[int, int]]:
    """Split a sequence into contiguous blocks; the last holds the remainder."""
    if block_size < 1:
        raise ValueError("block_size must be >= 1")
    if order_len == 0:
        return []
    bounds = []
    for start in range(0, order_len, block_size):
        bounds.append((start, min(start + block_size, order_len)))
    return bounds


def serialize(
    grid: np.ndarray,
    scheme: SerializationScheme,
    bits: int,
    block_size: int = 1024,
) -> SerialOrder:
    """Order kept points along a space-filling curve and chunk into blocks.

    ``grid`` holds one non-negative voxel grid coordinate triple per kept
    point. One point per voxel is a precondition, so curve codes are unique.
    """
    codes = encode_scheme(grid, scheme, bits)
    if len(np.unique(codes)) != len(codes):
        raise AssertionError("duplicate curve codes: more than one point per voxel")
    perm = np.argsort(codes, kind="stable")
    return SerialOrder(
        scheme=scheme,
        permutation=perm,
        codes=codes,
        block_bounds=block_partition(len(codes), block_size),
    )


def reorder(rows: np.ndarray, src: SerialOrder, dst: SerialOrder) -> np.ndarray:
    """Re-index rows so row i follows the same kept point under ``dst``."""
    if len(src) != len(dst):
        raise ValueError("orders cover different point counts")
    inv_src = src.inverse
    return rows[inv_src[dst.permutation]]
