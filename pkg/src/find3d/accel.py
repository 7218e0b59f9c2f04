"""Hot numeric kernels with numba-compiled and pure-numpy implementations.

Every kernel exists in two variants: a scalar-loop version compiled with
``numba.njit`` and a vectorized numpy fallback. The active variant is chosen
at import time; set ``FIND3D_NO_NUMBA=1`` to force the numpy path (or when
numba is not installed). Both variants are exported so tests and
``benchmarks/kernel_bench.py`` can compare them directly.

All space-filling-curve codes use int64 with values in [0, 2^63): grid
coordinates are capped at 21 bits per axis so 3*bits <= 63.
"""

from __future__ import annotations

import os

import numpy as np

MAX_BITS = 21

_FLAG = os.environ.get("FIND3D_NO_NUMBA", "").strip().lower()
NUMBA_REQUESTED = _FLAG not in ("1", "true", "yes")

try:
    if not NUMBA_REQUESTED:
        raise ImportError("numba disabled via FIND3D_NO_NUMBA")
    from numba import njit

    NUMBA_ENABLED = True
except ImportError:
    NUMBA_ENABLED = False

    def njit(*args, **kwargs):
        # identity decorator so the loop variants stay importable
        if args and callable(args[0]):
            return args[0]
        return lambda fn: fn


# ---------------------------------------------------------------------------
# Morton (Z-order) bit interleaving.
# Magic-mask bit spreading: bit k of the input lands at position 3k.

_SPREAD_MASKS = (
    (32, 0x1F00000000FFFF),
    (16, 0x1F0000FF0000FF),
    (8, 0x100F00F00F00F00F),
    (4, 0x10C30C30C30C30C3),
    (2, 0x1249249249249249),
)


def _spread_bits_np(v):
    v = v & 0x1FFFFF
    for shift, mask in _SPREAD_MASKS:
        v = (v | (v << shift)) & mask
    return v


def _compact_bits_np(v):
    v = v & 0x1249249249249249
    v = (v ^ (v >> 2)) & 0x10C30C30C30C30C3
    v = (v ^ (v >> 4)) & 0x100F00F00F00F00F
    v = (v ^ (v >> 8)) & 0x1F0000FF0000FF
    v = (v ^ (v >> 16)) & 0x1F00000000FFFF
    v = (v ^ (v >> 32)) & 0x1FFFFF
    return v


def morton_encode_np(gx, gy, gz):
    """Interleave three int64 coordinate arrays; x is least significant."""
    return _spread_bits_np(gx) | (_spread_bits_np(gy) << 1) | (_spread_bits_np(gz) << 2)


def morton_decode_np(code):
    return _compact_bits_np(code), _compact_bits_np(code >> 1), _compact_bits_np(code >> 2)


@njit(cache=True)
def _spread_bits(v):
    v = v & 0x1FFFFF
    v = (v | (v << 32)) & 0x1F00000000FFFF
    v = (v | (v << 16)) & 0x1F0000FF0000FF
    v = (v | (v << 8)) & 0x100F00F00F00F00F
    v = (v | (v << 4)) & 0x10C30C30C30C30C3
    v = (v | (v << 2)) & 0x1249249249249249
    return v


@njit(cache=True)
def _compact_bits(v):
    v = v & 0x1249249249249249
    v = (v ^ (v >> 2)) & 0x10C30C30C30C30C3
    v = (v ^ (v >> 4)) & 0x100F00F00F00F00F
    v = (v ^ (v >> 8)) & 0x1F0000FF0000FF
    v = (v ^ (v >> 16)) & 0x1F00000000FFFF
    v = (v ^ (v >> 32)) & 0x1FFFFF
    return v


@njit(cache=True)
def morton_encode_nb(gx, gy, gz):
    out = np.empty(gx.shape[0], dtype=np.int64)
    for i in range(gx.shape[0]):
        out[i] = _spread_bits(gx[i]) | (_spread_bits(gy[i]) << 1) | (_spread_bits(gz[i]) << 2)
    return out


@njit(cache=True)
def morton_decode_nb(code):
    n = code.shape[0]
    gx = np.empty(n, dtype=np.int64)
    gy = np.empty(n, dtype=np.int64)
    gz = np.empty(n, dtype=np.int64)
    for i in range(n):
        gx[i] = _compact_bits(code[i])
        gy[i] = _compact_bits(code[i] >> 1)
        gz[i] = _compact_bits(code[i] >> 2)
    return gx, gy, gz


# ---------------------------------------------------------------------------
# Hilbert curve via the transpose method.
# The transpose holds one `bits`-bit word per axis; the code interleaves them
# with word 0 supplying the most significant bit of each 3-bit group.


def hilbert_encode_np(gx, gy, gz, bits):
    x0 = gx.astype(np.int64).copy()
    x1 = gy.astype(np.int64).copy()
    x2 = gz.astype(np.int64).copy()
    m = 1 << (bits - 1)
    q = m
    while q > 1:
        p = q - 1
        # axis 0 exchanges with itself: only the inversion branch acts
        sel = (x0 & q) != 0
        x0 = np.where(sel, x0 ^ p, x0)
        for xi in (x1, x2):
            sel = (xi & q) != 0
            t = np.where(sel, 0, (x0 ^ xi) & p)
            x0 = x0 ^ np.where(sel, p, 0) ^ t
            xi ^= t
        q >>= 1
    # Gray encode
    x1 ^= x0
    x2 ^= x1
    t = np.zeros_like(x0)
    q = m
    while q > 1:
        t ^= np.where((x2 & q) != 0, q - 1, 0)
        q >>= 1
    x0 ^= t
    x1 ^= t
    x2 ^= t
    return (_spread_bits_np(x0) << 2) | (_spread_bits_np(x1) << 1) | _spread_bits_np(x2)


def hilbert_decode_np(code, bits):
    x0 = _compact_bits_np(code >> 2)
    x1 = _compact_bits_np(code >> 1)
    x2 = _compact_bits_np(code)
    n = 2 << (bits - 1)
    # Gray decode
    t = x2 >> 1
    x2 ^= x1
    x1 ^= x0
    x0 ^= t
    q = 2
    while q != n:
        p = q - 1
        for xi in (x2, x1):
            sel = (xi & q) != 0
            t = np.where(sel, 0, (x0 ^ xi) & p)
            x0 = x0 ^ np.where(sel, p, 0) ^ t
            xi ^= t
        sel = (x0 & q) != 0
        x0 = np.where(sel, x0 ^ p, x0)
        q <<= 1
    return x0, x1, x2


@njit(cache=True)
def _hilbert_axes_to_code(x, y, z, bits):
    x0, x1, x2 = x, y, z
    m = 1 << (bits - 1)
    q = m
    while q > 1:
        p = q - 1
        if x0 & q:
            x0 ^= p
        if x1 & q:
            x0 ^= p
        else:
            t = (x0 ^ x1) & p
            x0 ^= t
            x1 ^= t
        if x2 & q:
            x0 ^= p
        else:
            t = (x0 ^ x2) & p
            x0 ^= t
            x2 ^= t
        q >>= 1
    x1 ^= x0
    x2 ^= x1
    t = 0
    q = m
    while q > 1:
        if x2 & q:
            t ^= q - 1
        q >>= 1
    x0 ^= t
    x1 ^= t
    x2 ^= t
    return (_spread_bits(x0) << 2) | (_spread_bits(x1) << 1) | _spread_bits(x2)


@njit(cache=True)
def _hilbert_code_to_axes(code, bits):
    x0 = _compact_bits(code >> 2)
    x1 = _compact_bits(code >> 1)
    x2 = _compact_bits(code)
    n = 2 << (bits - 1)
    t = x2 >> 1
    x2 ^= x1
    x1 ^= x0
    x0 ^= t
    q = 2
    while q != n:
        p = q - 1
        if x2 & q:
            x0 ^= p
        else:
            t = (x0 ^ x2) & p
            x0 ^= t
            x2 ^= t
        if x1 & q:
            x0 ^= p
        else:
            t = (x0 ^ x1) & p
            x0 ^= t
            x1 ^= t
        if x0 & q:
            x0 ^= p
        q <<= 1
    return x0, x1, x2


@njit(cache=True)
def hilbert_encode_nb(gx, gy, gz, bits):
    out = np.empty(gx.shape[0], dtype=np.int64)
    for i in range(gx.shape[0]):
        out[i] = _hilbert_axes_to_code(gx[i], gy[i], gz[i], bits)
    return out


@njit(cache=True)
def hilbert_decode_nb(code, bits):
    n = code.shape[0]
    gx = np.empty(n, dtype=np.int64)
    gy = np.empty(n, dtype=np.int64)
    gz = np.empty(n, dtype=np.int64)
    for i in range(n):
        gx[i], gy[i], gz[i] = _hilbert_code_to_axes(code[i], bits)
    return gx, gy, gz


# ---------------------------------------------------------------------------
# Exact nearest kept point for each dropped point.
# Kept points occupy distinct voxels, so a uniform grid over the voxel keys
# with an expanding Chebyshev-ring scan finds the exact nearest neighbor.
# Ties in squared distance go to the lowest kept row.


def _pack_key(gx, gy, gz):
    return gx | (gy << MAX_BITS) | (gz << (2 * MAX_BITS))


@njit(cache=True)
def nearest_kept_nb(kept_pos, kept_grid, sorted_keys, sorted_rows, dropped_pos, dropped_grid, cell):
    n = dropped_pos.shape[0]
    out = np.empty(n, dtype=np.int64)
    for i in range(n):
        px = dropped_pos[i, 0]
        py = dropped_pos[i, 1]
        pz = dropped_pos[i, 2]
        cx = dropped_grid[i, 0]
        cy = dropped_grid[i, 1]
        cz = dropped_grid[i, 2]
        best = -1
        best_d2 = np.inf
        ring = 0
        while True:
            # a cell at Chebyshev ring r is at least (r-1)*cell away
            if best >= 0:
                bound = (ring - 1) * cell
                if bound > 0.0 and bound * bound > best_d2:
                    break
            for dx in range(-ring, ring + 1):
                gx = cx + dx
                if gx < 0:
                    continue
                for dy in range(-ring, ring + 1):
                    gy = cy + dy
                    if gy < 0:
                        continue
                    for dz in range(-ring, ring + 1):
                        if max(abs(dx), abs(dy), abs(dz)) != ring:
                            continue
                        gz = cz + dz
                        if gz < 0:
                            continue
                        key = gx | (gy << 21) | (gz << 42)
                        lo = np.searchsorted(sorted_keys, key)
                        if lo < sorted_keys.shape[0] and sorted_keys[lo] == key:
                            row = sorted_rows[lo]
                            ddx = px - kept_pos[row, 0]
                            ddy = py - kept_pos[row, 1]
                            ddz = pz - kept_pos[row, 2]
                            d2 = ddx * ddx + ddy * ddy + ddz * ddz
                            if d2 < best_d2 or (d2 == best_d2 and row < best):
                                best_d2 = d2
                                best = row
            ring += 1
        out[i] = best
    return out


def nearest_kept_np(kept_pos, kept_grid, sorted_keys, sorted_rows, dropped_pos, dropped_grid, cell):
    """Chunked brute-force scan; exact, with the same low-row tie rule."""
    n = dropped_pos.shape[0]
    out = np.empty(n, dtype=np.int64)
    chunk = max(1, int(4e6) // max(1, kept_pos.shape[0]))
    for s in range(0, n, chunk):
        block = dropped_pos[s : s + chunk]
        dx = block[:, 0:1] - kept_pos[None, :, 0]
        dy = block[:, 1:2] - kept_pos[None, :, 1]
        dz = block[:, 2:3] - kept_pos[None, :, 2]
        d2 = dx * dx + dy * dy + dz * dz
        out[s : s + chunk] = np.argmin(d2, axis=1)
    return out


def nearest_kept(kept_pos, kept_grid, dropped_pos, dropped_grid, cell):
    """Map each dropped point to its exact nearest kept row."""
    if kept_pos.shape[0] == 0:
        raise ValueError("no kept points")
    if dropped_pos.shape[0] == 0:
        return np.empty(0, dtype=np.int64)
    keys = _pack_key(kept_grid[:, 0], kept_grid[:, 1], kept_grid[:, 2])
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    sorted_rows = order.astype(np.int64)
    if NUMBA_ENABLED:
        return nearest_kept_nb(
            np.ascontiguousarray(kept_pos),
            kept_grid,
            sorted_keys,
            sorted_rows,
            np.ascontiguousarray(dropped_pos),
            dropped_grid,
            float(cell),
        )
    return nearest_kept_np(kept_pos, kept_grid, sorted_keys, sorted_rows, dropped_pos, dropped_grid, cell)


# ---------------------------------------------------------------------------
# Z-buffer splatting: each point paints a (2r+1)^2 pixel square; the nearest
# depth wins per pixel, ties go to the lowest point index.


@njit(cache=True)
def splat_zbuffer_nb(us, vs, depth, radius, height, width):
    owner = np.full((height, width), -1, dtype=np.int64)
    zbuf = np.full((height, width), np.inf, dtype=np.float64)
    for i in range(us.shape[0]):
        u = us[i]
        v = vs[i]
        d = depth[i]
        for dv in range(-radius, radius + 1):
            r = v + dv
            if r < 0 or r >= height:
                continue
            for du in range(-radius, radius + 1):
                c = u + du
                if c < 0 or c >= width:
                    continue
                if d < zbuf[r, c] or (d == zbuf[r, c] and i < owner[r, c]):
                    zbuf[r, c] = d
                    owner[r, c] = i
    return owner, zbuf


def splat_zbuffer_np(us, vs, depth, radius, height, width):
    n = us.shape[0]
    owner = np.full((height, width), -1, dtype=np.int64)
    zbuf = np.full((height, width), np.inf, dtype=np.float64)
    if n == 0:
        return owner, zbuf
    span = 2 * radius + 1
    du = np.tile(np.arange(-radius, radius + 1), span)
    dv = np.repeat(np.arange(-radius, radius + 1), span)
    cols = (us[:, None] + du[None, :]).ravel()
    rows = (vs[:, None] + dv[None, :]).ravel()
    idx = np.repeat(np.arange(n, dtype=np.int64), span * span)
    dep = np.repeat(depth, span * span)
    ok = (rows >= 0) & (rows < height) & (cols >= 0) & (cols < width)
    rows, cols, idx, dep = rows[ok], cols[ok], idx[ok], dep[ok]
    pix = rows * width + cols
    order = np.lexsort((idx, dep, pix))
    pix, idx, dep = pix[order], idx[order], dep[order]
    first = np.unique(pix, return_index=True)[1]
    owner.ravel()[pix[first]] = idx[first]
    zbuf.ravel()[pix[first]] = dep[first]
    return owner, zbuf


if NUMBA_ENABLED:
    morton_encode = morton_encode_nb
    morton_decode = morton_decode_nb
    hilbert_encode = hilbert_encode_nb
    hilbert_decode = hilbert_decode_nb
    splat_zbuffer = splat_zbuffer_nb
else:
    morton_encode = morton_encode_np
    morton_decode = morton_decode_np
    hilbert_encode = hilbert_encode_np
    hilbert_decode = hilbert_decode_np
    splat_zbuffer = splat_zbuffer_np


def warmup():
    """Trigger JIT compilation of every kernel (no-op on the numpy path)."""
    one = np.array([1], dtype=np.int64)
    pos = np.zeros((1, 3), dtype=np.float64)
    grid = np.zeros((1, 3), dtype=np.int64)
    morton_decode(morton_encode(one, one, one))
    hilbert_decode(hilbert_encode(one, one, one, 2), 2)
    nearest_kept(pos, grid, pos + 0.5, grid, 1.0)
    splat_zbuffer(one.astype(np.int64), one, np.array([1.0]), 1, 4, 4)
