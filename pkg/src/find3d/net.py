"""Serialized point transformer operating on voxel-sampled clouds.

Pipeline: voxel sample -> linear point embedding -> conditional positional
encoding -> encoder stages (block attention along a rotating serialization
scheme, then grid pooling) -> mirrored decoder (block attention, unpooling by
back-trace to the pooled parents) -> 4-layer MLP head emitting one queryable
embedding per kept point.

Every stage runs through the autodiff Tensor type so the same code path
serves inference (constant tensors) and training (tracked parameters).
"""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import sfc
from .cloud import PointCloud, SampleResult, pack_voxel_keys, voxel_sample

CHECKPOINT_MAGIC = b"FND3"
CHECKPOINT_VERSION = 1

DEFAULT_SCHEME_CYCLE = (
    sfc.SerializationScheme.Z,
    sfc.SerializationScheme.TRANS_Z,
    sfc.SerializationScheme.HILBERT,
    sfc.SerializationScheme.TRANS_HILBERT,
)


@dataclass
class ModelConfig:
    widths: tuple[int, ...] = (32, 32)
    heads: tuple[int, ...] = (2, 2)
    enc_depth: int = 1
    dec_depth: int = 1
    block_size: int = 128
    scheme_cycle: tuple[sfc.SerializationScheme, ...] = DEFAULT_SCHEME_CYCLE
    pool_stride: int = 2
    out_dim: int = 32
    voxel_size: float = 0.02
    head_hidden: int = 64
    ff_expand: int = 4

    def __post_init__(self):
        self.widths = tuple(self.widths)
        self.heads = tuple(self.heads)
        self.scheme_cycle = tuple(
            sfc.SerializationScheme(s) if not isinstance(s, sfc.SerializationScheme) else s
            for s in self.scheme_cycle
        )
        if len(self.widths) != len(self.heads):
            raise ValueError("widths and heads must have one entry per stage")
        if not self.scheme_cycle:
            raise ValueError("scheme cycle must be non-empty")
        for w, h in zip(self.widths, self.heads):
            if w % h != 0:
                raise ValueError(f"width {w} not divisible by heads {h}")
        if self.pool_stride < 1 or self.block_size < 1:
            raise ValueError("pool_stride and block_size must be >= 1")

    @property
    def n_stages(self) -> int:
        return len(self.widths)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["scheme_cycle"] = [s.value for s in self.scheme_cycle]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["scheme_cycle"] = tuple(sfc.SerializationScheme(s) for s in d["scheme_cycle"])
        for key in ("widths", "heads"):
            d[key] = tuple(d[key])
        return cls(**d)


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, np.ndarray]

    def copy(self) -> "ModelState":
        return ModelState(self.config, {k: v.copy() for k, v in self.params.items()})

    def astype(self, dtype) -> "ModelState":
        return ModelState(self.config, {k: v.astype(dtype) for k, v in self.params.items()})

    def validate(self) -> None:
        expected = dict(param_shapes(self.config))
        if set(expected) != set(self.params):
            missing = set(expected) ^ set(self.params)
            raise ValueError(f"parameter set mismatch: {sorted(missing)}")
        for name, arr in self.params.items():
            if arr.shape != expected[name]:
                raise ValueError(f"{name}: shape {arr.shape} != {expected[name]}")
            if not np.isfinite(arr).all():
                raise ValueError(f"{name}: non-finite values")


@dataclass
class PoolTraceEntry:
    parent: np.ndarray  # fine row -> coarse row
    coarse_positions: np.ndarray
    coarse_grid: np.ndarray
    coarse_keys: np.ndarray


@dataclass
class ForwardTrace:
    sample: SampleResult
    pools: list[PoolTraceEntry] = field(default_factory=list)


def _layer_param_shapes(prefix: str, width: int, ff_expand: int):
    yield f"{prefix}.ln1.gamma", (width,)
    yield f"{prefix}.ln1.beta", (width,)
    yield f"{prefix}.attn.wq", (width, width)
    yield f"{prefix}.attn.bq", (width,)
    yield f"{prefix}.attn.wk", (width, width)
    yield f"{prefix}.attn.bk", (width,)
    yield f"{prefix}.attn.wv", (width, width)
    yield f"{prefix}.attn.bv", (width,)
    yield f"{prefix}.attn.wo", (width, width)
    yield f"{prefix}.attn.bo", (width,)
    yield f"{prefix}.ln2.gamma", (width,)
    yield f"{prefix}.ln2.beta", (width,)
    yield f"{prefix}.ff.w1", (ff_expand * width, width)
    yield f"{prefix}.ff.b1", (ff_expand * width,)
    yield f"{prefix}.ff.w2", (width, ff_expand * width)
    yield f"{prefix}.ff.b2", (width,)


def param_shapes(config: ModelConfig):
    """Yield (name, shape) for every parameter the architecture requires."""
    w = config.widths
    yield "embed.w", (w[0], 9)
    yield "embed.b", (w[0],)
    for s in range(config.n_stages):
        yield f"cpe{s}.w", (w[s], w[s])
        yield f"cpe{s}.b", (w[s],)
        for i in range(config.enc_depth):
            yield from _layer_param_shapes(f"enc{s}.l{i}", w[s], config.ff_expand)
        if s + 1 < config.n_stages:
            yield f"pool{s}.w", (w[s + 1], w[s])
            yield f"pool{s}.b", (w[s + 1],)
    for s in reversed(range(config.n_stages)):
        for i in range(config.dec_depth):
            yield from _layer_param_shapes(f"dec{s}.l{i}", w[s], config.ff_expand)
        if s > 0:
            yield f"unpool{s - 1}.parent_w", (w[s - 1], w[s])
            yield f"unpool{s - 1}.parent_b", (w[s - 1],)
            yield f"unpool{s - 1}.skip_w", (w[s - 1], w[s - 1])
            yield f"unpool{s - 1}.skip_b", (w[s - 1],)
    dims = [w[0], config.head_hidden, config.head_hidden, config.head_hidden, config.out_dim]
    for i in range(4):
        yield f"head.w{i}", (dims[i + 1], dims[i])
        yield f"head.b{i}", (dims[i + 1],)


def init_model(config: ModelConfig, seed=0, dtype=np.float32) -> ModelState:
    """Zero-mean uniform init scaled by 1/sqrt(fan_in); small final head layer."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config):
        if name.endswith(".gamma"):
            arr = np.ones(shape)
        elif len(shape) == 1:  # biases and layer-norm shifts
            arr = np.zeros(shape)
        else:
            bound = 1.0 / math.sqrt(shape[-1])
            arr = rng.uniform(-bound, bound, size=shape)
        params[name] = arr.astype(dtype)
    params["head.w3"] *= np.asarray(0.01, dtype=dtype)
    return ModelState(config, params)


def describe(config: ModelConfig) -> dict:
    """Architecture summary: per-parameter shapes and the total count."""
    shapes = dict(param_shapes(config))
    total = sum(int(np.prod(s)) for s in shapes.values())
    return {
        "n_parameters": total,
        "n_tensors": len(shapes),
        "stages": config.n_stages,
        "widths": list(config.widths),
        "out_dim": config.out_dim,
        "block_size": config.block_size,
    }


# ---------------------------------------------------------------------------
# Forward building blocks. All take/return autodiff Tensors.


def embed_points(points9, params) -> ad.Tensor:
    """Affine map of the 9-dim point rows into the first-stage width."""
    x = ad.as_tensor(points9)
    if x.data.shape[-1] != 9:
        raise ValueError("expected 9 input channels (xyz, normal, rgb)")
    return ad.linear(x, params["embed.w"], params["embed.b"])


def neighbor_structure(grid: np.ndarray):
    """(targets, sources, counts) pairs over occupied 3x3x3 neighborhoods."""
    n = len(grid)
    keys = pack_voxel_keys(grid)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    targets = []
    sources = []
    for dx in (-1, 0, 1):
        for dy in (-1, 0, 1):
            for dz in (-1, 0, 1):
                nb = grid + np.array([dx, dy, dz], dtype=np.int64)
                valid = (nb >= 0).all(axis=1)
                nb_keys = pack_voxel_keys(np.maximum(nb, 0))
                pos = np.searchsorted(sorted_keys, nb_keys)
                pos = np.minimum(pos, n - 1)
                hit = valid & (sorted_keys[pos] == nb_keys)
                targets.append(np.nonzero(hit)[0])
                sources.append(order[pos[hit]])
    targets = np.concatenate(targets)
    sources = np.concatenate(sources)
    counts = np.bincount(targets, minlength=n)
    return targets, sources, counts


def cond_pos_encode(features, grid: np.ndarray, params, stage: int) -> ad.Tensor:
    """Residually add a linear transform of neighborhood-averaged features."""
    x = ad.as_tensor(features)
    targets, sources, counts = neighbor_structure(grid)
    avg = ad.indexed_mean(x, targets, sources, counts, len(grid))
    return ad.add(x, ad.linear(avg, params[f"cpe{stage}.w"], params[f"cpe{stage}.b"]))


def _attend_group(x, params, prefix: str, heads: int) -> ad.Tensor:
    """Multi-head scaled dot-product attention over (B, L, W) groups."""
    bsz, length, width = x.data.shape
    dh = width // heads
    q = ad.linear(x, params[f"{prefix}.wq"], params[f"{prefix}.bq"])
    k = ad.linear(x, params[f"{prefix}.wk"], params[f"{prefix}.bk"])
    v = ad.linear(x, params[f"{prefix}.wv"], params[f"{prefix}.bv"])
    q = ad.transpose(ad.reshape(q, (bsz, length, heads, dh)), (0, 2, 1, 3))
    k = ad.transpose(ad.reshape(k, (bsz, length, heads, dh)), (0, 2, 1, 3))
    v = ad.transpose(ad.reshape(v, (bsz, length, heads, dh)), (0, 2, 1, 3))
    scores = ad.scale(ad.matmul(q, ad.transpose(k, (0, 1, 3, 2))), 1.0 / math.sqrt(dh))
    att = ad.softmax_last(scores)
    out = ad.matmul(att, v)
    out = ad.reshape(ad.transpose(out, (0, 2, 1, 3)), (bsz, length, width))
    return ad.linear(out, params[f"{prefix}.wo"], params[f"{prefix}.bo"])


def block_attention(seq, block_bounds, params, heads: int, prefix: str = "attn") -> ad.Tensor:
    """Attention restricted to contiguous blocks of a serialized sequence.

    Full-size blocks are batched into one (B, block, W) group; a ragged final
    block runs as its own group. Rows never attend across block boundaries.
    """
    if isinstance(block_bounds, sfc.SerialOrder):
        block_bounds = block_bounds.block_bounds
    x = ad.as_tensor(seq)
    length, width = x.data.shape
    if width % heads != 0:
        raise ValueError(f"width {width} not divisible by heads {heads}")
    if not block_bounds:
        raise ValueError("empty block partition")
    block = block_bounds[0][1] - block_bounds[0][0]
    n_full = length // block
    pieces = []
    if n_full:
        full = ad.reshape(ad.narrow(x, 0, n_full * block), (n_full, block, width))
        out = _attend_group(full, params, prefix, heads)
        pieces.append(ad.reshape(out, (n_full * block, width)))
    if n_full * block < length:
        rem = length - n_full * block
        tail = ad.reshape(ad.narrow(x, n_full * block, length), (1, rem, width))
        out = _attend_group(tail, params, prefix, heads)
        pieces.append(ad.reshape(out, (rem, width)))
    return pieces[0] if len(pieces) == 1 else ad.concat(pieces, axis=0)


def transformer_layer(x, order: sfc.SerialOrder, params, prefix: str, heads: int) -> ad.Tensor:
    """Pre-norm residual block: serialized block attention, then feed-forward."""
    h = ad.layer_norm(x, params[f"{prefix}.ln1.gamma"], params[f"{prefix}.ln1.beta"])
    seq = ad.permute_rows(h, order.permutation)
    att = block_attention(seq, order.block_bounds, params, heads, prefix=f"{prefix}.attn")
    x = ad.add(x, ad.permute_rows(att, order.inverse))
    h = ad.layer_norm(x, params[f"{prefix}.ln2.gamma"], params[f"{prefix}.ln2.beta"])
    h = ad.linear(h, params[f"{prefix}.ff.w1"], params[f"{prefix}.ff.b1"])
    h = ad.gelu(h)
    h = ad.linear(h, params[f"{prefix}.ff.w2"], params[f"{prefix}.ff.b2"])
    return ad.add(x, h)


def grid_pool(features, positions: np.ndarray, grid: np.ndarray, stride: int, params, stage: int):
    """Merge points sharing a parent voxel (edge * stride) into coarse tokens.

    Returns (coarse features = linear(mean of children), PoolTraceEntry).
    """
    x = ad.as_tensor(features)
    parent_grid = grid // stride
    keys = pack_voxel_keys(parent_grid)
    unique_keys, first, seg = np.unique(keys, return_index=True, return_inverse=True)
    n_coarse = len(unique_keys)
    mean = ad.segment_mean(x, seg, n_coarse)
    coarse = ad.linear(mean, params[f"pool{stage}.w"], params[f"pool{stage}.b"])
    counts = np.bincount(seg, minlength=n_coarse).astype(positions.dtype)
    sums = np.zeros((n_coarse, 3), dtype=positions.dtype)
    np.add.at(sums, seg, positions)
    entry = PoolTraceEntry(
        parent=seg,
        coarse_positions=sums / counts[:, None],
        coarse_grid=parent_grid[first],
        coarse_keys=unique_keys,
    )
    return coarse, entry


def grid_unpool(coarse_features, skip_features, entry: PoolTraceEntry, params, stage: int) -> ad.Tensor:
    """Back-trace pooled parents: fine = linear(parent) + linear(skip)."""
    c = ad.as_tensor(coarse_features)
    s = ad.as_tensor(skip_features)
    if len(entry.parent) != s.data.shape[0]:
        raise ValueError("skip features do not match the pool trace")
    spread = ad.gather(
        ad.linear(c, params[f"unpool{stage}.parent_w"], params[f"unpool{stage}.parent_b"]),
        entry.parent,
    )
    return ad.add(spread, ad.linear(s, params[f"unpool{stage}.skip_w"], params[f"unpool{stage}.skip_b"]))


class _OrderCache:
    """Lazily serialized orders, one dict per resolution level."""

    def __init__(self, bits: int, block_size: int):
        self.bits = bits
        self.block_size = block_size
        self.levels: list[tuple[np.ndarray, dict]] = []

    def add_level(self, grid: np.ndarray) -> int:
        self.levels.append((grid, {}))
        return len(self.levels) - 1

    def get(self, level: int, scheme: sfc.SerializationScheme) -> sfc.SerialOrder:
        grid, cache = self.levels[level]
        if scheme not in cache:
            cache[scheme] = sfc.serialize(grid, scheme, self.bits, self.block_size)
        return cache[scheme]


def forward_graph(cloud: PointCloud, config: ModelConfig, params: dict[str, ad.Tensor]):
    """Run the full pipeline; returns (embeddings Tensor, ForwardTrace)."""
    sample = voxel_sample(cloud, config.voxel_size)
    if len(sample.kept) == 0:
        raise ValueError("voxel sampling kept no points")
    dtype = params["embed.w"].data.dtype
    x9 = cloud.features9(sample.kept).astype(dtype)
    trace = ForwardTrace(sample=sample)

    grid = sample.grid
    positions = cloud.positions[sample.kept].astype(dtype)
    bits = max(
        sfc.bits_for_voxel_size(config.voxel_size),
        int(np.max(grid, initial=1)).bit_length(),
    )
    bits = min(bits, 21)
    cycle = config.scheme_cycle
    layer_idx = 0
    orders = _OrderCache(bits, config.block_size)

    x = embed_points(x9, params)
    skips = []
    for s in range(config.n_stages):
        x = cond_pos_encode(x, grid, params, s)
        level = orders.add_level(grid)
        for i in range(config.enc_depth):
            scheme = cycle[layer_idx % len(cycle)]
            x = transformer_layer(x, orders.get(level, scheme), params, f"enc{s}.l{i}", config.heads[s])
            layer_idx += 1
        if s + 1 < config.n_stages:
            skips.append(x)
            x, entry = grid_pool(x, positions, grid, config.pool_stride, params, s)
            trace.pools.append(entry)
            grid = entry.coarse_grid
            positions = entry.coarse_positions

    for s in reversed(range(config.n_stages)):
        for i in range(config.dec_depth):
            scheme = cycle[layer_idx % len(cycle)]
            x = transformer_layer(x, orders.get(s, scheme), params, f"dec{s}.l{i}", config.heads[s])
            layer_idx += 1
        if s > 0:
            entry = trace.pools[s - 1]
            x = grid_unpool(x, skips[s - 1], entry, params, stage=s - 1)

    for i in range(4):
        x = ad.linear(x, params[f"head.w{i}"], params[f"head.b{i}"])
        if i < 3:
            x = ad.gelu(x)
    return x, trace


def params_as_tensors(state: ModelState, dtype=None, requires_grad=False) -> dict[str, ad.Tensor]:
    out = {}
    for name, arr in state.params.items():
        data = arr if dtype is None else arr.astype(dtype)
        out[name] = ad.Tensor(data.copy() if requires_grad else data, requires_grad=requires_grad, name=name)
    return out


def forward(cloud: PointCloud, state: ModelState) -> np.ndarray:
    """Embeddings for the kept points of a normalized cloud, (n_kept, out_dim)."""
    out, _ = forward_graph(cloud, state.config, params_as_tensors(state))
    if not np.isfinite(out.data).all():
        raise FloatingPointError("non-finite activations in forward pass")
    return out.data


def forward_with_sample(cloud: PointCloud, state: ModelState):
    out, trace = forward_graph(cloud, state.config, params_as_tensors(state))
    return out.data, trace.sample


# ---------------------------------------------------------------------------
# Checkpoint IO: magic, version, config blob, named parameters, trailing CRC32.


def save_checkpoint(path, state: ModelState) -> None:
    state.validate()
    buf = bytearray()
    buf += CHECKPOINT_MAGIC
    buf += CHECKPOINT_VERSION.to_bytes(4, "little")
    blob = json.dumps(state.config.to_dict(), sort_keys=True).encode("utf-8")
    buf += len(blob).to_bytes(4, "little")
    buf += blob
    buf += len(state.params).to_bytes(4, "little")
    for name, arr in state.params.items():
        nb = name.encode("utf-8")
        buf += len(nb).to_bytes(2, "little")
        buf += nb
        buf += len(arr.shape).to_bytes(1, "little")
        for d in arr.shape:
            buf += int(d).to_bytes(4, "little")
        buf += np.ascontiguousarray(arr, dtype="<f4").tobytes()
    buf += (zlib.crc32(bytes(buf)) & 0xFFFFFFFF).to_bytes(4, "little")
    with open(path, "wb") as f:
        f.write(bytes(buf))


def load_checkpoint(path) -> ModelState:
    with open(path, "rb") as f:
        raw = f.read()
    if len(raw) < 16 or raw[:4] != CHECKPOINT_MAGIC:
        raise ValueError("not a model checkpoint (bad magic)")
    stored_crc = int.from_bytes(raw[-4:], "little")
    if zlib.crc32(raw[:-4]) & 0xFFFFFFFF != stored_crc:
        raise ValueError("checkpoint CRC mismatch: file corrupted")
    off = 4
    version = int.from_bytes(raw[off : off + 4], "little")
    off += 4
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    blob_len = int.from_bytes(raw[off : off + 4], "little")
    off += 4
    config = ModelConfig.from_dict(json.loads(raw[off : off + blob_len].decode("utf-8")))
    off += blob_len
    n_params = int.from_bytes(raw[off : off + 4], "little")
    off += 4
    params = {}
    for _ in range(n_params):
        name_len = int.from_bytes(raw[off : off + 2], "little")
        off += 2
        name = raw[off : off + name_len].decode("utf-8")
        off += name_len
        ndim = raw[off]
        off += 1
        shape = []
        for _ in range(ndim):
            shape.append(int.from_bytes(raw[off : off + 4], "little"))
            off += 4
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off).reshape(shape)
        off += 4 * count
        params[name] = arr.astype(np.float32)
    state = ModelState(config, params)
    state.validate()
    return state
