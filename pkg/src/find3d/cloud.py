"""Point-cloud representation, normalization, voxel sampling, augmentation.

A cloud stores positions, unit normals (or zeros when absent) and RGB colors
in [0,1]. All operations are pure: they return new clouds/arrays and are
deterministic given their seed.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from . import accel


@dataclass
class Point:
    position: np.ndarray
    normal: np.ndarray
    color: np.ndarray


@dataclass
class PointCloud:
    positions: np.ndarray  # (N, 3) float64
    normals: np.ndarray  # (N, 3) float64, unit or zero rows
    colors: np.ndarray  # (N, 3) float64 in [0, 1]
    gt: np.ndarray | None = None  # optional per-point part id, -1 = unlabeled

    def __post_init__(self):
        self.positions = np.asarray(self.positions, dtype=np.float64)
        n = len(self.positions)
        if self.normals is None:
            self.normals = np.zeros((n, 3))
        if self.colors is None:
            self.colors = np.full((n, 3), 0.5)
        self.normals = np.asarray(self.normals, dtype=np.float64)
        self.colors = np.asarray(self.colors, dtype=np.float64)
        if self.gt is not None:
            self.gt = np.asarray(self.gt, dtype=np.int64)

    def __len__(self) -> int:
        return len(self.positions)

    def point(self, i: int) -> Point:
        return Point(self.positions[i], self.normals[i], self.colors[i])

    def validate(self) -> None:
        if len(self) == 0:
            raise ValueError("empty point cloud")
        if not np.isfinite(self.positions).all():
            raise ValueError("non-finite positions")
        norms = np.linalg.norm(self.normals, axis=1)
        present = norms > 1e-12
        if present.any() and not np.allclose(norms[present], 1.0, atol=1e-5):
            raise ValueError("normals must be unit length or zero")
        if self.colors.min() < -1e-9 or self.colors.max() > 1 + 1e-9:
            raise ValueError("colors must lie in [0, 1]")

    def features9(self, idx: np.ndarray | None = None) -> np.ndarray:
        """Per-point (x,y,z,nx,ny,nz,r,g,b) rows."""
        sel = slice(None) if idx is None else idx
        return np.concatenate(
            [self.positions[sel], self.normals[sel], self.colors[sel]], axis=1
        )

    def subset(self, idx: np.ndarray) -> "PointCloud":
        return PointCloud(
            self.positions[idx].copy(),
            self.normals[idx].copy(),
            self.colors[idx].copy(),
            None if self.gt is None else self.gt[idx].copy(),
        )

    def copy(self) -> "PointCloud":
        return self.subset(slice(None))


@dataclass
class RigidTransform:
    rotation: np.ndarray = field(default_factory=lambda: np.eye(3))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))
    scale: float = 1.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)

    def validate(self) -> None:
        rtr = self.rotation.T @ self.rotation
        if not np.allclose(rtr, np.eye(3), atol=1e-6):
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(self.rotation) - 1.0) > 1e-6:
            raise ValueError("rotation determinant is not +1")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    def apply(self, positions: np.ndarray) -> np.ndarray:
        return self.scale * (positions @ self.rotation.T) + self.translation

    def apply_normals(self, normals: np.ndarray) -> np.ndarray:
        return normals @ self.rotation.T

    def apply_cloud(self, cloud: PointCloud) -> PointCloud:
        return replace(
            cloud.copy(),
            positions=self.apply(cloud.positions),
            normals=self.apply_normals(cloud.normals),
        )


@dataclass
class SampleResult:
    """Outcome of voxel down-sampling.

    ``kept`` lists surviving original indices in ascending order; grid holds
    each kept point's non-negative voxel coordinates. Every dropped index maps
    to its exact nearest kept index.
    """

    kept: np.ndarray
    voxel_key: np.ndarray
    grid: np.ndarray  # (n_kept, 3) voxel coordinates of kept points
    dropped: np.ndarray
    parent: np.ndarray  # nearest kept original index, aligned with dropped
    voxel_size: float

    @property
    def parent_of_dropped(self) -> dict[int, int]:
        return {int(d): int(p) for d, p in zip(self.dropped, self.parent)}

    def kept_row_of(self, original_indices: np.ndarray) -> np.ndarray:
        """Row in the kept arrays for each original index (must be kept)."""
        rows = np.searchsorted(self.kept, original_indices)
        ok = (rows < len(self.kept)) & (self.kept[np.minimum(rows, len(self.kept) - 1)] == original_indices)
        if not ok.all():
            raise KeyError("index not in kept set")
        return rows


def normalize(cloud: PointCloud) -> tuple[PointCloud, RigidTransform]:
    """Center on the bounding-box center and scale the longest edge to 1."""
    cloud.validate()
    lo = cloud.positions.min(axis=0)
    hi = cloud.positions.max(axis=0)
    extent = float((hi - lo).max())
    if extent <= 0.0:
        raise ValueError("zero extent: all points identical")
    center = (lo + hi) / 2.0
    scale = 1.0 / extent
    transform = RigidTransform(np.eye(3), -center * scale, scale)
    out = cloud.copy()
    out.positions = transform.apply(cloud.positions)
    return out, transform


def voxel_grid_coords(positions: np.ndarray, voxel_size: float) -> np.ndarray:
    """floor(position / voxel_size), shifted so every coordinate is >= 0."""
    grid = np.floor(positions / voxel_size).astype(np.int64)
    grid -= grid.min(axis=0)
    if grid.max(initial=0) >= (1 << accel.MAX_BITS):
        raise ValueError("cloud spans too many voxels for 64-bit keys")
    return grid


def pack_voxel_keys(grid: np.ndarray) -> np.ndarray:
    b = accel.MAX_BITS
    return grid[:, 0] | (grid[:, 1] << b) | (grid[:, 2] << (2 * b))


def voxel_sample(cloud: PointCloud, voxel_size: float = 0.02) -> SampleResult:
    """Keep at most one point per voxel; ties keep the lowest original index.

    Dropped points are mapped to their exact nearest kept point (uniform-grid
    scan with expanding radius on the jit path, brute force on the fallback).
    """
    if voxel_size <= 0:
        raise ValueError("voxel_size must be positive")
    cloud.validate()
    grid_all = voxel_grid_coords(cloud.positions, voxel_size)
    keys_all = pack_voxel_keys(grid_all)
    _, first = np.unique(keys_all, return_index=True)
    kept = np.sort(first.astype(np.int64))
    mask = np.zeros(len(cloud), dtype=bool)
    mask[kept] = True
    dropped = np.nonzero(~mask)[0].astype(np.int64)
    if len(dropped):
        parent_rows = accel.nearest_kept(
            cloud.positions[kept],
            grid_all[kept],
            cloud.positions[dropped],
            grid_all[dropped],
            float(voxel_size),
        )
        parent = kept[parent_rows]
    else:
        parent = np.empty(0, dtype=np.int64)
    return SampleResult(
        kept=kept,
        voxel_key=keys_all[kept],
        grid=grid_all[kept],
        dropped=dropped,
        parent=parent,
        voxel_size=float(voxel_size),
    )


def nn_upsample(kept_features: np.ndarray, sample: SampleResult) -> np.ndarray:
    """Expand kept-point features to every original point.

    Kept rows get their own feature; each dropped row receives a bit-identical
    copy of its nearest kept point's feature.
    """
    n_kept = len(sample.kept)
    if kept_features.shape[0] != n_kept:
        raise ValueError(
            f"kept_features has {kept_features.shape[0]} rows, expected {n_kept}"
        )
    n = n_kept + len(sample.dropped)
    out = np.empty((n,) + kept_features.shape[1:], dtype=kept_features.dtype)
    out[sample.kept] = kept_features
    if len(sample.dropped):
        out[sample.dropped] = kept_features[sample.kept_row_of(sample.parent)]
    return out


def rotation_xyz(angles) -> np.ndarray:
    """Rz(c) @ Ry(b) @ Rx(a) for angles (a, b, c)."""
    a, b, c = angles
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cc, sc = np.cos(c), np.sin(c)
    rx = np.array([[1, 0, 0], [0, ca, -sa], [0, sa, ca]])
    ry = np.array([[cb, 0, sb], [0, 1, 0], [-sb, 0, cb]])
    rz = np.array([[cc, -sc, 0], [sc, cc, 0], [0, 0, 1]])
    return rz @ ry @ rx


def random_rotation(seed) -> RigidTransform:
    """Sequential random rotation about x, y, z with angles uniform in [-pi, pi)."""
    rng = np.random.default_rng(seed)
    angles = rng.uniform(-np.pi, np.pi, size=3)
    return RigidTransform(rotation_xyz(angles))


@dataclass
class AugmentConfig:
    rotate: bool = True
    scale: bool = True
    scale_range: tuple[float, float] = (0.9, 1.1)
    flip: bool = True
    flip_axes: tuple[int, ...] = (0, 1)
    flip_prob: float = 0.5
    jitter: bool = True
    jitter_sigma: float = 0.005
    jitter_clip: float = 0.02
    chromatic_auto_contrast: bool = True
    auto_contrast_prob: float = 0.2
    auto_contrast_blend: float = 0.5
    chromatic_translation: bool = True
    translation_range: float = 0.05
    chromatic_jitter: bool = True
    color_jitter_sigma: float = 0.05

    @classmethod
    def none(cls) -> "AugmentConfig":
        return cls(
            rotate=False,
            scale=False,
            flip=False,
            jitter=False,
            chromatic_auto_contrast=False,
            chromatic_translation=False,
            chromatic_jitter=False,
        )


def augment(cloud: PointCloud, config: AugmentConfig, seed) -> PointCloud:
    """Apply the enabled geometric and chromatic augmentations.

    Geometric ops transform positions and normals (normals re-normalized);
    chromatic ops clamp colors to [0, 1]. Deterministic given the seed.
    """
    rng = np.random.default_rng(seed)
    out = cloud.copy()
    if config.rotate:
        angles = rng.uniform(-np.pi, np.pi, size=3)
        rot = rotation_xyz(angles)
        out.positions = out.positions @ rot.T
        out.normals = out.normals @ rot.T
    if config.scale:
        s = rng.uniform(*config.scale_range)
        out.positions = out.positions * s
    if config.flip:
        for axis in config.flip_axes:
            if rng.uniform() < config.flip_prob:
                out.positions[:, axis] = -out.positions[:, axis]
                out.normals[:, axis] = -out.normals[:, axis]
    if config.jitter:
        noise = rng.normal(0.0, config.jitter_sigma, out.positions.shape)
        np.clip(noise, -config.jitter_clip, config.jitter_clip, out=noise)
        out.positions = out.positions + noise
    if config.rotate or config.flip:
        norms = np.linalg.norm(out.normals, axis=1, keepdims=True)
        np.divide(out.normals, norms, out=out.normals, where=norms > 1e-12)

    if config.chromatic_auto_contrast:
        if rng.uniform() < config.auto_contrast_prob:
            lo = out.colors.min(axis=0, keepdims=True)
            hi = out.colors.max(axis=0, keepdims=True)
            span = np.where(hi - lo > 1e-12, hi - lo, 1.0)
            stretched = (out.colors - lo) / span
            b = config.auto_contrast_blend
            out.colors = (1 - b) * out.colors + b * stretched
    if config.chromatic_translation:
        shift = rng.uniform(-config.translation_range, config.translation_range, size=(1, 3))
        out.colors = out.colors + shift
    if config.chromatic_jitter:
        out.colors = out.colors + rng.normal(0.0, config.color_jitter_sigma, out.colors.shape)
    if config.chromatic_auto_contrast or config.chromatic_translation or config.chromatic_jitter:
        np.clip(out.colors, 0.0, 1.0, out=out.colors)
    return out
