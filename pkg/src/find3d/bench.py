"""Benchmark data model, class-average mIoU, and the evaluation harness.

Includes a procedural multi-part object generator used as the desk-scale
dataset: each category assembles box/sphere/cylinder parts with per-part
names from a fixed vocabulary. Canonical poses stack parts along +z, so the
"base"/"top" twin parts (nearly identical color and shape) are separable
only through pose-dependent cues; everything else carries a distinctive
color. Objects can also be generated in random poses.
"""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass, field

import numpy as np

from .cloud import PointCloud, normalize, random_rotation, rotation_xyz
from .query import assign, render_prompt, score, segment_features
from .query import topk_prompt_search as _coordinate_ascent

UNLABELED = -1


@dataclass
class BenchmarkObject:
    object_id: str
    category: str
    cloud: PointCloud  # carries per-point gt part ids (-1 = unlabeled)
    part_names: list[str]

    @property
    def gt(self) -> np.ndarray:
        return self.cloud.gt

    def validate(self) -> None:
        if self.gt is None:
            raise ValueError(f"{self.object_id}: missing ground truth")
        if self.gt.max(initial=-1) >= len(self.part_names):
            raise ValueError(f"{self.object_id}: gt id exceeds part list")


# ---------------------------------------------------------------------------
# Metric


def part_iou(pred: np.ndarray, gt: np.ndarray, part_id: int) -> float:
    """Intersection over union for one part; unlabeled gt points excluded."""
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    labeled = gt != UNLABELED
    p = (pred == part_id) & labeled
    g = (gt == part_id) & labeled
    union = (p | g).sum()
    if union == 0:
        return 0.0  # part absent from both; callers only score gt-present parts
    return float((p & g).sum() / union)


def object_miou(pred: np.ndarray, gt: np.ndarray, part_ids=None) -> float:
    """Mean IoU over the labeled parts present in gt."""
    gt = np.asarray(gt)
    if part_ids is None:
        part_ids = [int(p) for p in np.unique(gt) if p != UNLABELED]
    if not part_ids:
        raise ValueError("object has no labeled parts")
    return float(np.mean([part_iou(pred, gt, pid) for pid in part_ids]))


@dataclass
class EvalReport:
    per_object: list[dict]
    per_category: dict[str, float]
    overall: float
    config: dict = field(default_factory=dict)

    def to_json(self) -> str:
        return json.dumps(
            {
                "overall_miou": self.overall,
                "per_category": self.per_category,
                "per_object": self.per_object,
                "config": self.config,
            },
            indent=2,
            sort_keys=True,
        )

    def to_csv(self) -> str:
        out = io.StringIO()
        writer = csv.writer(out, lineterminator="\n")
        writer.writerow(["category", "object", "part", "iou"])
        for rec in self.per_object:
            for part, iou in rec["part_ious"].items():
                writer.writerow([rec["category"], rec["object_id"], part, repr(iou)])
        return out.getvalue()


def class_miou(object_records: list[dict]) -> tuple[float, dict[str, float]]:
    """Two-level mean: object mIoUs averaged per category, then overall."""
    if not object_records:
        raise ValueError("no objects to aggregate")
    buckets: dict[str, list[float]] = {}
    for rec in object_records:
        buckets.setdefault(rec["category"], []).append(rec["miou"])
    per_category = {cat: float(np.mean(vals)) for cat, vals in sorted(buckets.items())}
    overall = float(np.mean(list(per_category.values())))
    return overall, per_category


# ---------------------------------------------------------------------------
# Predictors


class ModelPredictor:
    """Wraps a trained model: normalize, voxel sample, forward, upsample."""

    def __init__(self, state):
        self.state = state

    def point_features(self, cloud: PointCloud, obj=None, queries=None) -> np.ndarray:
        return segment_features(cloud, self.state)


class OraclePredictor:
    """Emits each point's own query embedding; unlabeled points get zeros."""

    def __init__(self, embedder):
        self.embedder = embedder

    def point_features(self, cloud: PointCloud, obj: BenchmarkObject, queries) -> np.ndarray:
        vecs = self.embedder.embed_many(queries)
        feats = np.zeros((len(cloud), vecs.shape[1]))
        gt = cloud.gt
        for pid in range(len(queries)):
            feats[gt == pid] = vecs[pid]
        return feats


class ConstantPredictor:
    """Geometry-blind: every point gets the same fixed feature vector."""

    def __init__(self, vector: np.ndarray):
        self.vector = np.asarray(vector, dtype=np.float64)

    def point_features(self, cloud: PointCloud, obj=None, queries=None) -> np.ndarray:
        return np.tile(self.vector, (len(cloud), 1))


def evaluate(
    predictor,
    dataset: list[BenchmarkObject],
    embedder,
    template: str = "{part} of a {object}",
    rotation_mode: str = "canonical",
    seed: int = 0,
    prompts_override: dict[str, str] | None = None,
) -> EvalReport:
    """Segment every object by its part-name prompts and aggregate class mIoU."""
    if rotation_mode not in ("canonical", "rotated"):
        raise ValueError("rotation_mode must be canonical or rotated")
    if not dataset:
        raise ValueError("empty dataset")
    records = []
    for oi, obj in enumerate(dataset):
        obj.validate()
        cloud = obj.cloud
        if rotation_mode == "rotated":
            rot = random_rotation((seed, 0x52, oi))
            cloud = rot.apply_cloud(cloud)
        if prompts_override is not None:
            queries = [prompts_override[p] for p in obj.part_names]
        else:
            queries = [render_prompt(template, p, obj.category) for p in obj.part_names]
        feats = predictor.point_features(cloud, obj, queries)
        scores = score(feats, embedder.embed_many(queries))
        pred = assign(scores)
        gt = obj.gt
        present = [int(p) for p in np.unique(gt) if p != UNLABELED]
        part_ious = {obj.part_names[pid]: part_iou(pred, gt, pid) for pid in present}
        records.append(
            {
                "object_id": obj.object_id,
                "category": obj.category,
                "part_ious": part_ious,
                "miou": float(np.mean(list(part_ious.values()))),
            }
        )
    overall, per_category = class_miou(records)
    return EvalReport(
        per_object=records,
        per_category=per_category,
        overall=overall,
        config={
            "template": template if prompts_override is None else "<per-part prompts>",
            "rotation_mode": rotation_mode,
            "seed": seed,
        },
    )


def evaluate_random_assignment(dataset: list[BenchmarkObject], seed: int = 0) -> EvalReport:
    """Uniform-random per-point assignment baseline, computed not assumed."""
    records = []
    for oi, obj in enumerate(dataset):
        rng = np.random.default_rng((seed, 0xBA5E, oi))
        pred = rng.integers(0, len(obj.part_names), size=len(obj.cloud))
        gt = obj.gt
        present = [int(p) for p in np.unique(gt) if p != UNLABELED]
        part_ious = {obj.part_names[pid]: part_iou(pred, gt, pid) for pid in present}
        records.append(
            {
                "object_id": obj.object_id,
                "category": obj.category,
                "part_ious": part_ious,
                "miou": float(np.mean(list(part_ious.values()))),
            }
        )
    overall, per_category = class_miou(records)
    return EvalReport(records, per_category, overall, {"baseline": "uniform_random", "seed": seed})


def topk_prompt_search(
    predictor,
    dataset: list[BenchmarkObject],
    candidate_prompts: dict[str, list[str]],
    embedder,
    passes: int = 2,
    rotation_mode: str = "canonical",
    seed: int = 0,
) -> dict[str, str]:
    """Coordinate-ascent over candidate prompts, scored by class mIoU."""

    def evaluate_fn(prompts: dict[str, str]) -> float:
        return evaluate(
            predictor,
            dataset,
            embedder,
            rotation_mode=rotation_mode,
            seed=seed,
            prompts_override=prompts,
        ).overall

    return _coordinate_ascent(evaluate_fn, candidate_prompts, passes=passes)


# ---------------------------------------------------------------------------
# Synthetic dataset


PART_VOCAB: dict[str, tuple[str, tuple[float, float, float]]] = {
    "body": ("cylinder", (0.20, 0.35, 0.80)),
    "handle": ("cylinder", (0.20, 0.70, 0.30)),
    "spout": ("cylinder", (0.90, 0.55, 0.15)),
    "cap": ("box", (0.85, 0.20, 0.20)),
    "base": ("box", (0.46, 0.46, 0.52)),
    "top": ("box", (0.52, 0.46, 0.46)),
    "shade": ("cylinder", (0.60, 0.30, 0.70)),
    "panel": ("box", (0.80, 0.30, 0.60)),
    "leg": ("cylinder", (0.55, 0.35, 0.20)),
    "head": ("sphere", (0.95, 0.60, 0.65)),
    "knob": ("sphere", (0.90, 0.85, 0.20)),
    "bowl": ("sphere", (0.30, 0.80, 0.80)),
    "wheel": ("cylinder", (0.10, 0.10, 0.15)),
    "foot": ("box", (0.50, 0.55, 0.20)),
}

# (part name, primitive override, center, size, axis) per category; canonical
# pose stacks along +z. Sizes: box = half extents, sphere = radius,
# cylinder = (radius, height).
_LAYOUTS: dict[str, list[tuple]] = {
    "mug": [
        ("body", "cylinder", (0, 0, 0), (0.26, 0.55), 2),
        ("handle", "cylinder", (0.33, 0, 0), (0.05, 0.38), 2),
    ],
    "lamp": [
        ("base", "box", (0, 0, -0.38), (0.24, 0.24, 0.05), None),
        ("body", "cylinder", (0, 0, 0), (0.05, 0.55), 2),
        ("shade", "cylinder", (0, 0, 0.38), (0.23, 0.18), 2),
    ],
    "table": [
        ("panel", "box", (0, 0, 0.22), (0.42, 0.30, 0.04), None),
        ("leg", "cylinder", (0.32, 0.20, -0.10), (0.04, 0.50), 2),
        ("leg", "cylinder", (-0.32, 0.20, -0.10), (0.04, 0.50), 2),
        ("leg", "cylinder", (0.32, -0.20, -0.10), (0.04, 0.50), 2),
        ("leg", "cylinder", (-0.32, -0.20, -0.10), (0.04, 0.50), 2),
    ],
    "kettle": [
        ("body", "cylinder", (0, 0, 0), (0.28, 0.42), 2),
        ("spout", "cylinder", (0.33, 0, 0.06), (0.05, 0.28), 0),
        ("handle", "cylinder", (-0.35, 0, 0.08), (0.04, 0.30), 2),
        ("cap", "box", (0, 0, 0.27), (0.10, 0.10, 0.05), None),
    ],
    "robot": [
        ("body", "box", (0, 0, 0), (0.20, 0.14, 0.28), None),
        ("head", "sphere", (0, 0, 0.44), 0.13, None),
        ("leg", "cylinder", (0.10, 0, -0.45), (0.05, 0.32), 2),
        ("leg", "cylinder", (-0.10, 0, -0.45), (0.05, 0.32), 2),
        ("panel", "box", (0, -0.17, 0.04), (0.11, 0.02, 0.11), None),
    ],
    "cart": [
        ("panel", "box", (0, 0, 0), (0.36, 0.22, 0.04), None),
        ("wheel", "cylinder", (0.26, 0.24, -0.14), (0.09, 0.05), 1),
        ("wheel", "cylinder", (-0.26, 0.24, -0.14), (0.09, 0.05), 1),
        ("wheel", "cylinder", (0.26, -0.24, -0.14), (0.09, 0.05), 1),
        ("wheel", "cylinder", (-0.26, -0.24, -0.14), (0.09, 0.05), 1),
        ("handle", "cylinder", (-0.42, 0, 0.16), (0.04, 0.34), 2),
    ],
    "pot": [
        ("bowl", "sphere", (0, 0, 0.02), 0.30, None),
        ("base", "box", (0, 0, -0.33), (0.17, 0.17, 0.04), None),
        ("knob", "sphere", (0, 0, 0.36), 0.07, None),
    ],
    "tower": [
        ("base", "box", (0, 0, -0.42), (0.26, 0.26, 0.07), None),
        ("body", "cylinder", (0, 0, -0.04), (0.12, 0.55), 2),
        ("top", "box", (0, 0, 0.34), (0.20, 0.20, 0.07), None),
        ("panel", "box", (0.15, 0, -0.04), (0.03, 0.10, 0.16), None),
        ("knob", "sphere", (0, 0, 0.47), 0.06, None),
    ],
}


def category_part_names(category: str) -> list[str]:
    names = []
    for entry in _LAYOUTS[category]:
        if entry[0] not in names:
            names.append(entry[0])
    return names


def _sample_box(rng, center, half, n):
    half = np.asarray(half, dtype=np.float64)
    areas = np.array([half[1] * half[2], half[0] * half[2], half[0] * half[1]]) * 4
    face_axis = rng.choice(3, size=n, p=areas / areas.sum())
    face_sign = rng.choice([-1.0, 1.0], size=n)
    pts = rng.uniform(-1.0, 1.0, (n, 3)) * half
    nrm = np.zeros((n, 3))
    rows = np.arange(n)
    pts[rows, face_axis] = face_sign * half[face_axis]
    nrm[rows, face_axis] = face_sign
    return pts + np.asarray(center), nrm


def _sample_sphere(rng, center, radius, n):
    d = rng.standard_normal((n, 3))
    d /= np.linalg.norm(d, axis=1, keepdims=True)
    return np.asarray(center) + radius * d, d


def _sample_cylinder(rng, center, radius, height, axis, n):
    side_area = 2 * np.pi * radius * height
    cap_area = 2 * np.pi * radius * radius
    n_side = int(round(n * side_area / (side_area + cap_area)))
    ang = rng.uniform(0, 2 * np.pi, n_side)
    hh = rng.uniform(-height / 2, height / 2, n_side)
    local = np.stack([radius * np.cos(ang), radius * np.sin(ang), hh], axis=1)
    nrm = np.stack([np.cos(ang), np.sin(ang), np.zeros(n_side)], axis=1)
    n_cap = n - n_side
    r = radius * np.sqrt(rng.uniform(0, 1, n_cap))
    ang2 = rng.uniform(0, 2 * np.pi, n_cap)
    sign = rng.choice([-1.0, 1.0], size=n_cap)
    cap = np.stack([r * np.cos(ang2), r * np.sin(ang2), sign * height / 2], axis=1)
    cap_n = np.stack([np.zeros(n_cap), np.zeros(n_cap), sign], axis=1)
    pts = np.concatenate([local, cap])
    nrm = np.concatenate([nrm, cap_n])
    # cylinder axis: roll local z into the requested axis
    order = {0: [2, 1, 0], 1: [0, 2, 1], 2: [0, 1, 2]}[axis]
    return pts[:, order] + np.asarray(center), nrm[:, order]


def _part_area(primitive, size):
    if primitive == "box":
        a, b, c = size
        return 8 * (a * b + b * c + a * c)
    if primitive == "sphere":
        return 4 * np.pi * size * size
    r, h = size
    return 2 * np.pi * r * h + 2 * np.pi * r * r


def synth_object(
    category: str,
    object_id: str,
    rng: np.random.Generator,
    total_points: int = 1400,
    pose: str = "random",
    color_sigma: float = 0.03,
    min_part_points: int = 40,
) -> BenchmarkObject:
    layout = _LAYOUTS[category]
    part_names = category_part_names(category)
    name_to_id = {n: i for i, n in enumerate(part_names)}

    specs = []
    for name, primitive, center, size, axis in layout:
        jitter = rng.uniform(-0.025, 0.025, 3)
        scale = rng.uniform(0.85, 1.15)
        center = np.asarray(center) + jitter
        if primitive == "sphere":
            size_j = float(size) * scale
        elif primitive == "box":
            size_j = tuple(np.asarray(size) * scale)
        else:
            size_j = (size[0] * scale, size[1] * scale)
        specs.append((name, primitive, center, size_j, axis))

    areas = np.array([_part_area(p, s) for _, p, _, s, _ in specs])
    counts = np.maximum(min_part_points, (total_points * areas / areas.sum()).astype(int))

    pos_parts, nrm_parts, gt_parts, col_parts = [], [], [], []
    for (name, primitive, center, size, axis), n in zip(specs, counts):
        if primitive == "box":
            pts, nrm = _sample_box(rng, center, size, n)
        elif primitive == "sphere":
            pts, nrm = _sample_sphere(rng, center, size, n)
        else:
            pts, nrm = _sample_cylinder(rng, center, size[0], size[1], axis, n)
        base_color = np.asarray(PART_VOCAB[name][1])
        col = np.clip(base_color + rng.normal(0, color_sigma, (n, 3)), 0, 1)
        pos_parts.append(pts)
        nrm_parts.append(nrm)
        col_parts.append(col)
        gt_parts.append(np.full(n, name_to_id[name], dtype=np.int64))

    positions = np.concatenate(pos_parts)
    normals = np.concatenate(nrm_parts)
    colors = np.concatenate(col_parts)
    gt = np.concatenate(gt_parts)

    if pose == "random":
        rot = rotation_xyz(rng.uniform(-np.pi, np.pi, 3))
        positions = positions @ rot.T
        normals = normals @ rot.T
    elif pose != "canonical":
        raise ValueError("pose must be 'random' or 'canonical'")

    cloud = PointCloud(positions, normals, colors, gt=gt)
    return BenchmarkObject(object_id, category, cloud, part_names)


def synth_dataset(
    seed: int,
    n_objects: int,
    parts_range: tuple[int, int] = (2, 5),
    pose: str = "random",
    total_points: int = 1400,
) -> list[BenchmarkObject]:
    """Deterministic procedural benchmark objects cycling over categories."""
    lo, hi = parts_range
    categories = [c for c in _LAYOUTS if lo <= len(category_part_names(c)) <= hi]
    if not categories:
        raise ValueError(f"no category has a part count within {parts_range}")
    objects = []
    for i in range(n_objects):
        category = categories[i % len(categories)]
        rng = np.random.default_rng((seed, 0x0B1, i))
        obj = synth_object(category, f"synth-{category}-{i:04d}", rng, total_points, pose)
        objects.append(obj)
    return objects


def split_dataset(objects: list[BenchmarkObject], test_fraction: float, seed: int):
    """Disjoint-by-object train/test split."""
    rng = np.random.default_rng((seed, 0x5711))
    order = rng.permutation(len(objects))
    n_test = int(round(test_fraction * len(objects)))
    test_ids = set(int(i) for i in order[:n_test])
    train = [o for i, o in enumerate(objects) if i not in test_ids]
    test = [o for i, o in enumerate(objects) if i in test_ids]
    return train, test


# ---------------------------------------------------------------------------
# Manifest IO


def save_dataset(out_dir, objects: list[BenchmarkObject], name: str = "synthetic") -> str:
    """Write PLY + labels per object and a manifest; returns manifest path."""
    from .plyio import write_ply

    os.makedirs(out_dir, exist_ok=True)
    entries = []
    for obj in objects:
        cloud_file = f"{obj.object_id}.ply"
        labels_file = f"{obj.object_id}.labels.json"
        write_ply(os.path.join(out_dir, cloud_file), obj.cloud)
        with open(os.path.join(out_dir, labels_file), "w", encoding="utf-8") as f:
            json.dump(
                {"part_names": obj.part_names, "gt": [int(g) for g in obj.gt]},
                f,
            )
        entries.append(
            {
                "id": obj.object_id,
                "category": obj.category,
                "cloud": cloud_file,
                "labels": labels_file,
            }
        )
    manifest = {"name": name, "objects": entries}
    path = os.path.join(out_dir, "manifest.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2)
    return path


def load_dataset(manifest_path) -> list[BenchmarkObject]:
    from .plyio import read_ply

    with open(manifest_path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    base = os.path.dirname(os.path.abspath(str(manifest_path)))
    objects = []
    for entry in manifest["objects"]:
        cloud_path = os.path.join(base, entry["cloud"])
        if not os.path.exists(cloud_path):
            raise FileNotFoundError(f"cloud file missing: {cloud_path}")
        cloud = read_ply(cloud_path)
        with open(os.path.join(base, entry["labels"]), "r", encoding="utf-8") as f:
            labels = json.load(f)
        gt = np.asarray(labels["gt"], dtype=np.int64)
        if len(gt) != len(cloud):
            raise ValueError(f"{entry['id']}: gt length {len(gt)} != points {len(cloud)}")
        cloud.gt = gt
        objects.append(BenchmarkObject(entry["id"], entry["category"], cloud, list(labels["part_names"])))
    return objects
