"""Data engine: multi-view point rendering, mask filtering and merging,
back-projection to point sets, orientation voting, and label assembly.

Annotation intelligence (mask proposal, naming, orientation judgement) sits
behind the provider interface. The oracle provider, used by tests and the
synthetic pipeline, derives exact masks from ground-truth part ids; the
remote provider posts renders to an external service.
"""

from __future__ import annotations

import base64
import io
import json
import os
import urllib.request
from dataclasses import dataclass, field

import numpy as np

from . import accel
from .cloud import PointCloud, RigidTransform
from .train import LabelRecord

ANNOTATOR_URL_VAR = "FIND3D_ANNOTATOR_URL"

EMBED_MAGIC = b"FNDE"


@dataclass
class Camera:
    extrinsics: RigidTransform  # world -> camera, scale 1
    focal: float
    principal: tuple[float, float]  # (cx, cy) pixels
    width: int = 500
    height: int = 500

    def validate(self) -> None:
        if self.focal <= 0:
            raise ValueError("focal length must be positive")
        cx, cy = self.principal
        if not (0 <= cx < self.width and 0 <= cy < self.height):
            raise ValueError("principal point outside image")

    def project(self, positions: np.ndarray):
        """Pixel coordinates (u=column, v=row) and camera-space depth."""
        cam = self.extrinsics.apply(positions)
        z = cam[:, 2]
        safe = np.where(z > 1e-9, z, 1.0)
        u = self.principal[0] + self.focal * cam[:, 0] / safe
        v = self.principal[1] + self.focal * cam[:, 1] / safe
        return u, v, z


def look_at_camera(eye, focal: float = 720.0, width: int = 500, height: int = 500) -> Camera:
    """Camera at ``eye`` looking at the origin, world +z as the up hint."""
    eye = np.asarray(eye, dtype=np.float64)
    forward = -eye / np.linalg.norm(eye)
    up = np.array([0.0, 0.0, 1.0])
    if abs(forward @ up) > 0.999:
        up = np.array([1.0, 0.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    return Camera(
        extrinsics=RigidTransform(rot, -rot @ eye, 1.0),
        focal=focal,
        principal=((width - 1) / 2.0, (height - 1) / 2.0),
        width=width,
        height=height,
    )


def ring_cameras(
    n_views: int,
    radius: float,
    focal: float = 720.0,
    width: int = 500,
    height: int = 500,
    elevation_deg: float = 25.0,
) -> list[Camera]:
    """Evenly spaced azimuths on two elevation rings, all looking at origin."""
    cams = []
    for i in range(n_views):
        az = 2.0 * np.pi * i / n_views
        el = np.deg2rad(elevation_deg if i % 2 == 0 else -elevation_deg)
        eye = radius * np.array([np.cos(az) * np.cos(el), np.sin(az) * np.cos(el), np.sin(el)])
        cams.append(look_at_camera(eye, focal, width, height))
    return cams


@dataclass
class RenderedView:
    view_id: int
    camera: Camera
    pixel_owner: np.ndarray  # (H, W) point index or -1
    depth: np.ndarray  # (H, W), inf where unset
    image: np.ndarray  # (H, W, 3) colors in [0, 1], white background


def render_view(cloud: PointCloud, camera: Camera, view_id: int = 0, splat_radius: int = 2) -> RenderedView:
    """Splat each point as a square; nearest depth wins each pixel."""
    camera.validate()
    u, v, z = camera.project(cloud.positions)
    h, w = camera.height, camera.width
    ok = (
        (z > 0.05)
        & (u > -splat_radius - 1)
        & (u < w + splat_radius)
        & (v > -splat_radius - 1)
        & (v < h + splat_radius)
    )
    idx = np.nonzero(ok)[0]
    us = np.rint(u[idx]).astype(np.int64)
    vs = np.rint(v[idx]).astype(np.int64)
    owner_sub, depth = accel.splat_zbuffer(us, vs, z[idx], splat_radius, h, w)
    owner = np.where(owner_sub >= 0, idx[np.clip(owner_sub, 0, None)], -1)
    image = np.ones((h, w, 3))
    hit = owner >= 0
    image[hit] = cloud.colors[owner[hit]]
    return RenderedView(view_id, camera, owner, depth, image)


def render_views(
    cloud: PointCloud,
    n_views: int = 10,
    camera_radius: float = 2.4,
    focal: float = 720.0,
    width: int = 500,
    height: int = 500,
    splat_radius: int = 2,
) -> list[RenderedView]:
    if len(cloud) == 0:
        raise ValueError("cannot render an empty cloud")
    cams = ring_cameras(n_views, camera_radius, focal, width, height)
    return [render_view(cloud, cam, i, splat_radius) for i, cam in enumerate(cams)]


# ---------------------------------------------------------------------------
# Masks


@dataclass
class MaskRecord:
    view_id: int
    pixels: np.ndarray  # sorted unique flat indices (row * width + col)
    confidence: float
    label_text: str = ""

    def __post_init__(self):
        self.pixels = np.unique(np.asarray(self.pixels, dtype=np.int64))


def filter_mask(
    mask: MaskRecord,
    image_area: int,
    min_pixels_at_500: int = 350,
    max_fraction: float = 0.2,
    min_confidence: float = 0.8,
) -> tuple[bool, str]:
    """(keep, reason). Thresholds scale with area; 500x500 gives 350 / 20%."""
    min_pixels = min_pixels_at_500 * (image_area / 250_000.0)
    if len(mask.pixels) < min_pixels:
        return False, "too_small"
    if len(mask.pixels) > max_fraction * image_area:
        return False, "too_large"
    if mask.confidence < min_confidence:
        return False, "low_confidence"
    return True, ""


def merge_masks(masks: list[MaskRecord]) -> list[MaskRecord]:
    """Union masks sharing (view, label); confidence is the group max."""
    groups: dict[tuple[int, str], list[MaskRecord]] = {}
    for m in masks:
        groups.setdefault((m.view_id, m.label_text), []).append(m)
    merged = []
    for (view_id, label), group in sorted(groups.items()):
        pixels = np.unique(np.concatenate([g.pixels for g in group]))
        merged.append(MaskRecord(view_id, pixels, max(g.confidence for g in group), label))
    return merged


def backproject(mask: MaskRecord, view: RenderedView) -> np.ndarray:
    """Point indices that own the mask's pixels (z-buffer visibility)."""
    owners = view.pixel_owner.ravel()[mask.pixels]
    owners = owners[owners >= 0]
    return np.unique(owners)


def mask_to_rle(pixels: np.ndarray, height: int, width: int) -> dict:
    """Uncompressed run-length encoding, row-major, starting with a zero run."""
    flat = np.zeros(height * width, dtype=bool)
    flat[pixels] = True
    transitions = np.flatnonzero(flat[1:] != flat[:-1]) + 1
    boundaries = np.concatenate([[0], transitions, [flat.size]])
    runs = [int(r) for r in np.diff(boundaries)]
    if flat[0]:
        runs = [0] + runs
    return {"size": [height, width], "counts": runs}


def rle_to_mask_pixels(rle: dict) -> np.ndarray:
    h, w = rle["size"]
    out = np.zeros(h * w, dtype=bool)
    pos = 0
    value = False
    for count in rle["counts"]:
        if value:
            out[pos : pos + count] = True
        pos += count
        value = not value
    return np.flatnonzero(out)


# ---------------------------------------------------------------------------
# Annotation providers


class OracleAnnotationProvider:
    """Exact provider backed by ground-truth part ids.

    Masks are the pixel sets owned by each part's points, names are the true
    part names, and an orientation gets a yes vote only when the render is
    identical to the canonical cloud's render under the same camera.
    """

    def __init__(self, cloud: PointCloud, part_names: list[str], seed: int = 0, splat_radius: int = 2):
        if cloud.gt is None:
            raise ValueError("oracle provider needs ground-truth part ids")
        self.cloud = cloud
        self.part_names = list(part_names)
        self.seed = seed
        self.splat_radius = splat_radius

    def propose_masks(self, view: RenderedView) -> list[MaskRecord]:
        owners = view.pixel_owner.ravel()
        hit = np.flatnonzero(owners >= 0)
        part_of_pixel = self.cloud.gt[owners[hit]]
        masks = []
        for pid in np.unique(part_of_pixel):
            if pid < 0:
                continue
            pixels = hit[part_of_pixel == pid]
            masks.append(MaskRecord(view.view_id, pixels, 1.0, ""))
        return masks

    def name_mask(self, view: RenderedView, mask: MaskRecord) -> str:
        owners = view.pixel_owner.ravel()[mask.pixels]
        owners = owners[owners >= 0]
        if len(owners) == 0:
            return ""
        parts = self.cloud.gt[owners]
        parts = parts[parts >= 0]
        if len(parts) == 0:
            return ""
        counts = np.bincount(parts, minlength=len(self.part_names))
        return self.part_names[int(np.argmax(counts))]

    def orientation_vote(self, view: RenderedView) -> bool:
        canonical = render_view(self.cloud, view.camera, view.view_id, self.splat_radius)
        return bool(np.array_equal(canonical.pixel_owner, view.pixel_owner))


class RemoteAnnotationProvider:
    """HTTP provider posting PNG-encoded renders to an annotation service."""

    def __init__(self, base_url: str | None = None, timeout: float = 60.0):
        self.base_url = (base_url or os.environ.get(ANNOTATOR_URL_VAR, "")).rstrip("/")
        if not self.base_url:
            raise ValueError(f"no annotator URL; set {ANNOTATOR_URL_VAR}")
        self.timeout = timeout

    @staticmethod
    def _png_bytes(image: np.ndarray) -> bytes:
        from PIL import Image

        buf = io.BytesIO()
        Image.fromarray(np.clip(image * 255.0, 0, 255).astype(np.uint8)).save(buf, format="PNG")
        return buf.getvalue()

    def _post(self, path: str, body: bytes, content_type: str) -> dict:
        req = urllib.request.Request(
            self.base_url + path, data=body, headers={"Content-Type": content_type}
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            return json.loads(resp.read().decode("utf-8"))

    def propose_masks(self, view: RenderedView) -> list[MaskRecord]:
        payload = self._post("/masks", self._png_bytes(view.image), "image/png")
        masks = []
        for item in payload["masks"]:
            pixels = rle_to_mask_pixels(item["rle"])
            masks.append(MaskRecord(view.view_id, pixels, float(item["confidence"]), ""))
        return masks

    def name_mask(self, view: RenderedView, mask: MaskRecord) -> str:
        body = json.dumps(
            {
                "image": base64.b64encode(self._png_bytes(view.image)).decode("ascii"),
                "rle": mask_to_rle(mask.pixels, view.camera.height, view.camera.width),
            }
        ).encode("utf-8")
        return str(self._post("/name", body, "application/json")["text"])

    def orientation_vote(self, view: RenderedView) -> bool:
        payload = self._post("/orient", self._png_bytes(view.image), "image/png")
        return str(payload.get("answer", "no")).strip().lower() == "yes"


# ---------------------------------------------------------------------------
# Orientation voting and label assembly


def choose_orientation(
    cloud: PointCloud,
    candidate_rotations: list[RigidTransform],
    provider,
    n_views: int = 10,
    **render_kwargs,
) -> tuple[RigidTransform, np.ndarray]:
    """Pick the candidate with the highest fraction of yes votes.

    Ties break toward the lowest candidate index. Returns (rotation, yes
    fractions per candidate).
    """
    if not candidate_rotations:
        raise ValueError("no candidate rotations")
    fractions = np.zeros(len(candidate_rotations))
    for ci, rot in enumerate(candidate_rotations):
        rotated = rot.apply_cloud(cloud)
        views = render_views(rotated, n_views=n_views, **render_kwargs)
        votes = [bool(provider.orientation_vote(v)) for v in views]
        fractions[ci] = sum(votes) / len(votes)
    best = int(np.argmax(fractions))
    return candidate_rotations[best], fractions


@dataclass
class AnnotationResult:
    object_id: str
    records: list[LabelRecord]
    insufficient_labels: bool
    n_proposed: int = 0
    n_filtered: int = 0
    filter_reasons: dict = field(default_factory=dict)


def build_labels(
    cloud: PointCloud,
    provider,
    embedder,
    object_id: str = "object",
    n_views: int = 10,
    min_labels: int = 2,
    min_confidence: float = 0.8,
    **render_kwargs,
) -> AnnotationResult:
    """Render, propose, filter, name, merge, back-project, embed.

    Masks failing the size/confidence filters are dropped with a counted
    reason. Merging is per (view, label); duplicate texts across views stay
    separate records. Records are sorted by (view_id, label_text).
    """
    views = render_views(cloud, n_views=n_views, **render_kwargs)
    area = views[0].camera.width * views[0].camera.height
    named = []
    n_proposed = 0
    reasons: dict[str, int] = {}
    for view in views:
        try:
            proposals = provider.propose_masks(view)
        except Exception as exc:
            raise RuntimeError(f"mask proposal failed on view {view.view_id}: {exc}") from exc
        n_proposed += len(proposals)
        for mi, mask in enumerate(proposals):
            keep, reason = filter_mask(mask, area, min_confidence=min_confidence)
            if not keep:
                reasons[reason] = reasons.get(reason, 0) + 1
                continue
            try:
                text = provider.name_mask(view, mask)
            except Exception as exc:
                raise RuntimeError(
                    f"naming failed on view {view.view_id}, mask {mi}: {exc}"
                ) from exc
            if not text:
                reasons["unnamed"] = reasons.get("unnamed", 0) + 1
                continue
            named.append(MaskRecord(mask.view_id, mask.pixels, mask.confidence, text))
    merged = merge_masks(named)
    records = []
    for mask in sorted(merged, key=lambda m: (m.view_id, m.label_text)):
        indices = backproject(mask, views[mask.view_id])
        if len(indices) == 0:
            continue
        try:
            embedding = embedder.embed(mask.label_text)
        except Exception as exc:
            raise RuntimeError(f"embedding failed for {mask.label_text!r}: {exc}") from exc
        records.append(LabelRecord(object_id, indices, mask.label_text, embedding))
    return AnnotationResult(
        object_id=object_id,
        records=records,
        insufficient_labels=len(records) < min_labels,
        n_proposed=n_proposed,
        n_filtered=sum(reasons.values()),
        filter_reasons=reasons,
    )


# ---------------------------------------------------------------------------
# Annotation files: JSON-lines records + binary embedding sidecar


def write_embedding_sidecar(path, matrix: np.ndarray) -> None:
    matrix = np.asarray(matrix, dtype="<f4")
    with open(path, "wb") as f:
        f.write(EMBED_MAGIC)
        f.write(int(matrix.shape[0]).to_bytes(4, "little"))
        f.write(int(matrix.shape[1]).to_bytes(4, "little"))
        f.write(np.ascontiguousarray(matrix).tobytes())


def read_embedding_sidecar(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != EMBED_MAGIC:
            raise ValueError("not an embedding sidecar (bad magic)")
        rows = int.from_bytes(f.read(4), "little")
        dim = int.from_bytes(f.read(4), "little")
        data = np.fromfile(f, dtype="<f4", count=rows * dim)
    if data.size != rows * dim:
        raise ValueError("truncated embedding sidecar")
    return data.reshape(rows, dim).astype(np.float64)


def write_annotations(jsonl_path, sidecar_path, results: list[AnnotationResult]) -> None:
    """Write label records as JSONL with deduplicated embeddings in a sidecar."""
    text_rows: dict[str, int] = {}
    vectors = []
    lines = []
    sidecar_name = os.path.basename(str(sidecar_path))
    for result in results:
        for rec in result.records:
            if rec.label_text not in text_rows:
                text_rows[rec.label_text] = len(vectors)
                vectors.append(rec.embedding)
            lines.append(
                json.dumps(
                    {
                        "object_id": rec.object_id,
                        "label_text": rec.label_text,
                        "point_indices": [int(i) for i in rec.point_indices],
                        "embedding_ref": {"file": sidecar_name, "row": text_rows[rec.label_text]},
                    },
                    sort_keys=True,
                )
            )
    write_embedding_sidecar(sidecar_path, np.stack(vectors) if vectors else np.zeros((0, 1)))
    with open(jsonl_path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + ("\n" if lines else ""))


def read_annotations(jsonl_path) -> dict[str, list[LabelRecord]]:
    """Parse annotation JSONL; errors carry the offending line number."""
    base = os.path.dirname(os.path.abspath(str(jsonl_path)))
    sidecars: dict[str, np.ndarray] = {}
    out: dict[str, list[LabelRecord]] = {}
    with open(jsonl_path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                ref = rec["embedding_ref"]
                fname = ref["file"]
                if fname not in sidecars:
                    sidecars[fname] = read_embedding_sidecar(os.path.join(base, fname))
                embedding = sidecars[fname][ref["row"]]
                label = LabelRecord(
                    object_id=rec["object_id"],
                    point_indices=np.asarray(rec["point_indices"], dtype=np.int64),
                    label_text=rec["label_text"],
                    embedding=embedding,
                )
            except Exception as exc:
                raise ValueError(f"{jsonl_path}:{lineno}: bad annotation record: {exc}") from exc
            out.setdefault(rec["object_id"], []).append(label)
    return out
