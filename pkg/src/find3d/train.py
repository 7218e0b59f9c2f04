"""Contrastive training: label pooling, batch loss, Adam, cosine schedule.

Each label pairs a set of kept-point indices with a text embedding. The batch
loss is softmax cross-entropy over dot products between the L2-normalized
mean feature of each label's surviving points and every label embedding in
the batch. Labels whose points are all dropped by the per-epoch voxel pass
are skipped and counted.
"""

from __future__ import annotations

import csv
import hashlib
import io
from dataclasses import dataclass, field, asdict

import numpy as np

from . import autodiff as ad
from . import net
from .cloud import AugmentConfig, PointCloud, augment, normalize


@dataclass
class LabelRecord:
    object_id: str
    point_indices: np.ndarray  # indices into the object's kept points
    label_text: str
    embedding: np.ndarray  # unit d-vector

    def __post_init__(self):
        self.point_indices = np.asarray(self.point_indices, dtype=np.int64)
        self.embedding = np.asarray(self.embedding, dtype=np.float64)
        if len(self.point_indices) == 0:
            raise ValueError("label with empty point set")


@dataclass
class TrainConfig:
    batch_objects: int = 64
    epochs: int = 80
    lr_start: float = 3e-4
    lr_end: float = 5e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    split_ratio: float = 0.9
    seed: int = 0
    temperature: float = 1.0
    augment: AugmentConfig = field(default_factory=AugmentConfig)

    def __post_init__(self):
        if not 0 < self.lr_end <= self.lr_start:
            raise ValueError("need 0 < lr_end <= lr_start")
        if not 0 < self.split_ratio < 1:
            raise ValueError("split_ratio must be in (0, 1)")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        d = dict(d)
        if "augment" in d and isinstance(d["augment"], dict):
            d["augment"] = AugmentConfig(**d["augment"])
        return cls(**d)


@dataclass
class OptimizerState:
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0


def pool_label_feature(features: np.ndarray, indices) -> np.ndarray:
    """L2-normalized arithmetic mean of the selected feature rows."""
    rows = features[np.asarray(indices, dtype=np.int64)]
    mean = rows.mean(axis=0)
    norm = np.linalg.norm(mean)
    return mean / max(norm, 1e-12)


def contrastive_loss(pooled, labels, temperature: float = 1.0) -> float:
    """Mean softmax cross-entropy of matched dot products over the batch."""
    p = np.asarray(pooled, dtype=np.float64)
    t = np.asarray(labels, dtype=np.float64)
    if p.ndim != 2 or p.shape != t.shape:
        raise ValueError(f"pooled {p.shape} and labels {t.shape} must match as (B, d)")
    if p.shape[0] < 1:
        raise ValueError("need at least one pair")
    logits = (p @ t.T) / temperature
    m = logits.max(axis=1, keepdims=True)
    lse = (m + np.log(np.exp(logits - m).sum(axis=1, keepdims=True))).squeeze(1)
    matched = np.diag(logits)
    return float(np.mean(lse - matched))


def cosine_lr(epoch: float, config: TrainConfig) -> float:
    """Cosine annealing from lr_start (epoch 0) to lr_end (final epoch)."""
    t = min(max(epoch, 0.0), config.epochs) / max(config.epochs, 1)
    return config.lr_end + 0.5 * (config.lr_start - config.lr_end) * (1.0 + np.cos(np.pi * t))


def adam_step(params: dict[str, ad.Tensor], grads: dict[str, np.ndarray], state: OptimizerState, lr: float, config: TrainConfig) -> OptimizerState:
    """Standard Adam with bias correction; updates parameter data in place."""
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    for name, p in params.items():
        g = grads[name]
        if name not in state.m:
            state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        m = state.m[name]
        v = state.v[name]
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * (g * g)
        mhat = m / (1 - b1**t)
        vhat = v / (1 - b2**t)
        p.data -= (lr * mhat / (np.sqrt(vhat) + config.eps)).astype(p.data.dtype)
    return state


def object_stream_seed(seed: int, object_id: str, epoch: int) -> tuple:
    digest = hashlib.blake2b(object_id.encode("utf-8"), digest_size=8).digest()
    return (seed, int.from_bytes(digest, "little"), epoch)


@dataclass
class PreparedObject:
    object_id: str
    kept_cloud: PointCloud  # canonical kept points, normalized frame
    labels: list[LabelRecord]
    label_matrix: np.ndarray  # (n_labels, d) unit rows


def prepare_dataset(dataset, config: TrainConfig, model_config: net.ModelConfig) -> list[PreparedObject]:
    """Normalize + voxel sample each object once; validate label indices."""
    from .cloud import voxel_sample

    if not dataset:
        raise ValueError("empty dataset")
    prepped = []
    for obj_i, (cloud, labels) in enumerate(dataset):
        norm_cloud, _ = normalize(cloud)
        sample = voxel_sample(norm_cloud, model_config.voxel_size)
        kept_cloud = norm_cloud.subset(sample.kept)
        object_id = labels[0].object_id if labels else f"object{obj_i:05d}"
        n_kept = len(sample.kept)
        for rec in labels:
            if rec.point_indices.min(initial=0) < 0 or rec.point_indices.max(initial=0) >= n_kept:
                raise IndexError(
                    f"{rec.object_id}/{rec.label_text}: label index out of range "
                    f"(kept {n_kept} points)"
                )
            if rec.embedding.shape != (model_config.out_dim,):
                raise ValueError(
                    f"{rec.object_id}/{rec.label_text}: embedding dim "
                    f"{rec.embedding.shape} != out_dim {model_config.out_dim}"
                )
        mat = (
            np.stack([r.embedding for r in labels])
            if labels
            else np.zeros((0, model_config.out_dim))
        )
        prepped.append(PreparedObject(object_id, kept_cloud, list(labels), mat))
    return prepped


def batch_loss(
    params: dict[str, ad.Tensor],
    batch: list[PreparedObject],
    model_config: net.ModelConfig,
    config: TrainConfig,
    epoch: int,
    train_mode: bool,
):
    """Build the loss graph for one batch.

    Returns (loss Tensor or None, n_labels, n_skipped). Augmentations draw
    from a per-object stream so batch composition never changes them.
    """
    dtype = next(iter(params.values())).data.dtype
    pooled = []
    label_rows = []
    skipped = 0
    for obj in batch:
        if not obj.labels:
            continue
        cloud = obj.kept_cloud
        if train_mode:
            cloud = augment(cloud, config.augment, object_stream_seed(config.seed, obj.object_id, epoch))
        cloud, _ = normalize(cloud)
        feats, trace = net.forward_graph(cloud, model_config, params)
        sample = trace.sample
        row_of = np.full(len(obj.kept_cloud), -1, dtype=np.int64)
        row_of[sample.kept] = np.arange(len(sample.kept))
        targets = []
        sources = []
        slot = 0
        for j, rec in enumerate(obj.labels):
            rows = row_of[rec.point_indices]
            rows = rows[rows >= 0]
            if len(rows) == 0:
                skipped += 1
                continue
            targets.append(np.full(len(rows), slot, dtype=np.int64))
            sources.append(rows)
            label_rows.append(obj.label_matrix[j])
            slot += 1
        if slot == 0:
            continue
        targets = np.concatenate(targets)
        sources = np.concatenate(sources)
        counts = np.bincount(targets, minlength=slot)
        means = ad.indexed_mean(feats, targets, sources, counts, slot)
        pooled.append(ad.l2_normalize_rows(means))
    if not pooled:
        return None, 0, skipped
    p = ad.concat(pooled, axis=0) if len(pooled) > 1 else pooled[0]
    t = np.asarray(label_rows, dtype=dtype)
    logits = ad.scale(ad.matmul(p, ad.Tensor(t.T)), 1.0 / config.temperature)
    b = len(label_rows)
    lse = ad.logsumexp_last(logits)
    diag = ad.gather(ad.reshape(logits, (b * b,)), np.arange(b) * b + np.arange(b))
    loss = ad.mean_all(ad.sub(lse, diag))
    return loss, b, skipped


@dataclass
class FitResult:
    state: net.ModelState  # final-epoch parameters
    best_state: net.ModelState  # lowest validation loss
    history: list[dict]
    train_ids: list[int]
    val_ids: list[int]


def fit(dataset, config: TrainConfig, state: net.ModelState) -> FitResult:
    """Train on (cloud, labels) pairs with a seeded 90:10 object split."""
    prepped = prepare_dataset(dataset, config, state.config)
    rng = np.random.default_rng((config.seed, 0xD5))
    order = rng.permutation(len(prepped))
    n_train = max(1, int(round(config.split_ratio * len(prepped))))
    train_ids = [int(i) for i in order[:n_train]]
    val_ids = [int(i) for i in order[n_train:]]

    if config.epochs == 0:
        return FitResult(state.copy(), state.copy(), [], train_ids, val_ids)

    params = net.params_as_tensors(state, requires_grad=True)
    opt = OptimizerState()
    history = []
    best_val = np.inf
    best_state = state.copy()

    for epoch in range(config.epochs):
        lr = cosine_lr(epoch, config)
        epoch_rng = np.random.default_rng((config.seed, 0xE9, epoch))
        shuffled = [train_ids[i] for i in epoch_rng.permutation(len(train_ids))]
        total_loss = 0.0
        total_labels = 0
        total_skipped = 0
        for start in range(0, len(shuffled), config.batch_objects):
            batch = [prepped[i] for i in shuffled[start : start + config.batch_objects]]
            loss, n_labels, skipped = batch_loss(params, batch, state.config, config, epoch, True)
            total_skipped += skipped
            if loss is None:
                continue
            for p in params.values():
                p.zero_grad()
            ad.backward(loss)
            grads = {}
            for name, p in params.items():
                g = p.grad if p.grad is not None else np.zeros_like(p.data)
                if not np.isfinite(g).all():
                    raise FloatingPointError(f"non-finite gradient for parameter {name}")
                grads[name] = g
            adam_step(params, grads, opt, lr, config)
            total_loss += float(loss.data) * n_labels
            total_labels += n_labels

        frozen = {k: ad.Tensor(p.data) for k, p in params.items()}
        val_loss = _eval_loss(frozen, [prepped[i] for i in val_ids], state.config, config)
        train_loss = total_loss / max(total_labels, 1)
        history.append(
            {
                "epoch": epoch,
                "lr": lr,
                "train_loss": train_loss,
                "val_loss": val_loss,
                "skipped_labels": total_skipped,
            }
        )
        if val_loss is not None and val_loss < best_val:
            best_val = val_loss
            best_state = net.ModelState(state.config, {k: p.data.copy() for k, p in params.items()})

    final = net.ModelState(state.config, {k: p.data.copy() for k, p in params.items()})
    if not val_ids:
        best_state = final.copy()
    return FitResult(final, best_state, history, train_ids, val_ids)


def _eval_loss(params, objects, model_config, config) -> float | None:
    if not objects:
        return None
    total = 0.0
    count = 0
    for start in range(0, len(objects), config.batch_objects):
        batch = objects[start : start + config.batch_objects]
        loss, n_labels, _ = batch_loss(params, batch, model_config, config, epoch=0, train_mode=False)
        if loss is None:
            continue
        total += float(loss.data) * n_labels
        count += n_labels
    return total / count if count else None


def history_to_csv(history: list[dict]) -> str:
    out = io.StringIO()
    writer = csv.DictWriter(
        out,
        fieldnames=["epoch", "lr", "train_loss", "val_loss", "skipped_labels"],
        lineterminator="\n",
    )
    writer.writeheader()
    for row in history:
        writer.writerow(row)
    return out.getvalue()
