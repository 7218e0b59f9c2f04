"""Open-vocabulary 3D part segmentation toolkit at desk scale.

Pipeline: a data engine back-projects multi-view part masks into
(point set, text embedding) labels; a serialized point transformer learns
per-point queryable embeddings with a contrastive objective; any object can
then be segmented by free-form text and scored with class-average mIoU.
"""

from .cloud import (
    AugmentConfig,
    Point,
    PointCloud,
    RigidTransform,
    SampleResult,
    augment,
    nn_upsample,
    normalize,
    random_rotation,
    voxel_sample,
)
from .net import ModelConfig, ModelState, describe, forward, init_model, load_checkpoint, save_checkpoint
from .query import NO_LABEL, MockEmbedder, QueryResult, assign, render_prompt, score, segment
from .sfc import SerializationScheme, SerialOrder, block_partition, hilbert_encode, morton_encode, reorder, serialize
from .train import LabelRecord, TrainConfig, contrastive_loss, cosine_lr, fit, pool_label_feature

__version__ = "0.1.0"

__all__ = [
    "AugmentConfig",
    "Point",
    "PointCloud",
    "RigidTransform",
    "SampleResult",
    "augment",
    "nn_upsample",
    "normalize",
    "random_rotation",
    "voxel_sample",
    "ModelConfig",
    "ModelState",
    "describe",
    "forward",
    "init_model",
    "load_checkpoint",
    "save_checkpoint",
    "NO_LABEL",
    "MockEmbedder",
    "QueryResult",
    "assign",
    "render_prompt",
    "score",
    "segment",
    "SerializationScheme",
    "SerialOrder",
    "block_partition",
    "hilbert_encode",
    "morton_encode",
    "reorder",
    "serialize",
    "LabelRecord",
    "TrainConfig",
    "contrastive_loss",
    "cosine_lr",
    "fit",
    "pool_label_feature",
    "__version__",
]
