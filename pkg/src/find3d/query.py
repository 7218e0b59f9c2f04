"""Text embedding providers, cosine scoring, and text-query segmentation.

A trained model emits one embedding per point; queries are embedded by the
same text provider used for training labels, scored by cosine similarity,
and each point is assigned to its best query. A point whose similarities are
all negative gets NO_LABEL.
"""

from __future__ import annotations

import hashlib
import json
import os
import re
import string
import urllib.request
from dataclasses import dataclass

import numpy as np

from . import net
from .cloud import PointCloud, nn_upsample, normalize

NO_LABEL = -1

EMBEDDER_URL_VAR = "FIND3D_EMBEDDER_URL"


class MockEmbedder:
    """Deterministic stand-in for a text encoder.

    Embeds text as the L2-normalized sum of per-token unit vectors, each drawn
    from a PCG64 stream seeded by a blake2 digest of the token. Stable across
    runs and platforms, and related prompts ("handle", "handle of a mug")
    stay correlated the way a real encoder's would.
    """

    def __init__(self, dim: int = 32, seed: int = 0):
        self._dim = dim
        self._seed = seed
        self._token_cache: dict[str, np.ndarray] = {}

    @property
    def dim(self) -> int:
        return self._dim

    def _token_vector(self, token: str) -> np.ndarray:
        vec = self._token_cache.get(token)
        if vec is None:
            digest = hashlib.blake2b(
                f"{self._seed}:{token}".encode("utf-8"), digest_size=8
            ).digest()
            rng = np.random.default_rng(int.from_bytes(digest, "little"))
            vec = rng.standard_normal(self._dim)
            vec /= np.linalg.norm(vec)
            self._token_cache[token] = vec
        return vec

    def embed(self, text: str) -> np.ndarray:
        tokens = re.findall(r"[a-z0-9]+", text.lower())
        if not tokens:
            tokens = ["<empty>"]
        total = np.zeros(self._dim)
        for tok in tokens:
            total += self._token_vector(tok)
        return total / np.linalg.norm(total)

    def embed_many(self, texts) -> np.ndarray:
        return np.stack([self.embed(t) for t in texts])


class RemoteEmbedder:
    """POST /embed {texts: [...]} -> {vectors: [[...]]} against a service."""

    def __init__(self, base_url: str | None = None, dim: int | None = None, timeout: float = 30.0):
        self.base_url = (base_url or os.environ.get(EMBEDDER_URL_VAR, "")).rstrip("/")
        if not self.base_url:
            raise ValueError(f"no embedder URL; set {EMBEDDER_URL_VAR}")
        self.timeout = timeout
        self._dim = dim

    @property
    def dim(self) -> int:
        if self._dim is None:
            self._dim = len(self.embed("dimension probe"))
        return self._dim

    def embed_many(self, texts) -> np.ndarray:
        body = json.dumps({"texts": list(texts)}).encode("utf-8")
        req = urllib.request.Request(
            self.base_url + "/embed", data=body, headers={"Content-Type": "application/json"}
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            payload = json.loads(resp.read().decode("utf-8"))
        vecs = np.asarray(payload["vectors"], dtype=np.float64)
        norms = np.linalg.norm(vecs, axis=1, keepdims=True)
        return vecs / np.maximum(norms, 1e-12)

    def embed(self, text: str) -> np.ndarray:
        return self.embed_many([text])[0]


class CacheEmbedder:
    """Read-through JSONL cache of text -> vector, appending on miss."""

    def __init__(self, path, fallback=None):
        self.path = str(path)
        self.fallback = fallback
        self._cache: dict[str, np.ndarray] = {}
        if os.path.exists(self.path):
            with open(self.path, "r", encoding="utf-8") as f:
                for line in f:
                    if line.strip():
                        rec = json.loads(line)
                        self._cache[rec["text"]] = np.asarray(rec["vector"], dtype=np.float64)

    @property
    def dim(self) -> int:
        if self._cache:
            return len(next(iter(self._cache.values())))
        if self.fallback is not None:
            return self.fallback.dim
        raise ValueError("empty cache and no fallback embedder")

    def embed(self, text: str) -> np.ndarray:
        if text in self._cache:
            return self._cache[text]
        if self.fallback is None:
            raise KeyError(f"text not cached and no remote configured: {text!r}")
        vec = self.fallback.embed(text)
        self._cache[text] = vec
        with open(self.path, "a", encoding="utf-8") as f:
            f.write(json.dumps({"text": text, "vector": [float(v) for v in vec]}) + "\n")
        return vec

    def embed_many(self, texts) -> np.ndarray:
        return np.stack([self.embed(t) for t in texts])


def make_embedder(kind: str, dim: int = 32, cache_path=None, seed: int = 0):
    if kind == "mock":
        return MockEmbedder(dim=dim, seed=seed)
    if kind == "remote":
        return RemoteEmbedder(dim=dim)
    if kind == "cache":
        fallback = None
        if os.environ.get(EMBEDDER_URL_VAR):
            fallback = RemoteEmbedder(dim=dim)
        if cache_path is None:
            raise ValueError("cache embedder needs a cache path")
        return CacheEmbedder(cache_path, fallback)
    raise ValueError(f"unknown embedder kind: {kind}")


# ---------------------------------------------------------------------------


@dataclass
class QueryResult:
    queries: list[str]
    scores: np.ndarray  # (N, Q) cosine similarities
    assignment: np.ndarray  # (N,) query index or NO_LABEL

    @property
    def max_score(self) -> np.ndarray:
        return self.scores.max(axis=1)


def score(features: np.ndarray, query_embeddings: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarity; zero-norm feature rows score 0 everywhere."""
    f = np.asarray(features, dtype=np.float64)
    q = np.asarray(query_embeddings, dtype=np.float64)
    fn = np.linalg.norm(f, axis=1, keepdims=True)
    qn = np.linalg.norm(q, axis=1, keepdims=True)
    fu = np.divide(f, fn, out=np.zeros_like(f), where=fn > 1e-12)
    qu = np.divide(q, qn, out=np.zeros_like(q), where=qn > 1e-12)
    return fu @ qu.T


def assign(scores: np.ndarray) -> np.ndarray:
    """Argmax per row when the max is positive, else NO_LABEL; ties -> lowest."""
    best = np.argmax(scores, axis=1)
    winner = scores[np.arange(len(scores)), best]
    return np.where(winner > 0, best, NO_LABEL).astype(np.int64)


class _PromptFields(dict):
    def __missing__(self, key):
        raise KeyError(key)


def render_prompt(template: str, part: str, object_name: str) -> str:
    """Substitute {part} and {object}; any other placeholder is an error."""
    fields = _PromptFields(part=part, object=object_name)
    try:
        return string.Formatter().vformat(template, (), fields)
    except (KeyError, IndexError) as exc:
        raise ValueError(f"unknown placeholder in template {template!r}: {exc}") from exc


def segment_features(
    cloud: PointCloud,
    state: net.ModelState,
    normalize_input: bool = True,
) -> np.ndarray:
    """Full-resolution per-point embeddings: forward kept, nn-upsample rest."""
    work = normalize(cloud)[0] if normalize_input else cloud
    kept_feats, trace = net.forward_graph(work, state.config, net.params_as_tensors(state))
    return nn_upsample(kept_feats.data, trace.sample)


def segment(cloud: PointCloud, state: net.ModelState, queries: list[str], embedder) -> QueryResult:
    """Score every point of the cloud against free-form text queries."""
    if not queries:
        raise ValueError("queries must be non-empty")
    if embedder.dim != state.config.out_dim:
        raise ValueError(
            f"embedder dim {embedder.dim} != model out_dim {state.config.out_dim}"
        )
    feats = segment_features(cloud, state)
    q = embedder.embed_many(queries)
    s = score(feats, q)
    return QueryResult(list(queries), s, assign(s))


def result_to_json(result: QueryResult) -> str:
    """Canonical serialization shared by the CLI output and the HTTP service."""
    payload = {
        "queries": list(result.queries),
        "scores": [[float(v) for v in row] for row in result.scores],
        "assignment": [int(v) for v in result.assignment],
        "max_score": [float(v) for v in result.max_score],
    }
    return json.dumps(payload, separators=(",", ":"), sort_keys=True)


def topk_prompt_search(
    evaluate_fn,
    candidate_prompts: dict[str, list[str]],
    passes: int = 2,
) -> dict[str, str]:
    """Coordinate-ascent prompt selection.

    ``evaluate_fn(prompts: dict[part, prompt]) -> float`` scores a full prompt
    assignment (class mIoU). For each part in turn the best candidate is kept,
    holding the others fixed; ties go to the lowest candidate index.
    """
    for part, cands in candidate_prompts.items():
        if not cands:
            raise ValueError(f"no candidate prompts for part {part!r}")
    current = {part: cands[0] for part, cands in candidate_prompts.items()}
    for _ in range(passes):
        for part in candidate_prompts:
            best_score = -np.inf
            best_prompt = current[part]
            for cand in candidate_prompts[part]:
                trial = dict(current)
                trial[part] = cand
                val = evaluate_fn(trial)
                if val > best_score:
                    best_score = val
                    best_prompt = cand
            current[part] = best_prompt
    return current
