"""Context encodings: one-hot vectors and discriminator-derived embeddings.

An embedding for context ``c`` is the column mean of the discriminator's
penultimate activations over the training examples of ``c``. The stored
table, never per-query activations, is what a CANDE model is conditioned on.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataFormatError, ShapeError
from .models import Discriminator


@dataclass(frozen=True)
class ConditioningVector:
    vector: np.ndarray
    context_id: int
    kind: str  # "onehot" | "embedding"


def one_hot(context_id: int, num_contexts: int) -> ConditioningVector:
    """Unit basis vector for a zero-based ``context_id``; context C2 of 3 is ``one_hot(1, 3)``."""
    if num_contexts < 1:
        raise ValueError("num_contexts must be positive")
    if not 0 <= context_id < num_contexts:
        raise IndexError(f"context id {context_id} out of range for {num_contexts} contexts")
    vec = np.zeros(num_contexts, dtype=np.float32)
    vec[context_id] = 1.0
    return ConditioningVector(vec, int(context_id), "onehot")


def onehot_table(context_ids) -> dict[int, np.ndarray]:
    ids = sorted(int(c) for c in context_ids)
    n = max(ids) + 1
    return {c: one_hot(c, n).vector for c in ids}


@dataclass
class ActivationMatrix:
    """Rows of penultimate activations, row-aligned with context labels."""

    H: np.ndarray  # (n, p)
    contexts: np.ndarray  # (n,)

    def __post_init__(self):
        if self.H.ndim != 2 or self.contexts.shape != (self.H.shape[0],):
            raise ShapeError(f"H {self.H.shape} and contexts {self.contexts.shape} are not row-aligned")
        if not np.all(np.isfinite(self.H)):
            raise ValueError("activation matrix contains non-finite values")


def collect_activations(disc: Discriminator, x: np.ndarray, contexts: np.ndarray,
                        batch_size: int = 4096) -> ActivationMatrix:
    """Frozen forward pass of ``x`` up to the discriminator's penultimate layer."""
    x = np.asarray(x)
    if x.ndim != 2 or x.shape[1] != disc.network.input_dim:
        raise ShapeError(f"inputs of shape {x.shape} do not fit a discriminator with input dim "
                         f"{disc.network.input_dim}")
    rows = [disc.penultimate(x[s:s + batch_size]) for s in range(0, len(x), batch_size)]
    H = np.concatenate(rows) if rows else np.zeros((0, disc.embedding_dim), dtype=disc.dtype)
    return ActivationMatrix(H, np.asarray(contexts))


@dataclass
class EmbeddingTable:
    vectors: dict[int, np.ndarray]
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        dims = {v.shape for v in self.vectors.values()}
        if len(dims) > 1:
            raise ShapeError(f"embedding lengths differ: {sorted(dims)}")
        self.vectors = {int(k): np.asarray(v, dtype=np.float32) for k, v in sorted(self.vectors.items())}

    @property
    def dim(self) -> int:
        return next(iter(self.vectors.values())).shape[0]

    def __len__(self):
        return len(self.vectors)

    def to_json(self) -> str:
        doc = {
            "format": "cande-embeddings",
            "version": 1,
            "dim": self.dim,
            "embeddings": {str(k): [float(x) for x in v] for k, v in self.vectors.items()},
            "provenance": self.provenance,
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EmbeddingTable":
        try:
            doc = json.loads(text)
            vectors = {int(k): np.asarray(v, dtype=np.float32) for k, v in doc["embeddings"].items()}
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise DataFormatError(f"malformed embedding table: {exc}") from exc
        if not vectors:
            raise DataFormatError("embedding table is empty")
        table = cls(vectors, doc.get("provenance", {}))
        if "dim" in doc and doc["dim"] != table.dim:
            raise DataFormatError(f"declared dim {doc['dim']} but vectors have length {table.dim}")
        return table

    def save(self, path: str | Path):
        Path(path).write_text(self.to_json(), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "EmbeddingTable":
        return cls.from_json(Path(path).read_text(encoding="utf-8"))


def context_embeddings(acts: ActivationMatrix, context_ids=None,
                       provenance: dict | None = None) -> EmbeddingTable:
    """Per-context column means of ``acts.H``.

    Column sums use ``math.fsum`` (exactly rounded), so the result is
    independent of row order and of how the rows were sharded. Every id in
    ``context_ids`` (default: ids present in the data) must own at least one row.
    """
    present = np.unique(acts.contexts)
    wanted = present if context_ids is None else np.asarray(sorted(context_ids))
    vectors = {}
    for c in wanted.tolist():
        rows = acts.H[acts.contexts == c]
        if len(rows) == 0:
            raise ValueError(f"context {c} has no activation rows; refusing to invent an embedding")
        cols = rows.astype(np.float64).T
        vectors[int(c)] = np.array([math.fsum(col) for col in cols]) / len(rows)
    return EmbeddingTable(vectors, dict(provenance or {}))
