"""Vertical attention over per-layer CLS vectors, and the softmax classifier.

Vertical attention is a single-head scaled dot-product step across depth:
the query is a projection of the top-layer CLS vector, keys are projections
of learned per-level embeddings, and each level has its own value projection
of that level's CLS vector.
"""

from __future__ import annotations

import math
from typing import Mapping, Sequence

import numpy as np

from . import numerics as nx
from .numerics import ShapeError, Tensor


def vertical_attention(z: Sequence[Tensor], params: Mapping[str, Tensor]) -> tuple[Tensor, Tensor]:
    """Pool ``z`` (L tensors of shape ``(batch, d)``) into one ``(batch, d)`` vector.

    ``params`` holds ``level_embeddings`` (L, d), ``query`` and ``key`` (d, d),
    and ``value.0`` .. ``value.{L-1}`` (d, d). Returns the pooled vectors and
    the attention weights over levels, shape ``(batch, L)``.
    """
    levels = params["level_embeddings"]
    L, d = levels.shape
    if len(z) != L:
        raise ShapeError(f"vertical_attention: {len(z)} layer vectors but {L} level embeddings")
    for zn in z:
        if zn.ndim != 2 or zn.shape[1] != d:
            raise ShapeError(f"vertical_attention: layer vector {zn.shape} does not match hidden size {d}")
    batch = z[-1].shape[0]

    q = nx.matmul(z[-1], params["query"])                                # (B, d)
    keys = nx.matmul(levels, params["key"])                              # (L, d)
    scores = nx.scale(nx.matmul(q, nx.transpose(keys, (1, 0))), 1.0 / math.sqrt(d))
    alpha = nx.softmax(scores)                                           # (B, L)

    values = [nx.reshape(nx.matmul(zn, params[f"value.{n}"]), (batch, 1, d)) for n, zn in enumerate(z)]
    stacked = nx.concat(values, axis=1)                                  # (B, L, d)
    pooled = nx.matmul(nx.reshape(alpha, (batch, 1, L)), stacked)       # (B, 1, d)
    return nx.reshape(pooled, (batch, d)), alpha


def classify(x: Tensor, params: Mapping[str, Tensor], train: bool = False,
             dropout_cls: float = 0.3, rng: np.random.Generator | None = None) -> Tensor:
    x = nx.dropout(x, dropout_cls, rng, train)
    return nx.bias_add(nx.matmul(x, params["weight"]), params["bias"])


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    return np.exp(nx.log_softmax_np(z))


def predict(probs) -> int | np.ndarray:
    """Argmax; ties go to the lowest index. Works on one vector or a batch."""
    probs = np.asarray(probs)
    out = np.argmax(probs, axis=-1)
    return int(out) if probs.ndim == 1 else out
