"""Shared attentive pooling and dense classification layers.

Head parameters live in one flat ``dict[str, Tensor]`` so the teacher and
student paths can be handed the very same objects.
"""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .encoder import InputError
from .tensor import Tensor


def init_pooling(hidden_dim, attn_dim, rng, prefix="pool."):
    raw = {
        "proj_weight": rng.normal(0.0, hidden_dim ** -0.5, size=(hidden_dim, attn_dim)),
        "proj_bias": np.zeros(attn_dim),
        "query": rng.normal(0.0, attn_dim ** -0.5, size=attn_dim),
    }
    return {prefix + k: Tensor(v, requires_grad=True, name=prefix + k) for k, v in raw.items()}


def init_dense(hidden_dim, num_classes, rng, prefix="dense."):
    raw = {
        "weight": rng.normal(0.0, hidden_dim ** -0.5, size=(hidden_dim, num_classes)),
        "bias": np.zeros(num_classes),
    }
    return {prefix + k: Tensor(v, requires_grad=True, name=prefix + k) for k, v in raw.items()}


def attentive_pool(heads, H, mask, prefix="pool.", weights_out=None):
    """Attention-weighted sum over the sequence axis.

    ``H`` is (B, S, D) and ``mask`` (B, S) marks valid positions. Scores are
    ``query . tanh(H_i W + b)``; masked positions are left out of the softmax.
    Returns (B, D).
    """
    mask = np.asarray(mask, dtype=bool)
    if H.ndim == 2:
        H = T.reshape(H, (1,) + H.shape)
    if mask.ndim == 1:
        mask = mask[None, :]
    B, S, D = H.shape
    if mask.shape != (B, S):
        raise InputError(f"mask {mask.shape} does not match sequence batch {(B, S)}")
    if not mask.any(axis=1).all():
        raise InputError("attentive_pool: a row has every position masked")
    w, b, q = heads[prefix + "proj_weight"], heads[prefix + "proj_bias"], heads[prefix + "query"]
    a = T.tanh(T.add(T.matmul(H, w), b))
    scores = T.reshape(T.matmul(a, T.reshape(q, (q.shape[0], 1))), (B, 1, S))
    alpha = T.softmax(scores, mask=mask[:, None, :])
    if weights_out is not None:
        weights_out.append(alpha.data.reshape(B, S))
    return T.reshape(T.matmul(alpha, H), (B, D))


def classify(heads, h, prefix="dense."):
    """Logits ``h W + b`` for pooled embeddings ``h`` of shape (B, D)."""
    return T.add(T.matmul(h, heads[prefix + "weight"]), heads[prefix + "bias"])
